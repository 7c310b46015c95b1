import numpy as np
import pytest

from dynalign import classify
from dynalign import tensor as T
from dynalign.tensor import Tensor


def test_cosine_values():
    v = np.array([0.3, -1.2, 2.0])
    assert classify.cosine_sim(v, v) == pytest.approx(1.0, abs=1e-12)
    assert classify.cosine_sim([1, 0], [0, 1]) == 0.0
    assert classify.cosine_sim([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
    assert classify.cosine_sim([1, 0], [-1, 0]) == pytest.approx(-1.0)


def test_cosine_rejects_zero_and_mismatched_vectors():
    with pytest.raises(classify.DegenerateFeatureError):
        classify.cosine_sim([0, 0], [1, 0])
    with pytest.raises(T.ShapeError):
        classify.cosine_sim([1, 0], [1, 0, 0])


@pytest.mark.parametrize("cls", [1, 2, 7, 50])
def test_equal_similarities_give_uniform_probabilities(cls):
    probs = classify.class_probs(np.full(cls, 0.4))
    np.testing.assert_allclose(probs, 1.0 / cls, atol=1e-6)


def test_temperature_one_two_classes():
    assert classify.class_probs([2.0, 0.0], tau=1.0)[0] == pytest.approx(0.8808, abs=1e-4)


def test_small_temperature_is_stable():
    probs = classify.class_probs([1.0, -1.0, 0.999], tau=1e-4)
    assert np.isfinite(probs).all() and probs.sum() == pytest.approx(1.0)


def test_bad_temperature():
    with pytest.raises(ValueError):
        classify.class_probs([0.1, 0.2], tau=0.0)
    with pytest.raises(ValueError):
        classify.similarity_logits(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), tau=-1)


def test_cross_entropy_floor():
    assert classify.cross_entropy([0.5, 0.5], 1) == pytest.approx(np.log(2))
    assert classify.cross_entropy([1.0, 0.0], 1) == pytest.approx(-np.log(1e-12))
    with pytest.raises(IndexError):
        classify.cross_entropy([0.5, 0.5], 2)


def test_predict_ties_go_to_lowest_index():
    classes = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert classify.predict([1.0, 1.0], classes) == 2
    assert classify.predict([1.0, 0.0], np.array([[2.0, 0.0], [1.0, 0.0]])) == 0


def test_batched_logits_match_scalar_cosines(rng):
    video, classes = rng.normal(size=(5, 6)), rng.normal(size=(3, 6))
    logits = classify.similarity_logits(Tensor(video), Tensor(classes), tau=0.07).data
    for b in range(5):
        for c in range(3):
            assert logits[b, c] == pytest.approx(classify.cosine_sim(video[b], classes[c]) / 0.07, rel=1e-5)


def test_loss_matches_probability_form(rng):
    logits = rng.normal(size=(4, 3)) * 3
    labels = np.array([0, 2, 1, 2])
    loss = classify.cross_entropy_loss(Tensor(logits), labels).item()
    expected = np.mean([classify.cross_entropy(classify.class_probs(l, tau=1.0), y)
                        for l, y in zip(logits, labels)])
    assert loss == pytest.approx(expected, rel=1e-5)


def test_loss_is_floored_for_hopeless_logits():
    loss = classify.cross_entropy_loss(Tensor(np.array([[0.0, 100.0]])), [0]).item()
    assert loss == pytest.approx(-np.log(1e-12), rel=1e-5)


def test_loss_label_validation():
    with pytest.raises(IndexError):
        classify.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        classify.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0])
