import numpy as np
import pytest

from dynalign import encoders, mat
from dynalign.encoders import EncoderConfig
from dynalign.mat import ContextLengthError, VocabTable


def test_full_context_is_padded_to_74():
    bank = mat.new_mat(2, 3, 64, 8, seed=0)
    ctx = mat.assemble_context(bank, 1, 2)
    assert ctx.rows.shape == (74, 8)
    assert ctx.valid_len == 64
    assert not ctx.rows.data[64:].any()
    np.testing.assert_array_equal(ctx.rows.data[:64], bank.tokens.data[1, 2])


def test_bank_shape_and_indexing():
    bank = mat.new_mat(3, 4, 5, 6, seed=1)
    assert bank.shape == (3, 4, 5, 6)
    assert (bank.cls, bank.snt, bank.tkn, bank.embd) == (3, 4, 5, 6)
    assert bank.params.trainable
    with pytest.raises(IndexError):
        mat.assemble_context(bank, 3, 0)


def test_too_many_tokens():
    with pytest.raises(ContextLengthError):
        mat.new_mat(1, 1, 75, 4, seed=0)
    with pytest.raises(ContextLengthError):
        mat.new_mat(1, 1, 9, 4, seed=0, tkn_max=8)


def test_init_scale_and_determinism():
    a = mat.new_mat(4, 16, 64, 32, seed=5)
    b = mat.new_mat(4, 16, 64, 32, seed=5)
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes()
    assert abs(a.tokens.data.std() - 0.02) < 1e-3


def test_encode_all_matches_per_context_encoding():
    cfg = EncoderConfig(embd=8, layers=1, heads=2, tkn_max=6, image_patch=4, image_size=8)
    enc = encoders.init_toy(cfg, "text", 0)
    bank = mat.new_mat(2, 3, 4, 8, seed=0, tkn_max=6, std=0.5)
    feats = mat.encode_all(bank, enc).data
    assert feats.shape == (2, 3, 8)
    one = encoders.encode_text(enc, mat.assemble_context(bank, 1, 2)).data
    np.testing.assert_allclose(feats[1, 2], one, atol=1e-6)


def test_encode_all_width_mismatch():
    cfg = EncoderConfig(embd=8, layers=1, heads=2, tkn_max=6, image_patch=4, image_size=8)
    enc = encoders.init_toy(cfg, "text", 0)
    with pytest.raises(ValueError):
        mat.encode_all(mat.new_mat(1, 1, 2, 4, seed=0, tkn_max=6), enc)


def brute_nearest(tokens, words, emb, k):
    out = []
    for vec in tokens.reshape(-1, tokens.shape[-1]):
        scored = []
        for idx, (w, e) in enumerate(zip(words, emb)):
            s = float(np.dot(vec, e) / (np.linalg.norm(vec) * np.linalg.norm(e)))
            scored.append((-s, idx, w))
        scored.sort()
        out.append([(w, -s) for s, _, w in scored[:k]])
    return out


def test_nearest_vocab_matches_brute_force_sort(rng):
    bank = mat.new_mat(2, 2, 3, 5, seed=2)
    emb = rng.normal(size=(9, 5))
    vocab = VocabTable([f"w{i}" for i in range(9)], emb)
    idx, sims = mat.nearest_vocab(bank, vocab, 4)
    expected = brute_nearest(bank.tokens.data.astype(np.float64), vocab.words, emb, 4)
    for row_i, row_s, want in zip(idx.reshape(-1, 4), sims.reshape(-1, 4), expected):
        assert [vocab.words[i] for i in row_i] == [w for w, _ in want]
        np.testing.assert_allclose(row_s, [s for _, s in want], atol=1e-6)


def test_exact_token_in_vocab_has_similarity_one():
    bank = mat.new_mat(2, 1, 2, 4, seed=0)
    words = ["alpha", "beta", "gamma"]
    emb = np.random.default_rng(0).normal(size=(3, 4))
    emb[1] = bank.tokens.data[1, 0, 1]
    top = mat.class_top_words(bank, VocabTable(words, emb), 1)
    assert top[1][0][0] == "beta"
    assert top[1][0][1] == pytest.approx(1.0, abs=1e-6)


def test_vocab_file_round_trip(tmp_path, rng):
    vocab = VocabTable(["a", "b"], rng.normal(size=(2, 3)))
    path = tmp_path / "v.txt"
    mat.save_vocab(vocab, path)
    back = mat.load_vocab(path)
    assert back.words == ["a", "b"]
    np.testing.assert_array_equal(back.embeddings, vocab.embeddings)


def test_vocab_file_errors(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a 1 2\nb 1\n")
    with pytest.raises(ValueError, match=":2:"):
        mat.load_vocab(path)
    path.write_text("a 1 x\n")
    with pytest.raises(ValueError, match="non-numeric"):
        mat.load_vocab(path)
