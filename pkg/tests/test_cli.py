import hashlib
import os

import numpy as np
import pytest

from dynalign import bap, cli, mat
from dynalign.mat import VocabTable

SPEC = "classes = 2\nsamples_per_class = 6\nframes = 4\nimage_size = 16\npad = 2\n"


@pytest.fixture
def files(tmp_path, tiny_config):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(tiny_config.to_text())
    spec = tmp_path / "spec.cfg"
    spec.write_text(SPEC)
    return tmp_path, str(cfg), str(spec)


@pytest.fixture
def trained(files):
    tmp, cfg, spec = files
    out = str(tmp / "final.bin")
    assert cli.main(["train", "--config", cfg, "--out", out]) == 0
    return tmp, cfg, spec, out


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, names in sorted(os.walk(root)):
        for name in sorted(names):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--stage", "--resume", "--out", "--report", "--stop-after"):
        assert flag in text


def test_gen_data(files):
    tmp, _, spec = files
    assert cli.main(["gen-data", "--spec", spec, "--out", str(tmp / "a")]) == 0
    assert cli.main(["gen-data", "--spec", spec, "--out", str(tmp / "b")]) == 0
    lines = (tmp / "a" / "manifest.txt").read_text().splitlines()
    assert lines[0] == "classes=2 frames=4" and len(lines) == 1 + 12
    assert len((tmp / "a" / "test.txt").read_text().splitlines()) == 1 + 4
    assert tree_digest(tmp / "a") == tree_digest(tmp / "b")


def test_gen_data_unwritable(files):
    tmp, _, spec = files
    blocker = tmp / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--spec", spec, "--out", str(blocker / "sub")]) == 2


def test_train_writes_checkpoint_and_report(trained):
    tmp, _, _, out = trained
    ckpt = bap.load_checkpoint(out)
    assert ckpt.stage == 3 and ckpt.complete
    report = (tmp / "final.bin.csv").read_text().splitlines()
    assert report[0] == "stage,epoch,loss,train_war" and len(report) == 3 * 3


def test_stage_without_prerequisite(files):
    tmp, cfg, _ = files
    assert cli.main(["train", "--config", cfg, "--stage", "2", "--out", str(tmp / "x.bin")]) == 3


def test_stage_by_stage_equals_all(trained):
    tmp, cfg, _, out = trained
    prev = None
    for stage in ("1", "2", "3"):
        path = str(tmp / f"s{stage}.bin")
        argv = ["train", "--config", cfg, "--stage", stage, "--out", path]
        assert cli.main(argv + (["--resume", prev] if prev else [])) == 0
        prev = path
    assert open(prev, "rb").read() == open(out, "rb").read()


def test_resume_mid_run(trained):
    tmp, cfg, _, out = trained
    part = str(tmp / "part.bin")
    assert cli.main(["train", "--config", cfg, "--out", part, "--stop-after", "1"]) == 0
    assert not bap.load_checkpoint(part).complete
    done = str(tmp / "done.bin")
    assert cli.main(["train", "--config", cfg, "--resume", part, "--out", done]) == 0
    assert open(done, "rb").read() == open(out, "rb").read()


def test_eval(trained, capsys):
    tmp, _, spec, out = trained
    assert cli.main(["eval", "--ckpt", out, "--data", spec]) == 0
    text = capsys.readouterr().out
    assert text.startswith("metric,value\nwar,")
    assert "confusion,pred_0,pred_1" in text
    assert cli.main(["eval", "--ckpt", out, "--data", spec, "--shuffle-frames"]) == 0
    text = capsys.readouterr().out
    assert "# normal" in text and "# shuffled" in text


def test_eval_stage1_shuffle_is_identical(files, capsys):
    tmp, cfg, spec = files
    s1 = str(tmp / "s1.bin")
    assert cli.main(["train", "--config", cfg, "--stage", "1", "--out", s1]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", s1, "--data", spec, "--shuffle-frames"]) == 0
    normal, shuffled = capsys.readouterr().out.split("# shuffled\n")
    assert normal.replace("# normal\n", "").strip() == shuffled.strip()


def test_eval_errors(trained, capsys):
    tmp, _, spec, out = trained
    assert cli.main(["eval", "--ckpt", str(tmp / "missing.bin"), "--data", spec]) == 2
    bad = tmp / "bad.txt"
    bad.write_text("classes=2 frames=4\ns0\t0\tnope.f32\n")
    assert cli.main(["eval", "--ckpt", out, "--data", str(bad)]) == 2
    assert "bad.txt:2:" in capsys.readouterr().err
    garbage = tmp / "garbage.bin"
    garbage.write_bytes(b"junk")
    assert cli.main(["eval", "--ckpt", str(garbage), "--data", spec]) == 2


def test_eval_on_manifest(trained, capsys):
    tmp, _, spec, out = trained
    assert cli.main(["gen-data", "--spec", spec, "--out", str(tmp / "d")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", out, "--data", str(tmp / "d" / "test.txt")]) == 0
    via_manifest = capsys.readouterr().out
    assert cli.main(["eval", "--ckpt", out, "--data", spec]) == 0
    assert capsys.readouterr().out == via_manifest


def test_inspect_mat(trained, capsys, caplog):
    tmp, _, _, out = trained
    bank = bap.load_checkpoint(out).model.mat
    emb = np.random.default_rng(0).normal(size=(3, bank.embd))
    emb[2] = bank.tokens.data[1, 0, 0]
    vocab = tmp / "vocab.txt"
    mat.save_vocab(VocabTable(["a", "b", "exact"], emb), vocab)
    assert cli.main(["inspect-mat", "--ckpt", out, "--vocab", str(vocab), "--topk", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("class 1: exact (1.000)")
    assert lines[0].count("(") == 3
    assert "exceeds the vocabulary size" in caplog.text


def test_inspect_mat_width_mismatch(trained):
    tmp, _, _, out = trained
    vocab = tmp / "vocab.txt"
    mat.save_vocab(VocabTable(["a"], np.ones((1, 3))), vocab)
    assert cli.main(["inspect-mat", "--ckpt", out, "--vocab", str(vocab)]) == 2


def test_export_features(trained, tiny_config):
    tmp, _, spec, out = trained
    a, b = tmp / "a.csv", tmp / "b.csv"
    assert cli.main(["export-features", "--ckpt", out, "--data", spec, "--out", str(a)]) == 0
    assert cli.main(["export-features", "--ckpt", out, "--data", spec, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = a.read_text().splitlines()
    n_test = 4
    assert len(rows) == n_test + tiny_config.classes * tiny_config.sentences + 2
    assert all(len(r.split(",")) == tiny_config.embd + 2 for r in rows)
    assert b"\r" not in a.read_bytes()


def test_bad_config_is_an_input_error(files):
    tmp, _, _ = files
    cfg = tmp / "bad.cfg"
    cfg.write_text("classes = two\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp / "x.bin")]) == 2


def test_internal_errors_map_to_4(files, monkeypatch):
    tmp, cfg, _ = files

    def boom(*a, **k):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(bap, "run_stage1", boom)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp / "x.bin")]) == 4
