"""Command-line entry point: ``dynalign <command> ...``.

Exit codes: 0 success, 2 bad input (files, flags, formats), 3 stage order
violation, 4 unexpected internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import bap, data, mat, metrics, tensorio
from . import tensor as T
from .config import ConfigError, read_config, read_dataset_spec

logger = logging.getLogger("dynalign")

EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_INTERNAL = 0, 2, 3, 4


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


# -- helpers -----------------------------------------------------------------

def _load_ckpt(path):
    if not os.path.isfile(path):
        raise InputError(f"checkpoint {path} not found")
    return bap.load_checkpoint(path)


def _load_samples(path, split="test"):
    """Samples from a manifest, or one split of a synthetic dataset spec."""
    if not os.path.isfile(path):
        raise InputError(f"data file {path} not found")
    if data.is_manifest(path):
        samples, _ = data.load_manifest(path)
        return samples
    train, test = data.gen_synthetic(read_dataset_spec(path))
    return {"train": train, "test": test, "all": train + test}[split]


def _training_data(config):
    if config.manifest:
        train, _ = data.load_manifest(config.manifest)
        holdout = data.load_manifest(config.test_manifest)[0] if config.test_manifest else []
        return train, holdout
    return data.gen_synthetic(config.dataset_spec())


def _check_classes(samples, n_classes):
    bad = [s.id for s in samples if s.label >= n_classes]
    if bad:
        raise InputError(f"{len(bad)} samples carry labels beyond the model's {n_classes} classes, "
                         f"first {bad[0]!r}")


def _eval_arrays(samples, config):
    try:
        return bap.prepare_eval(samples, config.frames, config.image_size, config.eval_start)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _write_text(path, text):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    spec = read_dataset_spec(args.spec)
    train, test = data.gen_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    data.export_manifest(train + test, args.out, spec.classes, "manifest.txt")
    data.export_manifest(train, args.out, spec.classes, "train.txt")
    data.export_manifest(test, args.out, spec.classes, "test.txt")
    print(f"wrote {len(train) + len(test)} samples ({len(train)} train, {len(test)} test) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    config = read_config(args.config)
    start = _load_ckpt(args.resume) if args.resume else None
    if start is not None and start.config and bap.config_of(start) != config:
        logger.warning("checkpoint was produced with a different configuration; using --config")
    train, holdout_samples = _training_data(config)
    _check_classes(train, config.classes)
    holdout = _eval_arrays(holdout_samples, config) if holdout_samples else None
    p1, p2, p3 = bap.stage_plans(config)
    reports = []
    if args.stage == "all":
        if config.mode == "all_at_once":
            if start is not None:
                raise InputError("all-at-once runs cannot resume from a staged checkpoint")
            ckpt, report = bap.run_all_at_once(bap.build_model(config), train, config, holdout)
            reports.append(report)
        else:
            ckpt = start if start is not None else bap.build_model(config)
            stages = ((1, bap.run_stage1, p1), (2, bap.run_stage2, p2), (3, bap.run_stage3, p3))
            for n, run, plan in stages:
                if isinstance(ckpt, bap.Checkpoint) and (ckpt.stage > n or (ckpt.stage == n and ckpt.complete)):
                    continue
                ckpt, report = run(ckpt, train, plan, config, holdout, stop_after=args.stop_after)
                reports.append(report)
                if not ckpt.complete:
                    break
    else:
        n = int(args.stage)
        run, plan = {1: (bap.run_stage1, p1), 2: (bap.run_stage2, p2), 3: (bap.run_stage3, p3)}[n]
        if start is None and n == 1:
            start = bap.build_model(config)
        ckpt, report = run(start, train, plan, config, holdout, stop_after=args.stop_after)
        reports.append(report)
    bap.save_checkpoint(ckpt, args.out)
    report_path = args.report or args.out + ".csv"
    _write_text(report_path, "".join(r.to_csv() for r in reports))
    state = "complete" if ckpt.complete else f"paused after epoch {ckpt.epochs_done}"
    print(f"stage {ckpt.stage} {state}; checkpoint {args.out}, report {report_path}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    config = bap.config_of(ckpt)
    samples = _load_samples(args.data, args.split)
    _check_classes(samples, ckpt.model.n_classes)
    X, y = _eval_arrays(samples, config)
    cls = ckpt.model.n_classes
    if args.shuffle_frames:
        normal, shuffled = metrics.shuffle_eval(ckpt.model, X, y, args.seed, cls)
        sys.stdout.write("# normal\n" + normal.to_csv() + "\n# shuffled\n" + shuffled.to_csv())
    else:
        sys.stdout.write(metrics.compute_metrics(ckpt.model.predict(X), y, cls).to_csv())
    return EXIT_OK


def cmd_inspect_mat(args):
    ckpt = _load_ckpt(args.ckpt)
    try:
        vocab = mat.load_vocab(args.vocab)
    except OSError as exc:
        raise InputError(f"cannot read vocabulary: {exc}") from None
    bank = ckpt.model.mat
    if vocab.embeddings.shape[1] != bank.embd:
        raise InputError(f"vocabulary width {vocab.embeddings.shape[1]} does not match token width {bank.embd}")
    if args.topk < 1:
        raise InputError("--topk must be at least 1")
    k = args.topk
    if k > len(vocab.words):
        logger.warning("topk=%d exceeds the vocabulary size; showing all %d words", k, len(vocab.words))
        k = len(vocab.words)
    for c, words in enumerate(mat.class_top_words(bank, vocab, k)):
        print(f"class {c}: " + ", ".join(f"{w} ({s:.3f})" for w, s in words))
    return EXIT_OK


def cmd_export_features(args):
    ckpt = _load_ckpt(args.ckpt)
    config = bap.config_of(ckpt)
    model = ckpt.model
    samples = _load_samples(args.data, args.split)
    _check_classes(samples, model.n_classes)
    X, y = _eval_arrays(samples, config)
    with T.no_grad():
        video = model.video_features(model.frame_features(X)).data
        text = model.text_features().data
    cols = ",".join(f"f{d}" for d in range(model.mat.embd))
    lines = [f"id,label,{cols}"]
    lines += [f"{s.id},{label}," + ",".join(f"{v:.8g}" for v in row)
              for s, label, row in zip(samples, y, video)]
    lines.append(f"class,sentence,{cols}")
    for i in range(text.shape[0]):
        for j in range(text.shape[1]):
            lines.append(f"{i},{j}," + ",".join(f"{v:.8g}" for v in text[i, j]))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(samples)} video and {text.shape[0] * text.shape[1]} text features to {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dynalign", description="Train and evaluate label-token video classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as raw frames plus manifests")
    g.add_argument("--spec", required=True, help="dataset spec file (key = value)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stages and write a checkpoint")
    t.add_argument("--config", required=True, help="run config file (key = value)")
    t.add_argument("--stage", choices=("all", "1", "2", "3"), default="all")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--report", help="training report CSV (default: <out>.csv)")
    t.add_argument("--stop-after", type=int, metavar="EPOCHS",
                   help="pause a stage after this many epochs (resume later with --resume)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="WAR/UAR and confusion matrix on a manifest or dataset spec")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="manifest or dataset spec file")
    e.add_argument("--split", choices=("train", "test", "all"), default="test",
                   help="which synthetic split to use when --data is a spec")
    e.add_argument("--shuffle-frames", action="store_true", help="also evaluate with frames shuffled")
    e.add_argument("--seed", type=int, default=0, help="shuffle seed")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-mat", help="nearest vocabulary words for each class's tokens")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--vocab", required=True, help="text file: word v1 v2 ... per line")
    m.add_argument("--topk", type=int, default=5)
    m.set_defaults(func=cmd_inspect_mat)

    x = sub.add_parser("export-features", help="video and text features as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True, help="manifest or dataset spec file")
    x.add_argument("--split", choices=("train", "test", "all"), default="test")
    x.add_argument("--out", required=True, help="CSV to write")
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except bap.StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (InputError, ConfigError, data.ManifestError, tensorio.TensorFileError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
