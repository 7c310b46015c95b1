"""Three-stage alignment training and checkpoints.

Stage 1 trains the token bank and the text tower against temporally averaged
frame features. Stage 2 freezes the text side and trains a video tower,
growing it layer by layer. Stage 3 fuses the towers into one joint tower and
fine-tunes it together with the token bank. Frozen encoders never change.
"""

from __future__ import annotations

import copy
import io
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import classify, encoders, jas, mat, nn, tensorio
from . import tensor as T
from .config import RunConfig
from .data import sample_frames, stack_frames
from .optim import sgd_momentum_step
from .rng import stream
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "AlignmentModel",
    "StagePlan",
    "Checkpoint",
    "TrainReport",
    "StageOrderError",
    "build_model",
    "stage_plans",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "run_all_at_once",
    "run_all",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "prepare_eval",
]

CHECKPOINT_KIND = "checkpoint"
FOOTER_MAGIC = b"FTR1"
FRAME_CHUNK = 1024


class StageOrderError(RuntimeError):
    """A stage was requested without its prerequisite checkpoint."""


class AlignmentModel:
    """Frozen encoders, token bank and whichever towers exist so far."""

    def __init__(self, text_encoder, image_encoder, bank, tau=classify.DEFAULT_TAU,
                 de_text=None, de_video=None, joint=None, heads=4):
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder
        self.mat = bank
        self.tau = tau
        self.heads = heads
        self.de_text = de_text
        self.de_video = de_video
        self.jas = joint

    @property
    def n_classes(self):
        return self.mat.cls

    @property
    def phase(self):
        if self.jas is not None:
            return "joint"
        return "average" if self.de_video is None else "towers"

    def groups(self):
        out = {"text_encoder": self.text_encoder.params, "image_encoder": self.image_encoder.params,
               "mat": self.mat.params}
        for name in ("de_text", "de_video", "jas"):
            tower = getattr(self, name)
            if tower is not None:
                out[name] = tower.params
        return out

    def set_trainable(self, names):
        for name, group in self.groups().items():
            if not group.locked:
                group.trainable = name in names

    # -- forward pieces ----------------------------------------------------
    def frame_features(self, X):
        """Frozen per-frame features [N, F, D] (no graph)."""
        X = np.asarray(X, dtype=np.float32)
        n, f = X.shape[:2]
        flat = X.reshape(n * f, *X.shape[2:])
        with T.no_grad():
            parts = [self.image_encoder.encode_frames(flat[i:i + FRAME_CHUNK]).data
                     for i in range(0, n * f, FRAME_CHUNK)]
        return Tensor(np.concatenate(parts).reshape(n, f, -1))

    def text_features(self):
        return mat.encode_all(self.mat, self.text_encoder)

    def class_features(self, text_feats=None):
        text_feats = self.text_features() if text_feats is None else text_feats
        if self.jas is not None:
            return jas.dyn_encode(self.jas, text_feats, "text")
        if self.de_text is None:
            raise StageOrderError("no text tower: the model has not been through stage 1")
        return jas.dyn_encode(self.de_text, text_feats)

    def video_features(self, frame_feats):
        if self.jas is not None:
            return jas.dyn_encode(self.jas, frame_feats, "video")
        if self.de_video is not None:
            return jas.dyn_encode(self.de_video, frame_feats)
        return frame_feats.mean(axis=-2)

    def logits(self, frame_feats, class_feats):
        return classify.similarity_logits(self.video_features(frame_feats), class_feats, self.tau)

    def decision_function(self, X):
        """Cosine similarities [N, Cls] for prepared clips."""
        with T.no_grad():
            feats = self.frame_features(X)
            return self.logits(feats, self.class_features()).data.astype(np.float64) * self.tau

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


def build_model(config, seed=None):
    seed = config.seed if seed is None else seed
    enc_cfg = config.encoder_config()
    return AlignmentModel(
        encoders.init_toy(enc_cfg, "text", seed),
        encoders.init_toy(enc_cfg, "image", seed),
        mat.new_mat(config.classes, config.sentences, config.tokens, config.embd, seed,
                    tkn_max=config.tkn_max),
        tau=config.tau,
        heads=config.tower_heads,
    )


@dataclass
class StagePlan:
    stage: int
    epochs: int
    lr: float
    batch: int = 64
    momentum: float = 0.9
    growth_schedule: tuple = ()
    trainable: tuple = ()

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("StagePlan: epochs >= 0, batch >= 1 and lr > 0 required")
        if not self.trainable:
            self.trainable = {1: ("mat", "de_text"), 2: ("de_video",), 3: ("mat", "jas")}[self.stage]
        if self.growth_schedule and self.stage != 2:
            raise ValueError("only stage 2 grows layers")

    @property
    def frozen(self):
        return tuple(g for g in ("text_encoder", "image_encoder", "mat", "de_text", "de_video", "jas")
                     if g not in self.trainable)


def stage_plans(config):
    common = dict(batch=config.batch, momentum=config.momentum)
    s3 = ("mat", "jas") if config.joint_shared else ("mat", "de_text", "de_video")
    return (
        StagePlan(1, config.epochs_stage1, config.lr_stage1, **common),
        StagePlan(2, config.epochs_stage2, config.lr_stage2, growth_schedule=config.growth(), **common),
        StagePlan(3, config.epochs_stage3, config.lr_stage3, trainable=s3, **common),
    )


@dataclass
class TrainReport:
    stage: int
    losses: list = field(default_factory=list)
    wars: list = field(default_factory=list)
    seconds: float = 0.0
    growth_deltas: list = field(default_factory=list)  # (epoch, max |logit change|)

    def to_csv(self):
        lines = ["stage,epoch,loss,train_war"]
        lines += [f"{self.stage},{e},{l:.8f},{w:.6f}" for e, (l, w) in enumerate(zip(self.losses, self.wars))]
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    model: AlignmentModel
    stage: int = 0
    epochs_done: int = 0
    complete: bool = True
    seed: int = 0
    mode: str = "bap"
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (stage, epoch, loss, war)


# -- training loop -----------------------------------------------------------

def prepare_eval(samples, n_frames, crop, start="center"):
    """Stack evaluation clips: consecutive frames, centre crop."""
    return stack_frames([sample_frames(s, n_frames, crop, train=False, start=start) for s in samples])


def _epoch_frames(samples, n_frames, crop, seed, stage, epoch):
    clips = [sample_frames(s, n_frames, crop, train=True,
                           seed=int(stream(seed, "crop", stage, epoch, i).integers(2**62)))
             for i, s in enumerate(samples)]
    return stack_frames(clips)


def _expected_layers(base, schedule, epoch):
    return base + sum(n for e, n in schedule if e <= epoch)


def _train(ckpt, plan, train, n_frames, crop, holdout=None, stop_after=None, grow_to=None):
    """Run epochs ``ckpt.epochs_done .. plan.epochs`` in place on ``ckpt``."""
    model = ckpt.model
    model.set_trainable(plan.trainable)
    groups = [g for name, g in model.groups().items() if name in plan.trainable]
    params = [t for g in groups for t in g]
    report = TrainReport(plan.stage)
    start = time.perf_counter()
    text_fixed = "mat" not in plan.trainable
    cached_classes = None
    hold = None
    if holdout is not None and len(holdout[0]):
        hold = model.frame_features(holdout[0])
    for epoch in range(ckpt.epochs_done, plan.epochs):
        if grow_to is not None:
            target = grow_to(epoch)
            if target > model.de_video.n_layers:
                before = _holdout_logits(model, hold)
                jas.grow_layers(model.de_video, target - model.de_video.n_layers, seed=ckpt.seed)
                model.set_trainable(plan.trainable)
                params = [t for g in groups for t in g]
                after = _holdout_logits(model, hold)
                if before is not None:
                    report.growth_deltas.append((epoch, float(np.abs(after - before).max())))
                logger.info("stage %d epoch %d: video tower grown to %d layers",
                            plan.stage, epoch, model.de_video.n_layers)
        X, y = _epoch_frames(train, n_frames, crop, ckpt.seed, plan.stage, epoch)
        feats = model.frame_features(X)
        order = stream(ckpt.seed, "order", plan.stage, epoch).permutation(len(y))
        total, correct = 0.0, 0
        for b in range(0, len(order), plan.batch):
            idx = order[b:b + plan.batch]
            if text_fixed:
                if cached_classes is None:
                    with T.no_grad():
                        cached_classes = model.class_features()
                classes = cached_classes
            else:
                classes = model.class_features()
            logits = model.logits(feats[idx], classes)
            loss = classify.cross_entropy_loss(logits, y[idx])
            grads = T.grad(loss, params)
            for g in groups:
                sgd_momentum_step(g, grads, plan.lr, plan.momentum)
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        mean_loss, war = total / len(y), correct / len(y)
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"stage {plan.stage} epoch {epoch}: non-finite loss")
        report.losses.append(mean_loss)
        report.wars.append(war)
        ckpt.history.append((plan.stage, epoch, mean_loss, war))
        ckpt.epochs_done = epoch + 1
        logger.debug("stage %d epoch %d loss %.4f war %.3f", plan.stage, epoch, mean_loss, war)
        if stop_after is not None and ckpt.epochs_done >= stop_after:
            break
    ckpt.complete = ckpt.epochs_done >= plan.epochs
    report.seconds = time.perf_counter() - start
    return report


def _holdout_logits(model, hold):
    if hold is None:
        return None
    with T.no_grad():
        return model.logits(hold, model.class_features()).data.astype(np.float64)


def _begin(prev, stage, plan):
    if plan.stage != stage:
        raise ValueError(f"plan is for stage {plan.stage}, not {stage}")
    if isinstance(prev, AlignmentModel):
        if stage != 1:
            raise StageOrderError(f"stage {stage} needs the stage-{stage - 1} checkpoint")
        prev = Checkpoint(prev, stage=0)
    if prev is None:
        raise StageOrderError(f"stage {stage} needs the stage-{stage - 1} checkpoint")
    if prev.mode != "bap":
        raise StageOrderError("an all-at-once checkpoint cannot enter the staged schedule")
    ckpt = copy.deepcopy(prev)
    if ckpt.stage == stage and not ckpt.complete:
        return ckpt, True
    if ckpt.stage != stage - 1 or not ckpt.complete:
        raise StageOrderError(
            f"stage {stage} needs a finished stage-{stage - 1} checkpoint, "
            f"got stage {ckpt.stage} ({'finished' if ckpt.complete else 'in progress'})")
    ckpt.stage, ckpt.epochs_done, ckpt.complete = stage, 0, False
    for g in ckpt.model.groups().values():
        g.reset_momentum()
    return ckpt, False


def run_stage1(start, train, plan, config, holdout=None, stop_after=None):
    """Train the token bank and text tower against averaged frame features.

    ``start`` is a fresh :class:`AlignmentModel` or an unfinished stage-1
    checkpoint.
    """
    ckpt, resumed = _begin(start, 1, plan)
    ckpt.seed, ckpt.config = config.seed, config.to_dict()
    model = ckpt.model
    if model.de_video is not None or model.jas is not None:
        raise StageOrderError("stage 1 runs before any video tower exists")
    if model.de_text is None:
        model.de_text = jas.new_dynamic_encoder("text", config.embd, config.tower_layers,
                                                config.tower_heads, config.seed)
    report = _train(ckpt, plan, train, config.frames, config.image_size, holdout, stop_after)
    return ckpt, report


def run_stage2(start, train, plan, config, holdout=None, stop_after=None):
    """Train a fresh video tower, growing it per ``plan.growth_schedule``."""
    ckpt, resumed = _begin(start, 2, plan)
    model = ckpt.model
    if not resumed:
        model.de_video = jas.new_dynamic_encoder("video", config.embd, config.tower_layers,
                                                 config.tower_heads, config.seed)
    base = config.tower_layers
    report = _train(ckpt, plan, train, config.frames, config.image_size, holdout, stop_after,
                    grow_to=lambda e: _expected_layers(base, plan.growth_schedule, e))
    return ckpt, report


def run_stage3(start, train, plan, config, holdout=None, stop_after=None):
    """Fuse the towers and fine-tune the joint tower with the token bank."""
    ckpt, resumed = _begin(start, 3, plan)
    model = ckpt.model
    if not resumed:
        if config.joint_shared:
            model.jas = jas.fuse(model.de_text, model.de_video, depth=config.joint_depth,
                                 seed=config.seed)
        else:
            for tower in (model.de_text, model.de_video):
                if tower.n_layers < config.joint_depth:
                    jas.grow_layers(tower, config.joint_depth - tower.n_layers, seed=config.seed)
    report = _train(ckpt, plan, train, config.frames, config.image_size, holdout, stop_after)
    return ckpt, report


def run_all_at_once(model, train, config, holdout=None):
    """Baseline: every tower built at full depth and trained jointly from scratch.

    Uses the summed epoch budget of the three stages at the stage-1 rate.
    """
    ckpt = Checkpoint(copy.deepcopy(model), stage=3, complete=False, seed=config.seed,
                      mode="all_at_once", config=config.to_dict())
    m = ckpt.model
    depth = config.joint_depth
    if config.joint_shared:
        m.jas = jas.DynamicEncoder("joint", config.embd, config.tower_heads,
                                   _fresh_layers(config, "joint", depth))
        trainable = ("mat", "jas")
    else:
        m.de_text = jas.new_dynamic_encoder("text", config.embd, depth, config.tower_heads, config.seed)
        m.de_video = jas.new_dynamic_encoder("video", config.embd, depth, config.tower_heads, config.seed)
        trainable = ("mat", "de_text", "de_video")
    epochs = config.epochs_stage1 + config.epochs_stage2 + config.epochs_stage3
    plan = StagePlan(3, epochs, config.lr_stage1, batch=config.batch, momentum=config.momentum,
                     trainable=trainable)
    report = _train(ckpt, plan, train, config.frames, config.image_size, holdout)
    return ckpt, report


def _fresh_layers(config, name, depth):
    rng = stream(config.seed, "tower", name)
    return [nn.init_layer(rng, config.embd, std=None) for _ in range(depth)]


def run_all(config, train, holdout=None, model=None):
    """Full pipeline for ``config.mode``; returns ``(checkpoint, reports)``."""
    model = build_model(config) if model is None else model
    if config.mode == "all_at_once":
        ckpt, report = run_all_at_once(model, train, config, holdout)
        return ckpt, [report]
    p1, p2, p3 = stage_plans(config)
    ckpt, r1 = run_stage1(model, train, p1, config, holdout)
    ckpt, r2 = run_stage2(ckpt, train, p2, config, holdout)
    ckpt, r3 = run_stage3(ckpt, train, p3, config, holdout)
    return ckpt, [r1, r2, r3]


# -- persistence -------------------------------------------------------------

def _tower_meta(prefix, tower, meta):
    if tower is not None:
        meta[f"{prefix}.layers"] = str(tower.n_layers)
        meta[f"{prefix}.heads"] = str(tower.heads)
        meta[f"{prefix}.positions"] = "true" if tower.use_positions else "false"


def checkpoint_bytes(ckpt):
    model = ckpt.model
    meta = {f"config.{k}": v for k, v in sorted(ckpt.config.items())}
    meta.update({f"encoder.{k}": v for k, v in model.text_encoder.config.to_meta().items()})
    meta.update({f"image_encoder.{k}": v for k, v in model.image_encoder.config.to_meta().items()})
    meta["tau"] = repr(float(model.tau))
    meta["tower_heads"] = str(model.heads)
    meta["mode"] = ckpt.mode
    for name in ("de_text", "de_video", "jas"):
        _tower_meta(name, getattr(model, name), meta)
    records, velocities = [], []
    for gname, group in model.groups().items():
        for tname, t in group.tensors.items():
            records.append((f"{gname}/{tname}", t.data))
        for tname in group.tensors:
            if tname in group.momentum:
                velocities.append((f"{gname}/{tname}", group.momentum[tname]))
    foot = io.BytesIO()
    foot.write(FOOTER_MAGIC)
    foot.write(struct.pack("<IIIQ", ckpt.stage, ckpt.epochs_done, int(ckpt.complete), ckpt.seed))
    foot.write(struct.pack("<I", len(ckpt.history)))
    for stage, epoch, loss, war in ckpt.history:
        foot.write(struct.pack("<IIdd", stage, epoch, loss, war))
    foot.write(tensorio.encode_records(velocities))
    return tensorio.dumps(CHECKPOINT_KIND, meta, records, foot.getvalue())


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def _split_records(records):
    out = {}
    for key, arr in records.items():
        group, _, name = key.partition("/")
        out.setdefault(group, {})[name] = arr
    return out


def _tower(meta, prefix, modality, arrays, embd):
    if f"{prefix}.layers" not in meta:
        return None
    n = int(meta[f"{prefix}.layers"])
    layers = []
    for i in range(n):
        try:
            layers.append({k: arrays[f"layers.{i}.{k}"] for k in nn.LAYER_KEYS})
        except KeyError as exc:
            raise tensorio.FormatError(f"checkpoint lacks {prefix} tensor {exc.args[0]}") from None
    return jas.DynamicEncoder(modality, embd, int(meta[f"{prefix}.heads"]), layers,
                              modality_embed=arrays.get("modality_embed"),
                              use_positions=meta[f"{prefix}.positions"] == "true")


def loads_checkpoint(data):
    kind, meta, records, footer = tensorio.loads(data)
    if kind != CHECKPOINT_KIND:
        raise tensorio.FormatError(f"file holds a {kind!r} container, not a checkpoint")
    groups = _split_records(records)
    try:
        enc_cfg = encoders.EncoderConfig.from_meta({k[8:]: v for k, v in meta.items() if k.startswith("encoder.")})
        img_cfg = encoders.EncoderConfig.from_meta(
            {k[14:]: v for k, v in meta.items() if k.startswith("image_encoder.")})
        text_enc = encoders.FrozenEncoder(enc_cfg, "text", groups["text_encoder"])
        image_enc = encoders.FrozenEncoder(img_cfg, "image", groups["image_encoder"])
        bank = mat.MatBank(groups["mat"]["tokens"], tkn_max=enc_cfg.tkn_max)
    except KeyError as exc:
        raise tensorio.FormatError(f"checkpoint lacks group {exc.args[0]!r}") from None
    embd = enc_cfg.embd
    model = AlignmentModel(
        text_enc, image_enc, bank, tau=float(meta["tau"]), heads=int(meta["tower_heads"]),
        de_text=_tower(meta, "de_text", "text", groups.get("de_text", {}), embd),
        de_video=_tower(meta, "de_video", "video", groups.get("de_video", {}), embd),
        joint=_tower(meta, "jas", "joint", groups.get("jas", {}), embd),
    )
    r = tensorio.Reader(footer)
    if r.take(4) != FOOTER_MAGIC:
        raise tensorio.FormatError("checkpoint footer missing")
    stage, epochs_done, complete, seed = struct.unpack("<IIIQ", r.take(20))
    history = [struct.unpack("<IIdd", r.take(24)) for _ in range(r.u32())]
    velocities = r.records()
    model_groups = model.groups()
    for key, arr in velocities.items():
        gname, _, tname = key.partition("/")
        model_groups[gname].momentum[tname] = arr
    config = {k[7:]: v for k, v in meta.items() if k.startswith("config.")}
    return Checkpoint(model, stage=stage, epochs_done=epochs_done, complete=bool(complete),
                      seed=seed, mode=meta.get("mode", "bap"), config=config,
                      history=[tuple(h) for h in history])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


def config_of(ckpt):
    return RunConfig.from_dict(ckpt.config, source="checkpoint")
