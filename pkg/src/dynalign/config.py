"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from importlib import resources
from dataclasses import dataclass, fields

from .data import DatasetSpec
from .encoders import EncoderConfig

__all__ = ["RunConfig", "ConfigError", "parse_growth", "read_config", "read_dataset_spec",
           "bundled_config_path", "desk_config"]


class ConfigError(ValueError):
    pass


def parse_growth(text):
    """``"15:2,20:1"`` -> ((15, 2), (20, 1)); empty means default placement."""
    out = []
    for part in filter(None, (p.strip() for p in str(text).split(","))):
        try:
            epoch, n = (int(x) for x in part.split(":"))
        except ValueError:
            raise ConfigError(f"growth_schedule entry {part!r} is not '<epoch>:<layers>'") from None
        if epoch < 0 or n < 1:
            raise ConfigError(f"growth_schedule entry {part!r}: epoch >= 0 and layers >= 1 required")
        out.append((epoch, n))
    return tuple(sorted(out))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "bap"
    classes: int = 7
    sentences: int = 16
    tokens: int = 64
    embd: int = 32
    tau: float = 0.07
    epochs_stage1: int = 40
    epochs_stage2: int = 30
    epochs_stage3: int = 30
    lr_stage1: float = 0.01
    lr_stage2: float = 0.01
    lr_stage3: float = 0.002
    momentum: float = 0.9
    batch: int = 64
    frames: int = 16
    eval_start: str = "center"
    encoder_layers: int = 2
    encoder_heads: int = 4
    tkn_max: int = 74
    image_size: int = 32
    image_patch: int = 8
    channels: int = 3
    tower_layers: int = 2
    tower_heads: int = 4
    joint_depth: int = 4
    joint_shared: bool = True
    growth_schedule: str = ""
    manifest: str = ""
    test_manifest: str = ""
    data_samples_per_class: int = 75
    data_frames: int = 16
    data_pad: int = 4
    data_noise: float = 0.1
    data_seed: int = 0

    def __post_init__(self):
        problems = []
        if self.mode not in ("bap", "all_at_once"):
            problems.append(f"mode must be 'bap' or 'all_at_once', got {self.mode!r}")
        if self.eval_start not in ("center", "first"):
            problems.append("eval_start must be 'center' or 'first'")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name != "seed" and f.name != "data_seed" and v < 1:
                problems.append(f"{f.name} must be positive")
        for name in ("seed", "data_seed"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        for name in ("tau", "lr_stage1", "lr_stage2", "lr_stage3"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.tokens > self.tkn_max:
            problems.append(f"tokens={self.tokens} exceeds tkn_max={self.tkn_max}")
        if self.data_noise < 0:
            problems.append("data_noise must be >= 0")
        if self.frames > self.data_frames and not self.manifest:
            problems.append("frames exceeds data_frames")
        try:
            parse_growth(self.growth_schedule)
            self.encoder_config()
        except (ConfigError, ValueError) as exc:
            problems.append(str(exc))
        if self.embd % self.tower_heads:
            problems.append("embd must be divisible by tower_heads")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- derived -----------------------------------------------------------
    def encoder_config(self):
        return EncoderConfig(embd=self.embd, layers=self.encoder_layers, heads=self.encoder_heads,
                             tkn_max=self.tkn_max, image_patch=self.image_patch,
                             image_size=self.image_size, channels=self.channels)

    def dataset_spec(self):
        return DatasetSpec(classes=self.classes, samples_per_class=self.data_samples_per_class,
                           frames=self.data_frames, image_size=self.image_size, pad=self.data_pad,
                           channels=self.channels, noise=self.data_noise, seed=self.data_seed)

    def growth(self):
        sched = parse_growth(self.growth_schedule)
        if sched:
            return sched
        # default: reach joint_depth at the stage-2 midpoint
        return ((self.epochs_stage2 // 2, max(self.joint_depth - self.tower_layers, 1)),)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: _fmt(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw, source="config"):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"{source}: unknown keys {unknown}")
        kwargs = {}
        for key, text in raw.items():
            kwargs[key] = _coerce(known[key].type, key, text, source)
        return cls(**kwargs)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, key, text, source):
    if not isinstance(text, str):
        return text
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{source}: {key} = {text!r} is not a valid {kind}") from None
    return text


def read_pairs(path):
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            pairs[key] = value
    return pairs


def read_config(path):
    return RunConfig.from_dict(read_pairs(path), source=str(path))


def read_dataset_spec(path):
    """A :class:`DatasetSpec` from a flat file using its field names."""
    raw = read_pairs(path)
    known = {f.name: f for f in fields(DatasetSpec)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {k: _coerce(known[k].type, k, v, str(path)) for k, v in raw.items()}
    try:
        return DatasetSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def bundled_config_path(name="desk"):
    return resources.files(__package__).joinpath("configs", f"{name}.cfg")


def desk_config(**changes):
    """The bundled small synthetic configuration, optionally overridden."""
    with resources.as_file(bundled_config_path()) as path:
        cfg = read_config(path)
    return cfg.replace(**changes) if changes else cfg
