"""Frozen toy text/image encoders standing in for pretrained image-text towers."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from . import tensorio
from .optim import ParamGroup
from .rng import stream
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "FrozenEncoder",
    "TokenContext",
    "EncoderShapeError",
    "ImageSizeError",
    "init_toy",
    "load_weights",
    "save_weights",
    "encode_text",
    "encode_image",
    "TKN_MAX",
]

TKN_MAX = 74


def default_pos_scale(kind, embd):
    """Amplitude of the sinusoidal table: 0.01 for text, embd**-0.5 for images."""
    return 0.01 if kind == "text" else embd ** -0.5


class EncoderShapeError(tensorio.TensorFileError):
    """Stored tensors disagree with the declared encoder configuration."""


class ImageSizeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embd: int = 32
    layers: int = 2
    heads: int = 4
    tkn_max: int = TKN_MAX
    image_patch: int = 8
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"EncoderConfig.{name} must be a positive integer, got {value!r}")
        if self.embd % self.heads:
            raise ValueError(f"embd={self.embd} is not divisible by heads={self.heads}")
        if self.embd % 2:
            raise ValueError("embd must be even for sinusoidal positions")
        if self.image_size % self.image_patch:
            raise ValueError(
                f"image_size={self.image_size} is not divisible by image_patch={self.image_patch}")

    @property
    def n_patches(self):
        return (self.image_size // self.image_patch) ** 2

    def to_meta(self):
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta):
        try:
            return cls(**{k: int(meta[k]) for k in cls.__dataclass_fields__})
        except KeyError as exc:
            raise tensorio.FormatError(f"encoder header lacks field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise tensorio.FormatError(f"bad encoder header: {exc}") from None


@dataclass
class TokenContext:
    """A ``tkn_max x embd`` token matrix whose first ``valid_len`` rows are live."""

    rows: Tensor
    valid_len: int

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise T.ShapeError("TokenContext", self.rows.shape)
        if not 1 <= self.valid_len <= self.rows.shape[0]:
            raise ValueError(f"valid_len {self.valid_len} outside [1, {self.rows.shape[0]}]")


def expected_shapes(config, kind):
    d = config.embd
    shapes = {}
    if kind == "image":
        shapes["w_patch"] = (config.channels * config.image_patch**2, d)
        shapes["b_patch"] = (d,)
        shapes["cls"] = (d,)
    for i in range(config.layers):
        for k, s in nn.layer_shapes(d).items():
            shapes[f"layers.{i}.{k}"] = s
    shapes["ln_out_g"] = (d,)
    shapes["ln_out_b"] = (d,)
    return shapes


class FrozenEncoder:
    """Transformer encoder whose parameters can never be trained."""

    def __init__(self, config, kind, arrays, pos_scale=None):
        if kind not in ("text", "image"):
            raise ValueError(f"encoder kind must be 'text' or 'image', got {kind!r}")
        self.config = config
        self.kind = kind
        want = expected_shapes(config, kind)
        missing = sorted(set(want) - set(arrays))
        extra = sorted(set(arrays) - set(want))
        if missing or extra:
            raise EncoderShapeError(f"{kind} encoder tensors: missing {missing}, unexpected {extra}")
        for name, shape in want.items():
            if tuple(arrays[name].shape) != shape:
                raise EncoderShapeError(
                    f"{kind} encoder tensor {name!r}: stored shape {tuple(arrays[name].shape)}, "
                    f"header implies {shape}")
        self.params = ParamGroup(f"{kind}_encoder", locked=True)
        for name in want:
            self.params.add(name, Tensor(np.asarray(arrays[name], dtype=np.float32)))
        self._layers = [
            {k: self.params.tensors[f"layers.{i}.{k}"] for k in nn.LAYER_KEYS}
            for i in range(config.layers)
        ]
        n_pos = config.tkn_max if kind == "text" else config.n_patches + 1
        self.pos_scale = default_pos_scale(kind, config.embd) if pos_scale is None else pos_scale
        self._pos = (nn.sinusoidal_positions(n_pos, config.embd) * self.pos_scale).astype(np.float32)

    @property
    def embd(self):
        return self.config.embd

    def _stack(self, x, pool_row):
        for layer in self._layers:
            x = nn.layer_forward(x, layer, self.config.heads)
        p = self.params.tensors
        return T.layer_norm(x[..., pool_row, :], p["ln_out_g"], p["ln_out_b"])

    def encode_rows(self, rows):
        """Encode fully-valid token rows of shape [..., L, D]; pools row L-1."""
        if self.kind != "text":
            raise TypeError("encode_rows needs a text encoder")
        length, width = rows.shape[-2:]
        if width != self.embd:
            raise T.ShapeError("encode_text", rows.shape, (self.config.tkn_max, self.embd))
        if length > self.config.tkn_max:
            raise ValueError(f"{length} tokens exceed tkn_max={self.config.tkn_max}")
        x = rows + Tensor(self._pos[:length])
        return self._stack(x, length - 1)

    def encode_frames(self, frames):
        """Encode frames of shape [..., C, H, W] to features [..., D]."""
        if self.kind != "image":
            raise TypeError("encode_frames needs an image encoder")
        cfg = self.config
        frames = np.asarray(frames, dtype=np.float32)
        if frames.shape[-3:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ImageSizeError(
                f"frame shape {frames.shape[-3:]} does not match "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
        lead = frames.shape[:-3]
        g, p = cfg.image_size // cfg.image_patch, cfg.image_patch
        patches = frames.reshape(-1, cfg.channels, g, p, g, p)
        patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(-1, g * g, cfg.channels * p * p)
        prm = self.params.tensors
        tokens = Tensor(patches) @ prm["w_patch"] + prm["b_patch"]
        n = patches.shape[0]
        cls = T.mul(Tensor(np.ones((n, 1, 1))), prm["cls"])
        x = T.concat([cls, tokens], axis=1) + Tensor(self._pos)
        out = self._stack(x, 0)
        return out.reshape(*lead, cfg.embd)


def init_toy(config, kind, seed, std=None):
    """Deterministic random encoder, frozen on construction.

    ``std=None`` scales each weight matrix by ``1/sqrt(fan_in)`` so the
    random towers keep their inputs distinguishable; pass a number for a
    fixed Gaussian scale.
    """
    rng = stream(seed, "encoder", kind)
    arrays = {}
    for name, shape in expected_shapes(config, kind).items():
        if name.startswith("layers."):
            continue
        if name == "cls":
            arrays[name] = rng.normal(0.0, 0.02 if std is None else std, size=shape)
        elif name == "w_patch":
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]) if std is None else std, size=shape)
        elif name.endswith("_g"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    for i in range(config.layers):
        for k, v in nn.init_layer(rng, config.embd, std=std).items():
            arrays[f"layers.{i}.{k}"] = v
    return FrozenEncoder(config, kind, {k: np.asarray(v, np.float32) for k, v in arrays.items()})


def save_weights(enc, path):
    records = [(name, t.data) for name, t in enc.params.tensors.items()]
    tensorio.save(path, enc.kind, enc.config.to_meta(), records)


def load_weights(path):
    kind, meta, records, _ = tensorio.load(path)
    if kind not in ("text", "image"):
        raise tensorio.FormatError(f"file holds a {kind!r} container, not an encoder")
    return FrozenEncoder(EncoderConfig.from_meta(meta), kind, records)


def encode_text(enc, ctx):
    """Feature for one token context; padding rows never influence it."""
    if enc.kind != "text":
        raise TypeError("encode_text needs a text encoder")
    if ctx.rows.shape[-1] != enc.embd:
        raise T.ShapeError("encode_text", ctx.rows.shape, (enc.config.tkn_max, enc.embd))
    return enc.encode_rows(ctx.rows[: ctx.valid_len])


def encode_image(enc, frame):
    if enc.kind != "image":
        raise TypeError("encode_image needs an image encoder")
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ImageSizeError(f"expected one C x H x W frame, got shape {frame.shape}")
    return enc.encode_frames(frame)
