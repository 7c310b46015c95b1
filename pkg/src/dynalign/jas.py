"""Temporal transformer towers over feature sequences.

A tower adds sinusoidal positions to a [L, D] sequence, runs pre-LN
transformer layers and mean-pools the output rows. Order information reaches
the pooled feature only through the positions. A joint tower serves both
modalities and tells them apart with an additive per-modality embedding.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .optim import ParamGroup
from .rng import stream
from .tensor import Tensor

__all__ = ["DynamicEncoder", "new_dynamic_encoder", "dyn_encode", "grow_layers", "fuse",
           "MODALITIES", "MAX_LEN"]

MODALITIES = ("text", "video")
MAX_LEN = 256


class DynamicEncoder:
    def __init__(self, modality, embd, heads, layers, modality_embed=None,
                 use_positions=True, name=None, pos_scale=1.0):
        if modality not in ("text", "video", "joint"):
            raise ValueError(f"unknown tower modality {modality!r}")
        if not layers:
            raise ValueError("a tower needs at least one layer")
        if embd % heads:
            raise ValueError(f"embd={embd} not divisible by heads={heads}")
        self.modality = modality
        self.embd = embd
        self.heads = heads
        self.use_positions = use_positions
        self.params = ParamGroup(name or ("jas" if modality == "joint" else f"de_{modality}"))
        # modality embedding first so grown layers keep a stable record order
        if modality == "joint":
            me = np.zeros((len(MODALITIES), embd)) if modality_embed is None else modality_embed
            self.params.add("modality_embed", Tensor(np.asarray(me, np.float32)))
        self.layers = []
        for arrays in layers:
            self._append(arrays)
        self.pos_scale = pos_scale
        self.pos = (nn.sinusoidal_positions(MAX_LEN, embd) * pos_scale).astype(np.float32)

    def _append(self, arrays):
        for k in nn.LAYER_KEYS:
            if tuple(np.shape(arrays[k])) != nn.layer_shapes(self.embd)[k]:
                raise T.ShapeError("tower layer", np.shape(arrays[k]), nn.layer_shapes(self.embd)[k])
        self.layers.append(nn.layer_tensors(arrays, f"layers.{len(self.layers)}.", self.params))

    @property
    def n_layers(self):
        return len(self.layers)

    def layer_arrays(self, i):
        return {k: t.data.copy() for k, t in self.layers[i].items()}

    def __repr__(self):
        return f"DynamicEncoder({self.modality!r}, layers={self.n_layers}, embd={self.embd})"


def new_dynamic_encoder(modality, embd, n_layers, heads, seed, std=None, use_positions=True):
    """Fresh tower; ``std=None`` means fan-in scaled weights."""
    rng = stream(seed, "tower", modality)
    layers = [nn.init_layer(rng, embd, std=std) for _ in range(n_layers)]
    return DynamicEncoder(modality, embd, heads, layers, use_positions=use_positions)


def dyn_encode(de, seq, modality_tag=None):
    """Pool a sequence [..., L, D] into one feature [..., D]."""
    seq = seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=np.float32))
    if seq.ndim < 2 or seq.shape[-1] != de.embd:
        raise T.ShapeError("dyn_encode", seq.shape, ("L", de.embd))
    length = seq.shape[-2]
    if not 1 <= length <= MAX_LEN:
        raise ValueError(f"sequence length {length} outside [1, {MAX_LEN}]")
    x = seq
    if de.use_positions:
        x = x + Tensor(de.pos[:length])
    if de.modality == "joint":
        if modality_tag not in MODALITIES:
            raise ValueError(f"joint tower needs modality_tag in {MODALITIES}, got {modality_tag!r}")
        x = x + de.params.tensors["modality_embed"][MODALITIES.index(modality_tag)]
    for layer in de.layers:
        x = nn.layer_forward(x, layer, de.heads)
    return x.mean(axis=-2)


def grow_layers(de, n_new, seed=0, std=0.02):
    """Append ``n_new`` layers that start as exact identities.

    The tower is extended in place (and returned); the new layers share the
    tower's trainability.
    """
    if n_new < 1:
        raise ValueError("n_new must be at least 1")
    for _ in range(n_new):
        rng = stream(seed, "grow", de.params.name, de.n_layers)
        de._append(nn.init_layer(rng, de.embd, std=std, zero_residual=True))
    return de


def fuse(text_de, video_de, depth=4, seed=0, base_layers=2):
    """Joint tower seeded from the video tower's first ``base_layers`` layers."""
    if text_de.embd != video_de.embd:
        raise T.ShapeError("fuse", (text_de.embd,), (video_de.embd,))
    base = min(base_layers, video_de.n_layers)
    joint = DynamicEncoder("joint", video_de.embd, video_de.heads,
                           [video_de.layer_arrays(i) for i in range(base)],
                           use_positions=video_de.use_positions)
    if depth > base:
        grow_layers(joint, depth - base, seed=seed)
    return joint
