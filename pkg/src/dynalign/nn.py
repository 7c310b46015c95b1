"""Pre-LN transformer blocks shared by the frozen encoders and the towers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KEYS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
              "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj")
MLP_RATIO = 4


def sinusoidal_positions(length, embd):
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(-np.log(10000.0) * np.arange(0, embd, 2, dtype=np.float64) / embd)
    table = np.zeros((length, embd), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: embd // 2])
    return table.astype(np.float32)


def layer_shapes(embd):
    hidden = MLP_RATIO * embd
    return {
        "ln1_g": (embd,), "ln1_b": (embd,),
        "w_qkv": (embd, 3 * embd), "b_qkv": (3 * embd,),
        "w_o": (embd, embd), "b_o": (embd,),
        "ln2_g": (embd,), "ln2_b": (embd,),
        "w_fc": (embd, hidden), "b_fc": (hidden,),
        "w_proj": (hidden, embd), "b_proj": (embd,),
    }


def init_layer(rng, embd, std=0.02, zero_residual=False):
    """Fresh layer weights as float32 arrays.

    ``std=None`` draws each matrix with std ``1/sqrt(fan_in)``. With
    ``zero_residual`` the two branch output projections start at zero so the
    layer is an exact identity map.
    """
    out = {}
    for key, shape in layer_shapes(embd).items():
        if key.startswith("ln") and key.endswith("_g"):
            arr = np.ones(shape)
        elif key.startswith(("ln", "b_")):
            arr = np.zeros(shape)
        elif zero_residual and key in ("w_o", "w_proj"):
            arr = np.zeros(shape)
        else:
            scale = 1.0 / np.sqrt(shape[0]) if std is None else std
            arr = rng.normal(0.0, scale, size=shape)
        out[key] = arr.astype(np.float32)
    return out


def layer_forward(x, p, heads, mask=None):
    """One transformer layer on ``x`` of shape [..., L, D]."""
    *lead, length, embd = x.shape
    dh = embd // heads
    h = T.layer_norm(x, p["ln1_g"], p["ln1_b"])
    qkv = h @ p["w_qkv"] + p["b_qkv"]
    split = qkv.reshape(*lead, length, 3, heads, dh)
    order = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 2, 0, 3))
    split = split.transpose(order)  # [..., 3, H, L, dh]
    idx = (slice(None),) * len(lead)
    q, k, v = (split[idx + (i,)] for i in range(3))
    att = T.attention(q, k, v, mask)  # [..., H, L, dh]
    back = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))
    att = att.transpose(back).reshape(*lead, length, embd)
    x = x + (att @ p["w_o"] + p["b_o"])
    h = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
    return x + (T.gelu(h @ p["w_fc"] + p["b_fc"]) @ p["w_proj"] + p["b_proj"])


def layer_tensors(arrays, prefix, group):
    """Register a layer's arrays in ``group`` under ``prefix`` and return them."""
    return {k: group.add(f"{prefix}{k}", Tensor(arrays[k])) for k in LAYER_KEYS}
