"""Parameter groups and SGD with classic momentum."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor

__all__ = ["ParamGroup", "FrozenParamError", "sgd_momentum_step", "group_digest"]


class FrozenParamError(RuntimeError):
    """Raised when a permanently frozen group is marked trainable."""


class ParamGroup:
    """A named set of tensors sharing one trainability flag.

    ``momentum`` holds one velocity buffer per tensor name, created lazily with
    the tensor's shape.
    """

    def __init__(self, name, tensors=None, trainable=True, locked=False):
        self.name = name
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.momentum: dict[str, np.ndarray] = {}
        self._locked = locked
        self._trainable = False
        self.trainable = trainable and not locked

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, value):
        if value and self._locked:
            raise FrozenParamError(f"parameter group {self.name!r} is frozen")
        self._trainable = bool(value)
        for t in self.tensors.values():
            t.requires_grad = self._trainable

    @property
    def locked(self):
        return self._locked

    def add(self, name, tensor):
        if name in self.tensors:
            raise KeyError(f"{self.name}: duplicate tensor {name!r}")
        tensor.requires_grad = self._trainable
        self.tensors[name] = tensor
        return tensor

    def velocity(self, name):
        buf = self.momentum.get(name)
        if buf is None:
            buf = np.zeros(self.tensors[name].shape, dtype=np.float32)
            self.momentum[name] = buf
        return buf

    def reset_momentum(self):
        self.momentum.clear()

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def __repr__(self):
        return f"ParamGroup({self.name!r}, n={len(self.tensors)}, trainable={self.trainable})"


def group_digest(group):
    """SHA-256 over the group's tensor names and raw bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(group.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(group.tensors[name].data, dtype=np.float32).tobytes())
    return h.hexdigest()


def sgd_momentum_step(group, grads, lr, momentum):
    """One update ``v <- momentum*v + g; p <- p - lr*v`` on a trainable group.

    Frozen groups are left untouched. Tensors absent from ``grads`` are
    treated as having zero gradient.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not group.trainable:
        return
    for name, p in group.tensors.items():
        g = grads.get(p)
        if g is not None and np.shape(g) != p.shape:
            raise ValueError(
                f"{group.name}.{name}: gradient shape {np.shape(g)} != parameter shape {p.shape}")
        v = group.velocity(name)
        v = np.float32(momentum) * v if g is None else np.float32(momentum) * v + np.asarray(g, np.float32)
        group.momentum[name] = v.astype(np.float32)
        p.data = (p.data - np.float32(lr) * group.momentum[name]).astype(p.data.dtype)
