"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import stream

KINK_MARGIN = 1e-2


def _collect_relu(fn):
    watch: list = []
    T._relu_watchers.append(watch)
    try:
        val = fn()
    finally:
        T._relu_watchers.remove(watch)
    return val, watch


def finite_diff_check(f, params, h=1e-3, n_samples=None, seed=0, return_details=False):
    """Max relative error between autodiff and central differences.

    ``f`` maps the current values of ``params`` to a scalar :class:`Tensor`.
    Everything runs in 64-bit check mode. When ``n_samples`` is given, that
    many coordinates are drawn per tensor; otherwise every coordinate is
    checked. Coordinates whose perturbation moves any relu preactivation
    within ``KINK_MARGIN`` of zero are skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = [p.data for p in params]
    flags = [p.requires_grad for p in params]
    worst, checked, skipped = 0.0, 0, 0
    try:
        with T.check_mode():
            for p in params:
                p.data = p.data.astype(np.float64)
                p.requires_grad = True
            loss = f()
            analytic = T.grad(loss, params)
            rng = stream(seed, "finite-diff")
            with T.no_grad():
                for p in params:
                    flat = p.data.reshape(-1)
                    if n_samples is None or n_samples >= flat.size:
                        coords = np.arange(flat.size)
                    else:
                        coords = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
                    a_flat = analytic[p].reshape(-1)
                    for c in coords:
                        orig = flat[c]
                        flat[c] = orig + h
                        fp, wp = _collect_relu(lambda: f().item())
                        flat[c] = orig - h
                        fm, wm = _collect_relu(lambda: f().item())
                        flat[c] = orig
                        if _near_kink(wp, wm):
                            skipped += 1
                            continue
                        numeric = (fp - fm) / (2 * h)
                        err = abs(a_flat[c] - numeric) / (abs(a_flat[c]) + 1e-8)
                        worst = max(worst, err)
                        checked += 1
    finally:
        for p, d, r in zip(params, saved, flags):
            p.data = d
            p.requires_grad = r
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst


def _near_kink(plus, minus):
    for a, b in zip(plus, minus):
        moved = a != b
        if not moved.any():
            continue
        if (np.minimum(np.abs(a[moved]), np.abs(b[moved])) < KINK_MARGIN).any():
            return True
        if (np.sign(a[moved]) != np.sign(b[moved])).any():
            return True
    return False
