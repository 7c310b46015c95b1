"""Counter-based, splittable random streams.

Every stochastic operation asks for its own stream keyed by the run seed plus
a path of labels, so draws never depend on call order elsewhere.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed, *path):
    """A Philox-backed generator for ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
