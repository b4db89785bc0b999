"""Texture constructors used for training, baselines and evaluation."""

from __future__ import annotations

import numpy as np

NORMAL_COLOR = (0.20, 0.33, 0.62)


def flat(color, n: int = 16) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=np.float64), (n, n, 3)).copy()


def normal_texture(n: int = 16) -> np.ndarray:
    """The unmodified car paint."""
    return flat(NORMAL_COLOR, n)


def random_texture(seed: int, n: int = 16) -> np.ndarray:
    """I.i.d. uniform texels, the random-camouflage baseline."""
    return np.random.default_rng([2718, seed]).uniform(0.0, 1.0, size=(n, n, 3))


def two_tone(seed: int, n: int = 16) -> np.ndarray:
    """Stripes or a checkerboard in two random colours."""
    rng = np.random.default_rng([1618, seed])
    a, b = rng.uniform(0.05, 0.95, size=(2, 3))
    period = int(rng.choice([2, 4, 8]))
    ys, xs = np.mgrid[0:n, 0:n]
    kind = int(rng.integers(3))
    if kind == 0:
        sel = (xs // period) % 2 == 0
    elif kind == 1:
        sel = (ys // period) % 2 == 0
    else:
        sel = ((xs // period) + (ys // period)) % 2 == 0
    return np.where(sel[..., None], a, b)


def detector_training_textures(count: int, seed: int, n: int = 16, pattern_fraction: float = 0.3) -> list[np.ndarray]:
    """Mostly flat colours plus some two-tone patterns, always including the normal paint."""
    rng = np.random.default_rng([577, seed])
    out = [normal_texture(n)]
    for i in range(count - 1):
        if rng.uniform() < pattern_fraction:
            out.append(two_tone(seed * 100003 + i, n))
        else:
            out.append(flat(rng.uniform(0.05, 0.95, size=3), n))
    return out
