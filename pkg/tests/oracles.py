"""Independent reference computations used by the tests."""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def compositions(n: int, k: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``k`` summing to ``n``."""
    if k == 1:
        return np.array([[n]], dtype=np.int16)
    blocks = []
    for first in range(n + 1):
        rest = compositions(n - first, k - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int16), rest]))
    return np.concatenate(blocks)


def simplex_lattice(count: int, resolution: int = 100) -> np.ndarray:
    return compositions(resolution, count).astype(float) / resolution


def brute_force_max(L, z, P, resolution: int = 100, chunk: int = 500_000) -> float:
    """Largest ``L.w - P |z^T w|^2 / 2`` over the simplex lattice."""
    W = simplex_lattice(len(L), resolution)
    best = -np.inf
    for start in range(0, len(W), chunk):
        w = W[start:start + chunk]
        zw = w @ z
        best = max(best, float(np.max(w @ L - 0.5 * P * np.sum(zw * zw, axis=1))))
    return best


def random_instance(rng: np.random.Generator, count: int = 5, d: int = 1, z_scale: float = 1.0,
                    P_range=(0.1, 2.0)):
    """Random affine part, diffusion slices and positive curvature weight.

    With the defaults and ``d = 1`` the curvature ``P (z_i - z_j)^2`` is at
    most 8, so the 1/100 simplex lattice is within ``1.25e-5 * 8 = 1e-4`` of
    the true maximum (a rank-one maximiser sits on an edge, at most half a
    lattice step from a lattice point).
    """
    L = rng.normal(size=count)
    z = rng.uniform(-z_scale, z_scale, size=(count, d))
    P = rng.uniform(*P_range)
    return L, z, P
