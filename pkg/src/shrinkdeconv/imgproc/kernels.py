"""Random camera-shake kernels.

Trajectories are sub-pixel random walks with inertia; each visited point is
splatted with a small Gaussian and the result is normalised.
"""

from __future__ import annotations

import numpy as np

from .degrade import validate_kernel

KERNEL_SIZE_RANGE = (13, 35)


def random_kernel_size(rng: np.random.Generator, size_range=KERNEL_SIZE_RANGE) -> int:
    lo, hi = size_range
    sizes = np.arange(lo + (lo % 2 == 0), hi + 1, 2)
    return int(rng.choice(sizes))


def _trajectory(rng: np.random.Generator, n_points: int) -> np.ndarray:
    pos = np.zeros(2)
    vel = rng.standard_normal(2)
    vel /= np.linalg.norm(vel) + 1e-12
    pts = np.empty((n_points, 2))
    for i in range(n_points):
        # inertia plus a random push, occasional sharp turn
        vel = 0.85 * vel + 0.35 * rng.standard_normal(2)
        if rng.random() < 0.02:
            vel = -vel + rng.standard_normal(2)
        pos = pos + vel
        pts[i] = pos
    return pts


def random_motion_kernel(size: int, rng: np.random.Generator | int | None = None,
                         n_points: int = 200, splat_sigma: float = 0.5) -> np.ndarray:
    """Sample a normalised, non-negative ``size x size`` motion kernel (``size`` odd)."""
    if size % 2 == 0 or size < 3:
        raise ValueError("kernel size must be odd and >= 3")
    rng = np.random.default_rng(rng)
    pts = _trajectory(rng, n_points)
    pts -= pts.mean(axis=0)
    extent = np.abs(pts).max()
    # use between 50% and 100% of the available half-width
    half = (size - 1) / 2.0 - 1.5
    target = half * rng.uniform(0.5, 1.0)
    pts *= target / max(extent, 1e-9)
    c = (size - 1) / 2.0
    grid = np.arange(size)
    k = np.zeros((size, size))
    for py, px in pts + c:
        gy = np.exp(-((grid - py) ** 2) / (2 * splat_sigma**2))
        gx = np.exp(-((grid - px) ** 2) / (2 * splat_sigma**2))
        k += np.outer(gy, gx)
    k /= k.sum()
    return validate_kernel(k)
