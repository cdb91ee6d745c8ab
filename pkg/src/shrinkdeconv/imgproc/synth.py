"""Deterministic procedural test images.

Scenes mix a smooth background, overlapping flat shapes, thin lines and a
little band-limited texture, which gives both sharp edges (where deblurring
matters) and smooth regions.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def synthetic_image(height: int, width: int, seed: int = 0, channels: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    planes = []
    for _ in range(channels):
        planes.append(_scene(rng, yy, xx))
    img = planes[0] if channels == 1 else np.stack(planes, axis=-1)
    return np.clip(img, 0.0, 1.0)


def _scene(rng, yy, xx):
    h, w = yy.shape
    gy, gx = rng.uniform(-0.3, 0.3, size=2)
    img = 0.5 + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(rng.integers(6, 12)):
        val = rng.uniform(0.05, 0.95)
        kind = rng.integers(3)
        cy, cx = rng.uniform(0, 1, size=2)
        if kind == 0:
            hh, ww = rng.uniform(0.08, 0.4, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        elif kind == 1:
            ry, rx = rng.uniform(0.05, 0.25, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        else:
            theta = rng.uniform(0, np.pi)
            dist = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
            mask = np.abs(dist) < rng.uniform(0.004, 0.02)
        img = np.where(mask, val, img)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0)
    texture /= texture.std() + 1e-12
    return img + 0.02 * texture


def synthetic_set(n: int, height: int, width: int, seed: int = 0, channels: int = 1) -> list[np.ndarray]:
    return [synthetic_image(height, width, seed=seed * 100003 + i, channels=channels) for i in range(n)]
