"""Degradation model y = k * x + n and boundary helpers.

Images are float arrays of shape (H, W) or (H, W, C); kernels are 2-D arrays
with odd side lengths.  ``blur`` is a true convolution (the kernel is flipped),
so an asymmetric kernel shifts mass in the direction of its taps.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

BOUNDARY_MODES = ("periodic", "replicate")
_NP_PAD_MODE = {"periodic": "wrap", "replicate": "edge"}

KERNEL_SUM_TOL = 1e-6


class KernelError(ValueError):
    """Raised for kernels that violate the blur-kernel invariants."""


def check_boundary(boundary: str) -> str:
    if boundary not in BOUNDARY_MODES:
        raise ValueError(f"unknown boundary mode {boundary!r}; expected one of {BOUNDARY_MODES}")
    return boundary


def validate_kernel(k, *, size_range: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``k`` as float64 after checking shape, sign and normalisation."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise KernelError(f"kernel must be 2-D, got shape {k.shape}")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise KernelError(f"kernel dimensions must be odd, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise KernelError("kernel has non-finite taps")
    if np.any(k < 0):
        raise KernelError("kernel taps must be non-negative")
    if abs(k.sum() - 1.0) > KERNEL_SUM_TOL:
        raise KernelError(f"kernel taps sum to {k.sum():.9g}, expected 1")
    if size_range is not None:
        lo, hi = size_range
        if not (lo <= k.shape[0] <= hi and lo <= k.shape[1] <= hi):
            raise KernelError(f"kernel size {k.shape} outside [{lo}, {hi}]")
    return k


def delta_kernel(size: int = 1) -> np.ndarray:
    if size % 2 == 0:
        raise KernelError("delta kernel size must be odd")
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def _channels_last(x: np.ndarray):
    """Yield 2-D planes of an (H, W) or (H, W, C) image."""
    if x.ndim == 2:
        return [x]
    if x.ndim == 3:
        return [x[..., c] for c in range(x.shape[2])]
    raise ValueError(f"image must be (H, W) or (H, W, C), got shape {x.shape}")


def _stack_like(planes, like: np.ndarray) -> np.ndarray:
    if like.ndim == 2:
        return planes[0]
    return np.stack(planes, axis=-1)


def blur(x, k, boundary: str = "replicate") -> np.ndarray:
    """Convolve every channel of ``x`` with ``k``; output has the input's size."""
    x = np.asarray(x, dtype=np.float64)
    k = validate_kernel(k)
    check_boundary(boundary)
    if k.shape[0] > x.shape[0] or k.shape[1] > x.shape[1]:
        raise KernelError(f"kernel {k.shape} larger than image {x.shape[:2]}")
    rh, rw = k.shape[0] // 2, k.shape[1] // 2
    out = []
    for plane in _channels_last(x):
        padded = np.pad(plane, ((rh, rh), (rw, rw)), mode=_NP_PAD_MODE[boundary])
        out.append(signal.convolve(padded, k, mode="valid"))
    return _stack_like(out, x)


def add_gaussian_noise(y, sigma: float, seed: int | None = None) -> np.ndarray:
    """Return ``y + n`` with ``n ~ N(0, sigma^2)`` i.i.d.  Values are not clipped."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    rng = np.random.default_rng(seed)
    return y + sigma * rng.standard_normal(y.shape)


def circular_blur(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Periodic convolution of a 2-D plane, computed in the Fourier domain."""
    otf = psf2otf(k, x.shape)
    return np.real(np.fft.ifft2(np.fft.fft2(x) * otf))


def psf2otf(k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """DFT of ``k`` zero-padded to ``shape`` with its centre moved to the origin."""
    kh, kw = k.shape
    pad = np.zeros(shape)
    pad[:kh, :kw] = k
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


def _taper_profile(marginal: np.ndarray, n: int) -> np.ndarray:
    # 1 - normalised circular autocorrelation of the kernel marginal; zero at
    # both ends, one once the lag exceeds the marginal's support.
    z = np.real(np.fft.ifft(np.abs(np.fft.fft(marginal, n - 1)) ** 2))
    z = np.concatenate([z, z[:1]])
    z /= z.max()
    z[np.abs(z) < 1e-12] = 0.0  # FFT round-off beyond the support
    return 1.0 - z


def taper_window(shape: tuple[int, int], k: np.ndarray) -> np.ndarray:
    h, w = shape
    alpha_r = _taper_profile(k.sum(axis=1), h)
    alpha_c = _taper_profile(k.sum(axis=0), w)
    return np.outer(alpha_r, alpha_c)


def edgetaper(y, k) -> np.ndarray:
    """Blend the borders of ``y`` with its circularly blurred copy.

    The blend weight is the outer product of one minus the normalised
    autocorrelations of the kernel's row and column marginals.  Pixels farther
    than ``kernel_size - 1`` from every border keep their value.
    """
    y = np.asarray(y, dtype=np.float64)
    k = validate_kernel(k)
    if k.size == 1:
        return y.copy()
    out = []
    for plane in _channels_last(y):
        if k.shape[0] > plane.shape[0] or k.shape[1] > plane.shape[1]:
            raise KernelError(f"kernel {k.shape} larger than image {plane.shape}")
        alpha = taper_window(plane.shape, k)
        out.append(alpha * plane + (1.0 - alpha) * circular_blur(plane, k))
    return _stack_like(out, y)
