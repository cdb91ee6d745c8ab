"""Solvers for the x-update ``A x = b`` and the per-pixel weights that shape ``A``."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .linop import NormalOperator

log = logging.getLogger(__name__)

W_MAX = 1e4
IRLS_EPS = 1e-6
FFT_FLOOR = 1e-12
MAD_SCALE = 1.4826
# diagonal Laplacian, scaled to unit gain on white noise
_HIGHPASS = np.array([[1.0, 0.0, 1.0], [0.0, -4.0, 0.0], [1.0, 0.0, 1.0]]) / np.sqrt(20.0)


class SolverError(RuntimeError):
    """Numerical failure inside an x-update solver."""

    def __init__(self, message: str, iteration: int | None = None, stage: int | None = None):
        self.iteration = iteration
        self.stage = stage
        super().__init__(message)

    def with_stage(self, stage: int) -> "SolverError":
        err = SolverError(f"stage {stage}: {self.args[0]}", self.iteration, stage)
        err.__cause__ = self
        return err


@dataclass
class CGState:
    x: np.ndarray
    r: np.ndarray
    p: np.ndarray
    iteration: int
    rho_rr: float


class CGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    residual_norm: float


@dataclass
class SolverConfig:
    kind: str = "cg"
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if self.kind not in ("cg", "fft"):
            raise ValueError(f"unknown solver {self.kind!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("solver tolerance and iteration cap must be positive")


def cg_solve(A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, x0: np.ndarray | None = None,
             tol: float = 1e-6, max_iter: int = 200,
             callback: Callable[[CGState], None] | None = None) -> CGResult:
    """Conjugate gradients for a symmetric positive (semi-)definite ``A``.

    Stops once ``||b - A x|| / ||b|| <= tol`` (checked on the true residual) or
    after ``max_iter`` iterations.  Raises :class:`SolverError` if a search
    direction has non-positive curvature.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A(x) if x0 is not None else b.copy()
    rr = float(np.vdot(r, r))
    if np.sqrt(rr) <= tol * bnorm:
        return CGResult(x, 0, float(np.sqrt(rr)))
    p = r.copy()
    it = 0
    while it < max_iter:
        Ap = A(p)
        pAp = float(np.vdot(p, Ap))
        if not pAp > 0.0:
            raise SolverError(f"non-positive curvature <p, Ap> = {pAp:.3e} at iteration {it + 1}", it + 1)
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(np.vdot(r, r))
        it += 1
        if callback is not None:
            callback(CGState(x, r, p, it, rr_new))
        if np.sqrt(rr_new) <= tol * bnorm:
            # confirm on the true residual; restart from it if the recursion drifted
            r = b - A(x)
            rr_new = float(np.vdot(r, r))
            if np.sqrt(rr_new) <= tol * bnorm:
                rr = rr_new
                break
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new
    else:
        r = b - A(x)
        rr = float(np.vdot(r, r))
    return CGResult(x, it, float(np.sqrt(rr)))


@dataclass
class FFTInfo:
    floored: int
    max_imag: float


def fft_solve(A: NormalOperator, b: np.ndarray, return_info: bool = False):
    """Closed-form solve of ``A x = b`` by division in the 2-D DFT domain.

    Exact for periodic boundary with spatially uniform weights (non-uniform
    weight maps are replaced by their means).  Frequencies whose eigenvalue
    falls below ``1e-12`` get that floor added and are counted.
    """
    if A.F.boundary != "periodic" or (A.G is not None and A.G.boundary != "periodic") \
            or (A.H is not None and A.H.boundary != "periodic"):
        raise ValueError("fft_solve needs periodic operators")
    den = A.spectrum()
    low = den < FFT_FLOOR
    floored = int(np.count_nonzero(low))
    if floored:
        log.warning("fft_solve: %d frequencies below %.0e, adding Tikhonov floor", floored, FFT_FLOOR)
        den = den + FFT_FLOOR
    xc = sfft.ifft2(sfft.fft2(b) / den)
    x = np.real(xc)
    if return_info:
        return x, FFTInfo(floored, float(np.max(np.abs(np.imag(xc)))))
    return x


def irls_weights(responses: np.ndarray, p: float, eps: float = IRLS_EPS, w_max: float = W_MAX) -> np.ndarray:
    """IRLS weights ``min((r^2 + eps)^((p - 2) / 2), w_max)`` for a ``|r|^p`` penalty."""
    if not 0 < p <= 2:
        raise ValueError("p must lie in (0, 2]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    r = np.asarray(responses, dtype=np.float64)
    return np.minimum((r * r + eps) ** ((p - 2.0) / 2.0), w_max)


def estimate_noise_sigma(y: np.ndarray, window: int = 17) -> np.ndarray:
    """Per-pixel noise standard deviation from a robust local MAD of a high-pass residual."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    y = np.asarray(y, dtype=np.float64)
    resid = ndimage.correlate(y, _HIGHPASS, mode="reflect")
    mad = ndimage.median_filter(np.abs(resid), size=window, mode="reflect")
    return ndimage.uniform_filter(MAD_SCALE * mad, size=window, mode="reflect")


def estimate_noise_map(y: np.ndarray, window: int = 17, eps: float = IRLS_EPS, w_max: float = W_MAX) -> np.ndarray:
    """Noise weight ``m_n = 1 / (sigma^2 + eps)`` per pixel, capped at ``w_max``."""
    sigma = estimate_noise_sigma(y, window)
    return np.minimum(1.0 / (sigma**2 + eps), w_max)


@dataclass
class WeightMaps:
    """Per-pixel weights for the x-update; ``None`` entries mean all ones."""

    m_p: np.ndarray | None = None
    m_d: np.ndarray | None = None
    m_n: np.ndarray | None = None

    def __post_init__(self):
        for name in ("m_p", "m_d", "m_n"):
            w = getattr(self, name)
            if w is None:
                continue
            if not np.all(np.isfinite(w)) or np.any(w <= 0) or np.any(w > W_MAX):
                raise ValueError(f"{name} entries must lie in (0, {W_MAX:g}]")
