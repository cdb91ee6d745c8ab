"""Linear operators of the split model: blur H, filter banks F_i / G_j and the
normal operator of the x-update.

Conventions
-----------
* Filter banks apply *correlation*: ``(F_i x)[p] = sum_a f_i[a] x[p + a - r]``.
* The blur operator applies *convolution*, i.e. correlation with the flipped
  kernel, matching :func:`shrinkdeconv.imgproc.blur`.
* Out-of-image samples come from a boundary index map (wrap for
  ``periodic``, clamp for ``replicate``).  Padding is a gather with that map
  and its adjoint is the matching scatter-add, so every adjoint is exact.

All arithmetic is float64.  Feature stacks have shape ``(count, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .imgproc.degrade import check_boundary

FILTER_SIZE = 7
DENSE_MAX_PIXELS = 4096
# planes this small are filtered with an explicit matrix; FFT call overhead dominates otherwise
SMALL_PLANE_PIXELS = 256


def boundary_index(n: int, r: int, boundary: str) -> np.ndarray:
    """Source index of each of the ``n + 2r`` padded samples."""
    idx = np.arange(-r, n + r)
    if boundary == "periodic":
        return idx % n
    if boundary == "replicate":
        return np.clip(idx, 0, n - 1)
    raise ValueError(f"unknown boundary mode {boundary!r}")


def _one_hot(index: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((len(index), n))
    m[np.arange(len(index)), index] = 1.0
    return m


class Correlator:
    """Correlate ``(H, W)`` planes with a stack of odd-sized filters."""

    def __init__(self, taps, shape: tuple[int, int], boundary: str = "periodic"):
        taps = np.asarray(taps, dtype=np.float64)
        if taps.ndim == 2:
            taps = taps[None]
        if taps.ndim != 3 or taps.shape[1] % 2 == 0 or taps.shape[2] % 2 == 0:
            raise ValueError(f"filters must be (count, odd, odd), got {taps.shape}")
        check_boundary(boundary)
        self.taps = taps
        self.count = taps.shape[0]
        self.shape = (int(shape[0]), int(shape[1]))
        self.boundary = boundary
        h, w = self.shape
        self.rh, self.rw = taps.shape[1] // 2, taps.shape[2] // 2
        self.pshape = (h + 2 * self.rh, w + 2 * self.rw)
        self._rows = boundary_index(h, self.rh, boundary)
        self._cols = boundary_index(w, self.rw, boundary)
        self._er = _one_hot(self._rows, h)
        self._ec = _one_hot(self._cols, w)
        self._spec = sfft.rfft2(taps, s=self.pshape)
        self._mat = self._matrix() if h * w <= SMALL_PLANE_PIXELS else None

    def _matrix(self) -> np.ndarray:
        """``(count*H*W, H*W)`` matrix of :meth:`forward`, assembled from the index maps."""
        h, w = self.shape
        c, fh, fw = self.taps.shape
        rows = self._rows[np.arange(h)[:, None] + np.arange(fh)[None, :]]  # (h, fh)
        cols = self._cols[np.arange(w)[:, None] + np.arange(fw)[None, :]]  # (w, fw)
        src = rows[:, None, :, None] * w + cols[None, :, None, :]  # (h, w, fh, fw)
        out_idx = np.arange(c * h * w).reshape(c, h, w, 1, 1)
        m = np.zeros((c * h * w, h * w))
        np.add.at(m, (np.broadcast_to(out_idx, (c, h, w, fh, fw)),
                      np.broadcast_to(src, (c, h, w, fh, fw))),
                  np.broadcast_to(self.taps[:, None, None], (c, h, w, fh, fw)))
        return m

    # padding ---------------------------------------------------------------
    def pad(self, x: np.ndarray) -> np.ndarray:
        return x[..., self._rows, :][..., self._cols]

    def pad_adjoint(self, xp: np.ndarray) -> np.ndarray:
        return self._er.T @ xp @ self._ec

    # operator --------------------------------------------------------------
    def _check(self, x):
        if x.shape[-2:] != self.shape:
            raise ValueError(f"plane shape {x.shape[-2:]} does not match operator shape {self.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Return the ``(count, H, W)`` stack of filter responses."""
        self._check(x)
        if self._mat is not None:
            return (self._mat @ x.reshape(-1)).reshape((self.count,) + self.shape)
        xp = sfft.rfft2(self.pad(x))
        out = sfft.irfft2(np.conj(self._spec) * xp, s=self.pshape)
        return out[:, : self.shape[0], : self.shape[1]]

    def adjoint(self, s: np.ndarray) -> np.ndarray:
        """Exact adjoint of :meth:`forward`: a ``(count, H, W)`` stack maps to one plane."""
        if s.shape[0] != self.count:
            raise ValueError(f"stack has {s.shape[0]} maps, operator has {self.count} filters")
        self._check(s)
        if self._mat is not None:
            return (s.reshape(-1) @ self._mat).reshape(self.shape)
        spec = sfft.rfft2(s, s=self.pshape)
        full = sfft.irfft2((self._spec * spec).sum(axis=0), s=self.pshape)
        return self.pad_adjoint(full)

    def taps_grad(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Gradient of ``<s, forward(x)>`` with respect to the filter taps."""
        self._check(x)
        xp = sfft.rfft2(self.pad(x))
        spec = sfft.rfft2(s, s=self.pshape)
        c = sfft.irfft2(np.conj(spec) * xp, s=self.pshape)
        return c[:, : self.taps.shape[1], : self.taps.shape[2]]

    def transfer(self) -> np.ndarray:
        """DFT eigenvalues of each filter's circulant matrix (periodic boundary only)."""
        if self.boundary != "periodic":
            raise ValueError("transfer functions exist only for periodic boundary")
        delta = np.zeros(self.shape)
        delta[0, 0] = 1.0
        return sfft.fft2(self.forward(delta))


class BlurOperator:
    """Convolution with a blur kernel, ``H x = k * x``."""

    def __init__(self, kernel, shape: tuple[int, int], boundary: str = "replicate"):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.shape[0] > shape[0] or kernel.shape[1] > shape[1]:
            raise ValueError(f"kernel {kernel.shape} larger than image {tuple(shape)}")
        self.kernel = kernel
        self._corr = Correlator(kernel[::-1, ::-1][None], shape, boundary)
        self.shape = self._corr.shape
        self.boundary = boundary

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._corr.forward(x)[0]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._corr.adjoint(y[None])

    def transfer(self) -> np.ndarray:
        return self._corr.transfer()[0]


@dataclass(frozen=True)
class FilterBank:
    """Per-stage learned filters, ``taps`` of shape ``(count, 7, 7)``."""

    taps: np.ndarray
    stage_id: int = 0

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 3:
            raise ValueError(f"filter bank taps must be (count, h, w), got {taps.shape}")
        if not np.all(np.isfinite(taps)):
            raise ValueError("filter bank has non-finite taps")
        object.__setattr__(self, "taps", taps)

    @property
    def count(self) -> int:
        return self.taps.shape[0]

    def operator(self, shape, boundary: str) -> Correlator:
        return Correlator(self.taps, shape, boundary)


def apply_filter_bank(bank: FilterBank, x: np.ndarray, boundary: str = "periodic") -> np.ndarray:
    return bank.operator(x.shape, boundary).forward(x)


def apply_filter_bank_adjoint(bank: FilterBank, s: np.ndarray, boundary: str = "periodic") -> np.ndarray:
    return bank.operator(s.shape[-2:], boundary).adjoint(s)


@dataclass
class NormalOperator:
    """``A = sum_i rho_i F_i^T W_p F_i + sum_j rho_j H^T G_j^T W_d G_j H``.

    ``m_p`` (shape ``(N, H, W)``) and ``m_d`` (``(M, H, W)``, or ``(H, W)``
    shared by all data filters) are per-pixel weights; ``None`` means all
    ones.  A weight enters as ``sqrt(w)`` on both the analysis and the
    synthesis side, which keeps ``A`` symmetric PSD.
    ``G`` may be ``None`` for a model without data term.
    """

    F: Correlator
    G: Correlator | None
    H: BlurOperator | None
    rho_reg: np.ndarray
    rho_data: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m_p: np.ndarray | None = None
    m_d: np.ndarray | None = None

    def __post_init__(self):
        self.rho_reg = np.asarray(self.rho_reg, dtype=np.float64).reshape(-1)
        self.rho_data = np.asarray(self.rho_data, dtype=np.float64).reshape(-1)
        if self.rho_reg.shape[0] != self.F.count:
            raise ValueError("rho_reg length must equal the F-bank size")
        if self.G is not None:
            if self.H is None:
                raise ValueError("a data term needs the blur operator")
            if self.rho_data.shape[0] != self.G.count:
                raise ValueError("rho_data length must equal the G-bank size")
        if np.any(self.rho_reg < 0) or np.any(self.rho_data < 0):
            raise ValueError("penalty weights must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.F.shape

    def _reg_weight(self):
        w = self.rho_reg[:, None, None]
        return w if self.m_p is None else w * self.m_p

    def _data_weight(self):
        w = self.rho_data[:, None, None]
        return w if self.m_d is None else w * self.m_d

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.shape:
            raise ValueError(f"image shape {x.shape} does not match operator shape {self.shape}")
        out = self.F.adjoint(self._reg_weight() * self.F.forward(x))
        if self.G is not None:
            gh = self.G.forward(self.H.forward(x))
            out = out + self.H.adjoint(self.G.adjoint(self._data_weight() * gh))
        return out

    __call__ = apply

    def rhs(self, y, v, z, u_reg, u_data) -> np.ndarray:
        """Right-hand side of the x-update for the given splitting variables."""
        if v.shape != u_reg.shape or v.shape[0] != self.F.count:
            raise ValueError("regularisation stacks must be (N, H, W)")
        b = self.F.adjoint(self._reg_weight() * (v - u_reg))
        if self.G is not None:
            if z.shape != u_data.shape or z.shape[0] != self.G.count:
                raise ValueError("data stacks must be (M, H, W)")
            r = self.G.forward(y) - z + u_data
            b = b + self.H.adjoint(self.G.adjoint(self._data_weight() * r))
        return b

    def spectrum(self) -> np.ndarray:
        """Eigenvalues of ``A`` on the 2-D DFT basis (periodic, spatially uniform weights)."""
        wp = 1.0 if self.m_p is None else self.m_p.mean(axis=(-2, -1))
        den = np.tensordot(self.rho_reg * wp, np.abs(self.F.transfer()) ** 2, axes=1)
        if self.G is not None:
            wd = 1.0 if self.m_d is None else self.m_d.mean(axis=(-2, -1))
            g2 = np.tensordot(self.rho_data * wd, np.abs(self.G.transfer()) ** 2, axes=1)
            den = den + g2 * np.abs(self.H.transfer()) ** 2
        return den


def apply_normal(A: NormalOperator, x: np.ndarray) -> np.ndarray:
    return A.apply(x)


def build_rhs(A: NormalOperator, y, v, z, u_reg, u_data) -> np.ndarray:
    return A.rhs(y, v, z, u_reg, u_data)


def materialize_dense(op, h: int, w: int) -> np.ndarray:
    """Dense matrix of a linear map on ``(h, w)`` planes, built column by column.

    Outputs of any shape are flattened in C order, so a map into a
    ``(count, h, w)`` stack yields a ``(count*h*w, h*w)`` matrix.
    """
    n = h * w
    if n > DENSE_MAX_PIXELS:
        raise ValueError(f"dense materialisation limited to {DENSE_MAX_PIXELS} pixels, got {n}")
    cols = []
    e = np.zeros((h, w))
    for i in range(n):
        e.flat[i] = 1.0
        cols.append(np.asarray(op(e), dtype=np.float64).ravel())
        e.flat[i] = 0.0
    return np.stack(cols, axis=1)
