"""Scalar shrinkage functions applied channel-wise to filter-response stacks.

Three families share one interface (``eval``, ``derivative``, ``backward``,
``params``/``with_params``):

* :class:`MaxoutShrinkage` -- difference of two K-piece max-affine units,
  ``f_c(t) = max_j(a1[c,j] t + b1[c,j]) - max_j(a2[c,j] t + b2[c,j])``.
* :class:`RBFShrinkage` -- weighted sum of Gaussian bumps on a fixed grid.
* :class:`AnalyticProx` -- exact proximal maps of fixed penalties.

Input stacks have shape ``(C, ...)``; channel ``c`` uses row ``c`` of the
parameters.  Learned shrinkages ignore the penalty weight ``rho``; analytic
ones scale their threshold by ``1 / rho``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PIECES = 4
HYPER_LAPLACIAN_EXPONENTS = (0.5, 2.0 / 3.0)


def _bcast(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Reshape a per-channel ``(C, ...)`` parameter to broadcast against ``t``."""
    return p.reshape(p.shape + (1,) * (t.ndim - 1))


class Shrinkage:
    kind = "base"
    learnable = False

    def eval(self, t, rho=None):
        raise NotImplementedError

    __call__ = eval

    def derivative(self, t, rho=None):
        raise NotImplementedError

    def backward(self, t, g):
        """Return ``(dL/dt, {name: dL/dparam})`` given upstream gradient ``g``."""
        return g * self.derivative(t), {}

    def params(self) -> dict:
        return {}

    def with_params(self, params: dict) -> "Shrinkage":
        return self

    def config(self) -> dict:
        return {"kind": self.kind}


# ---------------------------------------------------------------------------
# Maxout


class MaxoutShrinkage(Shrinkage):
    kind = "maxout"
    learnable = True

    def __init__(self, a1, b1, a2, b2):
        arrs = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in (a1, b1, a2, b2)]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ValueError("all Maxout parameter arrays must share shape (channels, K)")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("non-finite Maxout parameters")
        self.a1, self.b1, self.a2, self.b2 = arrs

    @property
    def channels(self) -> int:
        return self.a1.shape[0]

    @property
    def pieces(self) -> int:
        return self.a1.shape[1]

    @classmethod
    def identity(cls, channels: int, pieces: int = DEFAULT_PIECES, *, scale: float = 0.1,
                 noise: float = 0.01, rng=None) -> "MaxoutShrinkage":
        """Near-identity initialisation with every piece active somewhere.

        Both units share a convex hinge profile with knots spread over
        ``[-scale, scale]``; unit 1 adds ``t`` to it, so the difference is the
        identity.  Unit-1 slopes are then perturbed by ``N(0, noise^2)``.
        Intercepts are equal across units, hence ``f(0) = 0`` exactly.
        """
        rng = np.random.default_rng(rng)
        knots = np.linspace(-scale, scale, pieces - 1) if pieces > 1 else np.zeros(0)
        slopes = np.linspace(-1.0, 1.0, pieces) if pieces > 1 else np.zeros(1)
        inter = np.zeros(pieces)
        for j in range(1, pieces):
            inter[j] = inter[j - 1] - (slopes[j] - slopes[j - 1]) * knots[j - 1]
        a2 = np.tile(slopes, (channels, 1))
        b = np.tile(inter, (channels, 1))
        a1 = a2 + 1.0
        if noise:
            a1 = a1 + noise * rng.standard_normal(a1.shape)
        return cls(a1, b.copy(), a2, b.copy())

    def _unit(self, a, b, t):
        vals = a.reshape(a.shape + (1,) * (t.ndim - 1)) * t[:, None] + b.reshape(b.shape + (1,) * (t.ndim - 1))
        idx = np.argmax(vals, axis=1)  # lowest index wins ties
        return vals, idx

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.shape[0] != self.channels:
            raise ValueError(f"input has {t.shape[0]} channels, shrinkage has {self.channels}")
        return t

    def eval(self, t, rho=None):
        t = self._check(t)
        v1, _ = self._unit(self.a1, self.b1, t)
        v2, _ = self._unit(self.a2, self.b2, t)
        return v1.max(axis=1) - v2.max(axis=1)

    __call__ = eval

    @staticmethod
    def _right_slope(vals, a, t):
        top = vals.max(axis=1, keepdims=True)
        slopes = np.broadcast_to(a.reshape(a.shape + (1,) * (t.ndim - 1)), vals.shape)
        return np.where(vals == top, slopes, -np.inf).max(axis=1)

    def derivative(self, t, rho=None):
        """Almost-everywhere derivative; at a breakpoint the right-hand slope."""
        t = self._check(t)
        v1, _ = self._unit(self.a1, self.b1, t)
        v2, _ = self._unit(self.a2, self.b2, t)
        return self._right_slope(v1, self.a1, t) - self._right_slope(v2, self.a2, t)

    def backward(self, t, g):
        t = self._check(t)
        g = np.asarray(g, dtype=np.float64)
        _, i1 = self._unit(self.a1, self.b1, t)
        _, i2 = self._unit(self.a2, self.b2, t)
        c = np.arange(self.channels).reshape((-1,) + (1,) * (t.ndim - 1))
        dt = g * (self.a1[c, i1] - self.a2[c, i2])
        grads = {name: np.zeros_like(self.a1) for name in ("a1", "b1", "a2", "b2")}
        gt = g * t
        axes = tuple(range(1, t.ndim))
        for j in range(self.pieces):
            m1 = i1 == j
            m2 = i2 == j
            grads["a1"][:, j] = np.where(m1, gt, 0.0).sum(axis=axes)
            grads["b1"][:, j] = np.where(m1, g, 0.0).sum(axis=axes)
            grads["a2"][:, j] = -np.where(m2, gt, 0.0).sum(axis=axes)
            grads["b2"][:, j] = -np.where(m2, g, 0.0).sum(axis=axes)
        return dt, grads

    def margin(self, t):
        """Smallest gap between the top two pieces of either unit, per sample."""
        t = self._check(t)
        out = np.full(t.shape, np.inf)
        if self.pieces < 2:
            return out
        for a, b in ((self.a1, self.b1), (self.a2, self.b2)):
            vals, _ = self._unit(a, b, t)
            part = np.partition(vals, self.pieces - 2, axis=1)
            gap = part[:, -1] - part[:, -2]
            out = np.minimum(out, gap)
        return out

    def breakpoints(self, channel: int = 0, lo: float = -np.inf, hi: float = np.inf) -> np.ndarray:
        """Locations where the active piece of either unit changes."""
        pts = []
        for a, b in ((self.a1[channel], self.b1[channel]), (self.a2[channel], self.b2[channel])):
            pts.extend(_max_affine_breakpoints(a, b))
        pts = np.unique(np.asarray(pts, dtype=np.float64))
        return pts[(pts > lo) & (pts < hi)]

    def params(self):
        return {"a1": self.a1, "b1": self.b1, "a2": self.a2, "b2": self.b2}

    def with_params(self, params):
        return MaxoutShrinkage(params["a1"], params["b1"], params["a2"], params["b2"])

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "pieces": self.pieces}


def _max_affine_breakpoints(a: np.ndarray, b: np.ndarray) -> list[float]:
    """Breakpoints of ``max_j(a_j t + b_j)`` via the upper envelope."""
    order = np.lexsort((b, a))  # slopes ascending, ties by intercept
    a, b = a[order], b[order]
    # keep the highest intercept among equal slopes
    keep = np.append(a[1:] != a[:-1], True)
    a, b = a[keep], b[keep]
    hull: list[int] = []
    xs: list[float] = []
    for j in range(len(a)):
        while hull:
            i = hull[-1]
            x = (b[i] - b[j]) / (a[j] - a[i])
            if xs and x <= xs[-1]:
                hull.pop()
                xs.pop()
                continue
            hull.append(j)
            xs.append(x)
            break
        else:
            hull.append(j)
    return xs


# ---------------------------------------------------------------------------
# Gaussian RBF


class RBFShrinkage(Shrinkage):
    kind = "rbf"
    learnable = True

    def __init__(self, weights, centers, gamma: float):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1)
        self.gamma = float(gamma)
        if self.weights.shape[1] != self.centers.shape[0]:
            raise ValueError("weights must be (channels, n_centers)")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.gamma) or self.gamma <= 0:
            raise ValueError("RBF parameters must be finite with gamma > 0")

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, channels: int, n_centers: int = 63, value_range: float = 1.0,
                 ridge: float = 1e-6) -> "RBFShrinkage":
        """Weights fitted to the identity on ``[-value_range, value_range]``."""
        centers = np.linspace(-value_range, value_range, n_centers)
        spacing = centers[1] - centers[0]
        gamma = 1.0 / (2.0 * spacing**2)
        grid = np.linspace(-value_range, value_range, 8 * n_centers)
        phi = np.exp(-gamma * (grid[:, None] - centers[None]) ** 2)
        w = np.linalg.solve(phi.T @ phi + ridge * np.eye(n_centers), phi.T @ grid)
        return cls(np.tile(w, (channels, 1)), centers, gamma)

    def _phi(self, t):
        return np.exp(-self.gamma * (t[:, None] - _centers_like(self.centers, t)) ** 2)

    def eval(self, t, rho=None):
        t = np.asarray(t, dtype=np.float64)
        return np.einsum("cm...,cm->c...", self._phi(t), self.weights)

    __call__ = eval

    def derivative(self, t, rho=None):
        t = np.asarray(t, dtype=np.float64)
        d = t[:, None] - _centers_like(self.centers, t)
        return np.einsum("cm...,cm->c...", -2.0 * self.gamma * d * self._phi(t), self.weights)

    def backward(self, t, g):
        t = np.asarray(t, dtype=np.float64)
        phi = self._phi(t)
        d = t[:, None] - _centers_like(self.centers, t)
        dt = g * np.einsum("cm...,cm->c...", -2.0 * self.gamma * d * phi, self.weights)
        c, m = self.weights.shape
        gw = np.einsum("cmn,cn->cm", phi.reshape(c, m, -1), np.asarray(g, dtype=np.float64).reshape(c, -1))
        return dt, {"weights": gw}

    def params(self):
        return {"weights": self.weights}

    def with_params(self, params):
        return RBFShrinkage(params["weights"], self.centers, self.gamma)

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "centers": self.centers.tolist(),
                "gamma": self.gamma}


def _centers_like(centers, t):
    return centers.reshape((1, -1) + (1,) * (t.ndim - 1))


# ---------------------------------------------------------------------------
# Analytic proximal maps


def soft_threshold(t, lam):
    return np.sign(t) * np.maximum(np.abs(t) - lam, 0.0)


def prox_hyper_laplacian(t, lam, p, iters: int = 60):
    """Global minimiser of ``0.5 (v - t)^2 + lam |v|^p`` for ``0 < p < 1``.

    For ``v > 0`` the stationarity function ``v - |t| + lam p v^(p-1)`` is
    convex, so Newton started at ``|t|`` descends monotonically to its largest
    root.  That root is kept only if it beats ``v = 0``.
    """
    t = np.asarray(t, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), t.shape)
    if np.any(lam <= 0):
        raise ValueError("lam must be positive")
    if not 0 < p < 1:
        raise ValueError("exponent must lie in (0, 1)")
    a = np.abs(t)
    v_min = (lam * p * (1 - p)) ** (1.0 / (2 - p))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        has_root = v_min - a + lam * p * v_min ** (p - 1) <= 0
        v = np.where(has_root, a, v_min)
        for _ in range(iters):
            g = v - a + lam * p * v ** (p - 1)
            dg = 1.0 + lam * p * (p - 1) * v ** (p - 2)
            v = np.maximum(v - g / dg, v_min)
        better = 0.5 * (v - a) ** 2 + lam * v**p < 0.5 * a**2
    keep = has_root & better & (a > 0)
    return np.where(keep, np.sign(t) * v, 0.0)


def _hyper_laplacian_slope(v, lam, p):
    out = np.zeros_like(v)
    nz = v != 0
    av = np.abs(v[nz])
    lam_nz = np.broadcast_to(lam, v.shape)[nz]
    out[nz] = 1.0 / (1.0 + lam_nz * p * (p - 1) * av ** (p - 2))
    return out


class AnalyticProx(Shrinkage):
    """Proximal map of a fixed penalty ``lam * R(v)``.

    ``kind`` is one of ``identity``, ``soft_threshold`` (``R = |v|``),
    ``hyper_laplacian`` (``R = |v|^p``) or ``quadratic`` (``R = v^2 / 2``).
    When ``rho`` is given the effective weight is ``lam / rho``.
    """

    KINDS = ("identity", "soft_threshold", "hyper_laplacian", "quadratic")

    def __init__(self, kind: str = "identity", lam: float = 0.0, p: float | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown analytic prox {kind!r}")
        if kind == "hyper_laplacian" and p is None:
            raise ValueError("hyper_laplacian needs an exponent p")
        if lam < 0:
            raise ValueError("lam must be non-negative")
        self.kind = kind
        self.lam = float(lam)
        self.p = None if p is None else float(p)

    def _lam(self, t, rho):
        if rho is None:
            return self.lam
        rho = np.asarray(rho, dtype=np.float64)
        return self.lam / _bcast(rho, t) if rho.ndim else self.lam / float(rho)

    def eval(self, t, rho=None):
        t = np.asarray(t, dtype=np.float64)
        lam = self._lam(t, rho)
        if self.kind == "identity":
            return t.copy()
        if self.kind == "soft_threshold":
            return soft_threshold(t, lam)
        if self.kind == "quadratic":
            return t / (1.0 + lam)
        if np.all(np.asarray(lam) == 0):
            return t.copy()
        return prox_hyper_laplacian(t, lam, self.p)

    __call__ = eval

    def derivative(self, t, rho=None):
        t = np.asarray(t, dtype=np.float64)
        lam = self._lam(t, rho)
        if self.kind == "identity":
            return np.ones_like(t)
        if self.kind == "soft_threshold":
            return ((t >= lam) | (t < -lam)).astype(np.float64)
        if self.kind == "quadratic":
            return np.broadcast_to(1.0 / (1.0 + lam), t.shape).astype(np.float64)
        return _hyper_laplacian_slope(self.eval(t, rho), lam, self.p)

    def config(self):
        cfg = {"kind": self.kind, "lam": self.lam}
        if self.p is not None:
            cfg["p"] = self.p
        return cfg


def shrinkage_from_config(cfg: dict, arrays: dict | None = None) -> Shrinkage:
    arrays = arrays or {}
    kind = cfg["kind"]
    if kind == "maxout":
        return MaxoutShrinkage(arrays["a1"], arrays["b1"], arrays["a2"], arrays["b2"])
    if kind == "rbf":
        return RBFShrinkage(arrays["weights"], cfg["centers"], cfg["gamma"])
    if kind in AnalyticProx.KINDS:
        return AnalyticProx(kind, cfg.get("lam", 0.0), cfg.get("p"))
    raise ValueError(f"unknown shrinkage kind {kind!r}")


# ---------------------------------------------------------------------------
# Fitting a difference of Maxout units to a scalar target


@dataclass
class MaxoutFit:
    shrinkage: MaxoutShrinkage
    max_residual: float
    rms_residual: float
    iterations: int


def _hinge_design(t, knots):
    cols = [np.ones_like(t), t] + [np.maximum(t - b, 0.0) for b in knots]
    return np.stack(cols, axis=1)


def _greedy_knots(t, y, max_pos, max_neg):
    """Orthogonal matching pursuit over hinge atoms with a per-sign budget."""
    cand = t[1:-1]
    atoms = np.maximum(t[:, None] - cand[None, :], 0.0)
    chosen: list[float] = []
    for _ in range(max_pos + max_neg):
        X = _hinge_design(t, chosen)
        q, _ = np.linalg.qr(X)
        r = y - q @ (q.T @ y)
        if np.sqrt(np.mean(r**2)) < 1e-12:
            break
        perp = atoms - q @ (q.T @ atoms)
        norms = np.einsum("ij,ij->j", perp, perp)
        ok = norms > 1e-12 * len(t)
        score = np.where(ok, (r @ perp) ** 2 / np.where(ok, norms, 1.0), -1.0)
        coef_sign = np.sign(r @ perp)
        coef = np.linalg.lstsq(X, y, rcond=None)[0][2:]
        n_pos = int(np.sum(coef > 0))
        n_neg = int(np.sum(coef < 0))
        if n_pos >= max_pos:
            score[coef_sign > 0] = -1.0
        if n_neg >= max_neg:
            score[coef_sign < 0] = -1.0
        for b in chosen:
            score[np.isclose(cand, b)] = -1.0
        best = int(np.argmax(score))
        if score[best] <= 0:
            break
        chosen.append(float(cand[best]))
    return sorted(chosen)


def _hinge_to_maxout(t, y, knots, pieces):
    """Fit hinge coefficients on ``knots`` and rewrite as two max-affine units."""
    knots = list(knots)
    while True:
        X = _hinge_design(t, knots)
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
        w = coef[2:]
        pos = [(b, c) for b, c in zip(knots, w) if c > 0]
        neg = [(b, -c) for b, c in zip(knots, w) if c < 0]
        if len(pos) <= pieces - 1 and len(neg) <= pieces - 1:
            break
        # over budget: drop the weakest knot of the overfull class and refit
        over = pos if len(pos) > pieces - 1 else neg
        weakest = min(over, key=lambda bc: bc[1])[0]
        knots.remove(weakest)
    c0, c1 = coef[0], coef[1]

    def unit(base_a, base_b, hinges):
        a, b = [base_a], [base_b]
        for knot, weight in sorted(hinges):
            a.append(a[-1] + weight)
            b.append(b[-1] - weight * knot)
        while len(a) < pieces:  # dead duplicates of the first piece
            a.append(a[0])
            b.append(b[0])
        return np.array(a), np.array(b)

    a1, b1 = unit(c1, c0, pos)
    a2, b2 = unit(0.0, 0.0, neg)
    return a1, b1, a2, b2


def _maxout_eval_1d(theta, t, K):
    a1, b1, a2, b2 = theta.reshape(4, K)
    v1 = a1[None] * t[:, None] + b1[None]
    v2 = a2[None] * t[:, None] + b2[None]
    i1 = np.argmax(v1, axis=1)
    i2 = np.argmax(v2, axis=1)
    rows = np.arange(len(t))
    return v1[rows, i1] - v2[rows, i2], i1, i2


def _refine(theta, t, y, K, max_iter=300):
    """Alternate piece assignment and damped per-piece linear regression.

    With the active pieces fixed the model is linear in all slopes and
    intercepts; each sweep solves the regularised least-squares problem for
    that assignment, reassigns by argmax, and adapts the damping so the true
    squared error never increases.
    """
    n = len(t)
    f, i1, i2 = _maxout_eval_1d(theta, t, K)
    sse = float(np.sum((f - y) ** 2))
    mu = 1e-6 * n
    it = 0
    for it in range(1, max_iter + 1):
        J = np.zeros((n, 4 * K))
        rows = np.arange(n)
        J[rows, i1] = t
        J[rows, K + i1] = 1.0
        J[rows, 2 * K + i2] = -t
        J[rows, 3 * K + i2] = -1.0
        JtJ = J.T @ J
        Jty = J.T @ y
        improved = False
        while mu < 1e12 * n:
            cand = np.linalg.solve(JtJ + mu * np.eye(4 * K), Jty + mu * theta)
            fc, c1, c2 = _maxout_eval_1d(cand, t, K)
            sse_c = float(np.sum((fc - y) ** 2))
            if sse_c < sse:
                improved = sse - sse_c > 1e-15 * max(sse, 1e-300)
                theta, sse, i1, i2 = cand, sse_c, c1, c2
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 4.0
        if not improved or sse < 1e-28:
            break
    return theta, sse, it


def fit_to_target(target, pieces: int = DEFAULT_PIECES, interval=(-1.0, 1.0), grid: int = 1001) -> MaxoutFit:
    """Least-squares fit of a single-channel difference-of-Maxout function.

    Knots are seeded by greedy hinge selection (at most ``pieces - 1`` convex
    and ``pieces - 1`` concave kinks), converted to two max-affine units and
    polished by alternating assignment/regression.
    """
    if pieces < 2:
        raise ValueError("need at least two pieces per unit")
    if grid < 10 * pieces:
        raise ValueError("grid must have at least 10 points per piece")
    t = np.linspace(interval[0], interval[1], grid)
    y = np.asarray(target(t), dtype=np.float64)
    if y.shape != t.shape or not np.all(np.isfinite(y)):
        raise ValueError("target must return finite values on the fitting grid")

    seeds = []
    seeds.append(_greedy_knots(t, y, pieces - 1, pieces - 1))
    uniform = np.linspace(interval[0], interval[1], 2 * pieces)[1:-1]
    seeds.append(list(uniform))
    curv = np.abs(np.diff(y, 2))
    top = np.argsort(curv)[::-1][: 2 * pieces - 2]
    seeds.append(sorted(float(t[i + 1]) for i in top))

    best = None
    for knots in seeds:
        theta0 = np.concatenate(_hinge_to_maxout(t, y, knots, pieces))
        theta, sse, it = _refine(theta0, t, y, pieces)
        if best is None or sse < best[1]:
            best = (theta, sse, it)
    theta, sse, it = best
    a1, b1, a2, b2 = theta.reshape(4, pieces)
    f, _, _ = _maxout_eval_1d(theta, t, pieces)
    resid = f - y
    shrink = MaxoutShrinkage(a1[None], b1[None], a2[None], b2[None])
    return MaxoutFit(shrink, float(np.max(np.abs(resid))), float(np.sqrt(np.mean(resid**2))), it)
