"""Unrolled multi-stage ADMM for the split model

    min  sum_i R_i(v_i) + sum_j R_j(z_j)
    s.t. F_i x = v_i,   G_j (y - H x) = z_j

in scaled form.  One stage performs, in order::

    v   <- shrink_v(F x + u_reg)
    z   <- shrink_z(G (y - H x) + u_data)
    x   <- A^{-1} b          (CG or FFT, see xsolver)
    u_reg  <- u_reg  + F x - v
    u_data <- u_data + G (y - H x) - z

Every stage owns its own filters, shrinkages and penalty weights.  Images are
processed plane by plane; colour channels share the model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .imgproc.degrade import KernelError, check_boundary, edgetaper, validate_kernel
from .linop import FILTER_SIZE, BlurOperator, Correlator, FilterBank, NormalOperator
from .shrinkage import DEFAULT_PIECES, AnalyticProx, MaxoutShrinkage, RBFShrinkage, Shrinkage
from .xsolver import SolverConfig, SolverError, cg_solve, estimate_noise_map, fft_solve, irls_weights

RHO_MIN, RHO_MAX = 1e-6, 1e6
NOISE_REF_SIGMA = 0.01

PRESETS = {
    "feather": (2, 24),
    "light": (3, 24),
    "heavy": (3, 49),
    "full": (4, 49),
}


@dataclass(frozen=True)
class ModelConfig:
    """Sizing and solver options.

    ``boundary`` describes the observation.  With ``solver="fft"`` the
    operators are periodic and, unless ``boundary`` is already periodic, the
    input is edge-tapered first (``edgetaper=False`` disables that).
    ``noise_adaptive`` scales the data weights per pixel by the estimated
    noise precision relative to 1% noise.  ``irls_p`` enables IRLS
    reweighting of the regularisation term for a ``|.|^p`` prior.
    """

    T: int = 2
    N: int = 24
    M: int = 24
    solver: str = "cg"
    boundary: str = "replicate"
    noise_adaptive: bool = False
    edgetaper: bool = True
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    irls_p: float | None = None

    def __post_init__(self):
        if self.T < 1 or self.N < 1 or self.M < 0:
            raise ValueError("need T >= 1, N >= 1 and M >= 0")
        check_boundary(self.boundary)
        SolverConfig(self.solver, self.cg_tol, self.cg_max_iter)
        if self.irls_p is not None and not 0 < self.irls_p <= 2:
            raise ValueError("irls_p must lie in (0, 2]")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            T, n = PRESETS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(T=T, N=n, M=n, **overrides)

    @property
    def operator_boundary(self) -> str:
        return "periodic" if self.solver == "fft" else self.boundary

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(self.solver, self.cg_tol, self.cg_max_iter)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class StageParams:
    F: FilterBank
    G: FilterBank | None
    shrink_v: Shrinkage
    shrink_z: Shrinkage | None
    rho_reg: np.ndarray
    rho_data: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.rho_reg = np.asarray(self.rho_reg, dtype=np.float64).reshape(-1)
        self.rho_data = np.asarray(self.rho_data, dtype=np.float64).reshape(-1)
        if self.rho_reg.shape[0] != self.F.count:
            raise ValueError("rho_reg must have one entry per F filter")
        if self.G is None:
            if self.rho_data.size:
                raise ValueError("rho_data given without a G bank")
        else:
            if self.rho_data.shape[0] != self.G.count:
                raise ValueError("rho_data must have one entry per G filter")
            if self.shrink_z is None:
                raise ValueError("a G bank needs a data shrinkage")
        for name in ("rho_reg", "rho_data"):
            r = getattr(self, name)
            if not np.all(np.isfinite(r)) or np.any(r <= 0):
                raise ValueError(f"{name} must be finite and positive")
        for shrink, bank in ((self.shrink_v, self.F), (self.shrink_z, self.G)):
            ch = getattr(shrink, "channels", None)
            if bank is not None and ch is not None and ch != bank.count:
                raise ValueError("shrinkage channel count must match its filter bank")

    @property
    def has_data_term(self) -> bool:
        return self.G is not None

    def clamped(self) -> "StageParams":
        return replace(self, rho_reg=np.clip(self.rho_reg, RHO_MIN, RHO_MAX),
                       rho_data=np.clip(self.rho_data, RHO_MIN, RHO_MAX))

    # flat parameter access -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = {"F": self.F.taps, "rho_reg": self.rho_reg}
        if self.G is not None:
            out["G"] = self.G.taps
            out["rho_data"] = self.rho_data
            out.update({f"shrink_z.{k}": v for k, v in self.shrink_z.params().items()})
        out.update({f"shrink_v.{k}": v for k, v in self.shrink_v.params().items()})
        return out

    def with_params(self, p: dict[str, np.ndarray]) -> "StageParams":
        sv = self.shrink_v.with_params({k[9:]: v for k, v in p.items() if k.startswith("shrink_v.")})
        G = sz = None
        if self.G is not None:
            G = FilterBank(p["G"], self.G.stage_id)
            sz = self.shrink_z.with_params({k[9:]: v for k, v in p.items() if k.startswith("shrink_z.")})
        return StageParams(FilterBank(p["F"], self.F.stage_id), G, sv, sz, p["rho_reg"],
                           p["rho_data"] if self.G is not None else np.zeros(0))


@dataclass
class Model:
    config: ModelConfig
    stages: list[StageParams]

    def __post_init__(self):
        if len(self.stages) != self.config.T:
            raise ValueError(f"config says T={self.config.T} but {len(self.stages)} stages given")

    def params(self) -> dict[str, np.ndarray]:
        return {f"stages.{t}.{k}": v for t, st in enumerate(self.stages) for k, v in st.params().items()}

    def with_params(self, p: dict[str, np.ndarray]) -> "Model":
        stages = []
        for t, st in enumerate(self.stages):
            prefix = f"stages.{t}."
            stages.append(st.with_params({k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}))
        return Model(self.config, stages)

    def clamped(self) -> "Model":
        return Model(self.config, [st.clamped() for st in self.stages])

    @property
    def learnable(self) -> bool:
        return all(st.shrink_v.learnable and (st.shrink_z is None or st.shrink_z.learnable)
                   for st in self.stages)


@dataclass
class AdmmState:
    x: np.ndarray
    v: np.ndarray
    u_reg: np.ndarray
    z: np.ndarray
    u_data: np.ndarray

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.x, self.v, self.u_reg, self.z, self.u_data))


@dataclass
class StageRecord:
    """Intermediate values of one stage, kept for reverse accumulation."""

    state_in: AdmmState
    state_out: AdmmState
    a: np.ndarray          # F x + u_reg
    c: np.ndarray          # G (y - H x) + u_data
    iterations: int


class StageContext:
    """Operators of one stage bound to an image shape."""

    def __init__(self, params: StageParams, H: BlurOperator, boundary: str):
        self.params = params
        self.H = H
        shape = H.shape
        self.F = Correlator(params.F.taps, shape, boundary)
        self.G = Correlator(params.G.taps, shape, boundary) if params.G is not None else None

    def normal(self, m_p=None, m_d=None) -> NormalOperator:
        p = self.params
        return NormalOperator(self.F, self.G, self.H, p.rho_reg, p.rho_data, m_p, m_d)

    def data_residual(self, y, x):
        return self.G.forward(y - self.H.forward(x))


def init_state(y: np.ndarray, params: StageParams, H: BlurOperator, boundary: str | None = None) -> AdmmState:
    boundary = boundary or H.boundary
    ctx = StageContext(params, H, boundary)
    x = np.array(y, dtype=np.float64)
    v = ctx.F.forward(x)
    if ctx.G is not None:
        z = ctx.data_residual(y, x)
    else:
        z = np.zeros((0,) + x.shape)
    return AdmmState(x, v, np.zeros_like(v), z, np.zeros_like(z))


def run_stage(state: AdmmState, y: np.ndarray, H: BlurOperator, params: StageParams,
              solver: SolverConfig, *, boundary: str | None = None, m_d=None, irls_p=None,
              stage: int | None = None, record: bool = False):
    """Advance the ADMM state by one stage.

    Returns the new state, or ``(state, StageRecord)`` when ``record`` is set.
    Solver failures are re-raised with the stage index attached.
    """
    boundary = boundary or H.boundary
    ctx = StageContext(params, H, boundary)
    fx = ctx.F.forward(state.x)
    a = fx + state.u_reg
    v = params.shrink_v.eval(a, params.rho_reg)
    if ctx.G is not None:
        c = ctx.data_residual(y, state.x) + state.u_data
        z = params.shrink_z.eval(c, params.rho_data)
    else:
        c = z = np.zeros((0,) + state.x.shape)
    m_p = None
    if irls_p is not None:
        w = irls_weights(fx, irls_p)
        m_p = w / w.mean(axis=(1, 2), keepdims=True)
    A = ctx.normal(m_p, m_d)
    b = A.rhs(y, v, z, state.u_reg, state.u_data)
    try:
        if solver.kind == "fft":
            x, iters = fft_solve(A, b), 0
        else:
            x, iters, _ = cg_solve(A, b, state.x, solver.tol, solver.max_iter)
    except SolverError as err:
        if stage is None:
            raise
        raise err.with_stage(stage) from err
    u_reg = state.u_reg + ctx.F.forward(x) - v
    if ctx.G is not None:
        u_data = state.u_data + ctx.data_residual(y, x) - z
    else:
        u_data = state.u_data
    new = AdmmState(x, v, u_reg, z, u_data)
    if not new.is_finite():
        raise SolverError("non-finite ADMM state", stage=stage)
    if record:
        return new, StageRecord(state, new, a, c, iters)
    return new


@dataclass
class DeblurStats:
    stages: int
    cg_iterations: list[int]
    seconds: float


def _prepare(y: np.ndarray, k: np.ndarray, config: ModelConfig):
    """Taper the observation if needed and build the blur operator."""
    if k.shape[0] > y.shape[0] or k.shape[1] > y.shape[1]:
        raise KernelError(f"kernel {k.shape} larger than image {y.shape}")
    if config.solver == "fft" and config.boundary != "periodic" and config.edgetaper:
        y = edgetaper(y, k)
    H = BlurOperator(k, y.shape, config.operator_boundary)
    m_d = None
    if config.noise_adaptive:
        m_d = np.minimum(estimate_noise_map(y) * NOISE_REF_SIGMA**2, 1.0)
    return y, H, m_d


def run_pipeline(y: np.ndarray, k: np.ndarray, model: Model, record: bool = False):
    """Run all stages on one plane.  Returns ``(x_T, records or iteration counts)``."""
    cfg = model.config
    y, H, m_d = _prepare(np.asarray(y, dtype=np.float64), k, cfg)
    boundary = cfg.operator_boundary
    state = init_state(y, model.stages[0], H, boundary)
    out = []
    for t, params in enumerate(model.stages):
        res = run_stage(state, y, H, params, cfg.solver_config, boundary=boundary, m_d=m_d,
                        irls_p=cfg.irls_p, stage=t, record=record)
        if record:
            state, rec = res
            out.append(rec)
        else:
            state = res
            out.append(None)
    return state.x, out


def deblur(y, k, model: Model, return_stats: bool = False):
    """Restore ``y`` (``(H, W)`` or ``(H, W, C)``) blurred by ``k``; output clipped to [0, 1]."""
    t0 = time.perf_counter()
    y = np.asarray(y, dtype=np.float64)
    k = validate_kernel(k)
    planes = [y] if y.ndim == 2 else [y[..., c] for c in range(y.shape[2])]
    iters = [0] * model.config.T
    outs = []
    for plane in planes:
        x, recs = run_pipeline(plane, k, model, record=True)
        for t, rec in enumerate(recs):
            iters[t] += rec.iterations
        outs.append(x)
    x = outs[0] if y.ndim == 2 else np.stack(outs, axis=-1)
    x = np.clip(x, 0.0, 1.0)
    if return_stats:
        return x, DeblurStats(model.config.T, iters, time.perf_counter() - t0)
    return x


# ---------------------------------------------------------------------------
# model construction


def embed_filter(f: np.ndarray, size: int = FILTER_SIZE) -> np.ndarray:
    """Centre a small odd-sized filter inside a ``size x size`` array."""
    f = np.asarray(f, dtype=np.float64)
    out = np.zeros((size, size))
    oh, ow = (size - f.shape[0]) // 2, (size - f.shape[1]) // 2
    out[oh:oh + f.shape[0], ow:ow + f.shape[1]] = f
    return out


def gradient_filters(size: int = FILTER_SIZE) -> np.ndarray:
    dx = embed_filter(np.array([[0.0, -1.0, 1.0]]), size)
    dy = embed_filter(np.array([[0.0], [-1.0], [1.0]]), size)
    return np.stack([dx, dy])


def delta_filter(size: int = FILTER_SIZE) -> np.ndarray:
    return embed_filter(np.ones((1, 1)), size)


def dct_basis(size: int = FILTER_SIZE) -> np.ndarray:
    """Orthonormal 2-D DCT-II atoms ordered by total frequency; DC first."""
    n = np.arange(size)
    c = np.where(n == 0, np.sqrt(1.0 / size), np.sqrt(2.0 / size))
    basis1d = c[:, None] * np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * size))
    order = sorted(((u, v) for u in range(size) for v in range(size)), key=lambda uv: (uv[0] + uv[1], uv[0]))
    return np.stack([np.outer(basis1d[u], basis1d[v]) for u, v in order])


def initial_filters(N: int, M: int, size: int = FILTER_SIZE, rng=None):
    """DCT-based starting banks: F takes non-DC atoms (DC last), G starts with a delta."""
    rng = np.random.default_rng(rng)
    atoms = dct_basis(size)
    pool_f = np.concatenate([atoms[1:], atoms[:1]])
    extra = lambda n: 0.1 * rng.standard_normal((n, size, size))  # noqa: E731
    F = pool_f[:N] if N <= len(pool_f) else np.concatenate([pool_f, extra(N - len(pool_f))])
    pool_g = np.concatenate([delta_filter(size)[None], atoms[1:]])
    G = pool_g[:M] if M <= len(pool_g) else np.concatenate([pool_g, extra(M - len(pool_g))])
    return F.copy(), G.copy()


def init_model(config: ModelConfig, seed: int = 0, shrinkage: str = "maxout",
               pieces: int = DEFAULT_PIECES, rho: float = 1.0) -> Model:
    """Learnable model starting near the identity map (output = input)."""
    rng = np.random.default_rng(seed)
    stages = []
    for t in range(config.T):
        F, G = initial_filters(config.N, config.M, rng=rng)
        if shrinkage == "maxout":
            sv = MaxoutShrinkage.identity(config.N, pieces, rng=rng)
            sz = MaxoutShrinkage.identity(config.M, pieces, rng=rng) if config.M else None
        elif shrinkage == "rbf":
            sv = RBFShrinkage.identity(config.N)
            sz = RBFShrinkage.identity(config.M) if config.M else None
        else:
            raise ValueError(f"unknown learnable shrinkage {shrinkage!r}")
        stages.append(StageParams(FilterBank(F, t), FilterBank(G, t) if config.M else None, sv, sz,
                                  np.full(config.N, rho), np.full(config.M, rho)))
    return Model(config, stages)


ANALYTIC_PRIORS = ("identity", "l1", "hyperlap")


def analytic_model(prior: str = "hyperlap", *, stages: int = 10, lam: float = 2e-3, p: float = 2.0 / 3.0,
                   rho0: float = 2e-3, rho_growth: float = 2.0, data_weight: float = 1.0,
                   solver: str = "cg", boundary: str = "replicate", edgetaper: bool = True,
                   cg_tol: float = 1e-6, cg_max_iter: int = 200, noise_adaptive: bool = False) -> Model:
    """Hand-set model: gradient filters with a sparse prior and a quadratic data term.

    ``prior`` selects the gradient shrinkage: ``hyperlap`` (``|.|^p``),
    ``l1`` (soft threshold) or ``identity`` (no prior; the model then returns
    its input).  The regularisation weight grows geometrically over the
    stages (continuation), which stages with separate parameters allow.
    """
    if prior not in ANALYTIC_PRIORS:
        raise ValueError(f"unknown prior {prior!r}; choose from {ANALYTIC_PRIORS}")
    if prior == "identity":
        sv, sz = AnalyticProx("identity"), AnalyticProx("identity")
    elif prior == "l1":
        sv, sz = AnalyticProx("soft_threshold", lam), AnalyticProx("quadratic", data_weight)
    else:
        sv, sz = AnalyticProx("hyper_laplacian", lam, p), AnalyticProx("quadratic", data_weight)
    cfg = ModelConfig(T=stages, N=2, M=1, solver=solver, boundary=boundary, edgetaper=edgetaper,
                      cg_tol=cg_tol, cg_max_iter=cg_max_iter, noise_adaptive=noise_adaptive)
    F = gradient_filters()
    G = delta_filter()[None]
    out = []
    for t in range(stages):
        rho = min(rho0 * rho_growth**t, RHO_MAX)
        out.append(StageParams(FilterBank(F, t), FilterBank(G, t), sv, sz, np.full(2, rho), np.ones(1)))
    return Model(cfg, out)
