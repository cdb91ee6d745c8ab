"""Discriminative training of learned models by reverse accumulation through
the unrolled stages.

The x-update is differentiated with the adjoint-system rule: for
``A(theta) x = b(theta)`` and upstream gradient ``g``, solve ``A lam = g`` (``A``
is symmetric) and use ``dL/dtheta = <lam, db/dtheta - dA/dtheta x>``.  CG
internals are never unrolled.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .admm import (RHO_MAX, RHO_MIN, Model, ModelConfig, StageContext, StageRecord, _prepare, init_model,
                   init_state, run_stage)
from .imgproc.degrade import add_gaussian_noise, blur, check_boundary
from .imgproc.kernels import KERNEL_SIZE_RANGE, random_kernel_size, random_motion_kernel
from .imgproc.metrics import psnr
from .xsolver import cg_solve, fft_solve

log = logging.getLogger(__name__)


class GradientError(FloatingPointError):
    """Non-finite gradient; ``path`` names the offending parameter."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"non-finite gradient for {path}")


class TrainingDiverged(RuntimeError):
    pass


def loss_l1(x, gt) -> float:
    """Mean absolute error."""
    x, gt = np.asarray(x, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {gt.shape}")
    return float(np.mean(np.abs(x - gt)))


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    blurry: np.ndarray
    kernel: np.ndarray
    gt: np.ndarray
    sigma: float
    noise_seed: int
    boundary: str = "replicate"

    def regenerate(self) -> np.ndarray:
        """Recompute the observation from ``gt``, ``kernel`` and the stored seed."""
        return add_gaussian_noise(blur(self.gt, self.kernel, self.boundary), self.sigma, self.noise_seed)


def _crop(img: np.ndarray, size: int | None, rng: np.random.Generator) -> np.ndarray:
    if size is None:
        return img
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {img.shape[:2]} smaller than patch size {size}")
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return img[i:i + size, j:j + size]


def make_dataset(images, n_kernels: int = 1, sigma_range=(0.01, 0.05), seed: int = 0,
                 patch_size: int | None = None, kernel_sizes=KERNEL_SIZE_RANGE,
                 boundary: str = "replicate") -> list[Sample]:
    """Blur every image with ``n_kernels`` random motion kernels and add noise.

    Returns ``len(images) * n_kernels`` samples.  Each sample keeps the seed of
    its noise so that :meth:`Sample.regenerate` reproduces it.
    """
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    if n_kernels < 1:
        raise ValueError("n_kernels must be positive")
    lo, hi = sigma_range
    if not 0 <= lo <= hi:
        raise ValueError("sigma_range must satisfy 0 <= lo <= hi")
    check_boundary(boundary)
    rng = np.random.default_rng(seed)
    out = []
    for img in images:
        for _ in range(n_kernels):
            gt = np.array(_crop(np.asarray(img, dtype=np.float64), patch_size, rng))
            size = random_kernel_size(rng, kernel_sizes)
            size = min(size, 2 * ((min(gt.shape[:2]) - 1) // 2) + 1)
            k = random_motion_kernel(size, rng)
            sigma = float(rng.uniform(lo, hi))
            nseed = int(rng.integers(0, 2**31 - 1))
            blurry = add_gaussian_noise(blur(gt, k, boundary), sigma, nseed)
            out.append(Sample(blurry, k, gt, sigma, nseed, boundary))
    return out


# ---------------------------------------------------------------------------
# reverse accumulation


@dataclass
class Tape:
    """Forward record of one plane: the prepared observation and every stage."""

    model: Model
    y: np.ndarray
    H: object
    records: list[StageRecord]

    @property
    def output(self) -> np.ndarray:
        return self.records[-1].state_out.x

    def replay(self) -> np.ndarray:
        """Re-run every stage from its recorded input state."""
        cfg = self.model.config
        x = None
        for t, (params, rec) in enumerate(zip(self.model.stages, self.records)):
            state = run_stage(rec.state_in, self.y, self.H, params, cfg.solver_config,
                              boundary=cfg.operator_boundary, stage=t)
            x = state.x
        return x


def _check_trainable(model: Model):
    cfg = model.config
    if not model.learnable:
        raise ValueError("only models with learned shrinkages can be trained")
    if cfg.noise_adaptive or cfg.irls_p is not None:
        raise ValueError("training supports neither noise-adaptive nor IRLS weighting")


def forward(model: Model, blurry: np.ndarray, kernel: np.ndarray) -> Tape:
    cfg = model.config
    y, H, _ = _prepare(np.asarray(blurry, dtype=np.float64), kernel, cfg)
    boundary = cfg.operator_boundary
    state = init_state(y, model.stages[0], H, boundary)
    records = []
    for t, params in enumerate(model.stages):
        state, rec = run_stage(state, y, H, params, cfg.solver_config, boundary=boundary, stage=t, record=True)
        records.append(rec)
    return Tape(model, y, H, records)


def _solve_adjoint(A, g, cfg: ModelConfig):
    if cfg.solver == "fft":
        return fft_solve(A, g)
    return cg_solve(A, g, None, cfg.cg_tol, cfg.cg_max_iter).x


def _stage_backward(ctx: StageContext, rec: StageRecord, y, gx1, gu1, gw1, cfg: ModelConfig):
    """Adjoint of one stage.  Returns input adjoints and a parameter-gradient dict."""
    p = ctx.params
    F, G, H = ctx.F, ctx.G, ctx.H
    s0, s1 = rec.state_in, rec.state_out
    x0, x1 = s0.x, s1.x
    rho_r, rho_d = p.rho_reg, p.rho_data
    col = lambda r: r[:, None, None]  # noqa: E731
    tg = lambda op, x, s: op.taps_grad(x, s)  # noqa: E731
    grads = {}

    gx1 = gx1.copy()
    # u' = u + F x' - v
    gx1 += F.adjoint(gu1)
    gF = tg(F, x1, gu1)
    gv = -gu1
    gu0 = gu1.copy()
    if G is not None:
        # w' = w + G (y - H x') - z
        gx1 -= H.adjoint(G.adjoint(gw1))
        gG = tg(G, y - H.forward(x1), gw1)
        gz = -gw1
        gw0 = gw1.copy()

    # x' = A^{-1} b
    A = ctx.normal()
    lam = _solve_adjoint(A, gx1, cfg)
    Fl, Fx1 = F.forward(lam), F.forward(x1)
    dv = s1.v - s0.u_reg
    grads["rho_reg"] = np.sum(Fl * (dv - Fx1), axis=(1, 2))
    gF += col(rho_r) * (tg(F, lam, dv - Fx1) - tg(F, x1, Fl))
    gv += col(rho_r) * Fl
    gu0 -= col(rho_r) * Fl
    if G is not None:
        Hl, Hx1 = H.forward(lam), H.forward(x1)
        GHl, GHx1 = G.forward(Hl), G.forward(Hx1)
        r = G.forward(y) - s1.z + s0.u_data
        grads["rho_data"] = np.sum(GHl * (r - GHx1), axis=(1, 2))
        gG += col(rho_d) * (tg(G, Hl, r) + tg(G, y, GHl) - tg(G, Hl, GHx1) - tg(G, Hx1, GHl))
        gz -= col(rho_d) * GHl
        gw0 += col(rho_d) * GHl

        # z = S_z(c), c = G (y - H x) + w
        gc, gsz = p.shrink_z.backward(rec.c, gz)
        grads.update({f"shrink_z.{k}": v for k, v in gsz.items()})
        gw0 += gc
        gx0 = -H.adjoint(G.adjoint(gc))
        gG += tg(G, y - H.forward(x0), gc)
        grads["G"] = gG
    else:
        gx0 = np.zeros_like(x0)
        gw0 = np.zeros_like(s0.u_data)

    # v = S_v(a), a = F x + u
    ga, gsv = p.shrink_v.backward(rec.a, gv)
    grads.update({f"shrink_v.{k}": v for k, v in gsv.items()})
    gu0 += ga
    gx0 += F.adjoint(ga)
    gF += tg(F, x0, ga)
    grads["F"] = gF
    return gx0, gu0, gw0, grads


def backward(tape: Tape, gx: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``<gx, x_T>`` with respect to every model parameter."""
    model = tape.model
    cfg = model.config
    boundary = cfg.operator_boundary
    grads = {}
    last = tape.records[-1].state_out
    gu = np.zeros_like(last.u_reg)
    gw = np.zeros_like(last.u_data)
    for t in reversed(range(cfg.T)):
        ctx = StageContext(model.stages[t], tape.H, boundary)
        gx, gu, gw, g = _stage_backward(ctx, tape.records[t], tape.y, gx, gu, gw, cfg)
        grads.update({f"stages.{t}.{k}": v for k, v in g.items()})
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(path)
    return grads


def _planes(a: np.ndarray):
    return [a] if a.ndim == 2 else [a[..., c] for c in range(a.shape[2])]


def loss_and_grad(model: Model, batch, loss_scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-sample L1 loss of the unclipped output and its parameter gradients.

    ``batch`` is a sequence of :class:`Sample` (or ``(blurry, kernel, gt)``
    tuples).  Per-sample gradients are summed in batch order.
    """
    _check_trainable(model)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in model.params().items()}
    for item in batch:
        blurry, kernel, gt = (item.blurry, item.kernel, item.gt) if isinstance(item, Sample) else item[:3]
        bp, gp = _planes(np.asarray(blurry, dtype=np.float64)), _planes(np.asarray(gt, dtype=np.float64))
        n = sum(g.size for g in gp)
        for yb, g_t in zip(bp, gp):
            tape = forward(model, yb, kernel)
            diff = tape.output - g_t
            total += loss_scale * float(np.abs(diff).sum()) / n
            for k, v in backward(tape, loss_scale * np.sign(diff) / n).items():
                acc[k] += v
    scale = 1.0 / len(batch)
    return total * scale, {k: v * scale for k, v in acc.items()}


def grad(model: Model, batch, loss_scale: float = 1.0) -> dict[str, np.ndarray]:
    return loss_and_grad(model, batch, loss_scale)[1]


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    """Options for :func:`train`.

    The learning rate follows a cosine decay from ``lr`` towards ``lr_min`` over
    each half of the run; at the midpoint it resets to ``lr * reset_factor``.
    """

    steps: int = 500
    batch_size: int = 4
    patch_size: int = 64
    lr: float = 1e-3
    lr_min: float = 1e-5
    reset_factor: float = 0.5
    seed: int = 0
    cg_max_iter: int = 25
    cg_tol: float = 1e-6
    val_every: int = 50
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1 or self.patch_size < 1 or self.cg_max_iter < 1 or self.val_every < 1:
            raise ValueError("sizes must be positive")
        if not (self.lr > 0 and self.lr_min > 0 and self.reset_factor > 0):
            raise ValueError("learning rates must be strictly positive")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be positive")

    def learning_rate(self, step: int) -> float:
        half = max(self.steps // 2, 1)
        if step < half:
            start, frac = self.lr, step / half
        else:
            start, frac = self.lr * self.reset_factor, (step - half) / max(self.steps - half, 1)
        if start <= self.lr_min:
            return float(start)
        return float(self.lr_min + 0.5 * (start - self.lr_min) * (1.0 + math.cos(math.pi * frac)))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [m["loss"] for m in self.metrics]


def evaluate_psnr(model: Model, samples) -> float:
    """Mean PSNR of the clipped restorations."""
    from .admm import deblur

    vals = [psnr(deblur(s.blurry, s.kernel, model), s.gt, 1.0) for s in samples]
    return float(np.mean(vals))


def train(model: Model, dataset, cfg: TrainConfig, val_set=None, callback=None) -> TrainResult:
    """Adam on the mean L1 loss; deterministic given ``cfg.seed``.

    Each metrics row holds ``step``, ``loss`` (of the batch before the update),
    ``lr`` and ``val_psnr`` (NaN between validation points).
    """
    _check_trainable(model)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    model = Model(replace_solver(model.config, cfg), model.stages)
    t0 = time.perf_counter()
    result = TrainResult(model)
    if cfg.steps == 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params())
    order = np.array([], dtype=int)
    initial = None
    bad = 0
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        loss, grads = loss_and_grad(model, [dataset[i] for i in idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        initial = loss if initial is None else initial
        bad = bad + 1 if loss > cfg.divergence_factor * initial else 0
        if bad >= cfg.divergence_patience:
            raise TrainingDiverged(f"loss above {cfg.divergence_factor}x initial for {bad} steps")
        lr = cfg.learning_rate(step)
        new = opt.step(model.params(), grads, lr)
        new = {k: np.clip(v, RHO_MIN, RHO_MAX) if k.endswith(("rho_reg", "rho_data")) else v
               for k, v in new.items()}
        model = model.with_params(new)
        row = {"step": step, "loss": loss, "lr": lr, "val_psnr": float("nan")}
        if val_set and ((step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps):
            row["val_psnr"] = evaluate_psnr(model, val_set)
        result.metrics.append(row)
        if callback is not None:
            callback(row)
        log.debug("step %d loss %.6f lr %.2e", step, loss, lr)
    result.model = model
    result.seconds = time.perf_counter() - t0
    return result


def replace_solver(config: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    return replace(config, cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "val_psnr"], lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# config-file driven runs


@dataclass
class RunSpec:
    """Everything a JSON training config describes."""

    model: dict
    train: TrainConfig
    data: dict
    output: dict

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        return cls(dict(d.get("model", {})), TrainConfig(**d.get("train", {})), dict(d.get("data", {})),
                   dict(d.get("output", {})))


def build_run(spec: RunSpec):
    """Create the initial model, training set and validation set of a run."""
    from .imgproc.synth import synthetic_set

    m = dict(spec.model)
    preset = m.pop("preset", None)
    shrink = m.pop("shrinkage", "maxout")
    pieces = m.pop("pieces", 4)
    mseed = m.pop("seed", spec.train.seed)
    cfg = replace(ModelConfig.preset(preset), **m) if preset else ModelConfig(**m)
    model = init_model(cfg, seed=mseed, shrinkage=shrink, pieces=pieces)
    d = spec.data
    ps = spec.train.patch_size
    size = d.get("image_size", ps)
    common = dict(n_kernels=d.get("n_kernels", 1), sigma_range=tuple(d.get("sigma_range", (0.01, 0.05))),
                  patch_size=ps, kernel_sizes=tuple(d.get("kernel_sizes", KERNEL_SIZE_RANGE)),
                  boundary=d.get("boundary", cfg.boundary))
    dseed = d.get("seed", spec.train.seed)
    imgs = synthetic_set(d.get("n_train", 20), size, size, seed=dseed)
    train_set = make_dataset(imgs, seed=dseed + 1, **common)
    val_set = []
    if d.get("n_val", 0):
        vimgs = synthetic_set(d["n_val"], size, size, seed=dseed + 1000)
        val_set = make_dataset(vimgs, seed=dseed + 1001, **common)
    return model, train_set, val_set


def run_from_config(config: dict, out_dir) -> TrainResult:
    """Train as described by ``config`` and write model, metrics and config copy to ``out_dir``."""
    from .modelio import save_model

    spec = RunSpec.from_dict(config)
    model, train_set, val_set = build_run(spec)
    res = train(model, train_set, spec.train, val_set)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out / spec.output.get("model", "model.dsdm"))
    write_metrics_csv(out / spec.output.get("metrics", "metrics.csv"), res.metrics)
    (out / "train_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return res


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
