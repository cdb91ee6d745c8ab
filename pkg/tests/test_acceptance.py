"""Exit criteria, one test each.  The terminal summary prints one PASS/FAIL line per criterion."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from _gradcheck import instance, worst_relative_error

from shrinkdeconv.admm import analytic_model, deblur
from shrinkdeconv.cli import nonmonotone_target, run_ablation
from shrinkdeconv.imgproc import add_gaussian_noise, blur, psnr, random_motion_kernel, synthetic_set
from shrinkdeconv.linop import BlurOperator, Correlator, NormalOperator, materialize_dense
from shrinkdeconv.modelio import ModelFormatError, load_model, model_to_bytes, save_model
from shrinkdeconv.shrinkage import fit_to_target, prox_hyper_laplacian, soft_threshold
from shrinkdeconv.train import RunSpec, build_run, evaluate_psnr, loss_and_grad, train
from shrinkdeconv.xsolver import cg_solve, fft_solve

FIXTURES = Path(__file__).parent / "fixtures"


def _adjoint_error(fwd, adj, x, y):
    lhs = np.vdot(fwd(x), y)
    rhs = np.vdot(x, adj(y))
    return abs(lhs - rhs) / (np.linalg.norm(fwd(x)) * np.linalg.norm(y))


def _random_normal(rng, shape, boundary):
    k = rng.random((5, 5))
    k /= k.sum()
    H = BlurOperator(k, shape, boundary)
    F = Correlator(rng.standard_normal((3, 7, 7)), shape, boundary)
    G = Correlator(rng.standard_normal((2, 7, 7)), shape, boundary)
    return NormalOperator(F, G, H, rng.uniform(0.1, 2, 3), rng.uniform(0.1, 2, 2))


@pytest.mark.acceptance(1, "adjoint suite")
def test_ac1_adjoints():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = {"H": 0.0, "F_i": 0.0, "G_j": 0.0, "A": 0.0}
    for trial in range(100):
        boundary = ("periodic", "replicate")[trial % 2]
        shape = tuple(int(s) for s in rng.integers(8, 40, 2))
        A = _random_normal(rng, shape, boundary)
        x = rng.standard_normal(shape)
        worst["H"] = max(worst["H"], _adjoint_error(A.H.forward, A.H.adjoint, x, rng.standard_normal(shape)))
        for name, op in (("F_i", A.F), ("G_j", A.G)):
            for i in range(op.count):
                single = Correlator(op.taps[i], shape, boundary)
                s = rng.standard_normal((1, *shape))
                worst[name] = max(worst[name], _adjoint_error(single.forward, single.adjoint, x, s))
        worst["A"] = max(worst["A"], _adjoint_error(A.apply, A.apply, x, rng.standard_normal(shape)))
    elapsed = time.perf_counter() - t0
    assert max(worst.values()) <= 1e-8, worst
    assert elapsed < 10


@pytest.mark.acceptance(2, "solver oracle")
def test_ac2_solvers():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_cg = 0.0
    for trial in range(30):
        A = _random_normal(rng, (6, 6), ("periodic", "replicate")[trial % 2])
        b = rng.standard_normal((6, 6))
        ref = np.linalg.solve(materialize_dense(A, 6, 6), b.ravel())
        x = cg_solve(A, b, tol=1e-13, max_iter=1000).x.ravel()
        worst_cg = max(worst_cg, np.linalg.norm(x - ref) / np.linalg.norm(ref))
    worst_fft = 0.0
    for _ in range(50):
        shape = tuple(int(s) for s in rng.integers(8, 33, 2))
        A = _random_normal(rng, shape, "periodic")
        b = rng.standard_normal(shape)
        xc = cg_solve(A, b, tol=1e-10, max_iter=5000).x
        worst_fft = max(worst_fft, np.linalg.norm(fft_solve(A, b) - xc) / np.linalg.norm(xc))
    elapsed = time.perf_counter() - t0
    assert worst_cg <= 1e-8
    assert worst_fft <= 1e-6
    assert elapsed < 30


def _grid_prox(a, lam, p, grid, grid_p):
    """Minimise ``(v - a)^2 / 2 + lam v^p`` over ``[0, a]`` on a 1e-6 grid, then Newton-polish."""
    n = int(a / 1e-6) + 1
    obj = 0.5 * (grid[:n] - a) ** 2 + lam * grid_p[:n]
    v = grid[int(np.argmin(obj))]
    if v > 0:
        for _ in range(30):
            g = v - a + lam * p * v ** (p - 1)
            h = 1 + lam * p * (p - 1) * v ** (p - 2)
            if h <= 0:
                break
            v = min(max(v - g / h, 1e-12), a)
    f = lambda u: 0.5 * (u - a) ** 2 + lam * u**p  # noqa: E731
    return v if f(v) < f(0.0) else 0.0


@pytest.mark.acceptance(3, "prox oracle")
def test_ac3_prox():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    grid = np.arange(0, 1.5 + 2e-6, 1e-6)
    worst = 0.0
    for p in (0.5, 2.0 / 3.0):
        grid_p = grid**p
        ts = rng.uniform(-1.5, 1.5, 1000)
        lams = np.exp(rng.uniform(np.log(1e-3), np.log(0.5), 1000))
        ours = prox_hyper_laplacian(ts, lams, p)
        for t, lam, v in zip(ts, lams, ours):
            ref = np.sign(t) * _grid_prox(abs(t), lam, p, grid, grid_p)
            worst = max(worst, abs(v - ref))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-4
    assert elapsed < 30


@pytest.mark.acceptance(4, "Maxout capacity")
def test_ac4_maxout_capacity():
    t0 = time.perf_counter()
    soft = fit_to_target(lambda t: soft_threshold(t, 0.1), pieces=4)
    res = [fit_to_target(nonmonotone_target, pieces=k).max_residual for k in (2, 4, 8)]
    elapsed = time.perf_counter() - t0
    assert soft.max_residual <= 1e-3
    assert res[0] > res[1] > res[2]
    assert elapsed < 10


@pytest.mark.acceptance(5, "gradient suite")
def test_ac5_gradients():
    t0 = time.perf_counter()
    errors = [worst_relative_error(*instance(seed)) for seed in range(20)]
    elapsed = time.perf_counter() - t0
    assert max(errors) <= 1e-3, errors
    assert elapsed < 120


def _fixture_set(seed, n=10, size=96, ksize=17, sigma=0.01):
    rng = np.random.default_rng(seed)
    out = []
    for gt in synthetic_set(n, size, size, seed=seed):
        k = random_motion_kernel(ksize, rng)
        y = add_gaussian_noise(blur(gt, k, "replicate"), sigma, int(rng.integers(0, 2**31 - 1)))
        out.append((gt, k, y))
    return out


@pytest.mark.acceptance(6, "deconvolution efficacy")
def test_ac6_efficacy():
    t0 = time.perf_counter()
    model = analytic_model("hyperlap")
    gains = [psnr(deblur(y, k, model), gt) - psnr(np.clip(y, 0, 1), gt) for gt, k, y in _fixture_set(6)]
    elapsed = time.perf_counter() - t0
    assert np.mean(gains) >= 1.0, gains
    assert elapsed < 300


@pytest.mark.acceptance(7, "ablation direction")
def test_ac7_ablation():
    t0 = time.perf_counter()
    images = [(f"im{i}", g) for i, g in enumerate(synthetic_set(10, 96, 96, seed=7))]
    _, table = run_ablation(images, ("cg", "fft", "fft+edgetaper"), kernel_size=17, sigma=0.01,
                            boundary="replicate", seed=7)
    rows = {r["variant"]: r["psnr"] for r in table}
    elapsed = time.perf_counter() - t0
    assert rows["fft+edgetaper"] >= rows["fft"], rows
    assert rows["cg"] >= rows["fft+edgetaper"], rows
    assert elapsed < 600


@pytest.mark.acceptance(8, "toy training")
def test_ac8_training():
    t0 = time.perf_counter()
    config = json.loads((FIXTURES / "toy_training.json").read_text())
    spec = RunSpec.from_dict(config)
    model, train_set, val_set = build_run(spec)
    assert len(train_set) == 20 and len(val_set) == 10
    first = train(model, train_set, spec.train)
    second = train(model, train_set, spec.train)
    loss0, loss1 = loss_and_grad(model, train_set)[0], loss_and_grad(first.model, train_set)[0]
    gain = evaluate_psnr(first.model, val_set) - evaluate_psnr(model, val_set)
    elapsed = time.perf_counter() - t0
    assert len(first.losses) == 500
    assert loss1 < 0.7 * loss0, loss1 / loss0
    assert gain >= 0.2, gain
    assert first.losses == second.losses
    assert model_to_bytes(first.model) == model_to_bytes(second.model)
    assert elapsed < 900


@pytest.mark.acceptance(9, "serialization")
def test_ac9_serialization(tmp_path):
    from shrinkdeconv.admm import ModelConfig, init_model

    t0 = time.perf_counter()
    models = [init_model(ModelConfig.preset("feather"), seed=0),
              init_model(ModelConfig(T=2, N=3, M=2), seed=1, shrinkage="rbf"),
              analytic_model("hyperlap")]
    for i, m in enumerate(models):
        path = tmp_path / f"m{i}.dsdm"
        save_model(m, path)
        back = load_model(path)
        assert model_to_bytes(back) == path.read_bytes()
        for key, v in m.params().items():
            assert back.params()[key].tobytes() == v.tobytes()
    data = (tmp_path / "m0.dsdm").read_bytes()
    cases = {
        "format": b"JUNK" + data[4:],
        "version": data[:4] + (99).to_bytes(4, "little") + data[8:],
        "truncated": data[: len(data) // 2],
        "checksum": data[:100] + bytes([data[100] ^ 1]) + data[101:],
    }
    for kind, blob in cases.items():
        path = tmp_path / f"bad_{kind}.dsdm"
        path.write_bytes(blob)
        with pytest.raises(ModelFormatError) as exc:
            load_model(path)
        assert exc.value.kind == kind
    bad = models[0].params()
    bad["stages.0.F"] = bad["stages.0.F"].copy()
    bad["stages.0.F"][0, 0, 0] = np.nan
    from shrinkdeconv.modelio import pack_sections

    cfg = {"model": models[0].config.to_dict(),
           "stages": [{"shrink_v": s.shrink_v.config(), "shrink_z": s.shrink_z.config()} for s in models[0].stages]}
    (tmp_path / "nan.dsdm").write_bytes(pack_sections(cfg, bad))
    with pytest.raises(ModelFormatError) as exc:
        load_model(tmp_path / "nan.dsdm")
    assert exc.value.kind == "non-finite parameter"
    assert time.perf_counter() - t0 < 5
