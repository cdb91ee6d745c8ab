import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shrinkdeconv.cli import nonmonotone_target
from shrinkdeconv.shrinkage import (
    AnalyticProx,
    MaxoutShrinkage,
    RBFShrinkage,
    fit_to_target,
    prox_hyper_laplacian,
    shrinkage_from_config,
    soft_threshold,
)


def _brute_prox(t, lam, p):
    """Grid search over [0, |t|] with step 1e-6, then Newton on the stationarity equation."""
    a = abs(t)
    grid = np.linspace(0.0, a, max(int(a / 1e-6), 1) + 1)
    obj = 0.5 * (grid - a) ** 2 + lam * grid**p
    v = grid[np.argmin(obj)]
    if v > 0:
        for _ in range(20):
            g = v - a + lam * p * v ** (p - 1)
            dg = 1 + lam * p * (p - 1) * v ** (p - 2)
            if dg <= 0:
                break
            v = v - g / dg
    return np.sign(t) * v


def _random_maxout(rng, channels=3, pieces=4):
    return MaxoutShrinkage(*(rng.standard_normal((channels, pieces)) for _ in range(4)))


class TestAnalyticProx:
    def test_identity(self, rng):
        t = rng.standard_normal((2, 5, 5))
        np.testing.assert_array_equal(AnalyticProx("identity")(t), t)
        np.testing.assert_array_equal(AnalyticProx("identity").derivative(t), 1.0)

    def test_soft_threshold_values(self):
        f = AnalyticProx("soft_threshold", 0.1)
        assert f(np.array([0.25]))[0] == pytest.approx(0.15, abs=1e-15)
        assert f(np.array([-0.05]))[0] == 0.0

    def test_soft_threshold_derivative(self):
        d = AnalyticProx("soft_threshold", 0.1).derivative(np.array([-0.3, -0.05, 0.0, 0.09, 0.2]))
        np.testing.assert_array_equal(d, [1, 0, 0, 0, 1])

    def test_soft_threshold_lipschitz(self, rng):
        f = AnalyticProx("soft_threshold", 0.1)
        a, b = rng.uniform(-1, 1, 10000), rng.uniform(-1, 1, 10000)
        q = np.abs(f(a) - f(b)) / np.abs(a - b)
        assert q.max() <= 1 + 1e-9

    def test_rho_scales_lambda(self):
        f = AnalyticProx("soft_threshold", 0.2)
        t = np.full((2, 3), 0.5)
        out = f(t, np.array([1.0, 4.0]))
        np.testing.assert_allclose(out[0], 0.3)
        np.testing.assert_allclose(out[1], 0.45)

    def test_quadratic(self):
        f = AnalyticProx("quadratic", 1.0)
        np.testing.assert_allclose(f(np.array([[2.0]]), np.array([1.0])), [[1.0]])

    def test_hyper_laplacian_value(self):
        # v = 0.25 is stationary: 0.25 - 0.3 + 0.05 * 0.5 / sqrt(0.25) = 0
        assert prox_hyper_laplacian(0.3, 0.05, 0.5) == pytest.approx(_brute_prox(0.3, 0.05, 0.5), abs=1e-8)
        assert prox_hyper_laplacian(0.3, 0.05, 0.5) == pytest.approx(0.25, abs=1e-12)

    def test_hyper_laplacian_zero(self):
        assert prox_hyper_laplacian(0.0, 0.1, 2 / 3) == 0.0

    @pytest.mark.parametrize("p", [0.5, 2 / 3])
    def test_dead_zone(self, p):
        lam = 0.05
        # threshold where the nonzero stationary point first beats zero
        ts = np.linspace(0.001, 0.4, 400)
        out = prox_hyper_laplacian(ts, lam, p)
        brute = np.array([_brute_prox(t, lam, p) for t in ts])
        np.testing.assert_allclose(out, brute, atol=1e-6)
        thresh = ts[np.argmax(out > 0)]
        assert np.all(out[ts < thresh] == 0)

    def test_odd(self, rng):
        t = rng.uniform(-2, 2, 1000)
        np.testing.assert_array_equal(prox_hyper_laplacian(-t, 0.1, 0.5), -prox_hyper_laplacian(t, 0.1, 0.5))

    @given(st.floats(-3, 3), st.floats(1e-3, 1.0), st.sampled_from([0.5, 2 / 3]))
    @settings(max_examples=200, deadline=None)
    def test_no_better_point(self, t, lam, p):
        v = float(prox_hyper_laplacian(t, lam, p))
        obj = lambda u: 0.5 * (u - t) ** 2 + lam * abs(u) ** p  # noqa: E731
        probe = np.linspace(-abs(t) - 0.1, abs(t) + 0.1, 2001)
        assert obj(v) <= np.min([obj(u) for u in probe]) + 1e-9

    def test_hyper_laplacian_derivative_fd(self):
        f = AnalyticProx("hyper_laplacian", 0.05, 0.5)
        t = np.array([[0.4, -0.7, 0.9]])
        h = 1e-6
        fd = (f(t + h) - f(t - h)) / (2 * h)
        np.testing.assert_allclose(f.derivative(t), fd, rtol=1e-5)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            AnalyticProx("cubic")
        with pytest.raises(ValueError):
            AnalyticProx("hyper_laplacian", 0.1)
        with pytest.raises(ValueError):
            prox_hyper_laplacian(0.5, 0.1, 1.5)


class TestMaxout:
    def test_eval_matches_definition(self, rng):
        f = _random_maxout(rng)
        t = rng.standard_normal((3, 4, 5))
        out = f(t)
        for c in range(3):
            for v, o in zip(t[c].ravel(), out[c].ravel()):
                ref = max(f.a1[c] * v + f.b1[c]) - max(f.a2[c] * v + f.b2[c])
                assert o == pytest.approx(ref, abs=1e-14)

    def test_soft_threshold_exact(self):
        lam = 0.1
        a1 = np.array([[1.0, 0.0, 0.0, 0.0]])
        b1 = np.array([[-lam, 0.0, 0.0, 0.0]])
        a2 = np.array([[-1.0, 0.0, 0.0, 0.0]])
        b2 = np.array([[-lam, 0.0, 0.0, 0.0]])
        f = MaxoutShrinkage(a1, b1, a2, b2)
        t = np.linspace(-1, 1, 101)[None]
        np.testing.assert_allclose(f(t), soft_threshold(t, lam), atol=1e-15)

    def test_identity_init(self, rng):
        f = MaxoutShrinkage.identity(5, rng=rng, noise=0.0)
        t = rng.uniform(-1, 1, (5, 100))
        np.testing.assert_allclose(f(t), t, atol=1e-14)
        np.testing.assert_array_equal(f(np.zeros((5, 1))), 0.0)

    def test_identity_init_all_pieces_active(self, rng):
        f = MaxoutShrinkage.identity(2, rng=rng)
        t = np.linspace(-1, 1, 2001)[None].repeat(2, 0)
        _, i1 = f._unit(f.a1, f.b1, t)
        assert set(np.unique(i1)) == set(range(f.pieces))
        np.testing.assert_array_equal(f(np.zeros((2, 1))), 0.0)

    def test_breakpoint_count(self, rng):
        f = _random_maxout(rng, channels=4)
        for c in range(4):
            assert len(f.breakpoints(c)) <= 2 * f.pieces - 1

    def test_derivative_fd(self, rng):
        f = _random_maxout(rng)
        t = rng.uniform(-2, 2, (3, 200))
        keep = f.margin(t) > 1e-4
        h = 1e-6
        fd = (f(t + h) - f(t - h)) / (2 * h)
        np.testing.assert_allclose(f.derivative(t)[keep], fd[keep], atol=1e-6)

    def test_derivative_right_slope_at_tie(self):
        f = MaxoutShrinkage([[0.0, 1.0]], [[0.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0]])  # relu
        assert f.derivative(np.array([[0.0]]))[0, 0] == 1.0
        assert f(np.array([[0.0]]))[0, 0] == 0.0

    def test_derivative_integrates_to_eval(self, rng):
        f = _random_maxout(rng, channels=1)
        t = np.linspace(0, 1.5, 30001)
        d = f.derivative(t[None])[0]
        integral = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(t))])
        np.testing.assert_allclose(integral + f(np.zeros((1, 1)))[0, 0], f(t[None])[0], atol=1e-4)

    def test_backward_fd(self, rng):
        f = _random_maxout(rng, channels=2)
        t = rng.uniform(-2, 2, (2, 40))
        t = np.where(f.margin(t) > 1e-3, t, 0.5)
        g = rng.standard_normal(t.shape)
        dt, grads = f.backward(t, g)
        np.testing.assert_allclose(dt, g * f.derivative(t), atol=1e-14)
        h = 1e-6
        for name, arr in f.params().items():
            for idx in [(0, 0), (1, 2), (0, 3)]:
                p, m = dict(f.params()), dict(f.params())
                p[name] = arr.copy()
                p[name][idx] += h
                m[name] = arr.copy()
                m[name][idx] -= h
                fd = (np.vdot(g, f.with_params(p)(t)) - np.vdot(g, f.with_params(m)(t))) / (2 * h)
                assert grads[name][idx] == pytest.approx(fd, abs=1e-6)

    def test_shape_checks(self, rng):
        with pytest.raises(ValueError):
            MaxoutShrinkage(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            _random_maxout(rng, channels=3)(np.zeros((2, 4)))

    def test_config_round_trip(self, rng):
        f = _random_maxout(rng)
        g = shrinkage_from_config(f.config(), f.params())
        t = rng.standard_normal((3, 10))
        np.testing.assert_array_equal(f(t), g(t))


class TestRBF:
    def test_identity_fit(self, rng):
        f = RBFShrinkage.identity(2)
        t = rng.uniform(-0.8, 0.8, (2, 500))
        np.testing.assert_allclose(f(t), t, atol=5e-3)

    def test_eval_definition(self, rng):
        f = RBFShrinkage(rng.standard_normal((1, 63)), np.linspace(-1, 1, 63), 400.0)
        t = np.array([[0.123]])
        ref = np.sum(f.weights[0] * np.exp(-400.0 * (0.123 - f.centers) ** 2))
        assert f(t)[0, 0] == pytest.approx(ref, rel=1e-13)

    def test_backward_fd(self, rng):
        f = RBFShrinkage(rng.standard_normal((2, 63)) * 0.1, np.linspace(-1, 1, 63), 300.0)
        t = rng.uniform(-1, 1, (2, 7, 3))
        g = rng.standard_normal(t.shape)
        dt, grads = f.backward(t, g)
        h = 1e-6
        np.testing.assert_allclose(dt, g * (f(t + h) - f(t - h)) / (2 * h), atol=1e-7)
        w = f.weights.copy()
        w[1, 30] += h
        up = np.vdot(g, RBFShrinkage(w, f.centers, f.gamma)(t))
        w[1, 30] -= 2 * h
        down = np.vdot(g, RBFShrinkage(w, f.centers, f.gamma)(t))
        assert grads["weights"][1, 30] == pytest.approx((up - down) / (2 * h), abs=1e-7)

    def test_config_round_trip(self, rng):
        f = RBFShrinkage.identity(3)
        g = shrinkage_from_config(f.config(), f.params())
        t = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(f(t), g(t))


class TestFit:
    def test_soft_threshold(self):
        fit = fit_to_target(lambda t: soft_threshold(t, 0.1), pieces=4)
        assert fit.max_residual <= 1e-3

    def test_identity(self):
        assert fit_to_target(lambda t: t.copy(), pieces=4).max_residual <= 1e-9

    def test_hard_threshold(self):
        hard = lambda t: np.where(np.abs(t) > 0.2, t, 0.0)  # noqa: E731
        assert fit_to_target(hard, pieces=4).max_residual <= 0.05
        assert fit_to_target(hard, pieces=8).max_residual <= 0.02

    def test_capacity_monotone(self):
        res = [fit_to_target(nonmonotone_target, pieces=k).max_residual for k in (2, 4, 8)]
        assert res[0] > res[1] > res[2]

    def test_fit_evaluates_consistently(self):
        fit = fit_to_target(nonmonotone_target, pieces=4)
        t = np.linspace(-1, 1, 1001)
        assert np.max(np.abs(fit.shrinkage(t[None])[0] - nonmonotone_target(t))) == pytest.approx(fit.max_residual)

    def test_rejects(self):
        with pytest.raises(ValueError):
            fit_to_target(lambda t: t, pieces=4, grid=30)
        with pytest.raises(ValueError):
            fit_to_target(lambda t: np.where(t > 0, np.inf, 0.0), pieces=4)
        with pytest.raises(ValueError):
            fit_to_target(lambda t: t, pieces=1)
