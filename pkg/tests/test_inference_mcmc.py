import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from gpdyn.errors import NonFiniteInit, ShapeMismatch
from gpdyn.inference_mcmc import (
    SampleChain,
    ShallowNet,
    WhitenedResidual,
    best_prior_draw,
    gauss_newton_covariance,
    log_posterior,
    map_estimate,
    posterior_f_band,
    run_chain,
)


class TestShallowNet:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_flatten_round_trip(self, n, L, seed):
        net = ShallowNet(n, L)
        theta = np.random.default_rng(seed).standard_normal(net.n_params)
        np.testing.assert_array_equal(net.flatten(*net.unflatten(theta)), theta)

    def test_explicit_evaluation(self):
        net = ShallowNet(1, 2)
        theta = net.flatten(np.array([[1.0], [2.0]]), np.array([0.0, -1.0]), np.array([0.5, 3.0]))
        x = np.array([[0.3]])
        ref = 0.5 * np.tanh(0.3) + 3.0 * np.tanh(0.6 - 1.0)
        assert net(theta, x)[0] == pytest.approx(ref, rel=1e-14)

    def test_batched_and_pairwise_agree(self, rng):
        net = ShallowNet(2, 4)
        thetas = rng.standard_normal((5, net.n_params))
        x = rng.standard_normal((5, 2))
        full = net(thetas, x)
        assert full.shape == (5, 5)
        np.testing.assert_allclose(net.pairwise(thetas, x), np.diag(full), rtol=1e-12)

    def test_jacobian_matches_finite_difference(self, rng):
        net = ShallowNet(2, 3)
        th, x = rng.standard_normal(net.n_params), rng.standard_normal((7, 2))
        h = 1e-6
        fd = np.stack([(net(th + h * e, x) - net(th - h * e, x)) / (2 * h) for e in np.eye(net.n_params)], axis=1)
        np.testing.assert_allclose(net.jacobian(th, x), fd, rtol=1e-6, atol=1e-9)

    def test_as_system_state_jacobian(self, rng):
        net = ShallowNet(1, 3)
        spec = net.as_system()
        th = rng.standard_normal(net.n_params)
        x = np.array([0.4])
        h = 1e-6
        fd = (spec.rhs(x + h, th) - spec.rhs(x - h, th)) / (2 * h)
        np.testing.assert_allclose(spec.jac(x, th)[..., 0], fd, rtol=1e-6)

    def test_shape_errors(self):
        net = ShallowNet(1, 2)
        with pytest.raises(ShapeMismatch):
            net.unflatten(np.zeros(5))
        with pytest.raises(ShapeMismatch):
            net(np.zeros(6), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            ShallowNet(2, 2).as_system()


class TestLogPosterior:
    def test_closed_form(self):
        net = ShallowNet(1, 1)
        theta = np.array([1.0, 0.0, 2.0])
        x = np.array([[0.5], [1.0]])
        d = np.array([0.0, 1.0])
        r = 2 * np.tanh(x[:, 0]) - d
        R = np.array([[2.0, 0.5], [0.5, 1.0]])
        ref = -0.5 * (r @ R @ r + 0.1 * 5.0)
        assert log_posterior(theta, net, x, R, d, 0.1) == pytest.approx(ref, rel=1e-14)

    def test_shape_checks(self):
        net = ShallowNet(1, 1)
        with pytest.raises(ShapeMismatch):
            log_posterior(np.zeros(4), net, [[0.0]], np.eye(1), [0.0], 1.0)
        with pytest.raises(ShapeMismatch):
            log_posterior(np.zeros(3), net, [[0.0], [1.0]], np.eye(1), [0.0], 1.0)

    def test_whitened_residual_agrees(self, rng):
        net = ShallowNet(1, 3)
        x = rng.standard_normal((10, 1))
        A = rng.standard_normal((10, 10))
        R = A @ A.T + np.eye(10)
        d = rng.standard_normal(10)
        res = WhitenedResidual([(lambda th: net(th, x), R, d)], 0.01, net.n_params,
                               jacobians=[lambda th: net.jacobian(th, x)])
        th = rng.standard_normal(net.n_params)
        assert res.log_posterior(th) == pytest.approx(log_posterior(th, net, x, R, d, 0.01), rel=1e-10)
        h = 1e-6
        fd = np.stack([(res(th + h * e) - res(th - h * e)) / (2 * h) for e in np.eye(net.n_params)], axis=1)
        np.testing.assert_allclose(res.jacobian(th), fd, rtol=1e-5, atol=1e-8)

    def test_support_and_non_finite(self):
        res = WhitenedResidual([(lambda th: np.log(th), np.eye(1), np.zeros(1))], 1.0, 1,
                               support=lambda th: th[0] < 5)
        assert res.log_posterior(np.array([6.0])) == -np.inf
        assert res.log_posterior(np.array([-1.0])) == -np.inf
        assert np.isfinite(res.log_posterior(np.array([1.0])))


class TestMapAndCovariance:
    def test_linear_model_is_exact(self, rng):
        G = rng.standard_normal((30, 3))
        d = G @ np.array([1.0, -2.0, 0.5]) + 0.01 * rng.standard_normal(30)
        res = WhitenedResidual([(lambda th: G @ th, np.eye(30), d)], 0.0, 3, jacobians=[lambda th: G])
        x, J = map_estimate(res, np.zeros(3))
        ref, *_ = np.linalg.lstsq(G, d, rcond=None)
        np.testing.assert_allclose(x, ref, atol=1e-8)
        np.testing.assert_allclose(gauss_newton_covariance(J), np.linalg.inv(G.T @ G), rtol=1e-8)

    def test_rank_deficient(self):
        with pytest.raises(np.linalg.LinAlgError):
            gauss_newton_covariance(np.ones((5, 2)))

    def test_best_prior_draw(self):
        target = lambda th: -np.sum((th - 1.0) ** 2)
        best = best_prior_draw(target, 2, 1.0, draws=50, seed=1)
        cands = np.random.default_rng(1).standard_normal((50, 2))
        np.testing.assert_array_equal(best, cands[np.argmax([target(c) for c in cands])])
        with pytest.raises(NonFiniteInit):
            best_prior_draw(lambda th: -np.inf, 2, 1.0)


class TestChain:
    def test_gaussian_calibration(self):
        target = lambda th: -0.5 * ((th[0] - 1.0) / 2.0) ** 2
        ch = run_chain(np.zeros(1), target, steps=60_000, burn_in=5_000, seed=3, thin=25)
        ks = scipy.stats.kstest(ch.samples[:, 0], "norm", args=(1.0, 2.0))
        assert ks.pvalue > 1e-3
        assert 0.1 < ch.acceptance_rate < 0.5

    def test_correlated_target_with_preconditioning(self):
        C = np.array([[1.0, 0.95], [0.95, 1.0]])
        P = np.linalg.inv(C)
        target = lambda th: -0.5 * th @ P @ th
        ch = run_chain(np.zeros(2), target, steps=40_000, burn_in=5_000, seed=0, thin=10, cov=C)
        np.testing.assert_allclose(ch.covariance, C, atol=0.15)

    def test_deterministic_given_seed(self):
        target = lambda th: -0.5 * th @ th
        a = run_chain(np.zeros(2), target, steps=2000, burn_in=500, seed=9)
        b = run_chain(np.zeros(2), target, steps=2000, burn_in=500, seed=9)
        c = run_chain(np.zeros(2), target, steps=2000, burn_in=500, seed=10)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_tiny_steps_almost_always_accept(self):
        target = lambda th: -0.5 * th @ th
        ch = run_chain(np.zeros(2), target, steps=3000, burn_in=1000, scale=1e-8, adapt=False)
        assert ch.acceptance_rate > 0.99

    def test_sample_count(self):
        ch = run_chain(np.zeros(1), lambda th: -th @ th, steps=1000, burn_in=200, thin=10)
        assert ch.samples.shape == (80, 1) and ch.log_posterior_trace.shape == (80,)

    def test_bad_arguments(self):
        target = lambda th: 0.0
        with pytest.raises(ValueError):
            run_chain(np.zeros(1), target, steps=10, burn_in=10)
        with pytest.raises(ValueError):
            run_chain(np.zeros(1), target, steps=10, burn_in=0, thin=0)
        with pytest.raises(NonFiniteInit):
            run_chain(np.zeros(1), lambda th: -np.inf, steps=10, burn_in=0)

    def test_csv_round_trip(self, tmp_path):
        ch = run_chain(np.zeros(2), lambda th: -th @ th, steps=500, burn_in=100, thin=5)
        ch.param_names = ["e", "p"]
        ch.write(tmp_path / "c.csv", tmp_path / "c.json", extra={"note": 1})
        back = SampleChain.read(tmp_path / "c.csv", tmp_path / "c.json")
        np.testing.assert_array_equal(back.samples, ch.samples)
        assert back.param_names == ["e", "p"] and back.acceptance_rate == ch.acceptance_rate


def test_f_band_matches_direct_evaluation(rng):
    net = ShallowNet(1, 2)
    samples = rng.standard_normal((40, net.n_params))
    ch = SampleChain(samples, 0.3, np.zeros(40), 1.0, 0)
    q = np.linspace(0, 1, 7)[:, None]
    mean, sd = posterior_f_band(ch, net, q)
    vals = net(samples, q)
    np.testing.assert_allclose(mean, vals.mean(axis=0))
    np.testing.assert_allclose(sd, vals.std(axis=0))
