import numpy as np
import pytest

from otmap.density import (
    BayesPosterior,
    bayes_lasso_posterior,
    gaussian_target,
    laplace_prior,
)
from otmap.errors import OtmapError

from _oracles import central_diff


def _all_targets():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + 3 * np.eye(3)
    phi = rng.normal(size=(12, 3))
    y = rng.normal(size=12)
    return {
        "std_gaussian": gaussian_target(np.zeros(3), np.eye(3)),
        "gaussian": gaussian_target(rng.normal(size=3), cov),
        "laplace": laplace_prior(1.3, 3),
        "lasso": bayes_lasso_posterior(y, phi, 0.7, 0.5),
    }


class TestGaussian:
    def test_mode_values(self):
        g = gaussian_target([0.0, 0.0], np.eye(2))
        assert g.grad_log_q(np.zeros(2)) == pytest.approx([0.0, 0.0])
        # drop the additive constant: value relative to the mode
        assert g.log_q(np.array([1.0, 0.0])) - g.log_q(np.zeros(2)) == pytest.approx(-0.5)
        assert g.grad_log_q(np.array([1.0, 0.0])) == pytest.approx([-1.0, 0.0])

    def test_anisotropic_gradient_by_hand(self):
        g = gaussian_target([0.0], [[4.0]])
        assert g.grad_log_q(np.array([2.0])) == pytest.approx([-0.5])

    def test_normalizer_included(self):
        g = gaussian_target([0.0], [[1.0]])
        assert g.log_q(np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_rejects_non_spd(self):
        with pytest.raises(OtmapError):
            gaussian_target([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(OtmapError):
            gaussian_target([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])

    def test_prox_is_exact_minimizer(self):
        rng = np.random.default_rng(5)
        g = gaussian_target(rng.normal(size=2), np.diag([2.0, 0.5]))
        v = rng.normal(size=(6, 2))
        gamma = rng.normal(size=(6, 2))
        rho = 1.7
        p = g.prox(v, gamma, rho)
        for i in range(6):
            f = lambda u: (-g.log_q(u) + 0.5 * rho * np.sum((v[i] - u) ** 2)
                           + gamma[i] @ (u - v[i]))
            assert np.abs(central_diff(f, p[i])).max() < 1e-8


class TestLaplace:
    def test_log_density_at_zero(self):
        lp = laplace_prior(2.0, 1)
        assert lp.log_q(np.zeros(1)) == pytest.approx(0.0)

    def test_log_density_formula(self):
        lp = laplace_prior(1.0, 2)
        got = lp.log_q(np.array([1.0, -1.0]))
        assert got == pytest.approx(2 * np.log(0.5) - 2.0)

    def test_gradient_is_negative_rate_times_sign(self):
        lp = laplace_prior(1.0, 1)
        assert lp.grad_log_q(np.array([3.0])) == pytest.approx([-1.0])
        assert lp.grad_log_q(np.zeros(1)) == pytest.approx([0.0])

    def test_rejects_bad_rate(self):
        with pytest.raises(OtmapError):
            laplace_prior(0.0, 2)

    def test_smoothed_surrogate_is_consistent(self):
        lp = laplace_prior(0.9, 2).smoothed
        rng = np.random.default_rng(1)
        for u in rng.normal(size=(20, 2)):
            g = central_diff(lambda t: lp.log_q(t), u, h=1e-7)
            assert np.abs(lp.grad_log_q(u) - g).max() < 1e-5


class TestBayesLasso:
    def test_scalar_example(self):
        # n=1, phi=[1], y=0, sigma2=1, lam=1, x=2: log q drops by 4 vs x=0
        post = bayes_lasso_posterior([0.0], [[1.0]], 1.0, 1.0)
        assert post.log_q(np.array([2.0])) - post.log_q(np.zeros(1)) == pytest.approx(-4.0)
        assert post.grad_log_q(np.array([2.0])) == pytest.approx([-3.0])

    def test_likelihood_gradient_vanishes_at_least_squares(self):
        rng = np.random.default_rng(4)
        phi = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        x_ls, *_ = np.linalg.lstsq(phi, y, rcond=None)
        post = bayes_lasso_posterior(y, phi, 1.0, 1.0)
        # at the LS point the posterior gradient reduces to the prior part
        expected = -1.0 * np.sign(x_ls)
        assert post.grad_log_q(x_ls) == pytest.approx(expected, abs=1e-9)

    def test_composition_equals_sum_of_parts(self):
        rng = np.random.default_rng(8)
        phi = rng.normal(size=(10, 2))
        y = rng.normal(size=10)
        lam, sigma2 = 0.8, 0.6
        post = bayes_lasso_posterior(y, phi, lam, sigma2)
        prior = laplace_prior(lam, 2)
        for x in rng.normal(size=(20, 2)):
            r = y - phi @ x
            llik = -0.5 * r @ r / sigma2 - 5 * np.log(2 * np.pi * sigma2)
            assert post.log_q(x) == pytest.approx(prior.log_q(x) + llik, abs=1e-12)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(OtmapError):
            bayes_lasso_posterior([0.0, 1.0], [[1.0]], 1.0, 1.0)

    def test_posterior_is_a_bayes_posterior(self):
        post = bayes_lasso_posterior([0.0], [[1.0]], 1.0, 1.0)
        assert isinstance(post, BayesPosterior)
        assert post.prior.dim == 1


class TestSharedInvariants:
    @pytest.mark.parametrize("name", ["std_gaussian", "gaussian", "laplace", "lasso"])
    def test_gradient_matches_finite_differences(self, name):
        den = _all_targets()[name]
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 100:
            u = rng.uniform(-3, 3, size=den.dim)
            if name in ("laplace", "lasso") and np.any(np.abs(u) < 1e-3):
                continue
            g = central_diff(den.log_q, u)
            scale = max(1.0, np.abs(g).max())
            assert np.abs(den.grad_log_q(u) - g).max() / scale < 1e-6
            checked += 1

    @pytest.mark.parametrize("name", ["std_gaussian", "gaussian", "laplace", "lasso"])
    def test_log_concavity_spot_check(self, name):
        den = _all_targets()[name]
        rng = np.random.default_rng(7)
        for _ in range(100):
            u = rng.uniform(-4, 4, size=den.dim)
            v = rng.uniform(-4, 4, size=den.dim)
            for t in (0.25, 0.5, 0.75):
                mid = den.log_q(t * u + (1 - t) * v)
                chord = t * den.log_q(u) + (1 - t) * den.log_q(v)
                assert mid >= chord - 1e-9

    @pytest.mark.parametrize("name", ["std_gaussian", "gaussian", "lasso"])
    def test_hessian_matches_finite_differences(self, name):
        den = _all_targets()[name]
        rng = np.random.default_rng(3)
        u = rng.uniform(-2, 2, size=den.dim)
        H = den.hess_log_q(u) if den.hess_log_q else den.smoothed.hess_log_q(u)
        num = np.column_stack([
            central_diff(lambda w: den.grad_log_q(w)[i], u) for i in range(den.dim)
        ])
        assert np.abs(H - num).max() < 1e-5

    def test_batch_shapes(self):
        den = _all_targets()["gaussian"]
        U = np.random.default_rng(0).normal(size=(9, 3))
        assert den.log_q(U).shape == (9,)
        assert den.grad_log_q(U).shape == (9, 3)
        assert den.hess_log_q(U).shape == (9, 3, 3)
