import numpy as np
import pytest

from mixsdr.adjusted import estimate as adjusted_estimate
from mixsdr.candidates import classic_candidate
from mixsdr.datagen import SimSpec, ar1_cov, generate
from mixsdr.gmm import EmConfig, GaussianMixtureFit, fit_em, posterior
from mixsdr.refined import (
    RefinedConfig,
    build_context,
    conditional_moments,
    importance_weights,
    minimize_refined,
    refined_objective,
)
from mixsdr.slices import slice_indicator
from mixsdr.subspaces import principal_span, subspace_distance

CFG = EmConfig(restarts=4, max_iter=200, seed=0)


def make_fit(weights, means, covs):
    return GaussianMixtureFit(
        q=len(weights),
        weights=np.asarray(weights, dtype=float),
        means=np.asarray(means, dtype=float),
        covariances=np.asarray(covs, dtype=float),
        loglik=0.0,
        responsibilities=np.zeros((0, len(weights))),
    )


def figure_fit(mu2_second, r1, r2):
    """Two-component balanced mixture in the plane with AR(1) shapes."""
    return make_fit(
        [0.5, 0.5],
        [[0.0, mu2_second], [0.0, -mu2_second]],
        [ar1_cov(r1, 2), ar1_cov(r2, 2)],
    )


class TestConditionalMoments:
    def test_single_component_reduction(self):
        rng = np.random.default_rng(0)
        cov = ar1_cov(0.6, 4)
        mu = np.array([1.0, -1.0, 0.5, 0.0])
        fit = make_fit([1.0], [mu], [cov])
        beta = np.zeros((4, 1))
        beta[0] = 1.0
        x = rng.standard_normal(4)
        mom = conditional_moments(fit, beta, x)
        proj = cov @ beta @ np.linalg.inv(beta.T @ cov @ beta) @ beta.T
        expected_mean = proj @ (x - mu) + mu
        np.testing.assert_allclose(mom.mean, expected_mean, atol=1e-12)
        expected_var = cov - proj @ cov
        np.testing.assert_allclose(mom.variance, expected_var, atol=1e-12)
        # constant in x: move the point, variance stays
        mom2 = conditional_moments(fit, beta, x + 3.0)
        np.testing.assert_allclose(mom.variance, mom2.variance, atol=1e-12)

    def test_centered_mixture_variance_exactly_quadratic(self):
        # equal means, different AR(1) shapes: the conditional variance of
        # the first coordinate given the second is a quadratic polynomial
        fit = figure_fit(0.0, 0.4, 0.8)
        beta = np.array([[0.0], [1.0]])
        grid = np.linspace(-3.0, 3.0, 41)
        pts = np.stack([np.zeros_like(grid), grid], axis=1)
        var = conditional_moments(fit, beta, pts).variance[:, 0, 0]
        design = np.stack([np.ones_like(grid), grid, grid**2], axis=1)
        coef, *_ = np.linalg.lstsq(design, var, rcond=None)
        fitted = design @ coef
        ss_res = np.sum((var - fitted) ** 2)
        ss_tot = np.sum((var - var.mean()) ** 2)
        assert 1.0 - ss_res / ss_tot > 0.999
        assert abs(coef[2]) > 1e-3  # genuinely quadratic

    def test_mean_matches_binned_monte_carlo(self):
        # separated-means configuration: E(X1 | X2) against binned draws;
        # the sample is large enough that per-bin noise sits well below
        # the 0.05 tolerance even at the extreme bins
        fit = figure_fit(2.0, 0.5, -0.5)
        rng = np.random.default_rng(1)
        n = 250000
        labels = rng.random(n) < 0.5
        X = np.empty((n, 2))
        chol1 = np.linalg.cholesky(ar1_cov(0.5, 2))
        chol2 = np.linalg.cholesky(ar1_cov(-0.5, 2))
        X[labels] = fit.means[0] + rng.standard_normal((labels.sum(), 2)) @ chol1.T
        X[~labels] = fit.means[1] + rng.standard_normal(((~labels).sum(), 2)) @ chol2.T
        beta = np.array([[0.0], [1.0]])
        mom = conditional_moments(fit, beta, X)
        order = np.argsort(X[:, 1])
        gaps = []
        for chunk in np.array_split(order, 50):
            gaps.append(abs(X[chunk, 0].mean() - mom.mean[chunk, 0].mean()))
        assert max(gaps) < 0.05


class TestImportanceWeights:
    def test_single_component_constant(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((200, 4))
        Y = X[:, 0] + 0.2 * rng.standard_normal(200)
        fit = fit_em(X, 1, CFG)
        sl = slice_indicator(Y, 4)
        beta = np.zeros((4, 1))
        beta[0] = 1.0
        dhat = importance_weights(fit, beta, X, sl)
        assert dhat.shape == (200, 1, 4)
        assert np.max(np.abs(dhat - dhat[0])) < 1e-12
        gram = beta.T @ fit.covariances[0] @ beta
        dev = X - fit.means[0]
        expected = np.linalg.solve(gram, beta.T @ dev.T @ sl.matrix / 200)
        np.testing.assert_allclose(dhat[0], expected, atol=1e-12)

    def test_stein_identity_on_mixture_normal(self):
        # one-dimensional projected mixture with a smooth synthetic slice
        # regression: the cross-moment form must match the derivative form
        rng = np.random.default_rng(3)
        n = 200000
        means1d = np.array([-2.0, 2.0])
        labels = rng.random(n) < 0.5
        t = np.where(labels, means1d[0], means1d[1]) + rng.standard_normal(n)
        X = t[:, None]  # p = 1, beta = identity
        fit = make_fit([0.5, 0.5], [[-2.0], [2.0]], [[[1.0]], [[1.0]]])
        # smooth synthetic E(Y_S | t): softmax of quadratic scores
        scores = np.stack([0.3 * t, -0.2 * t + 0.1 * t**2], axis=1)
        g = np.exp(scores - scores.max(axis=1)[:, None])
        g /= g.sum(axis=1)[:, None]
        pp = posterior(fit, X)

        beta = np.array([[1.0]])
        gram = np.array([[1.0]])
        # expectation form, with E(Y_S | t) standing in for the indicator
        comp = np.zeros((2, 1, 2))
        for j in range(2):
            a_j = (t - fit.means[j, 0])[:, None]  # (beta' Sigma_j beta)^{-1} = 1
            for i in range(2):
                w = pp[:, i] * pp[:, j]
                comp[i] += a_j.T @ (w[:, None] * g) / n
        expectation_form = np.einsum("idh,mi->mdh", comp, pp)

        # derivative form: numerical gradient of g_h(t) pi_i(t), averaged
        eps = 1e-4

        def gpi(tv):
            sc = np.stack([0.3 * tv, -0.2 * tv + 0.1 * tv**2], axis=1)
            gg = np.exp(sc - sc.max(axis=1)[:, None])
            gg /= gg.sum(axis=1)[:, None]
            post = posterior(fit, tv[:, None])
            return gg, post

        g_hi, p_hi = gpi(t + eps)
        g_lo, p_lo = gpi(t - eps)
        deriv_form = np.zeros((n, 1, 2))
        for i in range(2):
            diff = (g_hi * p_hi[:, [i]] - g_lo * p_lo[:, [i]]) / (2 * eps)
            deriv_form[:, 0, :] += diff.mean(axis=0)[None, :] * pp[:, [i]]
        rel = np.linalg.norm(expectation_form - deriv_form) / np.linalg.norm(deriv_form)
        assert rel < 0.05


class TestRefinedObjective:
    def make_context(self, method="sir_rm", seed=4, n=600):
        X, Y, truth = generate(SimSpec(family="model1", n=n, p=10, seed=seed), 0)
        fit = fit_em(X, 2, CFG)
        ctx = build_context(method, X, Y, 5, fit, RefinedConfig(), d=truth.d)
        return ctx, truth

    @pytest.mark.parametrize("method", ["sir_rm", "save_rm", "phd_rm", "dr_rm"])
    def test_nonnegative_and_basis_invariant(self, method):
        ctx, truth = self.make_context(method)
        rng = np.random.default_rng(5)
        beta = rng.standard_normal((10, 2))
        val = refined_objective(method, beta, ctx)
        assert val >= 0.0
        mix = rng.standard_normal((2, 2)) + 2.0 * np.eye(2)
        val2 = refined_objective(method, beta @ mix, ctx)
        assert abs(val - val2) <= 1e-8 * max(1.0, abs(val))

    def test_vanishes_for_single_component_linear_model(self):
        rng = np.random.default_rng(6)
        n, p = 4000, 3
        X = rng.standard_normal((n, p))
        beta0 = np.zeros((p, 1))
        beta0[0] = 1.0
        Y = X[:, 0] + 0.1 * rng.standard_normal(n)
        fit = fit_em(X, 1, CFG)
        ctx = build_context("sir_rm", X, Y, 2, fit, RefinedConfig(), d=1)
        assert refined_objective("sir_rm", beta0, ctx) < 5.0 / n

    def test_estimate_beats_random_direction(self):
        wins = 0
        for seed in range(10):
            X, Y, truth = generate(SimSpec(family="model1", n=2000, p=10, seed=seed), 0)
            fit = fit_em(X, 2, EmConfig(restarts=4, max_iter=200, seed=seed))
            pilot = adjusted_estimate("sir_m", X, Y, 5, fit, truth.d)
            ctx = build_context(
                "sir_rm", X, Y, 5, fit, RefinedConfig(), pilot=pilot, d=truth.d
            )
            rng = np.random.default_rng(100 + seed)
            random_basis = np.linalg.qr(rng.standard_normal((10, 2)))[0]
            good = refined_objective("sir_rm", pilot.basis, ctx)
            bad = refined_objective("sir_rm", random_basis, ctx)
            wins += good < bad
        assert wins >= 9


class TestMinimizeRefined:
    def test_infinite_threshold_returns_pilot(self):
        X, Y, truth = generate(SimSpec(family="model1", n=400, p=10, seed=7), 0)
        fit = fit_em(X, 2, CFG)
        pilot = adjusted_estimate("sir_m", X, Y, 5, fit, truth.d)
        est = minimize_refined(
            "sir_rm", X, Y, 5, fit, truth.d,
            cfg=RefinedConfig(c0=np.inf), pilot=pilot,
        )
        assert subspace_distance(est, pilot) == 0.0

    def test_q1_terminates_at_classic_sir(self):
        # with one component and d = H - 1 the first step reproduces the
        # classic span exactly, so the iteration stops at the pilot
        rng = np.random.default_rng(8)
        n, p = 500, 6
        X = rng.standard_normal((n, p))
        Y = X[:, 0] + 0.5 * X[:, 1] + 0.3 * rng.standard_normal(n)
        fit = fit_em(X, 1, CFG)
        classic = principal_span(classic_candidate("sir", X, Y, H=3), 2)
        est, info = minimize_refined(
            "sir_rm", X, Y, 3, fit, 2, cfg=RefinedConfig(), return_info=True
        )
        assert subspace_distance(est, classic) < 1e-10
        assert len(info["steps"]) == 1 and info["steps"][0] < 1.0 / n

    def test_surrogate_step_never_increases(self):
        X, Y, truth = generate(SimSpec(family="model2", n=500, p=10, seed=9), 0)
        fit = fit_em(X, 2, CFG)
        _, info = minimize_refined(
            "sir_rm", X, Y, 5, fit, truth.d, cfg=RefinedConfig(), return_info=True
        )
        before = np.array(info["surrogate_before"])
        after = np.array(info["surrogate_after"])
        assert np.all(after <= before + 1e-12)

    def test_convergence_rate_on_model2(self):
        converged = 0
        for seed in range(10):
            X, Y, truth = generate(SimSpec(family="model2", n=500, p=10, seed=seed), 1)
            fit = fit_em(X, 2, EmConfig(restarts=4, max_iter=200, seed=seed))
            est, info = minimize_refined(
                "sir_rm", X, Y, 5, fit, truth.d, cfg=RefinedConfig(), return_info=True
            )
            converged += len(info["steps"]) < 50 and (
                info["steps"][-1] < 1.0 / 500 if info["steps"] else True
            )
        assert converged >= 9
