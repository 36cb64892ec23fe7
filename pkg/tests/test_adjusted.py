import numpy as np
import pytest

from mixsdr.adjusted import estimate, mixture_candidate
from mixsdr.candidates import classic_candidate
from mixsdr.datagen import SimSpec, generate
from mixsdr.gmm import EmConfig, fit_em
from mixsdr.slices import slice_indicator
from mixsdr.subspaces import principal_span, subspace_distance

CFG = EmConfig(restarts=4, max_iter=200, seed=0)


def loop_sir_m(X, ind, fit):
    """Brute-force double loop over samples/components/slices (raw form)."""
    n, p = X.shape
    H = ind.shape[1]
    out = np.zeros((p, fit.q * H))
    for i in range(fit.q):
        inv = np.linalg.inv(fit.covariances[i])
        for h in range(H):
            col = np.zeros(p)
            for m in range(n):
                col += (
                    fit.responsibilities[m, i]
                    * ind[m, h]
                    * (X[m] - fit.means[i])
                )
            out[:, i * H + h] = inv @ col / n
    return out


def loop_save_m(X, ind, fit):
    n, p = X.shape
    H = ind.shape[1]
    blocks = []
    for i in range(fit.q):
        inv = np.linalg.inv(fit.covariances[i])
        for h in range(H):
            a = 0.0
            b = np.zeros(p)
            second = np.zeros((p, p))
            for m in range(n):
                w = fit.responsibilities[m, i] * ind[m, h]
                dev = X[m] - fit.means[i]
                a += w
                b += w * dev
                second += w * np.outer(dev, dev)
            a /= n
            b /= n
            second /= n
            blocks.append(a * np.eye(p) - inv @ (second - H * np.outer(b, b)))
    return np.hstack(blocks)


def toy_fit(n=6, p=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) + np.array([1.0, -0.5])
    fit = fit_em(X, 2, EmConfig(restarts=2, max_iter=50, seed=1))
    return X, fit


class TestLoopOracles:
    def test_sir_m_matches_brute_force(self):
        X, fit = toy_fit(n=5)
        Y = np.arange(5.0)
        ind = slice_indicator(Y, 2)
        cand = mixture_candidate("sir_m", X, ind, fit, weighting="raw")
        oracle = loop_sir_m(X, ind.matrix, fit)
        assert np.max(np.abs(cand.matrix - oracle)) < 1e-12

    def test_save_m_matches_brute_force(self):
        X, fit = toy_fit(n=8)
        Y = np.arange(8.0)
        ind = slice_indicator(Y, 2)
        cand = mixture_candidate("save_m", X, ind, fit, weighting="raw")
        oracle = loop_save_m(X, ind.matrix, fit)
        assert np.max(np.abs(cand.matrix - oracle)) < 1e-12

    def test_save_m_block_count(self):
        X, fit = toy_fit(n=12, p=3, seed=2)
        ind = slice_indicator(np.arange(12.0), 3)
        cand = mixture_candidate("save_m", X, ind, fit)
        assert len(cand.blocks) == fit.q * 3
        assert cand.matrix.shape == (3, fit.q * 3 * 3)


class TestDegeneracy:
    """q = 1 collapses every adjusted candidate to its classic counterpart."""

    def setup_method(self):
        rng = np.random.default_rng(3)
        n = 120
        self.X = rng.standard_normal((n, 4))
        self.Y = self.X[:, 0] + 0.5 * self.X[:, 1] ** 2 + 0.1 * rng.standard_normal(n)
        self.fit = fit_em(self.X, 1, CFG)
        self.ind = slice_indicator(self.Y, 4)

    def test_sir_exact_matrix(self):
        adj = mixture_candidate("sir_m", self.X, self.ind, self.fit)
        cls = classic_candidate("sir", self.X, self.Y, slices=self.ind)
        assert np.max(np.abs(adj.matrix - cls.matrix)) < 1e-12

    def test_save_exact_matrix(self):
        adj = mixture_candidate("save_m", self.X, self.ind, self.fit)
        cls = classic_candidate("save", self.X, self.Y, slices=self.ind)
        assert np.max(np.abs(adj.matrix - cls.matrix)) < 1e-12

    def test_dr_exact_matrix(self):
        adj = mixture_candidate("dr_m", self.X, self.ind, self.fit)
        cls = classic_candidate("dr", self.X, self.Y, slices=self.ind)
        assert np.max(np.abs(adj.matrix - cls.matrix)) < 1e-12

    def test_phd_span_exact(self):
        adj = mixture_candidate("phd_m", self.X, None, self.fit, Y=self.Y)
        cls = classic_candidate("phd", self.X, self.Y)
        # the adjusted block is the negated classic one (centered response)
        assert np.max(np.abs(adj.matrix + cls.matrix)) < 1e-12
        a = principal_span(adj, 2)
        b = principal_span(cls, 2)
        assert subspace_distance(a, b) < 1e-10


class TestRelabelInvariance:
    def test_component_permutation_keeps_span(self):
        X, _, _ = generate(SimSpec(family="model1", n=400, p=10, seed=4), 0)
        rng = np.random.default_rng(5)
        Y = rng.standard_normal(400) + X[:, 0]
        fit = fit_em(X, 2, CFG)
        ind = slice_indicator(Y, 5)
        a = principal_span(mixture_candidate("sir_m", X, ind, fit), 2)
        b = principal_span(mixture_candidate("sir_m", X, ind, fit.permuted([1, 0])), 2)
        assert subspace_distance(a, b) < 1e-8


class TestRecovery:
    def test_symmetric_model_found_by_adjustment(self):
        # quadratic response with a symmetric two-component predictor: the
        # classic sliced moments vanish, the component-weighted ones do not
        rng = np.random.default_rng(6)
        n, p = 5000, 4
        labels = rng.random(n) < 0.5
        X = rng.standard_normal((n, p))
        X[labels, 0] += 2.0
        X[~labels, 0] -= 2.0
        Y = X[:, 0] ** 2 + rng.standard_normal(n)
        fit = fit_em(X, 2, EmConfig(restarts=4, max_iter=200, seed=6))
        e1 = np.zeros((p, 1))
        e1[0] = 1.0
        adj = estimate("sir_m", X, Y, 5, fit, 1)
        assert subspace_distance(adj, e1) < 0.3
        from mixsdr.candidates import classic_estimate

        cls = classic_estimate("sir", X, Y, H=5, d=1)
        assert subspace_distance(cls, e1) > 1.2

    def test_can_recover_more_directions_than_slices(self):
        # with H = 2 classic SIR recovers at most one direction; weighting by
        # the two components lifts the cap to q(H - 1) = 2
        rng = np.random.default_rng(7)
        n, p = 4000, 6
        labels = rng.random(n) < 0.5
        X = rng.standard_normal((n, p))
        X[labels, :2] += 2.0
        X[~labels, :2] -= 2.0
        Y = X[:, 0] + 3.0 * np.abs(X[:, 1]) + 0.5 * rng.standard_normal(n)
        truth = np.zeros((p, 2))
        truth[0, 0] = truth[1, 1] = 1.0
        fit = fit_em(X, 2, EmConfig(restarts=4, max_iter=200, seed=7))
        adj = estimate("sir_m", X, Y, 2, fit, 2)
        cls_d2 = principal_span(classic_candidate("sir", X, Y, H=2), 2)
        assert subspace_distance(adj, truth) < 0.5
        assert subspace_distance(cls_d2, truth) > 0.8

    def test_zero_mass_cell_warns(self):
        X, fit = toy_fit(n=30, p=3, seed=8)
        ind = slice_indicator(np.arange(30.0), 3)
        broken = fit.responsibilities.copy()
        broken[ind.matrix[:, 0] == 1, 0] = 0.0
        broken /= broken.sum(axis=1)[:, None]
        from dataclasses import replace

        bad_fit = replace(fit, responsibilities=broken)
        with pytest.warns(RuntimeWarning, match="empty slice"):
            cand = mixture_candidate("save_m", X, ind, bad_fit)
        assert np.allclose(cand.block_matrix(cand.blocks[0]), 0.0)
