import numpy as np
import pytest

from mixsdr.candidates import classic_candidate, classic_estimate
from mixsdr.datagen import ar1_cov
from mixsdr.slices import slice_indicator
from mixsdr.subspaces import principal_span, subspace_distance


def linear_data(seed=0, n=2000, p=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta0 = np.zeros((p, 1))
    beta0[0] = 1.0
    Y = X @ beta0.ravel() + 0.25 * rng.standard_normal(n)
    return X, Y, beta0


class TestClassicCandidate:
    def test_ols_zero_response(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((50, 4))
        cand = classic_candidate("ols", X, np.zeros(50))
        np.testing.assert_allclose(cand.matrix, 0.0, atol=1e-14)

    def test_sir_span_recovers_linear_direction(self):
        X, Y, beta0 = linear_data()
        cand = classic_candidate("sir", X, Y, H=5)
        est = principal_span(cand, 1)
        assert subspace_distance(est, beta0) < 0.1

    def test_sir_blind_to_symmetric_response(self):
        # symmetric model about 0: population SIR columns vanish
        rng = np.random.default_rng(2)
        n = 4000
        X = rng.standard_normal((n, 5))
        Y = X[:, 0] ** 2 + 0.1 * rng.standard_normal(n)
        cand = classic_candidate("sir", X, Y, H=5)
        norms = np.linalg.norm(cand.matrix, axis=0)
        assert np.max(norms) < 3.0 / np.sqrt(n)

    def test_save_block_shapes_and_partition(self):
        X, Y, _ = linear_data(n=300)
        cand = classic_candidate("save", X, Y, H=4)
        assert cand.matrix.shape == (6, 24)
        assert len(cand.blocks) == 4
        spans = [cand.block_matrix(b).shape for b in cand.blocks]
        assert all(s == (6, 6) for s in spans)

    def test_phd_symmetric(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((400, 5))
        Y = X[:, 0] ** 2 + 0.2 * rng.standard_normal(400)
        cand = classic_candidate("phd", X, Y)
        assert np.max(np.abs(cand.matrix - cand.matrix.T)) < 1e-12

    def test_singular_covariance_raises(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, 8))
        with pytest.raises(ValueError, match="sparse module"):
            classic_candidate("sir", X, rng.standard_normal(5), H=2)


class TestAffineInvariance:
    @pytest.mark.parametrize("method", ["sir", "save"])
    def test_estimate_equivariance(self, method):
        rng = np.random.default_rng(5)
        n, p = 600, 5
        X = rng.standard_normal((n, p))
        Y = X[:, 0] + X[:, 1] ** 2 + 0.3 * rng.standard_normal(n)
        A = rng.standard_normal((p, p)) + 2.0 * np.eye(p)
        est_x = classic_estimate(method, X, Y, H=4, d=2)
        est_ax = classic_estimate(method, X @ A.T, Y, H=4, d=2)
        transformed = np.linalg.solve(A.T, est_x.basis)
        assert subspace_distance(est_ax, transformed) < 1e-6

    def test_whitened_save_kernel_blocks_symmetric(self):
        # the estimator's internal slice contrasts in the whitened scale
        rng = np.random.default_rng(6)
        X = rng.standard_normal((500, 4))
        Xc = X - X.mean(axis=0)
        cov = Xc.T @ Xc / 500
        vals, vecs = np.linalg.eigh(cov)
        Z = Xc @ (vecs / np.sqrt(vals)) @ vecs.T
        ind = slice_indicator(rng.standard_normal(500), 5)
        for h in range(5):
            rows = ind.matrix[:, h] == 1
            vh = np.cov(Z[rows].T, bias=True)
            contrast = np.eye(4) - vh
            assert np.max(np.abs(contrast - contrast.T)) < 1e-10


class TestDrCandidate:
    def test_blocks_cover_ordered_pairs(self):
        X, Y, _ = linear_data(n=400, p=4)
        cand = classic_candidate("dr", X, Y, H=3)
        pair_tags = [b.slice_index for b in cand.blocks]
        assert len(pair_tags) == 9
        assert (0, 0) in pair_tags and (2, 1) in pair_tags

    def test_dr_recovers_symmetric_direction(self):
        rng = np.random.default_rng(7)
        n = 3000
        X = rng.standard_normal((n, 5))
        Y = X[:, 0] ** 2 + 0.3 * rng.standard_normal(n)
        est = classic_estimate("dr", X, Y, H=5, d=1)
        beta0 = np.zeros((5, 1))
        beta0[0] = 1.0
        assert subspace_distance(est, beta0) < 0.25


def test_classic_estimate_ols_direction():
    X, Y, beta0 = linear_data(seed=8)
    est = classic_estimate("ols", X, Y, d=1)
    assert subspace_distance(est, beta0) < 0.1


def test_unknown_method():
    with pytest.raises(ValueError):
        classic_candidate("pca", np.eye(3), np.arange(3.0))
