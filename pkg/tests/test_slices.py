import numpy as np
import pytest

from mixsdr.slices import slice_indicator


def test_equal_counts():
    ind = slice_indicator(np.arange(1, 11, dtype=float), 5)
    assert ind.H == 5
    np.testing.assert_array_equal(ind.counts, [2, 2, 2, 2, 2])
    np.testing.assert_array_equal(ind.matrix.sum(axis=1), np.ones(10))


def test_rows_exactly_one_hot():
    rng = np.random.default_rng(0)
    ind = slice_indicator(rng.standard_normal(103), 7)
    assert set(np.unique(ind.matrix)) == {0.0, 1.0}
    np.testing.assert_array_equal(ind.matrix.sum(axis=1), np.ones(103))
    counts = ind.counts
    assert counts.max() - counts.min() <= 1


def test_binary_discrete_mode():
    y = np.array([0, 1, 1, 0, 1])
    ind = slice_indicator(y, mode="discrete")
    assert ind.H == 2
    np.testing.assert_array_equal(ind.matrix[:, 1], y)


def test_discrete_category_count_mismatch():
    with pytest.raises(ValueError):
        slice_indicator(np.array([0, 1, 2]), 2, mode="discrete")


def test_H_exceeds_n():
    with pytest.raises(ValueError):
        slice_indicator(np.arange(4.0), 5)


def test_normal_quantile_boundaries():
    rng = np.random.default_rng(42)
    y = rng.standard_normal(1000)
    ind = slice_indicator(y, 5)
    from scipy.stats import norm

    expected = norm.ppf([0.2, 0.4, 0.6, 0.8])
    assert np.max(np.abs(ind.boundaries - expected)) < 0.1


def test_invariance_to_increasing_transform():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(57)
    a = slice_indicator(y, 4)
    b = slice_indicator(np.exp(3.0 * y) + 2.0, 4)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_tie_breaking_is_stable():
    y = np.array([1.0, 1.0, 1.0, 1.0])
    ind = slice_indicator(y, 2)
    np.testing.assert_array_equal(ind.labels, [0, 0, 1, 1])
