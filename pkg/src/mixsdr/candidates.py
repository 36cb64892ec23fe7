"""Classic inverse-regression candidate matrices and span estimators.

The candidate matrices (OLS, SIR, SAVE, pHd, DR) double as the exact
one-component degenerate case of the mixture-adjusted methods, so their
sample forms are written to coincide entrywise with the adjusted formulas
evaluated at a single-component fit.  The span estimators work in the
whitened scale, which makes them exactly affine-equivariant at any target
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .slices import SliceIndicator, slice_indicator
from .subspaces import SubspaceEstimate, orthonormalize, principal_span

__all__ = [
    "CandidateMatrix",
    "Block",
    "classic_candidate",
    "classic_estimate",
    "CLASSIC_METHODS",
]

CLASSIC_METHODS = ("ols", "sir", "save", "phd", "dr")


@dataclass(frozen=True)
class Block:
    """Provenance of a column range of a candidate matrix."""

    tag: str
    component: int | None
    slice_index: object
    cols: tuple[int, int]


@dataclass(frozen=True)
class CandidateMatrix:
    """A p x m ensemble matrix whose left singular span estimates the
    central subspace, with per-block provenance."""

    matrix: np.ndarray
    blocks: tuple[Block, ...]

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("candidate matrix must be finite")
        stops = sorted(b.cols for b in self.blocks)
        pos = 0
        for start, stop in stops:
            if start != pos or stop <= start:
                raise ValueError("blocks must partition the columns")
            pos = stop
        if pos != self.matrix.shape[1]:
            raise ValueError("blocks must partition the columns")

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    def block_matrix(self, block: Block) -> np.ndarray:
        return self.matrix[:, block.cols[0]:block.cols[1]]


def _center(X):
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    return X - mean, mean


def _mle_cov(Xc):
    n = Xc.shape[0]
    cov = Xc.T @ Xc / n
    return 0.5 * (cov + cov.T)


def _solve_spd(mat, rhs, what):
    try:
        return linalg.solve(mat, rhs, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise ValueError(f"use sparse module for p >= n ({what} covariance singular)") from exc


def _resolve_slices(Y, H, slices: SliceIndicator | None):
    if slices is not None:
        return slices
    return slice_indicator(Y, H, mode="continuous")


def _slice_moments(Xc, ind: SliceIndicator):
    """Per-slice proportion, first moment, and raw second moment of centered X."""
    n, p = Xc.shape
    mat = ind.matrix
    props = mat.sum(axis=0) / n
    first = (mat.T @ Xc) / n  # E_n(Xc Y_{S,h}) rows
    second = np.einsum("nh,ni,nj->hij", mat, Xc, Xc) / n
    return props, first, second


def classic_candidate(
    method: str,
    X,
    Y,
    H: int | None = None,
    slices: SliceIndicator | None = None,
) -> CandidateMatrix:
    """Sample candidate matrix of a classic inverse-regression method.

    Parameters
    ----------
    method : {"ols", "sir", "save", "phd", "dr"}
    X : ndarray of shape (n, p)
        Predictors; centered internally.  The sample covariance uses the
        1/n normalization and must be invertible (p < n).
    Y : ndarray of shape (n,)
        Response; sliced into ``H`` bins unless ``slices`` is given.
    H : int, optional
        Number of slices (ignored for OLS and pHd).
    slices : SliceIndicator, optional
        Prebuilt slicing, e.g. for a discrete response.
    """
    if method not in CLASSIC_METHODS:
        raise ValueError(f"unknown method {method!r}")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    n, p = X.shape
    if n <= p:
        raise ValueError("use sparse module for p >= n")
    Xc, _ = _center(X)
    cov = _mle_cov(Xc)

    if method == "ols":
        m = _solve_spd(cov, Xc.T @ Y / n, "sample")[:, None]
        return CandidateMatrix(m, (Block("ols", None, None, (0, 1)),))

    if method == "phd":
        yc = Y - Y.mean()
        core = np.einsum("n,ni,nj->ij", yc, Xc, Xc) / n
        inv_core = _solve_spd(cov, core, "sample")
        m = _solve_spd(cov, inv_core.T, "sample").T
        m = 0.5 * (m + m.T)
        return CandidateMatrix(m, (Block("phd", None, None, (0, p)),))

    ind = _resolve_slices(Y, H, slices)
    Hn = ind.H
    props, first, second = _slice_moments(Xc, ind)

    if method == "sir":
        m = _solve_spd(cov, first.T, "sample")
        blocks = tuple(Block("sir", None, h, (h, h + 1)) for h in range(Hn))
        return CandidateMatrix(m, blocks)

    if method == "save":
        cols, blocks = [], []
        for h in range(Hn):
            contrast = second[h] - Hn * np.outer(first[h], first[h])
            blk = props[h] * np.eye(p) - _solve_spd(cov, contrast, "sample")
            cols.append(blk)
            blocks.append(Block("save", None, h, (h * p, (h + 1) * p)))
        return CandidateMatrix(np.hstack(cols), tuple(blocks))

    # directional regression: one block per ordered slice pair (s, t)
    cols, blocks = [], []
    k = 0
    for s in range(Hn):
        ms = first[s] / props[s]
        Ss = second[s] / props[s]
        for t in range(Hn):
            mt = first[t] / props[t]
            St = second[t] / props[t]
            pair_second = Ss + St - np.outer(ms, mt) - np.outer(mt, ms)
            core = 2.0 * cov - pair_second
            inv_core = _solve_spd(cov, core, "sample")
            blk = props[s] * props[t] * _solve_spd(cov, inv_core.T, "sample").T
            cols.append(blk)
            blocks.append(Block("dr", None, (s, t), (k * p, (k + 1) * p)))
            k += 1
    return CandidateMatrix(np.hstack(cols), tuple(blocks))


def _whitener(cov):
    vals, vecs = linalg.eigh(cov)
    if vals[0] <= 0:
        raise ValueError("use sparse module for p >= n")
    return vecs @ np.diag(vals**-0.5) @ vecs.T


def classic_estimate(
    method: str,
    X,
    Y,
    H: int | None = None,
    d: int = 1,
    slices: SliceIndicator | None = None,
) -> SubspaceEstimate:
    """Classic SDR span estimate via the whitened symmetric kernel.

    Whitening makes the result exactly equivariant under invertible linear
    maps of X: estimating on ``X @ A.T`` returns the ``inv(A).T`` transform
    of the span estimated on ``X``, at machine precision, for any ``d``.
    """
    if method not in CLASSIC_METHODS:
        raise ValueError(f"unknown method {method!r}")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    n, p = X.shape
    Xc, _ = _center(X)
    cov = _mle_cov(Xc)

    if method == "ols":
        if d != 1:
            raise ValueError("OLS spans a single direction")
        direction = _solve_spd(cov, Xc.T @ Y / n, "sample")
        return SubspaceEstimate(orthonormalize(direction[:, None]), 1)

    white = _whitener(cov)
    Z = Xc @ white

    if method == "phd":
        yc = Y - Y.mean()
        kernel = np.einsum("n,ni,nj->ij", yc, Z, Z) / n
        kernel = kernel @ kernel  # rank by |eigenvalue|
    else:
        ind = _resolve_slices(Y, H, slices)
        Hn = ind.H
        props, first, second = _slice_moments(Z, ind)
        if method == "sir":
            means = first / props[:, None]
            kernel = np.einsum("h,hi,hj->ij", props, means, means)
        elif method == "save":
            kernel = np.zeros((p, p))
            for h in range(Hn):
                mh = first[h] / props[h]
                vh = second[h] / props[h] - np.outer(mh, mh)
                contrast = np.eye(p) - vh
                kernel += props[h] * contrast @ contrast
        else:  # dr
            kernel = np.zeros((p, p))
            for s in range(Hn):
                ms = first[s] / props[s]
                Ss = second[s] / props[s]
                for t in range(Hn):
                    mt = first[t] / props[t]
                    St = second[t] / props[t]
                    B = 2.0 * np.eye(p) - (Ss + St - np.outer(ms, mt) - np.outer(mt, ms))
                    kernel += props[s] * props[t] * B @ B
    kernel = 0.5 * (kernel + kernel.T)
    span_white = principal_span(kernel, d)
    basis = orthonormalize(white @ span_white.basis)
    return SubspaceEstimate(basis, d, warning=span_white.warning)
