"""Weighted projections, principal spans, and the projector-distance metric.

These are the dense linear-algebra kernels shared by every estimator in the
package: the oblique projection onto a column space under a positive-definite
inner product, extraction of the leading left-singular span of a candidate
matrix, and the Frobenius distance between subspaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "SubspaceEstimate",
    "weighted_projection",
    "residual_projection",
    "principal_span",
    "subspace_distance",
    "orthonormalize",
]

# Relative gap below which the d-th and (d+1)-th singular values are treated
# as tied, making the extracted span non-unique.
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SubspaceEstimate:
    """An estimated subspace of R^p, stored as an orthonormal basis.

    Attributes
    ----------
    basis : ndarray of shape (p, dim)
        Matrix with orthonormal columns spanning the estimate.
    dim : int
        Dimension of the subspace.
    warning : str or None
        Set when the span is not numerically unique (tied singular values)
        or an iterative estimator stopped without converging.
    """

    basis: np.ndarray
    dim: int
    warning: str | None = field(default=None, compare=False)

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 2 or basis.shape[1] != self.dim:
            raise ValueError("basis must be p x dim")
        if self.dim < 1 or self.dim > basis.shape[0]:
            raise ValueError("dim must satisfy 1 <= dim <= p")
        gram = basis.T @ basis
        if np.max(np.abs(gram - np.eye(self.dim))) > 1e-10:
            raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "basis", basis)

    @property
    def p(self) -> int:
        return self.basis.shape[0]


def _check_projection_pair(lam, beta):
    lam = np.asarray(lam, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    p = lam.shape[0]
    if lam.shape != (p, p) or beta.shape[0] != p:
        raise ValueError("incompatible shapes for projection pair")
    if np.max(np.abs(lam - lam.T)) > 1e-10:
        raise ValueError("lambda must be symmetric")
    sv = linalg.svdvals(beta)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ValueError("degenerate projection")
    return lam, beta


def weighted_projection(lam: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Projection P(lam, beta) = beta (beta' lam beta)^{-1} beta' lam.

    This is the projection onto the column space of ``beta`` under the inner
    product ``<u, v> = u' lam v``; it is idempotent and lam-self-adjoint.

    Raises
    ------
    ValueError
        If ``beta' lam beta`` is singular ("degenerate projection").
    """
    lam, beta = _check_projection_pair(lam, beta)
    gram = beta.T @ lam @ beta
    try:
        core = linalg.solve(gram, beta.T @ lam, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise ValueError("degenerate projection") from exc
    if not np.all(np.isfinite(core)):
        raise ValueError("degenerate projection")
    return beta @ core


def residual_projection(lam: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Q(lam, beta) = I - P(lam, beta); annihilates the columns of beta."""
    proj = weighted_projection(lam, beta)
    return np.eye(proj.shape[0]) - proj


def _fix_column_signs(basis: np.ndarray) -> np.ndarray:
    # Deterministic sign convention: largest-magnitude entry positive.
    out = basis.copy()
    for j in range(out.shape[1]):
        k = np.argmax(np.abs(out[:, j]))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def principal_span(omega, d: int) -> SubspaceEstimate:
    """Span of the leading ``d`` left singular vectors of a candidate matrix.

    Parameters
    ----------
    omega : ndarray or CandidateMatrix
        A p x m matrix (anything exposing a ``.matrix`` attribute works).
    d : int
        Dimension of the span to extract; must not exceed min(p, m).

    Returns
    -------
    SubspaceEstimate
        Deterministic up to nothing: the column-sign convention makes
        repeated runs identical.  ``warning`` is set when the d-th and
        (d+1)-th singular values tie, i.e. the span is not unique.
    """
    mat = np.asarray(getattr(omega, "matrix", omega), dtype=float)
    if mat.ndim != 2:
        raise ValueError("omega must be a matrix")
    if not np.all(np.isfinite(mat)):
        raise ValueError("omega must be finite")
    p, m = mat.shape
    if d < 1 or d > min(p, m):
        raise ValueError("dimension too large")
    u, s, _ = linalg.svd(mat, full_matrices=False)
    warning = None
    if d < len(s) and s[d - 1] - s[d] <= _TIE_RTOL * max(s[0], 1.0):
        warning = "tied singular values: span not unique"
    return SubspaceEstimate(_fix_column_signs(u[:, :d]), d, warning=warning)


def orthonormalize(beta: np.ndarray) -> np.ndarray:
    """Orthonormal basis for the column space of ``beta`` (via thin SVD)."""
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    u, s, _ = linalg.svd(beta, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * s[0]))
    if rank < beta.shape[1]:
        raise ValueError("matrix is rank deficient")
    return _fix_column_signs(u)


def _as_orthonormal(a) -> np.ndarray:
    if isinstance(a, SubspaceEstimate):
        return a.basis
    return orthonormalize(np.asarray(a, dtype=float))


def subspace_distance(a, b) -> float:
    """Frobenius distance between orthogonal projectors of two spans.

    ``delta(a, b) = || P(I, a) - P(I, b) ||_F``.  The arguments may have
    different dimensions; each is reduced to an orthonormal basis of its
    column space first, so the metric only depends on the spans.
    """
    qa = _as_orthonormal(a)
    qb = _as_orthonormal(b)
    if qa.shape[0] != qb.shape[0]:
        raise ValueError("subspaces live in different ambient dimensions")
    diff = qa @ qa.T - qb @ qb.T
    return float(np.sqrt(np.sum(diff * diff)))
