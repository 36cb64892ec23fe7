"""Mixture-adjusted candidate matrices (first adjustment strategy).

Each classic inverse-regression moment is recomputed inside every fitted
mixture component, weighting observations by their responsibilities, and
the per-component results are stacked into one ensemble candidate whose
leading left singular span estimates the central subspace.

Every slice x component cell of the ensemble individually spans directions
inside the target subspace, so rescaling cells by positive factors changes
nothing at the population level.  The default "balanced" weighting scales
each cell by the square root of its responsibility mass relative to an
equal split, which stops high-mass cells from drowning the weak ones in
the singular value decomposition; "raw" keeps the plain stacked moments.
The factor is identically one when q = 1 and the slices have equal counts,
so both weightings degenerate to the classic candidates exactly.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg

from .candidates import Block, CandidateMatrix
from .gmm import GaussianMixtureFit
from .slices import SliceIndicator, slice_indicator
from .subspaces import SubspaceEstimate, principal_span

__all__ = ["mixture_candidate", "estimate", "ADJUSTED_METHODS"]

ADJUSTED_METHODS = ("sir_m", "save_m", "phd_m", "dr_m")

# A slice x component cell with less responsibility mass than this (as a
# fraction of n) contributes a zero block: there is no local signal to read.
_MASS_TOL = 1e-12


def _component_inverse(fit: GaussianMixtureFit, i: int) -> np.ndarray:
    try:
        return linalg.inv(fit.covariances[i])
    except linalg.LinAlgError as exc:
        raise ValueError(f"component {i} covariance is singular") from exc


def _cell_scale(mass: float, reference: float, weighting: str) -> float:
    """Cell rescaling factor: sqrt(reference / mass) under "balanced"."""
    if weighting == "raw":
        return 1.0
    return float(np.sqrt(reference / mass))


def mixture_candidate(
    method: str,
    X,
    slices: SliceIndicator | None,
    fit: GaussianMixtureFit,
    Y=None,
    weighting: str = "balanced",
) -> CandidateMatrix:
    """Mixture-adjusted candidate matrix.

    Parameters
    ----------
    method : {"sir_m", "save_m", "phd_m", "dr_m"}
    X : ndarray of shape (n, p)
    slices : SliceIndicator or None
        Required except for ``phd_m``, which consumes the raw response.
    fit : GaussianMixtureFit
        Mixture fit of X whose responsibilities weight the moments.
    Y : ndarray, optional
        Raw response, required by ``phd_m`` only (centered internally).
    weighting : {"balanced", "raw"}
        Cell rescaling (see the module docstring); "raw" is the literal
        stacked-moment form.
    """
    if method not in ADJUSTED_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if weighting not in ("balanced", "raw"):
        raise ValueError(f"unknown weighting {weighting!r}")
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    resp = fit.responsibilities
    if resp.shape[0] != n:
        raise ValueError("fit responsibilities do not match the sample")
    q = fit.q

    if method == "phd_m":
        if Y is None:
            raise ValueError("phd_m needs the raw response")
        yc = np.asarray(Y, dtype=float).ravel() - np.mean(Y)
        cols, blocks = [], []
        for i in range(q):
            inv_i = _component_inverse(fit, i)
            dev = X - fit.means[i]
            w = resp[:, i] * yc
            mean_wy = w.sum() / n
            second = np.einsum("n,ni,nj->ij", w, dev, dev) / n
            core = mean_wy * fit.covariances[i] - second
            blk = inv_i @ core @ inv_i
            blk = blk * _cell_scale(resp[:, i].mean(), 1.0 / q, weighting)
            cols.append(blk)
            blocks.append(Block("phd_m", i, None, (i * p, (i + 1) * p)))
        return CandidateMatrix(np.hstack(cols), tuple(blocks))

    if slices is None:
        raise ValueError(f"{method} needs a slice indicator")
    ind = slices.matrix
    H = slices.H

    if method == "sir_m":
        cols, blocks = [], []
        for i in range(q):
            inv_i = _component_inverse(fit, i)
            dev = X - fit.means[i]
            cross = (dev * resp[:, i][:, None]).T @ ind / n
            mass = resp[:, i] @ ind / n
            ref = resp[:, i].mean() / H
            for h in range(H):
                if mass[h] <= _MASS_TOL:
                    warnings.warn(
                        f"empty slice {h} x component {i}: zero column", RuntimeWarning
                    )
                    cross[:, h] = 0.0
                else:
                    cross[:, h] *= _cell_scale(mass[h], ref, weighting)
            cols.append(inv_i @ cross)
            blocks.extend(
                Block("sir_m", i, h, (i * H + h, i * H + h + 1)) for h in range(H)
            )
        return CandidateMatrix(np.hstack(cols), tuple(blocks))

    if method == "save_m":
        cols, blocks = [], []
        k = 0
        for i in range(q):
            inv_i = _component_inverse(fit, i)
            dev = X - fit.means[i]
            ref = resp[:, i].mean() / H
            for h in range(H):
                w = resp[:, i] * ind[:, h]
                mass = w.sum() / n
                if mass <= _MASS_TOL:
                    warnings.warn(
                        f"empty slice {h} x component {i}: zero block", RuntimeWarning
                    )
                    blk = np.zeros((p, p))
                else:
                    b = (w @ dev) / n
                    second = np.einsum("n,ni,nj->ij", w, dev, dev) / n
                    blk = mass * np.eye(p) - inv_i @ (second - H * np.outer(b, b))
                    blk = blk * _cell_scale(mass, ref, weighting)
                cols.append(blk)
                blocks.append(Block("save_m", i, h, (k * p, (k + 1) * p)))
                k += 1
        return CandidateMatrix(np.hstack(cols), tuple(blocks))

    # dr_m: one block per component x ordered slice pair, built from the
    # responsibility-weighted within-slice moments
    counts = ind.sum(axis=0)
    props = counts / n
    cols, blocks = [], []
    k = 0
    for i in range(q):
        inv_i = _component_inverse(fit, i)
        r = resp[:, i]
        pibar = r.mean()
        safe = np.maximum(counts, 1.0)
        w_s = (ind.T @ r) / safe
        v_s = (ind.T * r).dot(X) / safe[:, None]
        S_s = np.einsum("nh,n,ni,nj->hij", ind, r, X, X) / safe[:, None, None]
        for s in range(H):
            for t in range(H):
                cell_mass = w_s[s] * w_s[t]
                if counts[s] < 2 or counts[t] < 2 or cell_mass <= _MASS_TOL:
                    warnings.warn(
                        f"slice pair ({s},{t}) too thin: zero block", RuntimeWarning
                    )
                    cols.append(np.zeros((p, p)))
                    blocks.append(Block("dr_m", i, (s, t), (k * p, (k + 1) * p)))
                    k += 1
                    continue
                pair_second = (
                    S_s[s] * w_s[t]
                    + w_s[s] * S_s[t]
                    - np.outer(v_s[s], v_s[t])
                    - np.outer(v_s[t], v_s[s])
                )
                core = 2.0 * w_s[s] * w_s[t] * fit.covariances[i] - pair_second
                blk = props[s] * props[t] * inv_i @ core @ inv_i
                blk = blk * _cell_scale(cell_mass, pibar * pibar, weighting)
                cols.append(blk)
                blocks.append(Block("dr_m", i, (s, t), (k * p, (k + 1) * p)))
                k += 1
    return CandidateMatrix(np.hstack(cols), tuple(blocks))


def estimate(
    method: str,
    X,
    Y,
    H: int | None,
    fit: GaussianMixtureFit,
    d: int,
    slices: SliceIndicator | None = None,
    weighting: str = "balanced",
) -> SubspaceEstimate:
    """Adjusted SDR estimate: leading-d left singular span of the candidate."""
    if method == "phd_m":
        omega = mixture_candidate("phd_m", X, None, fit, Y=Y, weighting=weighting)
    else:
        if slices is None:
            slices = slice_indicator(Y, H, mode="continuous")
        omega = mixture_candidate(method, X, slices, fit, weighting=weighting)
    return principal_span(omega, d)
