"""Sparse high-dimensional variants: PSD targets and the penalized program.

The adjusted cross-moment matrices are squared into positive-semidefinite
targets, and the subspace is recovered by maximizing ``tr(Omega Pi)`` with
an entrywise l1 penalty over the convex hull of rank-d projections in the
covariance metric, solved by ADMM with a Fantope projection step.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .gmm import GaussianMixtureFit
from .refined import importance_weights, _sliced_importance
from .slices import SliceIndicator, slice_indicator
from .subspaces import SubspaceEstimate, orthonormalize

__all__ = [
    "AdmmConfig",
    "SparseProblem",
    "SparseSolution",
    "omega_exy",
    "omega_rsir",
    "fantope_project",
    "solve_sparse_sdp",
    "tune_rho_cv",
    "selection_metrics",
    "rho_anchor",
]

_SUPPORT_TOL = 1e-6


@dataclass(frozen=True)
class AdmmConfig:
    nu: float = 1.0
    max_iter: int = 1000
    tol_primal: float = 1e-5
    tol_dual: float = 1e-5

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")


@dataclass(frozen=True)
class SparseProblem:
    """Inputs of one penalized semidefinite solve."""

    omega: np.ndarray
    sigma: np.ndarray
    d: int
    rho: float
    admm: AdmmConfig = AdmmConfig()
    keep_objective_trace: bool = False

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        if np.max(np.abs(om - om.T)) > 1e-10:
            raise ValueError("omega must be symmetric")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")


@dataclass(frozen=True)
class SparseSolution:
    """Solver output: the PSD iterate, the rescaled basis, and diagnostics."""

    pi_hat: np.ndarray
    beta_hat: np.ndarray
    support: tuple
    diagnostics: dict = field(compare=False)

    def to_json(self) -> str:
        diag = {
            k: (v if not isinstance(v, np.ndarray) else v.tolist())
            for k, v in self.diagnostics.items()
        }
        return json.dumps(
            {"support": list(self.support), "diagnostics": diag}, default=float
        )


def rho_anchor(n: int, p: int, d: int) -> float:
    """Rate-guided scale for the l1 penalty, ``sqrt(d log p / n)``."""
    return float(np.sqrt(d * np.log(p) / n))


def omega_exy(X, slices: SliceIndicator, fit: GaussianMixtureFit) -> np.ndarray:
    """PSD target: squared stack of the component-weighted slice
    cross-moments ``E_n{(X - mu_i) pi_i(X) Y_S'}``.  Rank at most qH."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    ind = slices.matrix
    resp = fit.responsibilities
    cols = []
    for i in range(fit.q):
        dev = X - fit.means[i]
        cols.append((dev * resp[:, i][:, None]).T @ ind / n)
    stacked = np.hstack(cols)
    out = stacked @ stacked.T
    return 0.5 * (out + out.T)


def omega_rsir(
    X,
    slices: SliceIndicator,
    fit: GaussianMixtureFit,
    beta_tilde,
    mode: str = "closed_form",
) -> np.ndarray:
    """PSD target of the refined sparse method.

    Squares ``E_n[{sum_i pi_i(bt'X)(X - mu_i)} vec'{D(bt'X) diag(Y_S)}]``
    where the importance weights and projected posteriors come from the
    pilot estimate ``beta_tilde``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    basis = beta_tilde.basis if isinstance(beta_tilde, SubspaceEstimate) else np.asarray(beta_tilde)
    if basis.ndim == 1:
        basis = basis[:, None]
    from .gmm import projected_posterior

    pp = projected_posterior(fit, basis, X, mode=mode, sample=X)
    dhat = importance_weights(fit, basis, X, slices, mode=mode)
    ds = _sliced_importance(dhat, slices)
    centered = X - pp @ fit.means
    stacked = centered.T @ ds / n
    out = stacked @ stacked.T
    return 0.5 * (out + out.T)


def fantope_project(A, d: int) -> np.ndarray:
    """Frobenius projection onto ``{0 <= H <= I, tr(H) <= d}``.

    Eigenvalues are clipped to [0, 1] after the smallest shift ``theta >= 0``
    that brings the clipped sum down to ``d`` (zero when already feasible);
    eigenvectors are untouched.  Idempotent by construction.
    """
    A = np.asarray(A, dtype=float)
    vals, vecs = linalg.eigh(0.5 * (A + A.T))
    clipped = np.clip(vals, 0.0, 1.0)
    if clipped.sum() <= d:
        new_vals = clipped
    else:
        lo, hi = 0.0, float(vals.max())
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.clip(vals - mid, 0.0, 1.0).sum() > d:
                lo = mid
            else:
                hi = mid
        new_vals = np.clip(vals - hi, 0.0, 1.0)
    return (vecs * new_vals) @ vecs.T


def _soft_threshold(mat: np.ndarray, level: float) -> np.ndarray:
    return np.sign(mat) * np.maximum(np.abs(mat) - level, 0.0)


def _spd_roots(sigma: np.ndarray):
    """Ridged symmetric square root of a covariance and its inverse."""
    p = sigma.shape[0]
    ridged = sigma + (1e-6 * np.trace(sigma) / p) * np.eye(p)
    vals, vecs = linalg.eigh(0.5 * (ridged + ridged.T))
    vals = np.clip(vals, 1e-8, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    inv_root = (vecs / np.sqrt(vals)) @ vecs.T
    return root, inv_root


def solve_sparse_sdp(prob: SparseProblem) -> SparseSolution:
    """ADMM solve of the penalized Fantope program.

    Splits ``H = Sigma^{1/2} Pi Sigma^{1/2}``: the H-update is a Fantope
    projection including the gradient of ``tr(Omega Pi)``, the Pi-update is
    an entrywise soft-threshold at ``rho / nu`` of the back-transformed
    iterate, followed by dual ascent.  The returned ``pi_hat`` is nudged
    onto the feasible set (eigenvalue shift plus rescale), which preserves
    both the eigenvectors and the off-diagonal sparsity pattern.
    """
    omega = np.asarray(prob.omega, dtype=float)
    p = omega.shape[0]
    d, rho, cfg = prob.d, prob.rho, prob.admm
    root, inv_root = _spd_roots(np.asarray(prob.sigma, dtype=float))
    white = inv_root @ omega @ inv_root
    white = 0.5 * (white + white.T)
    spectrum = linalg.eigvalsh(white)
    lambda_d = float(spectrum[-d]) if d <= p else 0.0

    H = fantope_project(white, d)
    Pi = inv_root @ H @ inv_root
    U = np.zeros((p, p))
    nu = cfg.nu
    it = 0
    primal = dual = np.inf
    objective_trace = [] if prob.keep_objective_trace else None
    converged = False
    for it in range(1, cfg.max_iter + 1):
        APA = root @ Pi @ root
        H_new = fantope_project(APA + U + white / nu, d)
        Pi = _soft_threshold(inv_root @ (H_new - U) @ inv_root, rho / nu)
        Pi = 0.5 * (Pi + Pi.T)
        APA = root @ Pi @ root
        U = U + APA - H_new
        primal = linalg.norm(APA - H_new, "fro") / (1.0 + linalg.norm(H_new, "fro"))
        dual = nu * linalg.norm(H_new - H, "fro") / (1.0 + linalg.norm(H_new, "fro"))
        H = H_new
        if objective_trace is not None:
            objective_trace.append(
                float(-np.sum(omega * Pi) + rho * np.abs(Pi).sum())
            )
        if primal < cfg.tol_primal and dual < cfg.tol_dual:
            converged = True
            break
    if not converged:
        warnings.warn("sparse solver stopped at max_iter", RuntimeWarning)

    # feasibility pass: shift any negative eigenvalue mass, then shrink onto
    # the constraint set; neither step moves the eigenvectors
    eig_min = float(linalg.eigvalsh(Pi, subset_by_index=[0, 0])[0])
    if eig_min < 0.0:
        Pi = Pi + (-eig_min) * np.eye(p)
    APA = root @ Pi @ root
    tr_val = float(np.trace(APA))
    sp_val = float(linalg.eigvalsh(APA)[-1]) if p else 0.0
    scale = min(1.0, d / tr_val if tr_val > 0 else 1.0, 1.0 / sp_val if sp_val > 0 else 1.0)
    Pi = scale * Pi

    vals, vecs = linalg.eigh(Pi)
    top = vecs[:, ::-1][:, :d]
    gram = top.T @ (prob.sigma + (1e-6 * np.trace(prob.sigma) / p) * np.eye(p)) @ top
    gvals, gvecs = linalg.eigh(0.5 * (gram + gram.T))
    gram_inv_root = (gvecs / np.sqrt(np.clip(gvals, 1e-12, None))) @ gvecs.T
    beta = top @ gram_inv_root
    row_norms = np.sqrt(np.sum(beta * beta, axis=1))
    support = tuple(int(i) for i in np.flatnonzero(row_norms > _SUPPORT_TOL))

    APA = root @ Pi @ root
    diagnostics = {
        "objective": float(-np.sum(omega * Pi) + rho * np.abs(Pi).sum()),
        "primal_residual": float(primal),
        "dual_residual": float(dual),
        "iterations": int(it),
        "lambda_d": lambda_d,
        "trace_constraint": float(np.trace(APA)),
        "spectral_constraint": float(linalg.eigvalsh(APA)[-1]),
        "min_eigenvalue": float(linalg.eigvalsh(Pi, subset_by_index=[0, 0])[0]),
        "converged": converged,
    }
    if objective_trace is not None:
        diagnostics["objective_trace"] = np.asarray(objective_trace)
    return SparseSolution(
        pi_hat=Pi, beta_hat=beta, support=support, diagnostics=diagnostics
    )


def selection_metrics(beta_hat, beta0) -> tuple[float, float]:
    """True/false positive rates of the selected predictor set.

    The estimated support is the rows of ``beta_hat`` with Euclidean norm
    above 1e-6; the truth is the nonzero rows of ``beta0``.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    if beta_hat.ndim == 1:
        beta_hat = beta_hat[:, None]
    if beta0.ndim == 1:
        beta0 = beta0[:, None]
    if beta_hat.shape[0] != beta0.shape[0]:
        raise ValueError("row counts differ")
    truth = np.sqrt(np.sum(beta0 * beta0, axis=1)) > _SUPPORT_TOL
    if not truth.any():
        raise ValueError("truth support is empty")
    est = np.sqrt(np.sum(beta_hat * beta_hat, axis=1)) > _SUPPORT_TOL
    p = beta0.shape[0]
    n_true = int(truth.sum())
    tpr = float((est & truth).sum() / n_true)
    fpr = float((est & ~truth).sum() / (p - n_true)) if p > n_true else 0.0
    return tpr, fpr


def _fold_indices(n: int, folds: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xCF)))
    perm = rng.permutation(n)
    return np.array_split(perm, folds)


def tune_rho_cv(
    X,
    Y,
    H: int,
    fit: GaussianMixtureFit,
    d: int,
    grid,
    folds: int = 2,
    seed: int = 0,
    target: str = "exy",
    beta_tilde=None,
    admm: AdmmConfig = AdmmConfig(),
) -> float:
    """Pick the penalty maximizing the cross-validated fit criterion.

    For each fold the program is solved on the training part and scored by
    ``tr(Omega_holdout Pi_train)``; the grid value with the best mean score
    wins.  Deterministic given ``seed``.
    """
    from .gmm import posterior

    grid = list(grid)
    if not grid:
        raise ValueError("empty rho grid")
    if len(grid) == 1:
        return float(grid[0])
    if folds < 2:
        raise ValueError("need at least 2 folds")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    n, p = X.shape
    parts = _fold_indices(n, folds, seed)
    scores = np.zeros(len(grid))
    counts = np.zeros(len(grid))

    def _target_for(rows):
        Xr, Yr = X[rows], Y[rows]
        resp = posterior(fit, Xr)
        sub = GaussianMixtureFit(
            q=fit.q,
            weights=fit.weights,
            means=fit.means,
            covariances=fit.covariances,
            loglik=0.0,
            responsibilities=resp,
        )
        sl = slice_indicator(Yr, H, mode="continuous")
        if target == "exy":
            return omega_exy(Xr, sl, sub)
        return omega_rsir(Xr, sl, sub, beta_tilde)

    sigma = fit.covariances[0]  # shared covariance in the sparse regime
    for k, hold in enumerate(parts):
        train = np.concatenate([parts[j] for j in range(folds) if j != k])
        om_train = _target_for(train)
        om_hold = _target_for(hold)
        for g, rho in enumerate(grid):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    sol = solve_sparse_sdp(
                        SparseProblem(om_train, sigma, d, float(rho), admm)
                    )
            except (ValueError, linalg.LinAlgError) as exc:
                warnings.warn(f"rho={rho} fold={k} failed: {exc}", RuntimeWarning)
                continue
            scores[g] += float(np.sum(om_hold * sol.pi_hat))
            counts[g] += 1
    if not counts.any():
        raise RuntimeError("every (rho, fold) solve failed")
    mean_scores = np.where(counts > 0, scores / np.maximum(counts, 1), -np.inf)
    return float(grid[int(np.argmax(mean_scores))])
