"""Refined mixture-adjusted estimators (second adjustment strategy).

Each method minimizes an estimating-equation objective built from the
closed-form conditional moments of X given a projected predictor under the
mixture fit.  The minimization iterates a frozen quadratic: all nonlinear
occurrences of the argument are pinned at the current iterate, which turns
the objective into a linear least-squares problem in the basis entries;
the minimizer is orthonormalized and becomes the next iterate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import adjusted
from .gmm import GaussianMixtureFit, projected_posterior
from .slices import SliceIndicator, slice_indicator
from .subspaces import SubspaceEstimate, orthonormalize, subspace_distance

__all__ = [
    "RefinedConfig",
    "RefinedContext",
    "ConditionalMoments",
    "conditional_moments",
    "importance_weights",
    "build_context",
    "refined_objective",
    "minimize_refined",
    "REFINED_METHODS",
]

REFINED_METHODS = ("sir_rm", "save_rm", "phd_rm", "dr_rm")

_PILOT_FOR = {
    "sir_rm": "sir_m",
    "save_rm": "save_m",
    "phd_rm": "phd_m",
    "dr_rm": "dr_m",
}


@dataclass(frozen=True)
class RefinedConfig:
    """Iteration controls for the quadratic minimization.

    ``c0`` is the convergence threshold on the projector distance between
    consecutive iterates; ``None`` means the default 1/n.  ``mode`` selects
    how projected posteriors are computed ("closed_form" or "kernel");
    ``phi_constant`` switches the outer weighting of the second-order
    objectives from squared posteriors to a constant.
    """

    c0: float | None = None
    max_iter: int = 50
    mode: str = "closed_form"
    phi_constant: bool = False

    def __post_init__(self):
        if self.c0 is not None and self.c0 <= 0:
            raise ValueError("c0 must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.mode not in ("closed_form", "kernel"):
            raise ValueError("mode must be 'closed_form' or 'kernel'")


@dataclass(frozen=True)
class ConditionalMoments:
    mu1: np.ndarray
    mu2: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


def _as_basis(beta) -> np.ndarray:
    basis = beta.basis if isinstance(beta, SubspaceEstimate) else np.asarray(beta, float)
    return basis[:, None] if basis.ndim == 1 else basis


def _posteriors_at(fit, basis, points, mode, sample=None):
    if mode == "kernel":
        return projected_posterior(
            fit, basis, points, mode="kernel",
            sample=points if sample is None else sample,
        )
    return projected_posterior(fit, basis, points, mode="closed_form")


def _regression_rows(fit, basis, X):
    """Per-component rows of P'(Sigma_i, beta)(x - mu_i) + mu_i, as an
    array of shape (q, n, p)."""
    out = np.empty((fit.q, X.shape[0], fit.p))
    for i in range(fit.q):
        gram = basis.T @ fit.covariances[i] @ basis
        try:
            core = linalg.solve(gram, basis.T @ fit.covariances[i], assume_a="pos")
        except linalg.LinAlgError as exc:
            raise ValueError("degenerate projected component") from exc
        proj = basis @ core  # P(Sigma_i, beta)
        out[i] = (X - fit.means[i]) @ proj + fit.means[i]
    return out


def _residual_covariances(fit, basis):
    """Sigma_i Q(Sigma_i, beta) for each component, shape (q, p, p)."""
    out = np.empty((fit.q, fit.p, fit.p))
    for i in range(fit.q):
        cov = fit.covariances[i]
        gram = basis.T @ cov @ basis
        try:
            core = linalg.solve(gram, basis.T @ cov, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise ValueError("degenerate projected component") from exc
        out[i] = cov - cov @ basis @ core
    return out


def conditional_moments(
    fit: GaussianMixtureFit,
    beta,
    x,
    mode: str = "closed_form",
    sample=None,
) -> ConditionalMoments:
    """Closed-form conditional moments of X given the projected predictor.

    Returns the first conditional moment ``mu1``, the mixture second-moment
    sum ``mu2``, the conditional mean (equal to ``mu1``), and the
    conditional variance
    ``sum_i pi_i(beta'x) Sigma_i Q(Sigma_i, beta) + mu2 - mu1 mu1'``.

    Accepts a single point or an (n, p) batch.
    """
    basis = _as_basis(beta)
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    pts = x_arr[None, :] if single else x_arr
    pp = _posteriors_at(fit, basis, pts, mode, sample=sample)
    rows = _regression_rows(fit, basis, pts)
    mu1 = np.einsum("mi,imp->mp", pp, rows)
    mu2 = np.einsum("mi,imp,imq->mpq", pp, rows, rows)
    resid = _residual_covariances(fit, basis)
    variance = (
        np.einsum("mi,ipq->mpq", pp, resid)
        + mu2
        - np.einsum("mp,mq->mpq", mu1, mu1)
    )
    if single:
        return ConditionalMoments(mu1[0], mu2[0], mu1[0], variance[0])
    return ConditionalMoments(mu1, mu2, mu1, variance)


def importance_weights(
    fit: GaussianMixtureFit,
    beta1,
    X,
    slices: SliceIndicator,
    mode: str = "closed_form",
) -> np.ndarray:
    """Outcome-importance matrices D(beta1' x) for every sample.

    ``D(beta1'x) = sum_i sum_j (beta1' Sigma_j beta1)^{-1}
    E_n{beta1'(X - mu_j) Y_S' pi_i(beta1'X) pi_j(beta1'X)} pi_i(beta1'x)``,
    a (d, H) matrix per observation, returned as an (n, d, H) array.
    """
    basis = _as_basis(beta1)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    d = basis.shape[1]
    ind = slices.matrix
    pp = _posteriors_at(fit, basis, X, mode)
    comp = np.zeros((fit.q, d, slices.H))
    for j in range(fit.q):
        gram = basis.T @ fit.covariances[j] @ basis
        try:
            gram_inv = linalg.inv(gram)
        except linalg.LinAlgError as exc:
            raise ValueError("singular projected component covariance") from exc
        a_j = (X - fit.means[j]) @ basis @ gram_inv.T  # rows a_jm'
        for i in range(fit.q):
            w = pp[:, i] * pp[:, j]
            comp[i] += a_j.T @ (w[:, None] * ind) / n
    return np.einsum("idh,mi->mdh", comp, pp)


def _sliced_importance(dhat: np.ndarray, slices: SliceIndicator) -> np.ndarray:
    """vec'{D(x) diag(Y_S)} rows: only the sample's own slice column of D
    survives.  Shape (n, d*H), column-major vec layout."""
    n, d, H = dhat.shape
    out = np.zeros((n, d * H))
    labels = slices.labels
    for h in range(H):
        rows = labels == h
        out[rows, h * d:(h + 1) * d] = dhat[rows, :, h]
    return out


@dataclass
class RefinedContext:
    """Frozen per-run inputs shared by the objective and its minimizer."""

    method: str
    X: np.ndarray
    slices: SliceIndicator | None
    fit: GaussianMixtureFit
    pilot: SubspaceEstimate
    pilot_posteriors: np.ndarray  # pi_i at the pilot projection, fixed
    cfg: RefinedConfig
    yc: np.ndarray | None = None  # centered response (phd only)
    ds: np.ndarray | None = None  # sliced importance rows (sir only)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def build_context(
    method: str,
    X,
    Y,
    H: int | None,
    fit: GaussianMixtureFit,
    cfg: RefinedConfig = RefinedConfig(),
    pilot: SubspaceEstimate | None = None,
    slices: SliceIndicator | None = None,
    d: int | None = None,
) -> RefinedContext:
    """Assemble everything a refined method needs from raw inputs."""
    if method not in REFINED_METHODS:
        raise ValueError(f"unknown method {method!r}")
    X = np.asarray(X, dtype=float)
    yc = None
    if method == "phd_rm":
        yc = np.asarray(Y, dtype=float).ravel() - np.mean(Y)
    elif slices is None:
        slices = slice_indicator(Y, H, mode="continuous")
    if pilot is None:
        if d is None:
            raise ValueError("need d to build the pilot estimate")
        pilot = adjusted.estimate(_PILOT_FOR[method], X, Y, H, fit, d, slices=slices)
    pp = _posteriors_at(fit, pilot.basis, X, cfg.mode)
    ds = None
    if method == "sir_rm":
        dhat = importance_weights(fit, pilot, X, slices, mode=cfg.mode)
        ds = _sliced_importance(dhat, slices)
    return RefinedContext(
        method=method,
        X=X,
        slices=slices,
        fit=fit,
        pilot=pilot,
        pilot_posteriors=pp,
        cfg=cfg,
        yc=yc,
        ds=ds,
    )


# ---------------------------------------------------------------------------
# objective evaluation (the argument enters every projection and posterior,
# except the pilot-pinned terms dictated by the estimating equations)
# ---------------------------------------------------------------------------


def _g1_value(ctx: RefinedContext, basis) -> float:
    fit, X = ctx.fit, ctx.X
    pp = ctx.pilot_posteriors
    rows = _regression_rows(fit, basis, X)
    rx = np.einsum("mi,imp->mp", pp, rows)
    mat = (X - rx).T @ ctx.ds / ctx.n
    return float(np.sum(mat * mat))


def _g2_terms(ctx: RefinedContext, basis):
    """Matrices of the SAVE objective at the given basis, posteriors at the
    argument."""
    fit, X, ind = ctx.fit, ctx.X, ctx.slices.matrix
    n, H, q = ctx.n, ctx.slices.H, ctx.fit.q
    pp = _posteriors_at(fit, basis, X, ctx.cfg.mode, sample=X)
    phi = np.ones_like(pp) if ctx.cfg.phi_constant else pp
    rows = _regression_rows(fit, basis, X)
    resid = _residual_covariances(fit, basis)
    terms = []
    for i in range(q):
        w2 = phi[:, i] ** 2
        for h in range(H):
            w = w2 * ind[:, h]
            second = np.einsum("m,mp,mq->pq", w, X, X) / n
            mu2_term = np.einsum("m,mj,jmp,jmq->pq", w, pp, rows, rows) / n
            coeff = (w @ pp) / n  # E_n[phi_i^2 pi_j Y_h] over j
            model = np.einsum("j,jpq->pq", coeff, resid)
            terms.append(second - mu2_term - model)
    return terms


def _gphd_terms(ctx: RefinedContext, basis):
    fit, X = ctx.fit, ctx.X
    n, q = ctx.n, ctx.fit.q
    pp = _posteriors_at(fit, basis, X, ctx.cfg.mode, sample=X)
    phi = np.ones_like(pp) if ctx.cfg.phi_constant else pp
    rows = _regression_rows(fit, basis, X)
    resid = _residual_covariances(fit, basis)
    terms = []
    for j in range(q):
        w = phi[:, j] * ctx.yc
        var_coeff = (w @ pp) / n
        model_var = np.einsum("i,ipq->pq", var_coeff, resid)
        mu2_term = np.einsum("m,mi,imp,imq->pq", w, pp, rows, rows) / n
        data = np.einsum("m,mp,mq->pq", w, X, X) / n
        terms.append(model_var + mu2_term - data)
    return terms


def _gdr_terms(ctx: RefinedContext, basis):
    """Slice-pair contrast matrices of the DR objective (constant outer
    weight) and their pair-probability weights."""
    fit, X, ind = ctx.fit, ctx.X, ctx.slices.matrix
    n, H = ctx.n, ctx.slices.H
    counts = np.maximum(ind.sum(axis=0), 1.0)
    props = ind.sum(axis=0) / n
    pp = _posteriors_at(fit, basis, X, ctx.cfg.mode, sample=X)
    rows = _regression_rows(fit, basis, X)
    resid = _residual_covariances(fit, basis)
    m1 = np.einsum("mi,imp->mp", pp, rows)
    mu2 = np.einsum("mi,imp,imq->mpq", pp, rows, rows)
    var_part = np.einsum("mi,ipq->mpq", pp, resid) + mu2
    avg_var = np.einsum("nh,npq->hpq", ind, var_part) / counts[:, None, None]
    avg_m1 = (ind.T @ m1) / counts[:, None]
    data_m = (ind.T @ X) / counts[:, None]
    data_S = np.einsum("nh,np,nq->hpq", ind, X, X) / counts[:, None, None]
    terms, weights = [], []
    for s in range(H):
        for t in range(H):
            data_pair = (
                data_S[s] + data_S[t]
                - np.outer(data_m[s], data_m[t])
                - np.outer(data_m[t], data_m[s])
            )
            model_pair = (
                avg_var[s] + avg_var[t]
                - np.outer(avg_m1[s], avg_m1[t])
                - np.outer(avg_m1[t], avg_m1[s])
            )
            terms.append(model_pair - data_pair)
            weights.append(props[s] * props[t])
    return terms, weights


def refined_objective(method: str, beta, context: RefinedContext) -> float:
    """Value of the estimating-equation objective at ``span(beta)``.

    The value depends on the argument only through its span (invariant to
    any invertible recombination of the basis columns) and is nonnegative
    by construction.
    """
    if method != context.method:
        raise ValueError("context was built for a different method")
    basis = _as_basis(beta)
    if method == "sir_rm":
        return _g1_value(context, basis)
    if method == "save_rm":
        return float(sum(np.sum(t * t) for t in _g2_terms(context, basis)))
    if method == "phd_rm":
        return float(sum(np.sum(t * t) for t in _gphd_terms(context, basis)))
    terms, weights = _gdr_terms(context, basis)
    return float(sum(w * np.sum(t * t) for w, t in zip(weights, terms)))


# ---------------------------------------------------------------------------
# frozen quadratic steps
# ---------------------------------------------------------------------------


def _solve_stacked(design: np.ndarray, target: np.ndarray, p: int, d: int):
    gram = design.T @ design
    rhs = design.T @ target
    ridge_flag = False
    try:
        sol = linalg.solve(gram, rhs, assume_a="pos")
        if not np.all(np.isfinite(sol)):
            raise linalg.LinAlgError("non-finite solution")
    except linalg.LinAlgError:
        ridge = 1e-8 * np.trace(gram) / gram.shape[0]
        sol = linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs, assume_a="pos")
        ridge_flag = True
    return sol.reshape((p, d), order="F"), ridge_flag


def _sir_step_pieces(ctx: RefinedContext, bk: np.ndarray):
    """Constant target and per-component factors of the frozen G1."""
    fit, X, pp, ds = ctx.fit, ctx.X, ctx.pilot_posteriors, ctx.ds
    n = ctx.n
    mix_mean = pp @ fit.means
    target_mat = (X - mix_mean).T @ ds / n
    w_list = []
    for i in range(fit.q):
        gram = bk.T @ fit.covariances[i] @ bk
        core = linalg.solve(gram, bk.T, assume_a="pos")
        a_i = (X - fit.means[i]) @ core.T  # rows a_im'
        w_list.append(a_i.T @ (pp[:, i][:, None] * ds) / n)  # (d, dH)
    return target_mat, w_list


def _frozen_step_sir(ctx: RefinedContext, bk: np.ndarray):
    fit = ctx.fit
    p, d = bk.shape
    target_mat, w_list = _sir_step_pieces(ctx, bk)
    design = np.zeros((target_mat.size, p * d))
    for i in range(fit.q):
        design += np.kron(w_list[i].T, fit.covariances[i])
    return _solve_stacked(design, target_mat.flatten(order="F"), p, d)


def _frozen_value_sir(ctx: RefinedContext, bk: np.ndarray, beta: np.ndarray) -> float:
    fit = ctx.fit
    target_mat, w_list = _sir_step_pieces(ctx, bk)
    total = target_mat.copy()
    for i in range(fit.q):
        total -= fit.covariances[i] @ beta @ w_list[i]
    return float(np.sum(total * total))


def _frozen_step_quadratic(ctx: RefinedContext, bk: np.ndarray):
    """One frozen step of a second-order objective: model moments pinned at
    the iterate, slice coefficients pinned at the pilot, residual
    projections linearized."""
    fit, X = ctx.fit, ctx.X
    n, p = X.shape
    d = bk.shape[1]
    q = fit.q
    rows_k = _regression_rows(fit, bk, X)
    pp_k = _posteriors_at(fit, bk, X, ctx.cfg.mode, sample=X)
    phi = np.ones_like(ctx.pilot_posteriors) if ctx.cfg.phi_constant else ctx.pilot_posteriors
    pp_coeff = ctx.pilot_posteriors
    kron_parts = []
    for j in range(q):
        gram = bk.T @ fit.covariances[j] @ bk
        r_j = linalg.solve(gram, bk.T @ fit.covariances[j], assume_a="pos")
        kron_parts.append(np.kron(r_j.T, fit.covariances[j]))

    design_rows, target_rows = [], []

    if ctx.method == "save_rm":
        ind, H = ctx.slices.matrix, ctx.slices.H
        for i in range(q):
            w2 = phi[:, i] ** 2
            for h in range(H):
                w = w2 * ind[:, h]
                coeff = (w @ pp_coeff) / n
                second = np.einsum("m,mp,mq->pq", w, X, X) / n
                mu2_term = np.einsum("m,mj,jmp,jmq->pq", w, pp_k, rows_k, rows_k) / n
                const = (
                    second
                    - mu2_term
                    - np.einsum("j,jpq->pq", coeff, fit.covariances)
                )
                design = sum(coeff[j] * kron_parts[j] for j in range(q))
                design_rows.append(design)
                target_rows.append(-const.flatten(order="F"))
    elif ctx.method == "phd_rm":
        for j in range(q):
            w = phi[:, j] * ctx.yc
            coeff = (w @ pp_coeff) / n
            mu2_term = np.einsum("m,mi,imp,imq->pq", w, pp_k, rows_k, rows_k) / n
            data = np.einsum("m,mp,mq->pq", w, X, X) / n
            const = (
                np.einsum("i,ipq->pq", coeff, fit.covariances)
                + mu2_term
                - data
            )
            design = sum(coeff[i] * kron_parts[i] for i in range(q))
            design_rows.append(design)
            target_rows.append(const.flatten(order="F"))
    else:  # dr_rm
        ind, H = ctx.slices.matrix, ctx.slices.H
        counts = np.maximum(ind.sum(axis=0), 1.0)
        props = ind.sum(axis=0) / n
        m1 = np.einsum("mi,imp->mp", pp_k, rows_k)
        mu2 = np.einsum("mi,imp,imq->mpq", pp_k, rows_k, rows_k)
        avg_mu2 = np.einsum("nh,npq->hpq", ind, mu2) / counts[:, None, None]
        avg_m1 = (ind.T @ m1) / counts[:, None]
        w_slice = (ind.T @ pp_coeff) / counts[:, None]
        data_m = (ind.T @ X) / counts[:, None]
        data_S = np.einsum("nh,np,nq->hpq", ind, X, X) / counts[:, None, None]
        sigma_sum = np.einsum("hi,ipq->hpq", w_slice, fit.covariances)
        for s in range(H):
            for t in range(H):
                wgt = np.sqrt(props[s] * props[t])
                data_pair = (
                    data_S[s] + data_S[t]
                    - np.outer(data_m[s], data_m[t])
                    - np.outer(data_m[t], data_m[s])
                )
                const = (
                    sigma_sum[s] + sigma_sum[t]
                    + avg_mu2[s] + avg_mu2[t]
                    - np.outer(avg_m1[s], avg_m1[t])
                    - np.outer(avg_m1[t], avg_m1[s])
                    - data_pair
                )
                coeff = w_slice[s] + w_slice[t]
                design = sum(coeff[j] * kron_parts[j] for j in range(q))
                design_rows.append(wgt * design)
                target_rows.append(wgt * const.flatten(order="F"))

    design = np.vstack(design_rows)
    target = np.concatenate(target_rows)
    return _solve_stacked(design, target, p, d)


def minimize_refined(
    method: str,
    X,
    Y,
    H: int | None,
    fit: GaussianMixtureFit,
    d: int,
    cfg: RefinedConfig = RefinedConfig(),
    pilot: SubspaceEstimate | None = None,
    slices: SliceIndicator | None = None,
    return_info: bool = False,
):
    """Iterated frozen-quadratic minimization of a refined objective.

    Starts from the corresponding first-strategy estimate (or a supplied
    ``pilot``), alternates the linearized least-squares solve with
    orthonormalization of the minimizer, and stops once the projector
    distance between consecutive iterates drops below ``c0`` (default 1/n)
    or ``max_iter`` is hit, in which case the last iterate is returned
    with a warning.
    """
    if method not in REFINED_METHODS:
        raise ValueError(f"unknown method {method!r}")
    ctx = build_context(method, X, Y, H, fit, cfg, pilot=pilot, slices=slices, d=d)
    n = ctx.n
    c0 = cfg.c0 if cfg.c0 is not None else 1.0 / n
    bk = ctx.pilot.basis
    info = {
        "surrogate_before": [],
        "surrogate_after": [],
        "steps": [],
        "objective": [refined_objective(method, bk, ctx)],
        "ridged": False,
    }
    # the iteration is a fixed-point scheme, not a descent method: keep the
    # iterate with the smallest objective value seen along the trajectory
    best_basis, best_val = bk, info["objective"][0]
    warning = None
    converged = np.isinf(c0)
    for _ in range(cfg.max_iter):
        if converged:
            break
        if method == "sir_rm":
            beta_raw, ridged = _frozen_step_sir(ctx, bk)
            info["surrogate_before"].append(_frozen_value_sir(ctx, bk, bk))
            info["surrogate_after"].append(_frozen_value_sir(ctx, bk, beta_raw))
        else:
            beta_raw, ridged = _frozen_step_quadratic(ctx, bk)
        if ridged:
            info["ridged"] = True
        try:
            b_next = orthonormalize(beta_raw)
        except ValueError:
            warning = "rank-deficient least-squares step"
            break
        step = subspace_distance(bk, b_next)
        info["steps"].append(step)
        val = refined_objective(method, b_next, ctx)
        info["objective"].append(val)
        if val < best_val:
            best_basis, best_val = b_next, val
        bk = b_next
        if step < c0:
            converged = True
    if not converged and warning is None:
        warning = "refined iteration stopped at max_iter"
        warnings.warn(warning, RuntimeWarning)
    est = SubspaceEstimate(best_basis, d, warning=warning)
    if return_info:
        return est, info
    return est
