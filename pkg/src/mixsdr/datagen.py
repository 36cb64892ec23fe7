"""Reproducible generators for the simulation designs used in benchmarks.

Every family returns the predictors, the response, and the ground truth
(basis of the central subspace, its dimension, and the active predictor
set), plus the generating mixture parameters where one exists so that
oracle experiments can inject them.  Replicate streams are counter-based:
``(seed, replicate)`` seeds an independent generator, so harness workers
never share RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = ["SimSpec", "GroundTruth", "ar1_cov", "sample_skew_normal", "generate", "FAMILIES"]

FAMILIES = (
    "model1",
    "model2",
    "model3",
    "model4",
    "guan41",
    "guan43",
    "guan45",
    "hdA",
    "hdB",
    "saveI",
    "saveII",
)

SHAPES = ("mixture", "v_shape", "w_shape")


@dataclass(frozen=True)
class SimSpec:
    """A simulation design: family, predictor shape, sizes, and seed."""

    family: str
    n: int
    p: int
    shape: str = "mixture"
    weights: tuple | None = None  # mixing-proportion override
    u: float | None = None  # separation scalar (hd families)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if self.p < _min_p(self.family):
            raise ValueError(f"{self.family} needs p >= {_min_p(self.family)}")


@dataclass(frozen=True)
class GroundTruth:
    """True central-subspace basis with support metadata.

    ``mixture`` carries the generating mixture parameters (weights, means,
    covariances) when the predictor really is a finite mixture, enabling
    oracle-parameter experiments; ``labels`` are the latent component
    assignments of the generated sample.
    """

    beta0: np.ndarray
    d: int
    support: tuple
    mixture: dict | None = field(default=None, compare=False)
    labels: np.ndarray | None = field(default=None, compare=False)


def _min_p(family: str) -> int:
    return {"model3": 4, "guan41": 10, "guan43": 10, "guan45": 10}.get(family, 3)


def ar1_cov(r: float, p: int) -> np.ndarray:
    """AR(1) covariance with (i, j) entry ``r ** |i - j|``."""
    if abs(r) >= 1:
        raise ValueError("|r| must be below 1")
    return linalg.toeplitz(r ** np.arange(p))


def sample_skew_normal(mu, sigma, C, n: int, rng) -> np.ndarray:
    """Draws from the multivariate skew-normal SN(mu, sigma, C).

    Uses the stochastic representation: with correlation matrix R of
    ``sigma``, ``delta = R C / sqrt(1 + C' R C)``, a half-normal scalar t
    and an independent ``V ~ N(0, R - delta delta')``, the draw is
    ``mu + omega * (delta t + V)`` where omega are the marginal scales.
    ``C = 0`` reproduces N(mu, sigma) exactly.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    C = np.asarray(C, dtype=float)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    p = mu.shape[0]
    omega = np.sqrt(np.diag(sigma))
    if np.any(omega <= 0):
        raise ValueError("invalid skewness")
    corr = sigma / np.outer(omega, omega)
    rc = corr @ C
    delta = rc / np.sqrt(1.0 + C @ rc)
    adj = corr - np.outer(delta, delta)
    vals, vecs = linalg.eigh(0.5 * (adj + adj.T))
    if vals[0] < -1e-10:
        raise ValueError("invalid skewness")
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    t = np.abs(rng.standard_normal(n))
    V = rng.standard_normal((n, p)) @ root.T
    Z = delta[None, :] * t[:, None] + V
    return mu[None, :] + omega[None, :] * Z


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _basis_cols(p, cols) -> np.ndarray:
    out = np.zeros((p, len(cols)))
    for j, col in enumerate(cols):
        out[:, j] = _unit(np.asarray(col, dtype=float))
    return out


def _e(p, idx, scale=1.0):
    v = np.zeros(p)
    v[idx] = scale
    return v


def _sample_mixture(rng, n, weights, means, covs):
    weights = np.asarray(weights, dtype=float)
    labels = rng.choice(len(weights), size=n, p=weights)
    p = means[0].shape[0]
    X = np.empty((n, p))
    roots = [linalg.cholesky(c, lower=True) for c in covs]
    for i in range(len(weights)):
        rows = labels == i
        k = int(rows.sum())
        if k:
            X[rows] = means[i] + rng.standard_normal((k, p)) @ roots[i].T
    return X, labels


def _curved_x(rng, n, p, base_r, w_shape: bool):
    """Unimodal curved predictor: X2 is |X1| (V) or cos(2 X1) (W) plus a
    small error; the remaining coordinates are AR(1) jointly with X1."""
    other = _sample_mixture(
        rng, n, [1.0], [np.zeros(p - 1)], [ar1_cov(base_r, p - 1)]
    )[0]
    x1 = other[:, 0]
    eps1 = 0.1 * rng.standard_normal(n)
    x2 = (np.cos(2.0 * x1) if w_shape else np.abs(x1)) + eps1
    X = np.empty((n, p))
    X[:, 0] = x1
    X[:, 1] = x2
    X[:, 2:] = other[:, 1:]
    return X


def _mixture_truth(weights, means, covs) -> dict:
    return {
        "weights": np.asarray(weights, dtype=float),
        "means": np.asarray(means, dtype=float),
        "covariances": np.asarray(covs, dtype=float),
    }


def _predictors(spec: SimSpec, rng):
    """Draw X (and mixture metadata) for the requested family and shape."""
    n, p = spec.n, spec.p
    fam = spec.family
    if spec.shape in ("v_shape", "w_shape"):
        base_r = -0.3 if fam in ("hdA", "hdB") else 0.3
        X = _curved_x(rng, n, p, base_r, w_shape=spec.shape == "w_shape")
        return X, None, None

    if fam in ("model1", "model2", "model3"):
        mu1 = {
            "model1": _e(p, [0, 1, 2], 1.5),
            "model2": _e(p, [0, 1, 2], 0.8),
            "model3": np.full(p, 2.0 / np.sqrt(p)),
        }[fam]
        r1, r2 = {"model1": (0.5, 0.5), "model2": (0.5, -0.5), "model3": (0.5, -0.5)}[fam]
        weights = spec.weights if spec.weights is not None else (0.5, 0.5)
        means = [mu1, -mu1]
        covs = [ar1_cov(r1, p), ar1_cov(r2, p)]
    elif fam == "model4":
        weights = spec.weights if spec.weights is not None else (0.25, 0.5, 0.25)
        means = [_e(p, [0, 1], 2.0), np.zeros(p), _e(p, 1, 2.0) + _e(p, 0, -2.0)]
        covs = [ar1_cov(0.3, p), np.eye(p), ar1_cov(-0.3, p)]
    elif fam in ("hdA", "hdB"):
        if spec.u is None:
            raise ValueError("hd families need the separation scalar u")
        cov = 1.5 * ar1_cov(-0.3, p)
        gamma = np.zeros(p)
        gamma[:10] = 2.0 * spec.u
        mu1 = np.full(p, spec.u)
        mu2 = mu1 - cov @ gamma
        weights = spec.weights if spec.weights is not None else (0.5, 0.5)
        means = [mu1, mu2]
        covs = [cov, cov]
    elif fam in ("saveI", "saveII"):
        mu1 = _e(p, [0, 1], -1.5)
        r2 = -0.3 if fam == "saveI" else 0.3
        weights = spec.weights if spec.weights is not None else (0.5, 0.5)
        means = [mu1, -mu1]
        covs = [ar1_cov(0.3, p), ar1_cov(r2, p)]
    else:  # guan families: three skew-normal components
        if fam in ("guan41", "guan43"):
            mus = [_e(p, [0, 1, 2], 3.0), _e(p, [0, 2, 3], 3.0), _e(p, [0, 3, 4], 3.0)]
            beta1 = _e(p, [0, 1, 2, 3])
            shapes = [beta1, 3.0 * beta1, _e(p, [0, 1, 6, 7])]
        else:
            mus = [_e(p, [0, 1, 2, 3], 3.0), _e(p, [0, 3, 4], 3.0), _e(p, [0, 1, 4, 5], 3.0)]
            beta1 = _e(p, [0, 1, 2, 3])
            shapes = [2.0 * beta1, 3.0 * beta1, -_e(p, [0, 1, 6, 7])]
        weights = spec.weights if spec.weights is not None else (0.5, 0.3, 0.2)
        labels = rng.choice(3, size=n, p=np.asarray(weights, dtype=float))
        X = np.empty((n, p))
        for i in range(3):
            rows = labels == i
            if rows.any():
                X[rows] = sample_skew_normal(mus[i], np.eye(p), shapes[i], int(rows.sum()), rng)
        return X, None, labels

    X, labels = _sample_mixture(rng, n, weights, means, covs)
    return X, _mixture_truth(weights, means, covs), labels


def generate(spec: SimSpec, replicate: int = 0):
    """Generate one replicate of a simulation design.

    Returns ``(X, Y, truth)``.  Fixing ``(spec.seed, replicate)`` makes the
    output bitwise reproducible.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, replicate)))
    X, mixture, labels = _predictors(spec, rng)
    n, p = spec.n, spec.p
    eps = rng.standard_normal(n)
    fam = spec.family

    if fam == "model1":
        Y = np.sign(X[:, 0] + 1.0) * np.log(np.abs(X[:, 1] - 2.0 + eps))
        beta0 = _basis_cols(p, [_e(p, 0), _e(p, 1)])
        support = (0, 1)
    elif fam == "model2":
        Y = np.sign(X[:, 0]) * (5.0 - X[:, 0] ** 2 + X[:, 1] ** 2) + 0.5 * eps
        beta0 = _basis_cols(p, [_e(p, 0), _e(p, 1)])
        support = (0, 1)
    elif fam == "model3":
        Y = (X[:, 0] + X[:, 1]) ** 2 + np.exp(X[:, 2] + X[:, 3]) * eps
        beta0 = _basis_cols(p, [_e(p, [0, 1]), _e(p, [2, 3])])
        support = (0, 1, 2, 3)
    elif fam == "model4":
        prob = 1.0 / (1.0 + np.exp(2.0 * X[:, 0] + 2.0 * X[:, 1] + 4.0))
        Y = (rng.random(n) < prob).astype(float)
        beta0 = _basis_cols(p, [_e(p, [0, 1])])
        support = (0, 1)
    elif fam == "guan41":
        b1 = _e(p, [0, 1, 2, 3])
        Y = X @ b1 + eps
        beta0 = _basis_cols(p, [b1])
        support = (0, 1, 2, 3)
    elif fam == "guan43":
        b1 = _e(p, [0, 1, 2, 3])
        Y = np.sin(X @ b1 / 3.0 + eps)
        beta0 = _basis_cols(p, [b1])
        support = (0, 1, 2, 3)
    elif fam == "guan45":
        b1 = _e(p, [0, 1, 2, 3])
        b2 = _e(p, [0, 1, 4, 5])
        Y = (X @ b1 + 0.3 * eps) / (2.0 + np.abs(X @ b2 - 4.0 + eps))
        beta0 = _basis_cols(p, [b1, b2])
        support = (0, 1, 2, 3, 4, 5)
    elif fam == "hdA":
        index = (X[:, 0] + X[:, 1] + X[:, 2]) / np.sqrt(3.0)
        Y = (index + 1.5) ** 2 + 0.5 * eps
        beta0 = _basis_cols(p, [_e(p, [0, 1, 2])])
        support = (0, 1, 2)
    elif fam == "hdB":
        index = (X[:, 0] + X[:, 1] + X[:, 2]) / np.sqrt(3.0)
        Y = np.exp(index) + eps
        beta0 = _basis_cols(p, [_e(p, [0, 1, 2])])
        support = (0, 1, 2)
    elif fam == "saveI":
        Y = np.sin(X[:, 0] + X[:, 1] + 2.0) + 0.5 * eps
        beta0 = _basis_cols(p, [_e(p, [0, 1])])
        support = (0, 1)
    else:  # saveII
        Y = np.sin(X[:, 0]) + np.sin(X[:, 1]) + 0.5 * eps
        beta0 = _basis_cols(p, [_e(p, 0), _e(p, 1)])
        support = (0, 1)

    truth = GroundTruth(
        beta0=beta0,
        d=beta0.shape[1],
        support=support,
        mixture=mixture,
        labels=labels,
    )
    return X, Y, truth
