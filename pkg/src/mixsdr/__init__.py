"""Mixture-model-adjusted inverse regression for sufficient dimension
reduction: candidate-matrix and estimating-equation estimators, their
sparse high-dimensional variants, simulation generators, and a Monte Carlo
benchmark harness."""

from .subspaces import (
    SubspaceEstimate,
    weighted_projection,
    residual_projection,
    principal_span,
    subspace_distance,
    orthonormalize,
)
from .slices import SliceIndicator, slice_indicator
from .gmm import (
    EmConfig,
    GaussianMixtureFit,
    fit_em,
    fit_best_bic,
    select_q_bic,
    posterior,
    projected_posterior,
    fit_hd_sparse,
)
from .candidates import CandidateMatrix, Block, classic_candidate, classic_estimate
from .adjusted import mixture_candidate
from .refined import (
    RefinedConfig,
    conditional_moments,
    importance_weights,
    refined_objective,
    minimize_refined,
    build_context,
)
from .sparse import (
    AdmmConfig,
    SparseProblem,
    SparseSolution,
    omega_exy,
    omega_rsir,
    fantope_project,
    solve_sparse_sdp,
    tune_rho_cv,
    selection_metrics,
)
from .datagen import SimSpec, GroundTruth, ar1_cov, sample_skew_normal, generate
from .benchmark import (
    BenchConfig,
    BenchmarkResult,
    run_benchmark,
    run_method,
    oos_r2,
    misspec_experiment,
    select_slice_count,
    oracle_fit,
)

__version__ = "0.1.0"
