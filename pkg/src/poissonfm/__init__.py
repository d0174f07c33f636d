"""Supervised Gamma-Poisson matrix factorization.

Counts are factored through K positive latent factors with Gamma priors;
an optional per-row response is regressed on the factor weights.  Fitting
runs either batch variational EM or stochastic variational inference;
fitted models support fold-in prediction and conditional feature queries,
plus an experimental stack of Gamma layers above the factor weights.
"""

from .deep import DeepConfig, DeepLayer, DeepStack, deep_grad_step, init_stack, link_gamma
from .errors import (
    CheckpointError,
    DataFormatError,
    DomainError,
    NumericalError,
    PfmError,
)
from .fileio import (
    Checkpoint,
    load_checkpoint,
    load_config,
    load_counts,
    load_responses,
    save_checkpoint,
    save_counts,
    save_responses,
)
from .gammamath import digamma, gamma_entropy, gamma_mean, gamma_mean_log, log_factorial
from .inference import (
    ElboTrace,
    FitConfig,
    FitResult,
    SviSchedule,
    fit,
    learning_rate,
    mstep_c,
    mstep_eta,
    mstep_sigma,
    natural_gradient_blend,
    svi_step,
    update_beta,
    update_phi,
    update_theta_row,
)
from .model import (
    BetaPosterior,
    CountMatrix,
    ModelConfig,
    RegressionParams,
    Responsibilities,
    ThetaPosterior,
    as_response_vector,
    elbo,
    poisson_rate,
    rate_matrix,
    sample_dataset,
    theta_second_moment,
    theta_second_moment_total,
)
from .predict import (
    FoldInResult,
    Query,
    QueryResult,
    expected_unobserved,
    fold_in,
    predict_response,
    rank_related,
    run_query,
)

__version__ = "0.1.0"
