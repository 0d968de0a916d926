"""Latent brain-network inference with a hidden Markov random field over edges.

Each subject's Fisher-z correlations are Gaussian given a latent binary
network, and the latent network follows a Gibbs distribution whose energy is
built from user-selected graph features and the wiring cost of every edge.
"""

__version__ = "0.1.0"

from .estimator import (
    FisherZTransformer,
    HMRFNetworkEstimator,
    ThresholdNetworkEstimator,
    posterior_marginals,
)
from .features import Feature, FeatureSpec, get_feature, known_features, register_feature
from .graph import EdgeIndex, LatentConfig, NodeTable, build_edge_index
from .learner import FitConfig, FitResult, beta_gradient_cd, beta_gradient_exact, fit
from .model import (
    ModelParams,
    SubjectData,
    exact_loglik,
    exact_posterior_marginals,
    exact_prior_marginals,
    partition_function,
)
from .sampler import ModelContext, run_chains
from .selection import ais_loglik, compute_bic
from .simulator import generate_dataset, score_recovery, threshold_baseline

__all__ = [
    "EdgeIndex", "Feature", "FeatureSpec", "FisherZTransformer", "FitConfig", "FitResult",
    "HMRFNetworkEstimator", "LatentConfig", "ModelContext", "ModelParams", "NodeTable",
    "SubjectData", "ThresholdNetworkEstimator", "ais_loglik", "beta_gradient_cd",
    "beta_gradient_exact", "build_edge_index", "compute_bic", "exact_loglik",
    "exact_posterior_marginals", "exact_prior_marginals", "fit", "generate_dataset",
    "get_feature", "known_features", "partition_function", "posterior_marginals",
    "register_feature", "run_chains", "score_recovery", "threshold_baseline",
]
