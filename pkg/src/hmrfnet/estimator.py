"""scikit-learn style wrappers: a Fisher-z transformer, the HMRF network estimator and a thresholding baseline.

Rows of ``X`` are subjects, columns are edges in edge-id order::

    pipe = make_pipeline(FisherZTransformer(), HMRFNetworkEstimator(nodes, features=("bias", "common_neighbors")))
    pipe.fit(R)                      # R: (n, d) correlations or (n, N, N) matrices
    probs = pipe.predict_proba(R)    # (n, d) posterior edge probabilities
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .features import FeatureSpec
from .graph import NodeTable, build_edge_index
from .io import fisher_transform, matrix_to_edges
from .learner import FitConfig, fit
from .model import D_MAX_EXACT, ModelParams, exact_posterior_marginals
from .sampler import ModelContext, sampled_posterior_marginals
from .selection import SelectionConfig, evidence, n_parameters
from .simulator import sample_prior, threshold_baseline


def posterior_marginals(params: ModelParams, spec: FeatureSpec, Y, idx, nodes,
                        d_max_exact: int = D_MAX_EXACT, seed: int = 0, n_chains: int = 4,
                        n_sweeps: int = 2000, burn_in: int = 1000, thinning: int = 10,
                        kernel: str = "gibbs") -> np.ndarray:
    """``P(x_i = 1 | y_t)`` for every subject and edge: enumeration when ``d`` allows, else Gibbs chains."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if idx.d <= d_max_exact:
        return np.atleast_2d(exact_posterior_marginals(params, spec, Y, idx, nodes, d_max_exact))
    ctx = ModelContext(params, spec, idx, nodes)
    return sampled_posterior_marginals(ctx, Y, n_chains, n_sweeps, burn_in, thinning, seed, kernel)


def _check_seed(random_state) -> int:
    if isinstance(random_state, bool) or not isinstance(random_state, numbers.Integral) or random_state < 0:
        raise ValueError(f"random_state must be a non-negative integer, got {random_state!r}")
    return int(random_state)


class FisherZTransformer(TransformerMixin, BaseEstimator):
    """Correlations to Fisher-z edge vectors.

    Accepts ``(n, d)`` edge correlations or ``(n, N, N)`` correlation matrices;
    matrices need ``nodes`` (or ``n_nodes``) so the upper triangle is read in
    edge-id order. Stateless apart from recording the input width.
    """

    def __init__(self, nodes=None, eps=1e-7):
        self.nodes = nodes
        self.eps = eps

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, ensure_all_finite=False)
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, ensure_all_finite=False)
        if X.ndim == 2:
            return fisher_transform(X, self.eps)
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ValueError(f"expected (n, d) edges or (n, N, N) matrices, got shape {X.shape}")
        idx = build_edge_index(self.nodes) if self.nodes is not None else _anonymous_index(X.shape[1])
        return np.array([matrix_to_edges(m, idx, f"subject {t}") for t, m in enumerate(X)])

    def inverse_transform(self, Z):
        return np.tanh(check_array(Z))


def _anonymous_index(n_nodes: int):
    nodes = NodeTable.from_records([(f"n{i}", (float(i), 0.0, 0.0), "") for i in range(n_nodes)])
    return build_edge_index(nodes)


class HMRFNetworkEstimator(BaseEstimator):
    """Latent binary network model for Fisher-z edge observations.

    Parameters
    ----------
    nodes : NodeTable
        Node geometry and system labels; fixes ``d`` and the wiring costs.
    features : sequence of str
        Registered feature names; ``"bias"`` is added first if absent.
    exact : bool
        Fit with enumeration instead of Monte-Carlo EM (``d <= d_max_exact``).
    random_state : int
        Master seed. Results are bit-identical for equal seeds.

    Remaining parameters mirror :class:`hmrfnet.learner.FitConfig` and the
    chain settings used by :meth:`predict_proba` when ``d`` is too large to
    enumerate.
    """

    def __init__(self, nodes=None, features=("bias",), max_iters=500, cd_steps=5, learn_rate=0.5,
                 n_posterior_samples=50, tol=1e-3, exact=False, d_max_exact=D_MAX_EXACT,
                 n_chains=4, n_sweeps=2000, burn_in=1000, random_state=0):
        self.nodes = nodes
        self.features = features
        self.max_iters = max_iters
        self.cd_steps = cd_steps
        self.learn_rate = learn_rate
        self.n_posterior_samples = n_posterior_samples
        self.tol = tol
        self.exact = exact
        self.d_max_exact = d_max_exact
        self.n_chains = n_chains
        self.n_sweeps = n_sweeps
        self.burn_in = burn_in
        self.random_state = random_state

    def _setup(self):
        if not isinstance(self.nodes, NodeTable):
            raise TypeError("nodes must be a NodeTable")
        seed = _check_seed(self.random_state)
        return seed, FeatureSpec.from_names(list(self.features)), build_edge_index(self.nodes)

    def _validate(self, X):
        X = check_array(X)
        if X.shape[1] != self.idx_.d:
            raise ValueError(f"X has {X.shape[1]} edges but the node table gives d={self.idx_.d}")
        return X

    def fit(self, X, y=None):
        seed, spec, idx = self._setup()
        X = check_array(X)
        if X.shape[1] != idx.d:
            raise ValueError(f"X has {X.shape[1]} edges but the node table gives d={idx.d}")
        cfg = FitConfig(max_iters=self.max_iters, cd_steps=self.cd_steps, learn_rate=self.learn_rate,
                        n_posterior_samples=self.n_posterior_samples, tol=self.tol, seed=seed,
                        exact=self.exact, d_max_exact=self.d_max_exact)
        self.result_ = fit(X, spec, idx, self.nodes, cfg)
        self.params_ = self.result_.params
        self.spec_ = spec
        self.idx_ = idx
        self.n_features_in_ = idx.d
        return self

    def predict_proba(self, X):
        """Posterior edge probabilities, shape ``(n, d)``."""
        check_is_fitted(self, "params_")
        X = self._validate(X)
        return posterior_marginals(self.params_, self.spec_, X, self.idx_, self.nodes, self.d_max_exact,
                                   _check_seed(self.random_state), self.n_chains, self.n_sweeps,
                                   self.burn_in)

    def predict(self, X):
        """Posterior-marginal edge calls at 0.5."""
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def loglik(self, X):
        check_is_fitted(self, "params_")
        X = self._validate(X)
        cfg = SelectionConfig(d_max_exact=self.d_max_exact, seed=_check_seed(self.random_state))
        return evidence(self.params_, self.spec_, X, self.idx_, self.nodes, cfg)

    def score(self, X, y=None):
        """Mean per-subject log-likelihood (exact or AIS)."""
        ev = self.loglik(X)
        return float(np.mean(ev.per_subject))

    def bic(self, X):
        ev = self.loglik(X)
        return -2.0 * ev.total + n_parameters(self.spec_) * np.log(len(ev.per_subject))

    def sample(self, n_samples=1, random_state=None):
        """Draw latent networks ``(n_samples, d)`` from the fitted prior."""
        check_is_fitted(self, "params_")
        seed = _check_seed(self.random_state if random_state is None else random_state)
        X, _, _ = sample_prior(self.params_, self.spec_, self.idx_, self.nodes, n_samples, seed,
                               self.d_max_exact)
        return X


class ThresholdNetworkEstimator(BaseEstimator):
    """Keep the top ``proportion`` of edges per subject (ties to the lower edge id)."""

    def __init__(self, proportion=0.1):
        self.proportion = proportion

    def fit(self, X, y=None):
        X = check_array(X)
        if not 0 < self.proportion < 1:
            raise ValueError("proportion must lie strictly between 0 and 1")
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} edges, expected {self.n_features_in_}")
        return np.array([threshold_baseline(row, self.proportion).bits for row in X], dtype=np.uint8)
