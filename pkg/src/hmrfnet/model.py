"""Edge potentials, Gibbs prior, Gaussian emission and exact enumeration.

The field energy of a configuration ``x`` is

    E(x) = sum_i x_i * (-beta . f_i(x) + ||beta||^2 D_i)

so absent edges contribute nothing. Writing ``G(x) = sum_i x_i f_i(x)`` and
``L(x) = sum_i x_i D_i`` gives ``E(x) = -beta . G(x) + ||beta||^2 L(x)``; the
prior is an exponential family in ``(G, L)`` and all exact quantities below
are computed from tabulated ``(G, L)`` over the ``2^d`` states.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .features import FeatureSpec, evaluate_features, feature_totals
from .graph import EdgeIndex, NodeTable, _bits

SIGMA_FLOOR = 1e-4
D_MAX_EXACT = 20
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ExactLimitError(ValueError):
    """Raised when exact enumeration is requested beyond ``d_max_exact``."""


@dataclass
class ModelParams:
    """Emission parameters ``(alpha0, alpha1, sigma0, sigma1)`` and field weights ``beta``.

    ``sigma*`` are standard deviations in Fisher-z units. Construction checks
    finiteness and the sigma floor; the ``alpha1 > alpha0`` labelling
    convention is reported by :attr:`is_canonical` and enforced by the fitting
    routines rather than here, so symmetric emissions remain representable.
    """

    alpha0: float
    alpha1: float
    sigma0: float
    sigma1: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.alpha0 = float(self.alpha0)
        self.alpha1 = float(self.alpha1)
        self.sigma0 = float(self.sigma0)
        self.sigma1 = float(self.sigma1)
        self.beta = np.atleast_1d(np.array(self.beta, dtype=float))
        values = [self.alpha0, self.alpha1, self.sigma0, self.sigma1, *self.beta]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"model parameters must be finite: {self}")
        if self.sigma0 < SIGMA_FLOOR or self.sigma1 < SIGMA_FLOOR:
            raise ValueError(f"sigmas must be >= {SIGMA_FLOOR}: {self.sigma0}, {self.sigma1}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.alpha0, self.alpha1, self.sigma0, self.sigma1])

    @property
    def is_canonical(self) -> bool:
        return self.alpha1 > self.alpha0

    def vector(self) -> np.ndarray:
        """Flat ``[alpha0, alpha1, sigma0, sigma1, beta...]``."""
        return np.concatenate([self.theta, self.beta])

    @classmethod
    def from_vector(cls, v) -> ModelParams:
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1], v[2], v[3], v[4:])

    def replace(self, **changes) -> ModelParams:
        fields = dict(alpha0=self.alpha0, alpha1=self.alpha1, sigma0=self.sigma0,
                      sigma1=self.sigma1, beta=self.beta.copy())
        fields.update(changes)
        return ModelParams(**fields)

    def swapped(self) -> ModelParams:
        return self.replace(alpha0=self.alpha1, alpha1=self.alpha0,
                            sigma0=self.sigma1, sigma1=self.sigma0)

    def to_dict(self) -> dict:
        return dict(alpha0=self.alpha0, alpha1=self.alpha1, sigma0=self.sigma0,
                    sigma1=self.sigma1, beta=[float(b) for b in self.beta])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.vector(), other.vector())


@dataclass
class SubjectData:
    """One subject's Fisher-z edge vector."""

    y: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if not np.all(np.isfinite(self.y)):
            raise ValueError(f"subject {self.subject_id!r}: y contains non-finite values")


def as_matrix(data) -> np.ndarray:
    """Stack subjects (``SubjectData`` or raw vectors) into an ``(n, d)`` array."""
    if isinstance(data, np.ndarray):
        return np.atleast_2d(data.astype(float))
    rows = [d.y if isinstance(d, SubjectData) else np.asarray(d, dtype=float) for d in data]
    return np.atleast_2d(np.array(rows, dtype=float))


# --- energies -------------------------------------------------------------


def edge_potential(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                   nodes: NodeTable, i: int) -> float:
    bits = _bits(x)
    if not bits[i]:
        return 0.0
    beta = params.beta
    f = evaluate_features(spec, bits, idx, nodes, i)
    return float(-beta @ f + (beta @ beta) * idx.dist[i])


def field_energy(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                 nodes: NodeTable) -> float:
    return float(sum(edge_potential(params, spec, x, idx, nodes, i) for i in range(idx.d)))


def _affected(spec: FeatureSpec, idx: EdgeIndex, i: int):
    if spec.global_locality:
        return range(idx.d)
    if any(f.locality == "adjacent" for f in spec.features):
        return [i, *idx.neighbors[i]]
    return [i]


def delta_energy(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                 nodes: NodeTable, i: int) -> float:
    """Energy change from flipping bit ``i``, re-evaluating only affected edges."""
    before = _bits(x).astype(np.uint8, copy=True)
    after = before.copy()
    after[i] ^= 1
    total = 0.0
    for j in _affected(spec, idx, i):
        total += (edge_potential(params, spec, after, idx, nodes, j)
                  - edge_potential(params, spec, before, idx, nodes, j))
    return total


def prior_logprob_unnorm(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                         nodes: NodeTable) -> float:
    return -field_energy(params, spec, x, idx, nodes)


def emission_terms(params: ModelParams, Y) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge Gaussian log-densities under ``x_i = 0`` and ``x_i = 1``."""
    Y = np.asarray(Y, dtype=float)
    l0 = -0.5 * ((Y - params.alpha0) / params.sigma0) ** 2 - math.log(params.sigma0) - _LOG_SQRT_2PI
    l1 = -0.5 * ((Y - params.alpha1) / params.sigma1) ** 2 - math.log(params.sigma1) - _LOG_SQRT_2PI
    return l0, l1


def emission_loglik(params: ModelParams, x, y) -> float:
    bits = _bits(x)
    y = np.asarray(y, dtype=float)
    if bits.shape != y.shape:
        raise ValueError(f"x and y lengths differ: {bits.shape} vs {y.shape}")
    l0, l1 = emission_terms(params, y)
    return float(np.where(bits.astype(bool), l1, l0).sum())


def joint_logprob_unnorm(params: ModelParams, spec: FeatureSpec, x, y, idx: EdgeIndex,
                         nodes: NodeTable) -> float:
    return emission_loglik(params, x, y) + prior_logprob_unnorm(params, spec, x, idx, nodes)


def configuration_totals(spec: FeatureSpec, X, idx: EdgeIndex, nodes: NodeTable):
    """``G(x) = sum_i x_i f_i(x)`` and ``L(x) = sum_i x_i D_i`` for a batch ``(S, d)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.uint8))
    if spec.compiled:
        Xf = X.astype(float)
        G = Xf @ spec.static_table(idx, nodes)
        tri = spec.triangle_mask()
        if tri.any():
            cn = _kernels.triangle_counts(X, idx.triangles)
            G[:, tri] = (Xf * cn).sum(axis=1, keepdims=True)
    else:
        G = feature_totals(spec, X, idx, nodes)
    return G, X @ idx.dist


def suff_stat_s(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                nodes: NodeTable) -> np.ndarray:
    """``-dE/dbeta = sum_i x_i f_i(x) - 2 beta sum_i x_i D_i``.

    Accepts one configuration ``(d,)`` or a batch ``(S, d)``.
    """
    bits = np.asarray(_bits(x))
    G, L = configuration_totals(spec, bits, idx, nodes)
    S = G - 2.0 * L[:, None] * params.beta[None, :]
    return S[0] if bits.ndim == 1 else S


# --- exact enumeration ----------------------------------------------------


class StateSpace:
    """All ``2^d`` configurations with their sufficient statistics ``G`` and ``L``.

    Tables depend on the feature spec and geometry only; any ``beta`` is then
    evaluated as ``-G @ beta + (beta @ beta) * L``.
    """

    CHUNK = 1 << 14
    MAX_CELLS = 1 << 22

    def __init__(self, spec: FeatureSpec, idx: EdgeIndex, nodes: NodeTable,
                 d_max_exact: int = D_MAX_EXACT):
        check_exact(idx.d, d_max_exact)
        d = idx.d
        n_states = 1 << d
        codes = np.arange(n_states, dtype=np.int64)
        # bit i of the state code is edge i
        self.X = ((codes[:, None] >> np.arange(d)) & 1).astype(np.uint8)
        self.G = np.empty((n_states, len(spec)))
        self.L = np.empty(n_states)
        for start in range(0, n_states, self.CHUNK):
            sl = slice(start, start + self.CHUNK)
            self.G[sl], self.L[sl] = configuration_totals(spec, self.X[sl], idx, nodes)
        self.spec = spec
        self.d = d

    @cached_property
    def Xf(self) -> np.ndarray:
        return self.X.astype(float)

    def prior_marginals(self, beta) -> np.ndarray:
        return np.exp(self.prior_logprobs(beta)) @ self.Xf

    def energies(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return -(self.G @ beta) + (beta @ beta) * self.L

    def log_partition(self, beta) -> float:
        return _streaming_logsumexp(-self.energies(beta), self.CHUNK)

    def prior_logprobs(self, beta) -> np.ndarray:
        logp = -self.energies(beta)
        return logp - logsumexp(logp)

    def suff_stats(self, beta) -> np.ndarray:
        """``s(x) = G(x) - 2 beta L(x)`` for every state: ``(2^d, k+1)``."""
        beta = np.asarray(beta, dtype=float)
        return self.G - 2.0 * self.L[:, None] * beta[None, :]

    def log_joint(self, params: ModelParams, Y) -> np.ndarray:
        """Unnormalised ``log p(y_t, x)`` for every subject and state: ``(n, 2^d)``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        l0, l1 = emission_terms(params, Y)
        emis = (l1 - l0) @ self.Xf.T + l0.sum(axis=1, keepdims=True)
        return emis - self.energies(params.beta)[None, :]

    def _subject_chunks(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        step = max(1, self.MAX_CELLS >> self.d)
        for start in range(0, len(Y), step):
            yield slice(start, start + step), Y[start:start + step]

    def posterior_weights(self, params: ModelParams, Y) -> np.ndarray:
        """Normalised ``p(x | y_t)`` over all states: ``(n, 2^d)``; prefer
        :meth:`posterior_expectation` for large ``n``."""
        lj = self.log_joint(params, Y)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def posterior_expectation(self, params: ModelParams, Y, F) -> np.ndarray:
        """``E[F(x) | y_t]`` per subject for a state table ``F`` of shape ``(2^d, m)``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = np.empty((len(Y), F.shape[1]))
        for sl, chunk in self._subject_chunks(Y):
            out[sl] = self.posterior_weights(params, chunk) @ F
        return out

    def loglik(self, params: ModelParams, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = np.empty(len(Y))
        for sl, chunk in self._subject_chunks(Y):
            out[sl] = logsumexp(self.log_joint(params, chunk), axis=1)
        return out - self.log_partition(params.beta)


def _streaming_logsumexp(values: np.ndarray, chunk: int) -> float:
    acc = -np.inf
    for start in range(0, len(values), chunk):
        acc = np.logaddexp(acc, logsumexp(values[start:start + chunk]))
    return float(acc)


def check_exact(d: int, d_max_exact: int = D_MAX_EXACT) -> None:
    if d > d_max_exact:
        raise ExactLimitError(
            f"exact enumeration needs d <= {d_max_exact} (got d={d}); "
            "use sampling-based estimates (run_chains / ais_loglik) instead"
        )


_SPACES: "weakref.WeakKeyDictionary[EdgeIndex, dict]" = weakref.WeakKeyDictionary()


def state_space(spec: FeatureSpec, idx: EdgeIndex, nodes: NodeTable,
                d_max_exact: int = D_MAX_EXACT) -> StateSpace:
    """Cached :class:`StateSpace` for ``(spec, idx, nodes)``."""
    check_exact(idx.d, d_max_exact)
    per_idx = _SPACES.setdefault(idx, {})
    key = (spec.features, nodes)
    space = per_idx.get(key)
    if space is None:
        space = per_idx[key] = StateSpace(spec, idx, nodes, d_max_exact)
    return space


def partition_function(params: ModelParams, spec: FeatureSpec, idx: EdgeIndex,
                       nodes: NodeTable, d_max_exact: int = D_MAX_EXACT) -> float:
    """``log Z`` of the field prior by enumeration."""
    return state_space(spec, idx, nodes, d_max_exact).log_partition(params.beta)


def exact_posterior_marginals(params: ModelParams, spec: FeatureSpec, y, idx: EdgeIndex,
                              nodes: NodeTable, d_max_exact: int = D_MAX_EXACT) -> np.ndarray:
    """``P(x_i = 1 | y)``; ``(d,)`` for one subject or ``(n, d)`` for a batch."""
    space = state_space(spec, idx, nodes, d_max_exact)
    y = np.asarray(y, dtype=float)
    M = space.posterior_expectation(params, y, space.Xf)
    return M[0] if y.ndim == 1 else M


def exact_prior_marginals(params: ModelParams, spec: FeatureSpec, idx: EdgeIndex,
                          nodes: NodeTable, d_max_exact: int = D_MAX_EXACT) -> np.ndarray:
    return state_space(spec, idx, nodes, d_max_exact).prior_marginals(params.beta)


def exact_loglik(params: ModelParams, spec: FeatureSpec, y, idx: EdgeIndex, nodes: NodeTable,
                 d_max_exact: int = D_MAX_EXACT):
    """``log p(y)`` with the latent field summed out.

    Returns a float for a single ``(d,)`` vector and per-subject values for an
    ``(n, d)`` array.
    """
    space = state_space(spec, idx, nodes, d_max_exact)
    y = np.asarray(y, dtype=float)
    ll = space.loglik(params, y)
    return float(ll[0]) if y.ndim == 1 else ll
