"""Marginal-likelihood estimation and BIC comparison of feature hypotheses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .features import FeatureSpec
from .graph import EdgeIndex, NodeTable
from .model import D_MAX_EXACT, ModelParams, as_matrix, emission_terms, exact_loglik
from .sampler import STREAM_AIS, ChainBatch, ModelContext, init_chain



def default_ladder(n_temps: int = 30, tau_min: float = 1e-2) -> np.ndarray:
    """``0`` followed by ``n_temps - 1`` geometrically spaced temperatures ending at 1."""
    if n_temps < 2:
        raise ValueError("a ladder needs at least two temperatures")
    return np.concatenate([[0.0], np.geomspace(tau_min, 1.0, n_temps - 1)])


@dataclass
class SelectionConfig:
    d_max_exact: int = D_MAX_EXACT
    ladder_size: int = 30
    sweeps_per_temp: int = 5
    replicates: int = 16
    prior_burn_in: int = 1000
    seed: int = 0


@dataclass
class EvidenceEstimate:
    per_subject: np.ndarray
    per_subject_se: np.ndarray
    method: str
    ladder_size: int = 0
    replicates: int = 0

    @property
    def total(self) -> float:
        return float(np.sum(self.per_subject))

    @property
    def se(self) -> float:
        return float(np.sqrt(np.sum(self.per_subject_se ** 2)))


def ais_loglik(params: ModelParams, spec: FeatureSpec, y, idx: EdgeIndex, nodes: NodeTable,
               ladder=None, sweeps_per_temp: int = 5, replicates: int = 16, seed: int = 0,
               prior_burn_in: int = 1000) -> EvidenceEstimate:
    """Annealed importance sampling estimate of ``log p(y)``.

    Each replicate starts from a prior Gibbs chain after ``prior_burn_in``
    sweeps and anneals towards ``p(x | beta) p(y | x)^tau`` along ``ladder``;
    the log-weight accumulates ``(tau_m - tau_{m-1}) log p(y | x)``.
    """
    ladder = default_ladder() if ladder is None else np.asarray(ladder, dtype=float)
    if ladder[0] != 0.0 or ladder[-1] != 1.0 or np.any(np.diff(ladder) <= 0):
        raise ValueError("ladder must increase strictly from 0 to 1")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    Y = as_matrix(y)
    n, d = Y.shape
    ctx = ModelContext(params, spec, idx, nodes)
    R = replicates
    states = [init_chain(ctx, seed, t * R + r, stream=STREAM_AIS) for t in range(n) for r in range(R)]
    batch = ChainBatch(ctx, states)
    if prior_burn_in:
        batch.run(prior_burn_in)
    for t in range(n):
        for r in range(R):
            states[t * R + r].y = Y[t]
    l0, l1 = emission_terms(params, Y)
    base = np.repeat(l0.sum(axis=1), R)
    ratio = np.repeat(l1 - l0, R, axis=0)
    logw = np.zeros(n * R)
    for m in range(1, len(ladder)):
        loglik = base + (batch.X * ratio).sum(axis=1)
        logw += (ladder[m] - ladder[m - 1]) * loglik
        if not np.all(np.isfinite(logw)):
            raise FloatingPointError(f"non-finite AIS weight at temperature index {m}")
        if m < len(ladder) - 1:
            batch.set_tau(ladder[m])
            batch.run(sweeps_per_temp)
    logw = logw.reshape(n, R)
    est = logsumexp(logw, axis=1) - math.log(R)
    if R > 1:
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        se = w.std(axis=1, ddof=1) / (w.mean(axis=1) * math.sqrt(R))
    else:
        se = np.full(n, np.inf)
    return EvidenceEstimate(est, se, "AIS", len(ladder), R)


def evidence(params: ModelParams, spec: FeatureSpec, data, idx: EdgeIndex, nodes: NodeTable,
             cfg: SelectionConfig | None = None) -> EvidenceEstimate:
    """Exact ``log p(y_t)`` when enumerable, AIS otherwise."""
    cfg = cfg or SelectionConfig()
    Y = as_matrix(data)
    if idx.d <= cfg.d_max_exact:
        ll = np.atleast_1d(exact_loglik(params, spec, Y, idx, nodes, cfg.d_max_exact))
        return EvidenceEstimate(ll, np.zeros(len(ll)), "exact")
    return ais_loglik(params, spec, Y, idx, nodes, default_ladder(cfg.ladder_size),
                      cfg.sweeps_per_temp, cfg.replicates, cfg.seed, cfg.prior_burn_in)


@dataclass
class ModelScore:
    name: str
    loglik: float
    loglik_se: float
    p: int
    n: int
    method: str

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.p * math.log(self.n)

    @property
    def bic_se(self) -> float:
        return 2.0 * self.loglik_se

    def to_dict(self) -> dict:
        return dict(name=self.name, loglik=self.loglik, loglik_se=self.loglik_se, p=self.p,
                    n=self.n, bic=self.bic, bic_se=self.bic_se, method=self.method)


@dataclass
class BicReport:
    models: list
    ranking: list = field(default_factory=list)
    ties: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(models=[m.to_dict() for m in self.models], ranking=self.ranking, ties=self.ties)

    def write_json(self, path, meta: dict | None = None) -> None:
        doc = self.to_dict()
        if meta:
            doc["meta"] = meta
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def n_parameters(spec: FeatureSpec) -> int:
    """``k + 1`` field weights plus the four emission parameters."""
    return len(spec) + 4


def compute_bic(models, data, idx: EdgeIndex, nodes: NodeTable,
                cfg: SelectionConfig | None = None) -> BicReport:
    """Score ``(name, FitResult, FeatureSpec)`` triples fitted on the same data; lower BIC ranks first."""
    cfg = cfg or SelectionConfig()
    Y = as_matrix(data)
    n, d = Y.shape
    if d != idx.d:
        raise ValueError(f"data has {d} edges but the edge index has d={idx.d}")
    scores = []
    for name, result, spec in models:
        if tuple(result.feature_names) != tuple(spec.names):
            raise ValueError(f"model {name!r}: fitted features {result.feature_names} != {spec.names}")
        ev = evidence(result.params, spec, Y, idx, nodes, cfg)
        scores.append(ModelScore(name, ev.total, ev.se, n_parameters(spec), n, ev.method))
    order = sorted(range(len(scores)), key=lambda j: (scores[j].bic, j))
    ranking = [scores[j].name for j in order]
    ties = []
    for j, k in zip(order, order[1:]):
        a, b = scores[j].bic, scores[k].bic
        if math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-9):
            if ties and ties[-1][-1] == scores[j].name:
                ties[-1].append(scores[k].name)
            else:
                ties.append([scores[j].name, scores[k].name])
    return BicReport(scores, ranking, ties)
