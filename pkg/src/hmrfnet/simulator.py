"""Synthetic subjects drawn from the model, thresholding baseline and recovery scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from .features import FeatureSpec
from .graph import EdgeIndex, LatentConfig, NodeTable, build_edge_index
from .model import D_MAX_EXACT, ModelParams, SubjectData, state_space
from .sampler import STREAM_EMISSION, STREAM_LATENT, ChainBatch, ModelContext, init_chain

DEFAULT_GIBBS_SWEEPS = 2000


@dataclass
class GroundTruth:
    params: ModelParams
    configs: list
    nodes: NodeTable
    spec: FeatureSpec
    seed: int
    method: str = "exact"
    sweeps: int = 0

    @property
    def X(self) -> np.ndarray:
        return np.array([c.bits for c in self.configs], dtype=np.uint8)

    def metadata(self) -> dict:
        return dict(params=self.params.to_dict(), feature_names=list(self.spec.names),
                    seed=self.seed, n_subjects=len(self.configs), latent_sampler=self.method,
                    gibbs_sweeps=self.sweeps)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for a non-chain random stream under the master seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(stream,))))


def sample_prior(params: ModelParams, spec: FeatureSpec, idx: EdgeIndex, nodes: NodeTable,
                 n: int, seed: int, d_max_exact: int = D_MAX_EXACT,
                 gibbs_sweeps: int = DEFAULT_GIBBS_SWEEPS) -> tuple[np.ndarray, str, int]:
    """``n`` independent draws from ``p(x | beta)``: exact when enumerable, else long Gibbs chains."""
    if idx.d <= d_max_exact:
        space = state_space(spec, idx, nodes, d_max_exact)
        probs = np.exp(space.prior_logprobs(params.beta))
        cdf = np.cumsum(probs)
        u = stream_rng(seed, STREAM_LATENT).random(n) * cdf[-1]
        codes = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return space.X[codes].copy(), "exact", 0
    ctx = ModelContext(params, spec, idx, nodes)
    batch = ChainBatch(ctx, [init_chain(ctx, seed, t, stream=STREAM_LATENT) for t in range(n)])
    batch.run(gibbs_sweeps)
    return batch.X.copy(), "gibbs", gibbs_sweeps


def sample_emissions(params: ModelParams, X, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=bool)
    mean = np.where(X, params.alpha1, params.alpha0)
    sd = np.where(X, params.sigma1, params.sigma0)
    return mean + sd * rng.standard_normal(X.shape)


def generate_dataset(params: ModelParams, spec: FeatureSpec, nodes: NodeTable, n: int,
                     seed: int, idx: EdgeIndex | None = None, d_max_exact: int = D_MAX_EXACT,
                     gibbs_sweeps: int = DEFAULT_GIBBS_SWEEPS):
    """Draw ``n`` iid subjects: latent field from the prior, then Gaussian emissions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = idx or build_edge_index(nodes)
    X, method, sweeps = sample_prior(params, spec, idx, nodes, n, seed, d_max_exact, gibbs_sweeps)
    Y = sample_emissions(params, X, stream_rng(seed, STREAM_EMISSION))
    width = max(3, len(str(n - 1)))
    data = [SubjectData(Y[t], f"s{t:0{width}d}") for t in range(n)]
    truth = GroundTruth(params, [LatentConfig(x) for x in X], nodes, spec, int(seed), method, sweeps)
    return data, truth


def threshold_baseline(y, proportion: float) -> LatentConfig:
    """Keep the ``ceil(p * d)`` largest observations; ties go to the lower edge id."""
    if not 0 < proportion < 1:
        raise ValueError("proportion must lie strictly between 0 and 1")
    y = np.asarray(y, dtype=float)
    m = math.ceil(round(proportion * len(y), 9))
    order = np.argsort(-y, kind="stable")
    bits = np.zeros(len(y), dtype=np.uint8)
    bits[order[:m]] = 1
    return LatentConfig(bits)


@dataclass
class RecoveryScore:
    precision: float
    recall: float
    f1: float
    per_subject: list = field(default_factory=list)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([s["f1"] for s in self.per_subject])) if self.per_subject else self.f1

    def to_dict(self) -> dict:
        return dict(precision=self.precision, recall=self.recall, f1=self.f1,
                    mean_subject_f1=self.mean_f1, per_subject=self.per_subject)


def _prf(truth, pred):
    p, r, f, _ = precision_recall_fscore_support(truth, pred, average="binary", pos_label=1,
                                                 zero_division=1.0, labels=[0, 1])
    return float(p), float(r), float(f)


def score_recovery(estimates, truth, subject_ids=None) -> RecoveryScore:
    """Precision / recall / F1 of estimated edges against the true latent edges.

    ``estimates`` are bits or posterior marginals (thresholded at 0.5), one row
    per subject. Pooled scores treat all subject-edge pairs as one sample.
    """
    E = np.atleast_2d(np.asarray(estimates, dtype=float))
    T = np.atleast_2d(np.asarray(truth if not isinstance(truth, GroundTruth) else truth.X, dtype=int))
    if E.shape != T.shape:
        raise ValueError(f"estimate shape {E.shape} does not match truth {T.shape}")
    pred = (E >= 0.5).astype(int)
    ids = subject_ids or [str(t) for t in range(len(T))]
    per = []
    for t in range(len(T)):
        p, r, f = _prf(T[t], pred[t])
        per.append(dict(subject_id=ids[t], precision=p, recall=r, f1=f))
    p, r, f = _prf(T.ravel(), pred.ravel())
    return RecoveryScore(p, r, f, per)


def write_recovery_report(path, scores: dict, meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, "methods": {name: s.to_dict() for name, s in scores.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
