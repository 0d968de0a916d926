"""Feature functions mapping a latent graph to per-edge evidence vectors.

A :class:`FeatureSpec` is an ordered collection of named features whose first
entry is always the constant bias. Every feature is evaluated on the
configuration with the queried edge's own bit cleared, so single-flip energy
differences are well defined.

Each feature declares its locality, i.e. which bit flips may change its value
on edge ``i``:

``"none"``
    independent of the configuration (depends on geometry/labels only);
``"adjacent"``
    depends only on bits of edges sharing an endpoint with ``i``;
``"global"``
    may depend on any bit; forces full energy recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .graph import EdgeIndex, LatentConfig, NodeTable, _bits

LOCALITIES = ("none", "adjacent", "global")


@dataclass(frozen=True)
class Feature:
    """A named per-edge feature.

    ``evaluator(bits, idx, nodes, i)`` returns a real for edge ``i``; ``bits``
    already has bit ``i`` cleared. ``batch(X, idx, nodes)``, when given, maps an
    ``(S, d)`` array of configurations to the ``(S, d)`` feature values under
    the same self-exclusion convention. ``kernel`` tags features the compiled
    samplers know in closed form.
    """

    name: str
    evaluator: Callable
    locality: str = "global"
    batch: Optional[Callable] = None
    kernel: Optional[str] = None

    def __post_init__(self):
        if self.locality not in LOCALITIES:
            raise ValueError(f"feature {self.name!r}: locality must be one of {LOCALITIES}")


def _bias(bits, idx, nodes, i):
    return 1.0


def _bias_batch(X, idx, nodes):
    return np.ones(X.shape, dtype=float)


def _common_neighbors(bits, idx, nodes, i):
    tri = idx.triangles[i]
    return float(np.sum(bits[tri[:, 0]] & bits[tri[:, 1]]))


def _common_neighbors_batch(X, idx, nodes):
    X = np.asarray(X, dtype=np.int64)
    a = X[:, idx.triangles[:, :, 0]]
    b = X[:, idx.triangles[:, :, 1]]
    return (a * b).sum(axis=2).astype(float)


def _same_system(bits, idx, nodes, i):
    u, v = idx.pair_of(i)
    return 1.0 if nodes.systems[u] == nodes.systems[v] else 0.0


def _same_system_batch(X, idx, nodes):
    labels = np.asarray(nodes.systems, dtype=object)
    row = (labels[idx.pairs[:, 0]] == labels[idx.pairs[:, 1]]).astype(float)
    return np.broadcast_to(row, X.shape).copy()


BIAS = Feature("bias", _bias, "none", _bias_batch, kernel="static")
COMMON_NEIGHBORS = Feature(
    "common_neighbors", _common_neighbors, "adjacent", _common_neighbors_batch, kernel="triangle"
)
SAME_SYSTEM = Feature("same_system", _same_system, "none", _same_system_batch, kernel="static")

_REGISTRY: dict[str, Feature] = {f.name: f for f in (BIAS, COMMON_NEIGHBORS, SAME_SYSTEM)}


def register_feature(feature: Feature, *, replace: bool = False) -> None:
    """Make ``feature`` selectable by name from config files."""
    if feature.name in _REGISTRY and not replace:
        raise ValueError(f"feature {feature.name!r} is already registered")
    if feature.locality == "none" and feature.kernel is None:
        feature = Feature(feature.name, feature.evaluator, "none", feature.batch, kernel="static")
    _REGISTRY[feature.name] = feature


def known_features() -> list[str]:
    return sorted(_REGISTRY)


def get_feature(name: str) -> Feature:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown feature {name!r}; known features: {', '.join(known_features())}") from None


class FeatureSpec:
    """Ordered feature collection; index 0 is always the bias."""

    def __init__(self, features):
        features = [get_feature(f) if isinstance(f, str) else f for f in features]
        if not features or features[0].name != "bias":
            if any(f.name == "bias" for f in features):
                raise ValueError("the bias feature must come first")
            features.insert(0, BIAS)
        names = [f.name for f in features]
        if len(set(names)) != len(names):
            raise ValueError(f"feature names must be unique: {names}")
        self.features = tuple(features)
        self.names = tuple(names)

    @classmethod
    def from_names(cls, names) -> FeatureSpec:
        return cls(list(names))

    def __len__(self):
        return len(self.features)

    def __repr__(self):
        return f"FeatureSpec({list(self.names)})"

    def __eq__(self, other):
        return isinstance(other, FeatureSpec) and self.features == other.features

    def __hash__(self):
        return hash(self.names)

    @property
    def n_params(self) -> int:
        return len(self.features)

    @property
    def compiled(self) -> bool:
        """True when every feature is static or the triangle count."""
        return all(f.kernel in ("static", "triangle") for f in self.features)

    @property
    def global_locality(self) -> bool:
        return any(f.locality == "global" for f in self.features)

    def static_table(self, idx: EdgeIndex, nodes: NodeTable) -> np.ndarray:
        """``(d, k+1)`` values of configuration-independent features (0 elsewhere)."""
        out = np.zeros((idx.d, len(self)))
        empty = np.zeros(idx.d, dtype=np.uint8)
        for m, f in enumerate(self.features):
            if f.locality == "none":
                out[:, m] = [f.evaluator(empty, idx, nodes, i) for i in range(idx.d)]
        _check_finite(self, out)
        return out

    def triangle_mask(self) -> np.ndarray:
        return np.array([f.kernel == "triangle" for f in self.features])


def _check_finite(spec: FeatureSpec, values: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        m = int(np.nonzero(bad.reshape(-1, values.shape[-1]).any(axis=0))[0][0])
        raise FloatingPointError(f"feature {spec.names[m]!r} produced a non-finite value")


def evaluate_features(spec: FeatureSpec, x, idx: EdgeIndex, nodes: NodeTable, i: int) -> np.ndarray:
    """Feature vector of edge ``i``, evaluated with bit ``i`` cleared."""
    if not 0 <= i < idx.d:
        raise IndexError(f"edge id {i} out of range for d={idx.d}")
    bits = _bits(x).astype(np.uint8, copy=True)
    bits[i] = 0
    values = np.array([float(f.evaluator(bits, idx, nodes, i)) for f in spec.features])
    _check_finite(spec, values)
    return values


def feature_matrix(spec: FeatureSpec, X, idx: EdgeIndex, nodes: NodeTable) -> np.ndarray:
    """Feature values for every edge of a batch of configurations: ``(S, d, k+1)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.uint8))
    out = np.empty((X.shape[0], idx.d, len(spec)))
    for m, f in enumerate(spec.features):
        if f.batch is not None:
            out[:, :, m] = f.batch(X, idx, nodes)
            continue
        for s in range(X.shape[0]):
            for i in range(idx.d):
                bits = X[s].copy()
                bits[i] = 0
                out[s, i, m] = f.evaluator(bits, idx, nodes, i)
    _check_finite(spec, out)
    return out


def feature_totals(spec: FeatureSpec, X, idx: EdgeIndex, nodes: NodeTable) -> np.ndarray:
    """``sum_i x_i f_i(x)`` for each configuration in a batch: ``(S, k+1)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.uint8))
    F = feature_matrix(spec, X, idx, nodes)
    return np.einsum("si,sim->sm", X.astype(float), F)


def affected_edges(idx: EdgeIndex, i: int) -> set[int]:
    """Edges whose feature vectors may change when bit ``i`` flips (local features)."""
    return {int(i), *(int(j) for j in idx.neighbors[i])}
