"""Node geometry, canonical edge indexing and latent edge configurations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NODE_CSV_HEADER = ("node_id", "x", "y", "z", "system")


@dataclass(frozen=True, eq=False)
class NodeTable:
    """Ordered node identities with 3-D coordinates and system labels.

    Row order is meaningful: edge ids are enumerated over it and it is never
    resorted.
    """

    node_ids: tuple[str, ...]
    coords: np.ndarray
    systems: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(n) for n in self.node_ids)
        coords = np.array(self.coords, dtype=float)
        systems = tuple(str(s) for s in self.systems)
        if len(ids) < 3:
            raise ValueError(f"at least 3 nodes are required, got {len(ids)}")
        if coords.shape != (len(ids), 3):
            raise ValueError(f"coords must have shape ({len(ids)}, 3), got {coords.shape}")
        if len(systems) != len(ids):
            raise ValueError("one system label per node is required")
        seen = set()
        for node_id in ids:
            if not node_id:
                raise ValueError("node ids must be nonempty")
            if node_id in seen:
                raise ValueError(f"duplicate node id {node_id!r}")
            seen.add(node_id)
        if not np.all(np.isfinite(coords)):
            raise ValueError("node coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "systems", systems)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_records(cls, records) -> NodeTable:
        """Build from an iterable of ``(node_id, (x, y, z), system)``."""
        records = list(records)
        return cls(
            node_ids=[r[0] for r in records],
            coords=np.array([r[1] for r in records], dtype=float).reshape(len(records), 3),
            systems=[r[2] for r in records],
        )

    @classmethod
    def read_csv(cls, path) -> NodeTable:
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            # leading "#" lines carry provenance and are skipped
            lines = list(fh)
            skip = 0
            while skip < len(lines) and lines[skip].startswith("#"):
                skip += 1
            reader = csv.reader(lines[skip:])
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != NODE_CSV_HEADER:
                raise ValueError(f"{path}: header must be {','.join(NODE_CSV_HEADER)}, got {header}")
            records = []
            for lineno, row in enumerate(reader, start=skip + 2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                try:
                    xyz = tuple(float(v) for v in row[1:4])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from None
                records.append((row[0].strip(), xyz, row[4].strip()))
        return cls.from_records(records)

    def write_csv(self, path, comment: str | None = None) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment if comment.endswith("\n") else comment + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(NODE_CSV_HEADER)
            for node_id, xyz, system in zip(self.node_ids, self.coords, self.systems):
                writer.writerow([node_id, *(repr(float(c)) for c in xyz), system])


@dataclass(frozen=True, eq=False)
class EdgeIndex:
    """Bijection between edge ids ``0..d-1`` and unordered node pairs ``u < v``.

    Pairs are enumerated lexicographically: ``(0,1)=0, (0,2)=1, ...``.
    ``neighbors[i]`` lists the edges sharing an endpoint with edge ``i``;
    ``triangles[i, w]`` holds the two edge ids ``(u,w)`` and ``(v,w)`` that
    close a triangle over edge ``i`` through the ``w``-th third node.
    """

    n_nodes: int
    pairs: np.ndarray
    neighbors: np.ndarray
    triangles: np.ndarray
    dist: np.ndarray
    _id_matrix: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return len(self.pairs)

    def pair_of(self, i: int) -> tuple[int, int]:
        u, v = self.pairs[i]
        return int(u), int(v)

    def id_of(self, u: int, v: int) -> int:
        if u == v:
            raise ValueError("self-loops have no edge id")
        return int(self._id_matrix[u, v])

    def neighbors_of(self, i: int) -> list[int]:
        return [int(j) for j in self.neighbors[i]]

    def to_matrix(self, values, diag=0.0) -> np.ndarray:
        """Scatter a length-d edge vector into a symmetric N x N matrix."""
        values = np.asarray(values)
        out = np.full((self.n_nodes, self.n_nodes), diag, dtype=np.result_type(values, float))
        out[self.pairs[:, 0], self.pairs[:, 1]] = values
        out[self.pairs[:, 1], self.pairs[:, 0]] = values
        return out

    def from_matrix(self, mat) -> np.ndarray:
        """Gather the upper triangle of an N x N matrix in edge-id order."""
        mat = np.asarray(mat)
        return mat[self.pairs[:, 0], self.pairs[:, 1]]


def n_edges(n_nodes: int) -> int:
    return n_nodes * (n_nodes - 1) // 2


def n_nodes_for(d: int) -> int:
    """Inverse of :func:`n_edges`; raises if ``d`` is not a triangular number."""
    n = int(round((1 + math.sqrt(1 + 8 * d)) / 2))
    if n_edges(n) != d:
        raise ValueError(f"{d} is not N(N-1)/2 for any integer N")
    return n


def build_edge_index(nodes: NodeTable) -> EdgeIndex:
    n = nodes.n_nodes
    us, vs = np.triu_indices(n, k=1)
    pairs = np.stack([us, vs], axis=1).astype(np.int64)
    d = len(pairs)
    ids = np.full((n, n), -1, dtype=np.int64)
    ids[us, vs] = np.arange(d)
    ids[vs, us] = np.arange(d)

    neighbors = np.empty((d, 2 * (n - 2)), dtype=np.int64)
    triangles = np.empty((d, n - 2, 2), dtype=np.int64)
    for i, (u, v) in enumerate(pairs):
        others = [w for w in range(n) if w != u and w != v]
        triangles[i, :, 0] = ids[u, others]
        triangles[i, :, 1] = ids[v, others]
        neighbors[i] = np.sort(triangles[i].ravel())

    dist = np.linalg.norm(nodes.coords[us] - nodes.coords[vs], axis=1)
    for arr in (pairs, neighbors, triangles, dist, ids):
        arr.setflags(write=False)
    return EdgeIndex(n, pairs, neighbors, triangles, dist, ids)


class LatentConfig:
    """Mutable length-d bit vector with a maintained popcount."""

    __slots__ = ("bits", "_count")

    def __init__(self, bits):
        self.bits = np.array(bits, dtype=np.uint8).ravel()
        if np.any(self.bits > 1):
            raise ValueError("latent bits must be 0 or 1")
        self._count = int(self.bits.sum())

    @classmethod
    def zeros(cls, d: int) -> LatentConfig:
        return cls(np.zeros(d, dtype=np.uint8))

    @property
    def d(self) -> int:
        return len(self.bits)

    @property
    def popcount(self) -> int:
        return self._count

    def __getitem__(self, i):
        return int(self.bits[i])

    def __len__(self):
        return len(self.bits)

    def set(self, i: int, value: int) -> None:
        value = 1 if value else 0
        old = self.bits[i]
        if old != value:
            self.bits[i] = value
            self._count += 1 if value else -1

    def flip(self, i: int) -> None:
        self.set(i, 1 - self.bits[i])

    def resync(self) -> None:
        """Recount after the bit array was modified in place by a kernel."""
        self._count = int(self.bits.sum())

    def copy(self) -> LatentConfig:
        return LatentConfig(self.bits.copy())

    def __eq__(self, other):
        if isinstance(other, LatentConfig):
            return np.array_equal(self.bits, other.bits)
        return NotImplemented

    def __repr__(self):
        return f"LatentConfig({''.join(map(str, self.bits))})"


def _bits(x) -> np.ndarray:
    return x.bits if isinstance(x, LatentConfig) else np.asarray(x)


def common_neighbors(x, idx: EdgeIndex, i: int) -> int:
    """Number of nodes adjacent to both endpoints of edge ``i`` in graph ``x``."""
    bits = _bits(x)
    tri = idx.triangles[i]
    return int(np.count_nonzero((bits[tri[:, 0]] != 0) & (bits[tri[:, 1]] != 0)))


def same_system(nodes: NodeTable, idx: EdgeIndex, i: int) -> int:
    u, v = idx.pair_of(i)
    return int(nodes.systems[u] == nodes.systems[v])
