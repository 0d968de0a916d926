"""Ingestion of correlation matrices, run configuration and traceable output files."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .features import FeatureSpec, known_features
from .graph import EdgeIndex, NodeTable
from .learner import FitConfig
from .model import D_MAX_EXACT, ModelParams, SubjectData
from .selection import SelectionConfig

CLIP_EPS = 1e-7
SYMMETRY_TOL = 1e-6


class ClippingWarning(UserWarning):
    """Correlations at or beyond ``1 - eps`` in magnitude were clipped."""


class AsymmetryWarning(UserWarning):
    """A correlation matrix was asymmetric within tolerance and got averaged."""


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists one message per field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# --- Fisher transform ------------------------------------------------------


def fisher_transform(r, eps: float = CLIP_EPS, source: str = "input"):
    """``arctanh`` of correlations, clipping ``|r| >= 1 - eps`` to ``+-(1 - eps)``.

    Scalars give a float, arrays an array of the same shape. Non-finite
    entries raise with their location; clipped entries are listed in a single
    :class:`ClippingWarning`.
    """
    arr = np.asarray(r, dtype=float)
    bad = np.argwhere(~np.isfinite(arr))
    if len(bad):
        where = tuple(int(v) for v in bad[0])
        raise ValueError(f"{source}: non-finite correlation at {_cell(where)}")
    over = np.argwhere(np.abs(arr) > 1.0)
    if len(over):
        where = tuple(int(v) for v in over[0])
        raise ValueError(f"{source}: |r| > 1 at {_cell(where)} (value {arr[tuple(over[0])]!r})")
    lim = 1.0 - eps
    clipped = np.argwhere(np.abs(arr) >= lim)
    if len(clipped):
        cells = ", ".join(_cell(tuple(int(v) for v in c)) for c in clipped)
        warnings.warn(f"{source}: clipped {len(clipped)} correlation(s) to +-(1 - {eps:g}): {cells}",
                      ClippingWarning, stacklevel=2)
        arr = np.clip(arr, -lim, lim)
    z = np.arctanh(arr)
    return float(z) if z.ndim == 0 else z


def _cell(where: tuple) -> str:
    if len(where) == 2:
        return f"row {where[0] + 1}, column {where[1] + 1}"
    if len(where) == 1:
        return f"position {where[0] + 1}"
    return "scalar"


# --- correlation matrices --------------------------------------------------


def read_matrix_csv(path, n_nodes: int) -> np.ndarray:
    """Parse an ``n_nodes x n_nodes`` numeric CSV (no header; ``#`` lines are comments)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = [row for row in csv.reader(lines) if row and any(c.strip() for c in row)]
    if len(rows) != n_nodes:
        raise ValueError(f"{path}: expected {n_nodes} rows, found {len(rows)}")
    mat = np.empty((n_nodes, n_nodes))
    for a, row in enumerate(rows):
        if len(row) != n_nodes:
            raise ValueError(f"{path}: row {a + 1} has {len(row)} columns, expected {n_nodes}")
        for b, cell in enumerate(row):
            try:
                mat[a, b] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell at row {a + 1}, column {b + 1}: {cell!r}") from None
    return mat


def symmetrize(mat: np.ndarray, source: str = "matrix", tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Average ``mat`` with its transpose if the mismatch is within ``tol``; reject otherwise."""
    gap = np.abs(mat - mat.T)
    gap[~np.isfinite(gap)] = 0.0
    worst = float(gap.max()) if gap.size else 0.0
    if worst > tol:
        a, b = np.unravel_index(int(np.argmax(gap)), gap.shape)
        raise ValueError(f"{source}: asymmetric at row {a + 1}, column {b + 1} "
                         f"(|r_ab - r_ba| = {worst:.3g} > {tol:g})")
    if worst > 0:
        warnings.warn(f"{source}: averaged asymmetric entries (max gap {worst:.3g})",
                      AsymmetryWarning, stacklevel=2)
        return 0.5 * (mat + mat.T)
    return mat


def matrix_to_edges(mat, idx: EdgeIndex, source: str = "matrix") -> np.ndarray:
    """Upper triangle of a correlation matrix, Fisher-transformed, in edge-id order.

    The diagonal is ignored. Asymmetry within tolerance is averaged away.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (idx.n_nodes, idx.n_nodes):
        raise ValueError(f"{source}: shape {mat.shape} does not match {idx.n_nodes} nodes")
    off = ~np.eye(idx.n_nodes, dtype=bool)
    bad = np.argwhere(~np.isfinite(mat) & off)
    if len(bad):
        raise ValueError(f"{source}: non-finite correlation at {_cell(tuple(int(v) for v in bad[0]))}")
    sym = symmetrize(np.where(off, mat, 0.0), source)
    z = fisher_transform(sym, source=source)
    return z[idx.pairs[:, 0], idx.pairs[:, 1]]


def edges_to_matrix(y, idx: EdgeIndex) -> np.ndarray:
    """Inverse of :func:`matrix_to_edges`: ``tanh`` back to correlations, unit diagonal."""
    return idx.to_matrix(np.tanh(np.asarray(y, dtype=float)), diag=1.0)


def write_matrix_csv(path, mat, meta: Optional[dict] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(header_line(meta))
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(mat, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_manifest(manifest) -> list[Path]:
    """One matrix path per non-blank line; relative paths resolve against the manifest's folder."""
    manifest = Path(manifest)
    base = manifest.parent
    paths = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                p = Path(line)
                paths.append(p if p.is_absolute() else base / p)
    if not paths:
        raise ValueError(f"{manifest}: no subject files listed")
    return paths


def subject_id(t: int, n: int) -> str:
    return f"s{t:0{max(3, len(str(n - 1)))}d}"


def load_subjects(manifest, nodes: NodeTable, idx: EdgeIndex) -> list[SubjectData]:
    """Read every matrix listed in ``manifest``; subject ids follow manifest order."""
    paths = read_manifest(manifest)
    out = []
    for t, p in enumerate(paths):
        if not p.exists():
            raise FileNotFoundError(f"{manifest}: line {t + 1}: no such file {p}")
        mat = read_matrix_csv(p, nodes.n_nodes)
        out.append(SubjectData(matrix_to_edges(mat, idx, str(p)), subject_id(t, len(paths))))
    return out


# --- run configuration -----------------------------------------------------


@dataclass
class SamplerSettings:
    n_chains: int = 4
    n_sweeps: int = 2000
    burn_in: int = 1000
    thinning: int = 10
    kernel: str = "gibbs"


@dataclass
class SimulationSettings:
    n_subjects: int = 50
    alpha0: float = 0.1
    alpha1: float = 0.6
    sigma0: float = 0.15
    sigma1: float = 0.15
    beta: list = field(default_factory=lambda: [-1.0])


@dataclass
class RunConfig:
    seed: int
    features: list = field(default_factory=lambda: ["bias"])
    nodes: Optional[str] = None
    manifest: Optional[str] = None
    output: str = "out"
    params: Optional[str] = None
    d_max_exact: int = D_MAX_EXACT
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    fit: FitConfig = field(default_factory=FitConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    simulate: SimulationSettings = field(default_factory=SimulationSettings)
    models: dict = field(default_factory=dict)

    def spec(self) -> FeatureSpec:
        return FeatureSpec.from_names(self.features)

    def to_dict(self) -> dict:
        def plain(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            if isinstance(obj, float) and not math.isfinite(obj):
                return repr(obj)
            return obj
        return plain(self)

    def config_hash(self) -> str:
        """Digest of everything that can change results; the output folder is excluded."""
        doc = self.to_dict()
        doc.pop("output")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}


_SECTIONS = {"sampler": SamplerSettings, "fit": FitConfig, "selection": SelectionConfig,
             "simulate": SimulationSettings}
_TOP = {"seed", "features", "nodes", "manifest", "output", "params", "d_max_exact", "models"}


def _build_section(cls, raw, name, problems):
    if not isinstance(raw, dict):
        problems.append(f"[{name}]: expected a table")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown field (known: {', '.join(sorted(known))})")
            continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"[{name}]: {exc}")
        return cls()


def config_from_dict(raw: dict, base_dir=None, require=()) -> RunConfig:
    """Validate a parsed config; every problem is reported together in one :class:`ConfigError`."""
    problems = []
    for key in raw:
        if key not in _TOP and key not in _SECTIONS:
            problems.append(f"{key}: unknown field")
    seed = raw.get("seed")
    if seed is None:
        problems.append("seed: required (all randomness derives from it)")
    elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        problems.append(f"seed: must be a non-negative integer, got {seed!r}")
    features = raw.get("features", ["bias"])
    if not isinstance(features, list) or not all(isinstance(f, str) for f in features):
        problems.append("features: must be a list of feature names")
        features = ["bias"]
    else:
        unknown = [f for f in features if f not in known_features()]
        if unknown:
            problems.append(f"features: unknown {unknown}; known features are {known_features()}")
    models = raw.get("models", {})
    if not isinstance(models, dict):
        problems.append("models: expected a table of name = [features]")
        models = {}
    for name, feats in models.items():
        bad = [f for f in feats if f not in known_features()] if isinstance(feats, list) else [feats]
        if bad:
            problems.append(f"models.{name}: unknown {bad}; known features are {known_features()}")
    d_max = raw.get("d_max_exact", D_MAX_EXACT)
    if not isinstance(d_max, int) or isinstance(d_max, bool) or not 1 <= d_max <= 30:
        problems.append(f"d_max_exact: must be an integer in [1, 30], got {d_max!r}")
        d_max = D_MAX_EXACT
    sections = {name: _build_section(cls, raw.get(name, {}), name, problems)
                for name, cls in _SECTIONS.items()}
    base = Path(base_dir) if base_dir is not None else Path(".")
    paths = {}
    for key in ("nodes", "manifest", "params"):
        value = raw.get(key)
        if value is None:
            if key in require:
                problems.append(f"{key}: required for this command")
            paths[key] = None
            continue
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            problems.append(f"{key}: no such file {p}")
        paths[key] = str(p)
    output = raw.get("output", "out")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(seed=seed, features=list(features), output=str(output), d_max_exact=d_max,
                    models={k: list(v) for k, v in models.items()}, **paths, **sections)
    cfg.fit.seed = seed
    cfg.fit.d_max_exact = d_max
    cfg.selection.seed = seed
    cfg.selection.d_max_exact = d_max
    return cfg


def load_config(path, overrides: Optional[dict] = None, require=()) -> RunConfig:
    """Read a TOML run configuration; ``overrides`` (e.g. from flags) win over file values."""
    raw = {}
    base = None
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config: no such file {path}"]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config: {path}: {exc}"]) from None
        base = path.parent
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return config_from_dict(raw, base, require)


# --- traceable outputs -----------------------------------------------------


def write_json(path, doc: dict, meta: Optional[dict] = None) -> None:
    if meta is not None:
        doc = dict(doc, meta=meta)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def header_line(meta: dict) -> str:
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n"


def write_csv(path, header, rows, meta: Optional[dict] = None) -> None:
    """CSV with an optional leading ``# key=value`` provenance line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(header_line(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def params_document(params: ModelParams, spec: FeatureSpec, seed: int, config: dict) -> dict:
    return dict(alpha0=params.alpha0, alpha1=params.alpha1, sigma0=params.sigma0,
                sigma1=params.sigma1, beta=[float(b) for b in params.beta],
                feature_names=list(spec.names), seed=seed, config=config)


def read_params(path) -> tuple[ModelParams, FeatureSpec]:
    """Load a parameter JSON written by ``fit`` (or ``truth_params.json``)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "params" in doc and "alpha0" not in doc:
        doc = dict(doc["params"], feature_names=doc.get("feature_names"))
    missing = [k for k in ("alpha0", "alpha1", "sigma0", "sigma1", "beta", "feature_names") if doc.get(k) is None]
    if missing:
        raise ValueError(f"{path}: missing keys {missing}")
    spec = FeatureSpec.from_names(doc["feature_names"])
    params = ModelParams(doc["alpha0"], doc["alpha1"], doc["sigma0"], doc["sigma1"], doc["beta"])
    if len(params.beta) != len(spec):
        raise ValueError(f"{path}: {len(params.beta)} beta values for {len(spec)} features")
    return params, spec
