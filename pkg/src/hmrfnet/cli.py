"""Command-line interface: ``hmrfnet <command> [--config run.toml] [flags]``.

Every command writes into ``--out`` (or ``output`` in the config). Each
artifact carries the config hash and seed. A failed run leaves a ``.failed``
marker next to whatever it managed to write.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import posterior_marginals
from .features import FeatureSpec, feature_matrix, known_features
from .graph import NodeTable, build_edge_index
from .io import (
    ConfigError,
    edges_to_matrix,
    header_line,
    load_config,
    load_subjects,
    params_document,
    read_csv_rows,
    read_params,
    write_csv,
    write_json,
    write_matrix_csv,
)
from .learner import FitError, fit, write_trajectory
from .model import ModelParams, exact_prior_marginals
from .sampler import STREAM_EMISSION
from .selection import compute_bic
from .simulator import (
    generate_dataset,
    sample_emissions,
    sample_prior,
    score_recovery,
    stream_rng,
    threshold_baseline,
    write_recovery_report,
)
from .validation import run_battery

log = logging.getLogger("hmrfnet")

FAILED_MARKER = ".failed"
THRESHOLD_GRID = np.round(np.arange(0.02, 0.5001, 0.02), 2)


def _edge_rows(idx, nodes, bits):
    ids = nodes.node_ids
    return [(i, ids[idx.pairs[i, 0]], ids[idx.pairs[i, 1]]) for i in np.flatnonzero(bits)]


def _write_edge_list(path, idx, nodes, bits, meta):
    write_csv(path, ["edge_id", "u", "v"], _edge_rows(idx, nodes, bits), meta)


def _read_edge_list(path, idx, nodes) -> np.ndarray:
    pos = {nid: k for k, nid in enumerate(nodes.node_ids)}
    bits = np.zeros(idx.d, dtype=np.uint8)
    for row in read_csv_rows(path):
        try:
            u, v = pos[row["u"]], pos[row["v"]]
        except KeyError as exc:
            raise ValueError(f"{path}: unknown node {exc.args[0]!r}") from None
        bits[idx.id_of(min(u, v), max(u, v))] = 1
    return bits


def _geometry(cfg):
    nodes = NodeTable.read_csv(cfg.nodes)
    return nodes, build_edge_index(nodes)


# --- commands ----------------------------------------------------------------


def cmd_simulate(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    spec = cfg.spec()
    sim = cfg.simulate
    if len(sim.beta) != len(spec):
        raise ConfigError([f"simulate.beta: {len(sim.beta)} values for features {list(spec.names)}"])
    params = ModelParams(sim.alpha0, sim.alpha1, sim.sigma0, sim.sigma1, sim.beta)
    n = args.n if args.n is not None else sim.n_subjects
    data, truth = generate_dataset(params, spec, nodes, n, cfg.seed, idx, cfg.d_max_exact)
    meta = cfg.meta()
    subj_dir = out / "subjects"
    subj_dir.mkdir(exist_ok=True)
    lines = []
    for s, cfg_bits in zip(data, truth.configs):
        write_matrix_csv(subj_dir / f"{s.subject_id}.csv", edges_to_matrix(s.y, idx), meta)
        lines.append(f"subjects/{s.subject_id}.csv")
        _write_edge_list(out / f"truth_edges_subject_{s.subject_id}.csv", idx, nodes, cfg_bits.bits, meta)
    (out / "manifest.txt").write_text(header_line(meta) + "\n".join(lines) + "\n", encoding="utf-8")
    nodes.write_csv(out / "nodes.csv", header_line(meta))
    doc = params_document(params, spec, cfg.seed, cfg.to_dict())
    doc.update(n_subjects=n, latent_sampler=truth.method, gibbs_sweeps=truth.sweeps,
               subject_ids=[s.subject_id for s in data])
    write_json(out / "truth_params.json", doc, meta)
    log.info("simulated %d subjects over d=%d edges into %s", n, idx.d, out)


def cmd_fit(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    spec = cfg.spec()
    data = load_subjects(cfg.manifest, nodes, idx)
    result = _fit_one(data, spec, idx, nodes, cfg, out / "trajectory.csv")
    doc = params_document(result.params, spec, cfg.seed, cfg.to_dict())
    doc.update(converged=result.converged, n_iter=result.n_iter)
    write_json(out / "params.json", doc, cfg.meta())
    log.info("fit %s: converged=%s after %d iterations", list(spec.names), result.converged, result.n_iter)


def _fit_one(data, spec, idx, nodes, cfg, trajectory_path):
    header = " ".join(f"{k}={v}" for k, v in sorted(cfg.meta().items()))
    try:
        result = fit(data, spec, idx, nodes, cfg.fit)
    except FitError as exc:
        write_trajectory(trajectory_path, exc.trajectory, len(spec), header)
        raise
    result.write_trajectory(trajectory_path, header)
    return result


def cmd_infer(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    data = load_subjects(cfg.manifest, nodes, idx)
    params, spec = read_params(cfg.params)
    Y = np.array([s.y for s in data])
    s = cfg.sampler
    M = posterior_marginals(params, spec, Y, idx, nodes, cfg.d_max_exact, cfg.seed, s.n_chains,
                            s.n_sweeps, s.burn_in, s.thinning, s.kernel)
    ids = nodes.node_ids
    header = ["subject_id", "edge_id", "u", "v", "prob_present"]
    rows = [(subj.subject_id, i, ids[idx.pairs[i, 0]], ids[idx.pairs[i, 1]], repr(float(M[t, i])))
            for t, subj in enumerate(data) for i in range(idx.d)]
    meta = cfg.meta()
    write_csv(out / "posterior_marginals.csv", header, rows, meta)
    mean = M.mean(axis=0)
    write_csv(out / "group_mean_marginals.csv", header,
              [("group_mean", i, ids[idx.pairs[i, 0]], ids[idx.pairs[i, 1]], repr(float(mean[i])))
               for i in range(idx.d)], meta)
    if args.truth is not None:
        truth_dir = Path(args.truth)
        T = np.array([_read_edge_list(truth_dir / f"truth_edges_subject_{subj.subject_id}.csv", idx, nodes)
                      for subj in data])
        sids = [subj.subject_id for subj in data]
        scores = {"hmrf_posterior": score_recovery(M, T, sids)}
        best = None
        for p in THRESHOLD_GRID:
            B = np.array([threshold_baseline(y, p).bits for y in Y])
            sc = score_recovery(B, T, sids)
            if best is None or sc.f1 > best[1].f1:
                best = (p, sc)
        scores[f"threshold_p{best[0]:.2f}"] = best[1]
        write_recovery_report(out / "recovery_report.json", scores, meta)
    log.info("inferred posterior marginals for %d subjects", len(data))


def cmd_generate(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    params, spec = read_params(cfg.params)
    n = args.n if args.n is not None else cfg.simulate.n_subjects
    X, method, sweeps = sample_prior(params, spec, idx, nodes, n, cfg.seed, cfg.d_max_exact)
    meta = cfg.meta()
    width = max(3, len(str(n - 1)))
    for k, bits in enumerate(X):
        _write_edge_list(out / f"network_{k:0{width}d}.csv", idx, nodes, bits, meta)
    if args.emissions:
        Y = sample_emissions(params, X, stream_rng(cfg.seed, STREAM_EMISSION))
        write_csv(out / "emissions.csv", ["sample_id", "edge_id", "y"],
                  [(k, i, repr(float(Y[k, i]))) for k in range(n) for i in range(idx.d)], meta)
    summary = dict(n_networks=n, latent_sampler=method, gibbs_sweeps=sweeps,
                   edge_density=float(X.mean()), edge_frequency=[float(v) for v in X.mean(axis=0)])
    if idx.d <= cfg.d_max_exact:
        summary["exact_prior_marginals"] = [float(v) for v in
                                            exact_prior_marginals(params, spec, idx, nodes, cfg.d_max_exact)]
    write_json(out / "generate_summary.json", summary, meta)
    log.info("generated %d networks (%s)", n, method)


def _parse_models(cfg, args):
    models = dict(cfg.models)
    for item in args.model or []:
        name, _, feats = item.partition("=")
        if not name or not feats:
            raise ConfigError([f"--model {item!r}: expected name=feature,feature"])
        models[name] = [f.strip() for f in feats.split(",") if f.strip()]
    if len(models) < 2:
        raise ConfigError(["models: at least two models are required (config [models] or --model)"])
    problems = [f"models.{k}: unknown {[f for f in v if f not in known_features()]}; known features are "
                f"{known_features()}" for k, v in models.items() if any(f not in known_features() for f in v)]
    if problems:
        raise ConfigError(problems)
    return models


def cmd_compare(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    data = load_subjects(cfg.manifest, nodes, idx)
    models = _parse_models(cfg, args)
    fitted = []
    for name in sorted(models):
        spec = FeatureSpec.from_names(models[name])
        result = _fit_one(data, spec, idx, nodes, cfg, out / f"trajectory_{name}.csv")
        doc = params_document(result.params, spec, cfg.seed, cfg.to_dict())
        doc.update(converged=result.converged, n_iter=result.n_iter)
        write_json(out / f"params_{name}.json", doc, cfg.meta())
        fitted.append((name, result, spec))
    report = compute_bic(fitted, data, idx, nodes, cfg.selection)
    report.write_json(out / "bic_report.json", cfg.meta())
    for m in report.models:
        log.info("%s: loglik=%.3f (%s) bic=%.3f", m.name, m.loglik, m.method, m.bic)
    print("ranking: " + " < ".join(report.ranking))


def cmd_features(cfg, args, out: Path):
    nodes, idx = _geometry(cfg)
    spec = cfg.spec()
    bits = _read_edge_list(args.edges, idx, nodes) if args.edges else np.zeros(idx.d, dtype=np.uint8)
    F = feature_matrix(spec, bits[None, :], idx, nodes)[0]
    ids = nodes.node_ids
    rows = [(i, ids[idx.pairs[i, 0]], ids[idx.pairs[i, 1]], int(bits[i]), repr(float(idx.dist[i])),
             *(repr(float(v)) for v in F[i])) for i in range(idx.d)]
    write_csv(out / "features.csv", ["edge_id", "u", "v", "present", "distance", *spec.names], rows, cfg.meta())


def cmd_validate(cfg, args, out: Path):
    results = run_battery(cfg.seed)
    for r in results:
        print(r.line())
    write_json(out / "validation_report.json",
               dict(checks=[dict(name=r.name, passed=r.passed, detail=r.detail) for r in results],
                    passed=all(r.passed for r in results)), cfg.meta())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "simulate": (cmd_simulate, ("nodes",), "draw synthetic subjects and their latent networks"),
    "fit": (cmd_fit, ("nodes", "manifest"), "fit emission and field parameters"),
    "infer": (cmd_infer, ("nodes", "manifest", "params"), "posterior edge probabilities per subject"),
    "generate": (cmd_generate, ("nodes", "params"), "sample networks from fitted parameters"),
    "compare": (cmd_compare, ("nodes", "manifest"), "rank feature hypotheses by BIC"),
    "features": (cmd_features, ("nodes",), "dump per-edge feature values for one configuration"),
    "validate": (cmd_validate, (), "run the enumeration-oracle self-test battery"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmrfnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--nodes", help="node table CSV (node_id,x,y,z,system)")
        p.add_argument("--features", help="comma-separated feature names")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit", "infer", "compare"):
            p.add_argument("--manifest", help="text file listing one correlation-matrix CSV per line")
        if name in ("infer", "generate"):
            p.add_argument("--params", help="parameter JSON written by fit")
        if name in ("simulate", "generate"):
            p.add_argument("--n", type=int, help="number of subjects / networks")
        if name == "generate":
            p.add_argument("--emissions", action="store_true", help="also draw Fisher-z observations")
        if name == "infer":
            p.add_argument("--truth", help="simulate output folder; adds recovery_report.json")
        if name == "compare":
            p.add_argument("--model", action="append", metavar="NAME=F1,F2",
                           help="model to compare (repeatable)")
        if name == "features":
            p.add_argument("--edges", help="edge list CSV (u,v columns) defining the configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func, required, _ = COMMANDS[args.command]
    overrides = {"seed": args.seed, "output": args.out, "nodes": args.nodes,
                 "manifest": getattr(args, "manifest", None), "params": getattr(args, "params", None)}
    if args.features:
        overrides["features"] = [f.strip() for f in args.features.split(",") if f.strip()]
    if args.command == "validate" and args.seed is None and args.config is None:
        overrides["seed"] = 0
    # paths given as flags are relative to the working directory, not the config file
    for key in ("nodes", "manifest", "params"):
        if overrides.get(key) is not None:
            overrides[key] = str(Path(overrides[key]).resolve())
    try:
        cfg = load_config(args.config, overrides, require=required)
    except ConfigError as exc:
        print(f"hmrfnet {args.command}: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            logging.captureWarnings(True)
            status = func(cfg, args, out) or 0
    except (ConfigError, ValueError, FileNotFoundError, FitError, FloatingPointError) as exc:
        marker.write_text(f"{args.command}: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        print(f"hmrfnet {args.command}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except BaseException as exc:
        marker.write_text(f"{args.command}: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
