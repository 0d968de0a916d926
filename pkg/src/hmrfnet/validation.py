"""Enumeration-oracle self-test battery run by ``hmrfnet validate``.

Each check compares a fast code path with an independent small-``d`` oracle
and reports ``(name, passed, detail)``. The battery is seeded and runs in a
few seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .features import FeatureSpec
from .graph import NodeTable, build_edge_index, n_edges
from .io import fisher_transform
from .learner import FitConfig, beta_gradient_exact, fit
from .model import (
    ModelParams,
    exact_loglik,
    exact_posterior_marginals,
    exact_prior_marginals,
    joint_logprob_unnorm,
    prior_logprob_unnorm,
)
from .sampler import ModelContext, run_chains
from .selection import ais_loglik
from .simulator import generate_dataset


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _instance(rng: np.random.Generator, n_nodes: int, features=("bias", "common_neighbors", "same_system")):
    nodes = NodeTable.from_records(
        [(f"n{i}", rng.normal(size=3) * 0.5, "ab"[i % 2]) for i in range(n_nodes)])
    spec = FeatureSpec.from_names(list(features))
    params = ModelParams(0.1, 0.5, 0.2, 0.25, rng.normal(size=len(spec)) * 0.5)
    return nodes, build_edge_index(nodes), spec, params


def check_edge_index(seed: int) -> CheckResult:
    worst = None
    for N in range(3, 13):
        nodes = NodeTable.from_records([(f"n{i}", (i, 0.0, 0.0), "") for i in range(N)])
        idx = build_edge_index(nodes)
        ok = idx.d == n_edges(N) and all(idx.id_of(*idx.pair_of(i)) == i for i in range(idx.d))
        ok &= all(len(idx.neighbors_of(i)) == 2 * (N - 2) for i in range(idx.d))
        if not ok:
            worst = N
            break
    return CheckResult("edge index bijection", worst is None,
                       "N = 3..12 round-trip" if worst is None else f"failed at N={worst}")


def check_fisher(seed: int) -> CheckResult:
    err = abs(fisher_transform(0.5) - 0.5 * math.log(3.0))
    odd = fisher_transform(-0.3) == -fisher_transform(0.3)
    return CheckResult("Fisher transform", err < 1e-15 and odd, f"|z(0.5) - ln(3)/2| = {err:.1e}")


def check_factorized_loglik(seed: int) -> CheckResult:
    """Bias-only fields factorize into per-edge two-component mixtures."""
    rng = np.random.default_rng(seed)
    nodes, idx, spec, params = _instance(rng, 5, ("bias",))
    y = rng.normal(0.3, 0.3, size=idx.d)
    b = params.beta[0]
    pi = expit(b - b * b * idx.dist)

    def npdf(v, m, s):
        return -0.5 * ((v - m) / s) ** 2 - math.log(s * math.sqrt(2 * math.pi))

    oracle = np.sum(np.logaddexp(np.log1p(-pi) + npdf(y, params.alpha0, params.sigma0),
                                 np.log(pi) + npdf(y, params.alpha1, params.sigma1)))
    got = exact_loglik(params, spec, y, idx, nodes)
    err = abs(got - oracle)
    return CheckResult("bias-only likelihood factorizes", err < 1e-9, f"abs err {err:.1e}")


def check_brute_force(seed: int) -> CheckResult:
    """Exact marginals against a direct loop over all configurations."""
    rng = np.random.default_rng(seed + 1)
    nodes, idx, spec, params = _instance(rng, 4)
    y = rng.normal(0.3, 0.3, size=idx.d)
    configs = [np.array([(c >> i) & 1 for i in range(idx.d)], dtype=np.uint8) for c in range(2 ** idx.d)]
    lj = np.array([joint_logprob_unnorm(params, spec, x, y, idx, nodes) for x in configs])
    lp = np.array([prior_logprob_unnorm(params, spec, x, idx, nodes) for x in configs])
    X = np.array(configs, dtype=float)
    post = np.exp(lj - logsumexp(lj)) @ X
    prior = np.exp(lp - logsumexp(lp)) @ X
    ll = logsumexp(lj) - logsumexp(lp)
    err = max(np.abs(post - exact_posterior_marginals(params, spec, y, idx, nodes)).max(),
              np.abs(prior - exact_prior_marginals(params, spec, idx, nodes)).max(),
              abs(ll - exact_loglik(params, spec, y, idx, nodes)))
    return CheckResult("enumeration matches brute force", err < 1e-10, f"max abs err {err:.1e}")


def check_gibbs(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 2)
    nodes, idx, spec, params = _instance(rng, 5)
    exact = exact_prior_marginals(params, spec, idx, nodes)
    run = run_chains(ModelContext(params, spec, idx, nodes), n_chains=4, n_sweeps=6000,
                     burn_in=1000, thinning=1, seed=seed)
    per_chain = run.samples.mean(axis=1)
    se = per_chain.std(axis=0, ddof=1) / 2.0
    z = np.abs(per_chain.mean(axis=0) - exact) / np.maximum(se, 1e-3)
    frac = float(np.mean(z <= 3.0))
    return CheckResult("Gibbs occupancy vs exact marginals", frac >= 0.9,
                       f"{frac:.0%} of edges within 3 SE")


def check_gradient(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 3)
    nodes, idx, spec, params = _instance(rng, 5)
    data, _ = generate_dataset(params, spec, nodes, 4, seed)
    Y = np.array([s.y for s in data])
    g = beta_gradient_exact(params, spec, Y, idx, nodes)
    h = 1e-5
    fd = np.empty_like(g)
    for m in range(len(g)):
        up = params.beta.copy()
        dn = params.beta.copy()
        up[m] += h
        dn[m] -= h
        fd[m] = (np.mean(exact_loglik(params.replace(beta=up), spec, Y, idx, nodes))
                 - np.mean(exact_loglik(params.replace(beta=dn), spec, Y, idx, nodes))) / (2 * h)
    rel = float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)))
    return CheckResult("exact gradient vs finite differences", rel < 1e-4, f"max rel err {rel:.1e}")


def check_ais(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 4)
    nodes, idx, spec, params = _instance(rng, 4)
    data, _ = generate_dataset(params, spec, nodes, 1, seed)
    ev = ais_loglik(params, spec, data, idx, nodes, replicates=32, seed=seed)
    ex = float(np.sum(exact_loglik(params, spec, data[0].y, idx, nodes)))
    gap = abs(ev.total - ex)
    ok = gap <= max(3 * ev.se, 1e-6)
    return CheckResult("AIS vs exact log-likelihood", ok, f"gap {gap:.3g}, 3 SE = {3 * ev.se:.3g}")


def check_em_ascent(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed + 5)
    nodes, idx, spec, params = _instance(rng, 4, ("bias", "common_neighbors"))
    data, _ = generate_dataset(params, spec, nodes, 30, seed)
    res = fit(data, spec, idx, nodes, FitConfig(exact=True, max_iters=15, tol=1e-12, seed=seed))
    ll = np.array([row["objective"] for row in res.trajectory])
    drop = float(np.min(np.diff(ll))) if len(ll) > 1 else 0.0
    return CheckResult("exact EM never decreases the likelihood", drop >= -1e-9,
                       f"{len(ll)} iterations, smallest step {drop:.1e}")


CHECKS = (check_edge_index, check_fisher, check_factorized_loglik, check_brute_force,
          check_gibbs, check_gradient, check_ais, check_em_ascent)


def run_battery(seed: int = 0) -> list[CheckResult]:
    out = []
    for check in CHECKS:
        try:
            out.append(check(seed))
        except Exception as exc:  # a crashing check is a failed check
            out.append(CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return out
