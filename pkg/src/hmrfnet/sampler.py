"""Single-site MCMC over latent edge configurations.

Chains target either the field prior ``p(x | beta)`` or a (tempered) posterior
``p(x | beta) p(y | x)^tau``. Every chain owns a counter-based Philox stream
keyed by ``(seed, stream, chain_id)``, so trajectories do not depend on how
chains are batched or scheduled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import _kernels
from .features import FeatureSpec
from .graph import EdgeIndex, LatentConfig, NodeTable, _bits
from .model import ModelParams, delta_energy, emission_terms

# random stream ids; every chain draws from SeedSequence(seed, spawn_key=(stream, chain_id))
STREAM_POSTERIOR = 1
STREAM_MODEL = 2
STREAM_CD = 3
STREAM_LATENT = 4
STREAM_EMISSION = 5
STREAM_AIS = 6

KERNELS = ("gibbs", "metropolis")
BLOCK_SWEEPS = 256


def chain_rng(seed: int, chain_id: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(chain_id)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class ModelContext:
    """Immutable bundle of parameters, features and geometry shared by chains."""

    params: ModelParams
    spec: FeatureSpec
    idx: EdgeIndex
    nodes: NodeTable

    def __post_init__(self):
        if len(self.params.beta) != len(self.spec):
            raise ValueError(
                f"beta has {len(self.params.beta)} entries but there are {len(self.spec)} features"
            )

    @property
    def d(self) -> int:
        return self.idx.d

    @property
    def compiled(self) -> bool:
        return self.spec.compiled

    @cached_property
    def field(self) -> np.ndarray:
        beta = self.params.beta
        static = self.spec.static_table(self.idx, self.nodes)
        return static @ beta - (beta @ beta) * self.idx.dist

    @cached_property
    def coupling(self) -> float:
        return float(3.0 * self.params.beta[self.spec.triangle_mask()].sum())

    def with_params(self, params: ModelParams) -> ModelContext:
        return ModelContext(params, self.spec, self.idx, self.nodes)

    def emission_ratio(self, y) -> np.ndarray:
        """``log p(y_i | x_i=1) - log p(y_i | x_i=0)`` per edge."""
        l0, l1 = emission_terms(self.params, y)
        return l1 - l0

    def emission_start(self, y) -> np.ndarray:
        """Edges whose observation is closer (in sd units) to the present-class mean."""
        p = self.params
        y = np.asarray(y, dtype=float)
        return (np.abs(y - p.alpha1) / p.sigma1 < np.abs(y - p.alpha0) / p.sigma0).astype(np.uint8)


def conditional_logit(params: ModelParams, spec: FeatureSpec, x, idx: EdgeIndex,
                      nodes: NodeTable, i: int, y=None, tau: float = 1.0) -> float:
    """Log-odds of ``x_i = 1`` given all other bits (and ``y`` when given)."""
    x0 = _bits(x).astype(np.uint8, copy=True)
    x0[i] = 0
    a = -delta_energy(params, spec, x0, idx, nodes, i)
    if y is not None:
        l0, l1 = emission_terms(params, np.asarray(y, dtype=float)[i])
        a += tau * (l1 - l0)
    return float(a)


@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    occupancy: np.ndarray
    sweeps: int


@dataclass
class ChainState:
    """One chain: its configuration, random stream and bookkeeping."""

    x: LatentConfig
    rng: np.random.Generator
    seed: int
    chain_id: int
    stream: int = 0
    y: Optional[np.ndarray] = None
    tau: float = 1.0
    step_count: int = 0
    proposed: int = 0
    accepted: int = 0

    @property
    def target(self) -> str:
        return "prior" if self.y is None else "posterior"

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0


def init_chain(ctx: ModelContext, seed: int, chain_id: int, y=None, tau: float = 1.0,
               stream: int = 0, x0=None) -> ChainState:
    """Prior chains start from iid Bernoulli(0.5) bits; posterior chains from
    the emission-only classification of ``y``."""
    rng = chain_rng(seed, chain_id, stream)
    if x0 is not None:
        bits = np.array(_bits(x0), dtype=np.uint8)
    elif y is None:
        bits = (rng.random(ctx.d) < 0.5).astype(np.uint8)
    else:
        bits = ctx.emission_start(y)
    y = None if y is None else np.asarray(y, dtype=float)
    return ChainState(LatentConfig(bits), rng, int(seed), int(chain_id), int(stream), y, float(tau))


def _ext_row(ctx: ModelContext, state: ChainState) -> np.ndarray:
    if state.y is None:
        return np.zeros(ctx.d)
    return state.tau * ctx.emission_ratio(state.y)


def _python_logit(ctx: ModelContext, bits: np.ndarray, ext_row: np.ndarray, i: int) -> float:
    x0 = bits.copy()
    x0[i] = 0
    return -delta_energy(ctx.params, ctx.spec, x0, ctx.idx, ctx.nodes, i) + ext_row[i]


def _sigmoid(a: float) -> float:
    if a >= 0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


def _python_gibbs(ctx, bits, ext_row, R):
    d = len(bits)
    order = np.argsort(R[:d])
    for k in range(d):
        i = order[k]
        bits[i] = 1 if R[d + k] < _sigmoid(_python_logit(ctx, bits, ext_row, i)) else 0


def _python_metropolis(ctx, bits, ext_row, u_index, u_accept) -> bool:
    d = len(bits)
    i = min(int(u_index * d), d - 1)
    a = _python_logit(ctx, bits, ext_row, i)
    log_ratio = a if bits[i] == 0 else -a
    if log_ratio >= 0 or u_accept < math.exp(log_ratio):
        bits[i] ^= 1
        return True
    return False


def gibbs_sweep(state: ChainState, ctx: ModelContext) -> ChainState:
    """Resample every bit once, in a fresh random order, from its exact conditional."""
    d = ctx.d
    R = state.rng.random(2 * d)
    ext_row = _ext_row(ctx, state)
    if ctx.compiled:
        X = state.x.bits[None, :]
        _kernels.gibbs_block(X, ctx.field, ext_row[None, :], ctx.coupling, ctx.idx.triangles,
                             R[None, None, :], np.full(1, -1, dtype=np.int64),
                             np.empty((1, 1, d), dtype=np.uint8))
    else:
        _python_gibbs(ctx, state.x.bits, ext_row, R)
    state.x.resync()
    state.step_count += d
    state.proposed += d
    state.accepted += d
    return state


def metropolis_step(state: ChainState, ctx: ModelContext) -> ChainState:
    """Propose flipping one uniformly chosen bit; accept with ``min(1, exp(-delta))``."""
    u_index, u_accept = state.rng.random(2)
    ext_row = _ext_row(ctx, state)
    if _python_metropolis(ctx, state.x.bits, ext_row, u_index, u_accept):
        state.accepted += 1
    state.x.resync()
    state.step_count += 1
    state.proposed += 1
    return state


class ChainBatch:
    """Many chains advanced together; equivalent to advancing each chain alone."""

    def __init__(self, ctx: ModelContext, states: list[ChainState], kernel: str = "gibbs"):
        if kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        self.ctx = ctx
        self.states = states
        self.kernel = kernel
        self.X = np.array([s.x.bits for s in states], dtype=np.uint8).reshape(len(states), ctx.d)
        self.ext = np.array([_ext_row(ctx, s) for s in states]).reshape(len(states), ctx.d)

    def set_context(self, ctx: ModelContext) -> None:
        """Swap parameters (e.g. between learning iterations), keeping chain states."""
        self.ctx = ctx
        self.ext = np.array([_ext_row(ctx, s) for s in self.states]).reshape(len(self.states), ctx.d)

    def set_tau(self, tau: float) -> None:
        for s in self.states:
            s.tau = float(tau)
        self.set_context(self.ctx)

    def run(self, n_sweeps: int, keep=None) -> np.ndarray:
        """Advance all chains ``n_sweeps`` sweeps.

        ``keep`` lists the (0-based) sweeps of this call after which states are
        stored; returns an array ``(C, len(keep), d)``.
        """
        ctx, d, C = self.ctx, self.ctx.d, len(self.states)
        keep = np.asarray([] if keep is None else keep, dtype=np.int64)
        slot_of = np.full(n_sweeps, -1, dtype=np.int64)
        slot_of[keep] = np.arange(len(keep))
        out = np.empty((C, max(len(keep), 1), d), dtype=np.uint8)
        accepted = np.zeros(C, dtype=np.int64)
        for start in range(0, n_sweeps, BLOCK_SWEEPS):
            B = min(BLOCK_SWEEPS, n_sweeps - start)
            R = np.stack([s.rng.random((B, 2 * d)) for s in self.states]) if C else np.empty((0, B, 2 * d))
            slot = slot_of[start:start + B]
            if ctx.compiled and self.kernel == "gibbs":
                _kernels.gibbs_block(self.X, ctx.field, self.ext, ctx.coupling, ctx.idx.triangles,
                                     R, slot, out)
            elif ctx.compiled:
                _kernels.metropolis_block(self.X, ctx.field, self.ext, ctx.coupling,
                                          ctx.idx.triangles, R, accepted, slot, out)
            else:
                self._run_python(R, slot, out, accepted)
        for c, s in enumerate(self.states):
            s.x.bits[:] = self.X[c]
            s.x.resync()
            s.step_count += n_sweeps * d
            s.proposed += n_sweeps * d
            s.accepted += n_sweeps * d if self.kernel == "gibbs" else int(accepted[c])
        return out[:, :len(keep)]

    def _run_python(self, R, slot, out, accepted):
        for c in range(len(self.states)):
            bits = self.X[c]
            for b in range(R.shape[1]):
                if self.kernel == "gibbs":
                    _python_gibbs(self.ctx, bits, self.ext[c], R[c, b])
                else:
                    for k in range(self.ctx.d):
                        if _python_metropolis(self.ctx, bits, self.ext[c], R[c, b, 2 * k],
                                              R[c, b, 2 * k + 1]):
                            accepted[c] += 1
                if slot[b] >= 0:
                    out[c, slot[b]] = bits


@dataclass
class ChainRun:
    """Thinned samples ``(n_chains, n_kept, d)`` plus per-chain diagnostics."""

    samples: np.ndarray
    sweeps: np.ndarray
    diagnostics: list[ChainDiagnostics]
    acceptance_trace: np.ndarray = field(repr=False)

    def pooled(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def occupancy(self) -> np.ndarray:
        return self.pooled().mean(axis=0)

    def diagnostics_rows(self):
        """``(chain_id, sweep, acceptance_rate, mean_occupancy)`` per retained sample."""
        C, K, _ = self.samples.shape
        running = np.cumsum(self.samples.mean(axis=2), axis=1) / np.arange(1, K + 1)
        for c in range(C):
            for k in range(K):
                yield c, int(self.sweeps[k]), float(self.acceptance_trace[c, k]), float(running[c, k])

    def write_diagnostics(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain_id", "sweep", "acceptance_rate", "mean_occupancy"])
            for c, sweep, acc, occ in self.diagnostics_rows():
                w.writerow([c, sweep, f"{acc:.6f}", f"{occ:.6f}"])


def run_chains(ctx: ModelContext, n_chains: int = 4, n_sweeps: int = 2000, burn_in: int = 1000,
               thinning: int = 10, targets=None, seed: int = 0, kernel: str = "gibbs",
               stream: int = 0, tau: float = 1.0, init=None) -> ChainRun:
    """Run independent chains and keep every ``thinning``-th sweep after ``burn_in``.

    ``n_sweeps`` counts all sweeps including burn-in. ``targets`` is ``None``
    (all prior chains) or one ``y`` vector (or ``None``) per chain. ``init``
    optionally supplies starting configurations, one per chain.
    """
    if n_chains < 1 or n_sweeps < 1:
        raise ValueError("n_chains and n_sweeps must be positive")
    if not 0 <= burn_in < n_sweeps:
        raise ValueError("burn_in must satisfy 0 <= burn_in < n_sweeps")
    if thinning < 1:
        raise ValueError("thinning must be positive")
    if targets is None:
        targets = [None] * n_chains
    if len(targets) != n_chains:
        raise ValueError("one target per chain is required")
    states = [
        init_chain(ctx, seed, c, y=targets[c], tau=tau, stream=stream,
                   x0=None if init is None else init[c])
        for c in range(n_chains)
    ]
    # sweep s (1-based) is kept when s > burn_in and (s - burn_in) % thinning == 0
    kept = np.arange(burn_in + thinning, n_sweeps + 1, thinning)
    batch = ChainBatch(ctx, states, kernel)
    if kernel == "gibbs":
        samples = batch.run(n_sweeps, keep=kept - 1)
        acc_trace = np.ones((n_chains, len(kept)))
    else:
        samples, acc_trace = _run_metropolis_traced(batch, n_sweeps, kept)
    diags = [
        ChainDiagnostics(
            acceptance_rate=s.acceptance_rate,
            occupancy=samples[c].mean(axis=0) if len(kept) else np.zeros(ctx.d),
            sweeps=n_sweeps,
        )
        for c, s in enumerate(states)
    ]
    return ChainRun(samples, kept, diags, acc_trace)


def _run_metropolis_traced(batch: ChainBatch, n_sweeps: int, kept: np.ndarray):
    C, d = len(batch.states), batch.ctx.d
    samples = np.empty((C, len(kept), d), dtype=np.uint8)
    trace = np.empty((C, len(kept)))
    done = 0
    for k, sweep in enumerate(kept):
        samples[:, k] = batch.run(int(sweep - done), keep=[int(sweep - done) - 1])[:, 0]
        done = int(sweep)
        trace[:, k] = [s.acceptance_rate for s in batch.states]
    if done < n_sweeps:
        batch.run(n_sweeps - done)
    return samples, trace


def sampled_posterior_marginals(ctx: ModelContext, Y, n_chains: int = 4, n_sweeps: int = 2000,
                                burn_in: int = 1000, thinning: int = 10, seed: int = 0,
                                kernel: str = "gibbs") -> np.ndarray:
    """Per-subject posterior edge occupancies ``(n, d)`` from ``n_chains`` chains each."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = len(Y)
    targets = [Y[t] for t in range(n) for _ in range(n_chains)]
    run = run_chains(ctx, n * n_chains, n_sweeps, burn_in, thinning, targets, seed, kernel,
                     stream=STREAM_POSTERIOR)
    C, K, d = run.samples.shape
    return run.samples.reshape(n, n_chains * K, d).mean(axis=1)
