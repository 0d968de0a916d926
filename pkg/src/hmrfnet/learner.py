"""Maximum-likelihood fitting: Monte-Carlo EM for the emission, contrastive divergence for beta.

Each iteration draws posterior samples of the latent field for every
subject, updates ``(alpha0, alpha1, sigma0, sigma1)`` in closed form from
those samples, and takes a gradient-ascent step on ``beta`` whose negative
phase comes from prior chains advanced ``k`` sweeps (persistent by default).
With ``exact=True`` both expectations are computed by enumeration instead and
the beta step uses backtracking so the log-likelihood never decreases.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from sklearn.mixture import GaussianMixture

from .features import FeatureSpec
from .graph import EdgeIndex, NodeTable
from .model import (
    D_MAX_EXACT,
    SIGMA_FLOOR,
    ModelParams,
    as_matrix,
    configuration_totals,
    emission_terms,
    state_space,
    suff_stat_s,
)
from .sampler import STREAM_CD, STREAM_MODEL, STREAM_POSTERIOR, ChainBatch, ModelContext, init_chain

log = logging.getLogger(__name__)

FISHER_DAMPING = 0.1


class FitError(RuntimeError):
    """Non-finite parameter update; ``trajectory`` holds the iterations so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


class ClassOccupancyWarning(UserWarning):
    pass


@dataclass
class FitConfig:
    max_iters: int = 500
    cd_steps: int = 5
    persistent_chains: bool = True
    learn_rate: float = 0.5
    lr_decay: str = "sqrt"
    n_posterior_samples: int = 50
    tol: float = 1e-3
    seed: int = 0
    n_model_chains: Optional[int] = None
    posterior_burn_in: int = 50
    exact: bool = False
    d_max_exact: int = D_MAX_EXACT
    beta_steps: int = 10
    precondition: str = "fisher"
    max_step: float = 0.25

    def __post_init__(self):
        if min(self.max_iters, self.cd_steps, self.n_posterior_samples) < 1:
            raise ValueError("max_iters, cd_steps and n_posterior_samples must be positive")
        if self.learn_rate <= 0 or self.tol <= 0:
            raise ValueError("learn_rate and tol must be positive")
        if self.lr_decay not in ("sqrt", "none"):
            raise ValueError("lr_decay must be 'sqrt' or 'none'")
        if self.n_model_chains is not None and self.n_model_chains < 1:
            raise ValueError("n_model_chains must be positive")
        if self.posterior_burn_in < 0:
            raise ValueError("posterior_burn_in must be >= 0")
        if self.beta_steps < 1:
            raise ValueError("beta_steps must be positive")
        if self.precondition not in ("fisher", "none"):
            raise ValueError("precondition must be 'fisher' or 'none'")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")

    def step_size(self, iteration: int) -> float:
        if self.lr_decay == "sqrt":
            return self.learn_rate / math.sqrt(iteration)
        return self.learn_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: ModelParams
    feature_names: tuple
    trajectory: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    config: Optional[FitConfig] = None

    def trajectory_columns(self) -> list[str]:
        k1 = len(self.feature_names)
        return ["iter", "alpha0", "alpha1", "sigma0", "sigma1",
                *[f"beta_{m}" for m in range(k1)], "grad_norm", "objective"]

    def write_trajectory(self, path, header_comment: str | None = None) -> None:
        write_trajectory(path, self.trajectory, len(self.feature_names), header_comment)

    def to_json_dict(self) -> dict:
        out = self.params.to_dict()
        out["feature_names"] = list(self.feature_names)
        out["seed"] = None if self.config is None else self.config.seed
        out["config"] = None if self.config is None else self.config.to_dict()
        out["converged"] = self.converged
        out["n_iter"] = self.n_iter
        return out


def write_trajectory(path, trajectory, n_beta: int, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "alpha0", "alpha1", "sigma0", "sigma1",
                    *[f"beta_{m}" for m in range(n_beta)], "grad_norm", "objective"])
        for rec in trajectory:
            w.writerow([rec["iter"], *(repr(float(v)) for v in rec["params"]),
                        repr(float(rec["grad_norm"])), repr(float(rec["objective"]))])


# --- gradients -------------------------------------------------------------


def beta_gradient_exact(params: ModelParams, spec: FeatureSpec, data, idx: EdgeIndex,
                        nodes: NodeTable, d_max_exact: int = D_MAX_EXACT) -> np.ndarray:
    """Gradient of the mean log-likelihood in beta, by enumeration.

    ``(1/n) sum_t E[s(x) | y_t] - E[s(x)]`` with ``s`` the sufficient statistic.
    """
    space = state_space(spec, idx, nodes, d_max_exact)
    Y = as_matrix(data)
    S = space.suff_stats(params.beta)
    prior = np.exp(space.prior_logprobs(params.beta))
    return space.posterior_expectation(params, Y, S).mean(axis=0) - prior @ S


class CDGradient(NamedTuple):
    grad: np.ndarray
    se: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def beta_gradient_cd(params: ModelParams, spec: FeatureSpec, data, idx: EdgeIndex,
                     nodes: NodeTable, k: int = 5, chains_per_subject: int = 1,
                     burn_in: int = 200, seed: int = 0, kernel: str = "gibbs") -> CDGradient:
    """CD-k estimate of the beta gradient.

    For every subject, ``chains_per_subject`` posterior chains run ``burn_in``
    sweeps; their final states are the positive-phase samples. Each is then
    advanced ``k`` prior sweeps to give the paired negative-phase sample. The
    standard error comes from the spread of the paired differences.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    Y = as_matrix(data)
    ctx = ModelContext(params, spec, idx, nodes)
    n = len(Y)
    states = [
        init_chain(ctx, seed, t * chains_per_subject + c, y=Y[t], stream=STREAM_POSTERIOR)
        for t in range(n) for c in range(chains_per_subject)
    ]
    batch = ChainBatch(ctx, states, kernel)
    if burn_in:
        batch.run(burn_in)
    pos = batch.X.copy()
    neg_states = [
        init_chain(ctx, seed, j, stream=STREAM_CD, x0=pos[j]) for j in range(len(pos))
    ]
    neg_batch = ChainBatch(ctx, neg_states, kernel)
    neg_batch.run(k)
    neg = neg_batch.X.copy()
    diff = suff_stat_s(params, spec, pos, idx, nodes) - suff_stat_s(params, spec, neg, idx, nodes)
    se = diff.std(axis=0, ddof=1) / math.sqrt(len(diff)) if len(diff) > 1 else np.full(len(spec), np.inf)
    return CDGradient(diff.mean(axis=0), se, pos, neg)


# --- emission M-step -------------------------------------------------------


class ThetaUpdate(NamedTuple):
    alpha0: float
    alpha1: float
    sigma0: float
    sigma1: float
    swapped: bool


def theta_mstep(samples, data, weights=None, previous: Optional[ModelParams] = None) -> ThetaUpdate:
    """Closed-form emission update from latent samples.

    ``samples`` is ``(n, S, d)`` bits (or ``(n, d)`` posterior probabilities,
    i.e. one fractional sample per subject); ``weights`` optionally weights
    each sample, ``(n, S)``. Means and standard deviations are weighted over
    all ``(subject, sample, edge)`` triples in each class; sigmas are floored
    and the labels are swapped if needed so that ``alpha1 > alpha0``.
    """
    Y = as_matrix(data)
    Xs = np.asarray(samples, dtype=float)
    if Xs.ndim == 2:
        Xs = Xs[:, None, :]
    n, S, d = Xs.shape
    if Y.shape != (n, d):
        raise ValueError(f"samples {Xs.shape} do not match data {Y.shape}")
    w = np.full((n, S), 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
    r1 = np.einsum("ts,tsi->ti", w, Xs)
    r0 = w.sum(axis=1, keepdims=True) - r1

    def moments(r, prev_mean, prev_sd, label):
        total = r.sum()
        if total <= 0:
            if previous is None:
                raise ValueError(f"class {label} has no sampled members and no previous value")
            warnings.warn(f"class x={label} has zero occupancy; keeping previous parameters",
                          ClassOccupancyWarning, stacklevel=3)
            return prev_mean, prev_sd
        mean = float((r * Y).sum() / total)
        var = float((r * (Y - mean) ** 2).sum() / total)
        return mean, max(math.sqrt(max(var, 0.0)), SIGMA_FLOOR)

    prev = previous if previous is not None else None
    a0, s0 = moments(r0, getattr(prev, "alpha0", None), getattr(prev, "sigma0", None), 0)
    a1, s1 = moments(r1, getattr(prev, "alpha1", None), getattr(prev, "sigma1", None), 1)
    if a1 < a0:
        return ThetaUpdate(a1, a0, s1, s0, True)
    return ThetaUpdate(a0, a1, s0, s1, False)


def initial_params(data, n_features: int) -> ModelParams:
    """Two-component scalar Gaussian mixture on the pooled observations; beta = 0.

    The mixture EM starts from the median split, so the result is deterministic.
    """
    y = np.sort(as_matrix(data).ravel())
    half = len(y) // 2
    lo, hi = (y[:half], y[half:]) if half else (y, y)

    def sd(v):
        return max(float(v.std()), SIGMA_FLOOR)

    a0, a1 = float(lo.mean()), float(hi.mean())
    s0, s1 = sd(lo), sd(hi)
    if a1 > a0 and len(y) >= 4:
        gm = GaussianMixture(2, covariance_type="spherical", means_init=[[a0], [a1]],
                             precisions_init=[s0 ** -2, s1 ** -2], reg_covar=SIGMA_FLOOR ** 2,
                             max_iter=200, random_state=0).fit(y[:, None])
        order = np.argsort(gm.means_.ravel())
        a0, a1 = (float(v) for v in gm.means_.ravel()[order])
        s0, s1 = (max(math.sqrt(v), SIGMA_FLOOR) for v in gm.covariances_[order])
    if a1 <= a0:
        a1 = a0 + SIGMA_FLOOR
    return ModelParams(a0, a1, s0, s1, np.zeros(n_features))


# --- fitting ---------------------------------------------------------------


def fit(data, spec: FeatureSpec, idx: EdgeIndex, nodes: NodeTable,
        cfg: Optional[FitConfig] = None, init: Optional[ModelParams] = None) -> FitResult:
    """Fit emission and field parameters to ``n`` subjects' Fisher-z edge vectors."""
    cfg = cfg or FitConfig()
    Y = as_matrix(data)
    if Y.shape[0] < 1:
        raise ValueError("at least one subject is required")
    if Y.shape[1] != idx.d:
        raise ValueError(f"data has {Y.shape[1]} edges but the edge index has d={idx.d}")
    params = init if init is not None else initial_params(Y, len(spec))
    if len(params.beta) != len(spec):
        raise ValueError("initial beta length does not match the feature spec")
    if cfg.exact:
        return _fit_exact(Y, spec, idx, nodes, cfg, params)
    return _fit_mcem(Y, spec, idx, nodes, cfg, params)


def _record(trajectory, it, params, grad, objective):
    trajectory.append(dict(iter=it, params=params.vector(), grad_norm=float(np.linalg.norm(grad)),
                           objective=float(objective)))


def _finite_or_abort(vec, it, trajectory):
    if not np.all(np.isfinite(vec)):
        raise FitError(f"non-finite parameter update at iteration {it}", trajectory)


def _fit_mcem(Y, spec, idx, nodes, cfg: FitConfig, params: ModelParams) -> FitResult:
    n, d = Y.shape
    ctx = ModelContext(params, spec, idx, nodes)
    post = ChainBatch(ctx, [init_chain(ctx, cfg.seed, t, y=Y[t], stream=STREAM_POSTERIOR)
                            for t in range(n)])
    n_model = cfg.n_model_chains or n
    model = None
    if cfg.persistent_chains:
        model = ChainBatch(ctx, [init_chain(ctx, cfg.seed, c, stream=STREAM_MODEL)
                                 for c in range(n_model)])
    trajectory: list = []
    converged = False
    it = 0
    keep = np.arange(cfg.n_posterior_samples)
    cd_id = 0
    for it in range(1, cfg.max_iters + 1):
        ctx = ModelContext(params, spec, idx, nodes)
        post.set_context(ctx)
        if it == 1 and cfg.posterior_burn_in:
            post.run(cfg.posterior_burn_in)
        samples = post.run(cfg.n_posterior_samples, keep=keep)  # (n, S, d)

        a0, a1, s0, s1, swapped = theta_mstep(samples, Y, previous=params)

        flat = samples.reshape(-1, d)
        G_pos, L_pos = configuration_totals(spec, flat, idx, nodes)
        G_pos, L_pos = G_pos.mean(axis=0), L_pos.mean()
        beta = params.beta.copy()
        for _ in range(cfg.beta_steps):
            step_ctx = ctx.with_params(params.replace(beta=beta))
            if model is not None:
                model.set_context(step_ctx)
                model.run(cfg.cd_steps)
                neg_x = model.X
            else:
                starts = samples[:, -1, :]
                cd = ChainBatch(step_ctx, [init_chain(step_ctx, cfg.seed, cd_id + t, stream=STREAM_CD,
                                                      x0=starts[t]) for t in range(n)])
                cd_id += n
                cd.run(cfg.cd_steps)
                neg_x = cd.X
            S_neg = suff_stat_s(step_ctx.params, spec, neg_x, idx, nodes)
            grad = (G_pos - 2.0 * L_pos * beta) - S_neg.mean(axis=0)
            direction = grad
            if cfg.precondition == "fisher" and len(S_neg) > 1:
                cov = np.atleast_2d(np.cov(S_neg, rowvar=False))
                cov += (FISHER_DAMPING * max(np.trace(cov), 1.0) / len(beta)) * np.eye(len(beta))
                direction = np.linalg.solve(cov, grad)
            delta = cfg.step_size(it) * direction
            norm = float(np.linalg.norm(delta))
            if norm > cfg.max_step:
                delta *= cfg.max_step / norm
            beta = beta + delta
        _finite_or_abort(np.r_[a0, a1, s0, s1, beta], it, trajectory)
        new = ModelParams(a0, a1, s0, s1, beta)
        if swapped:
            log.info("iteration %d: swapped emission labels to keep alpha1 > alpha0", it)

        l0, l1 = emission_terms(new, Y)
        objective = float(np.where(samples.astype(bool), l1[:, None, :], l0[:, None, :]).sum(axis=2).mean())
        change = float(np.max(np.abs(new.vector() - params.vector())))
        params = new
        _record(trajectory, it, params, grad, objective)
        if change < cfg.tol:
            converged = True
            break
    return FitResult(params, spec.names, trajectory, converged, it, cfg)


def _fit_exact(Y, spec, idx, nodes, cfg: FitConfig, params: ModelParams) -> FitResult:
    space = state_space(spec, idx, nodes, cfg.d_max_exact)
    trajectory: list = []
    converged = False
    it = 0
    ll = float(space.loglik(params, Y).mean())
    for it in range(1, cfg.max_iters + 1):
        marg = space.posterior_expectation(params, Y, space.Xf)
        a0, a1, s0, s1, _ = theta_mstep(marg, Y, previous=params)
        theta_step = params.replace(alpha0=a0, alpha1=a1, sigma0=s0, sigma1=s1)
        ll_theta = float(space.loglik(theta_step, Y).mean())

        grad = beta_gradient_exact(theta_step, spec, Y, idx, nodes, cfg.d_max_exact)
        eta = cfg.step_size(it)
        new, ll_new = theta_step, ll_theta
        for _ in range(40):
            cand = theta_step.replace(beta=theta_step.beta + eta * grad)
            ll_cand = float(space.loglik(cand, Y).mean())
            if ll_cand >= ll_theta:
                new, ll_new = cand, ll_cand
                break
            eta *= 0.5
        _finite_or_abort(new.vector(), it, trajectory)
        change = float(np.max(np.abs(new.vector() - params.vector())))
        params, ll = new, ll_new
        _record(trajectory, it, params, grad, ll)
        if change < cfg.tol:
            converged = True
            break
    return FitResult(params, spec.names, trajectory, converged, it, cfg)
