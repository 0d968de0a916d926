import itertools
import warnings

import numpy as np
import pytest

import oracle
from conftest import random_instance, ring_nodes
from hmrfnet.features import FeatureSpec
from hmrfnet.graph import build_edge_index
from hmrfnet.learner import (
    ClassOccupancyWarning,
    FitConfig,
    beta_gradient_cd,
    beta_gradient_exact,
    fit,
    initial_params,
    theta_mstep,
)
from hmrfnet.model import ModelParams, exact_loglik, exact_posterior_marginals
from hmrfnet.simulator import generate_dataset

FROZEN_GRAD = [2.6492702594662507, -1.3603816081855633, -0.5532661616495336]


def test_exact_gradient_frozen(frozen):
    f = frozen
    g = beta_gradient_exact(f["params"], f["spec"], f["y"][None, :], f["idx"], f["nodes"])
    assert np.allclose(g, FROZEN_GRAD, atol=1e-12)


def test_exact_gradient_matches_oracle_formula():
    rng = np.random.default_rng(3)
    nodes, idx, spec, params = random_instance(rng, 4)
    y = rng.normal(0.3, 0.3, size=idx.d)
    ref = oracle.summary([tuple(c) for c in nodes.coords], list(nodes.systems), list(spec.names),
                         list(params.beta), tuple(params.theta), list(y))
    assert np.allclose(beta_gradient_exact(params, spec, y[None], idx, nodes), ref["grad"], atol=1e-10)


def test_exact_gradient_finite_differences():
    rng = np.random.default_rng(0)
    nodes, idx, spec, params = random_instance(rng, 4)
    data, _ = generate_dataset(params, spec, nodes, 5, seed=0)
    Y = np.array([s.y for s in data])
    g = beta_gradient_exact(params, spec, Y, idx, nodes)
    h = 1e-5
    for m in range(len(g)):
        e = np.zeros(len(g))
        e[m] = h
        fd = (exact_loglik(params.replace(beta=params.beta + e), spec, Y, idx, nodes).mean()
              - exact_loglik(params.replace(beta=params.beta - e), spec, Y, idx, nodes).mean()) / (2 * h)
        assert abs(g[m] - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_gradient_zero_under_symmetric_emission():
    rng = np.random.default_rng(1)
    nodes, idx, spec, params = random_instance(rng, 4)
    sym = params.replace(alpha1=params.alpha0, sigma1=params.sigma0)
    Y = rng.normal(size=(3, idx.d))
    assert np.allclose(beta_gradient_exact(sym, spec, Y, idx, nodes), 0.0, atol=1e-12)


def test_gradient_invariant_to_duplication():
    rng = np.random.default_rng(2)
    nodes, idx, spec, params = random_instance(rng, 4)
    Y = rng.normal(0.3, 0.3, size=(3, idx.d))
    a = beta_gradient_exact(params, spec, Y, idx, nodes)
    b = beta_gradient_exact(params, spec, np.vstack([Y, Y]), idx, nodes)
    assert np.allclose(a, b, atol=1e-12)


def test_cd_gradient_deterministic():
    rng = np.random.default_rng(3)
    nodes, idx, spec, params = random_instance(rng, 4)
    Y = rng.normal(0.3, 0.3, size=(4, idx.d))
    a = beta_gradient_cd(params, spec, Y, idx, nodes, k=3, chains_per_subject=2, seed=9)
    b = beta_gradient_cd(params, spec, Y, idx, nodes, k=3, chains_per_subject=2, seed=9)
    assert np.array_equal(a.grad, b.grad) and np.array_equal(a.se, b.se)
    with pytest.raises(ValueError):
        beta_gradient_cd(params, spec, Y, idx, nodes, k=0)


def test_cd_gradient_zero_at_symmetry():
    rng = np.random.default_rng(4)
    nodes, idx, spec, _ = random_instance(rng, 4)
    p = ModelParams(0.3, 0.3, 0.2, 0.2, np.zeros(len(spec)))
    Y = rng.normal(0.3, 0.2, size=(16, idx.d))
    cd = beta_gradient_cd(p, spec, Y, idx, nodes, k=10, chains_per_subject=4, seed=4)
    assert np.all(np.abs(cd.grad) <= 3 * cd.se + 1e-12)


def test_mstep_constant_class():
    Y = np.full((2, 3), 0.4)
    with pytest.warns(ClassOccupancyWarning):
        th = theta_mstep(np.ones((2, 1, 3)), Y, previous=ModelParams(0.0, 1.0, 0.3, 0.3, [0.0]))
    assert th.alpha1 == pytest.approx(0.4)
    assert th.sigma1 == 1e-4
    assert th.alpha0 == 0.0 and th.sigma0 == 0.3


def test_mstep_empty_class_warns():
    with pytest.warns(ClassOccupancyWarning):
        theta_mstep(np.ones((1, 2, 3)), np.zeros((1, 3)), previous=ModelParams(-1, 1, 0.5, 0.5, [0.0]))


def test_mstep_matches_enumeration_weighted_em():
    rng = np.random.default_rng(5)
    nodes, idx, spec, params = random_instance(rng, 4)
    data, _ = generate_dataset(params, spec, nodes, 6, seed=5)
    Y = np.array([s.y for s in data])
    configs = np.array(list(itertools.product((0, 1), repeat=idx.d)), dtype=np.uint8)
    logw = np.array([[oracle.emission(x, list(y), tuple(params.theta))
                      - oracle.energy(x, [tuple(c) for c in nodes.coords], list(nodes.systems),
                                      list(spec.names), list(params.beta))
                      for x in configs] for y in Y])
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    samples = np.broadcast_to(configs, (len(Y),) + configs.shape)
    got = theta_mstep(samples, Y, weights=w)
    # independent weighted update from the posterior marginals
    m = w @ configs
    a1 = np.sum(m * Y) / m.sum()
    a0 = np.sum((1 - m) * Y) / (1 - m).sum()
    s1 = np.sqrt(np.sum(m * (Y - a1) ** 2) / m.sum())
    s0 = np.sqrt(np.sum((1 - m) * (Y - a0) ** 2) / (1 - m).sum())
    assert np.allclose([got.alpha0, got.alpha1, got.sigma0, got.sigma1], [a0, a1, s0, s1], atol=1e-12)
    marg = theta_mstep(exact_posterior_marginals(params, spec, Y, idx, nodes), Y)
    assert np.allclose(marg[:4], got[:4], atol=1e-10)


def test_mstep_swaps_labels():
    Y = np.array([[0.9, 0.0, 0.9, 0.0]])
    th = theta_mstep(np.array([[[0, 1, 0, 1]]]), Y)
    assert th.swapped and th.alpha1 > th.alpha0


def test_initial_params_two_clusters():
    rng = np.random.default_rng(6)
    Y = np.where(rng.random((50, 10)) < 0.5, -0.4, 0.8) + 0.01 * rng.normal(size=(50, 10))
    p = initial_params(Y, 2)
    assert p.alpha0 == pytest.approx(-0.4, abs=0.01)
    assert p.alpha1 == pytest.approx(0.8, abs=0.01)
    assert np.array_equal(p.beta, np.zeros(2))


def test_fit_recovers_on_ring_and_is_deterministic(tmp_path):
    nodes = ring_nodes()
    idx = build_edge_index(nodes)
    spec = FeatureSpec.from_names(["bias", "common_neighbors"])
    truth = ModelParams(0.1, 0.6, 0.15, 0.15, [-1.0, 0.5])
    data, _ = generate_dataset(truth, spec, nodes, 100, seed=1)
    a = fit(data, spec, idx, nodes, FitConfig(seed=3))
    b = fit(data, spec, idx, nodes, FitConfig(seed=3))
    assert a.params == b.params and a.n_iter == b.n_iter
    assert np.allclose(a.params.theta, truth.theta, atol=0.05)
    assert np.allclose(a.params.beta, truth.beta, atol=0.3)
    a.write_trajectory(tmp_path / "t.csv", "seed=3")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[1] == "iter,alpha0,alpha1,sigma0,sigma1,beta_0,beta_1,grad_norm,objective"
    assert len(lines) == 2 + a.n_iter


def test_fit_single_subject_with_wild_start():
    rng = np.random.default_rng(7)
    nodes, idx, spec, params = random_instance(rng, 4)
    data, _ = generate_dataset(params, spec, nodes, 1, seed=7)
    init = ModelParams(-5.0, 5.0, 50.0, 80.0, np.zeros(len(spec)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit(data, spec, idx, nodes, FitConfig(max_iters=40, seed=7), init=init)
    assert np.all(np.isfinite(res.params.vector()))


def test_exact_fit_never_decreases_likelihood():
    rng = np.random.default_rng(8)
    nodes, idx, spec, params = random_instance(rng, 4, ("bias", "common_neighbors"))
    data, _ = generate_dataset(params, spec, nodes, 40, seed=8)
    res = fit(data, spec, idx, nodes, FitConfig(exact=True, max_iters=30, tol=1e-12))
    ll = [r["objective"] for r in res.trajectory]
    assert np.all(np.diff(ll) >= -1e-9)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(cd_steps=0)
    with pytest.raises(ValueError):
        FitConfig(lr_decay="cosine")
    with pytest.raises(ValueError):
        FitConfig(learn_rate=-1)
