import math

import numpy as np
import pytest

import oracle
from hmrfnet.features import FeatureSpec
from hmrfnet.graph import NodeTable, build_edge_index
from hmrfnet.model import (
    ExactLimitError,
    ModelParams,
    delta_energy,
    edge_potential,
    emission_loglik,
    exact_loglik,
    exact_posterior_marginals,
    exact_prior_marginals,
    field_energy,
    joint_logprob_unnorm,
    partition_function,
    prior_logprob_unnorm,
)

# reference values from tests/oracle.py on the ``frozen`` fixture
FROZEN_LOGZ = 2.0222194997878753
FROZEN_LOGLIK = -1.4294893341455515
FROZEN_PRIOR = [0.5492867401967281, 0.45073273057982477, 0.4916669343992356,
                0.42236044471353956, 0.4868039063102271, 0.48304350287189435]
FROZEN_POST = [0.9571806327566025, 0.3827656383055048, 0.7736807826585311,
               0.96162897392719, 0.48153147382842953, 0.5738092636906105]


def triangle(coords=((0, 0, 0), (1, 0, 0), (0, 1, 0))):
    nodes = NodeTable.from_records([(c, xyz, "") for c, xyz in zip("abc", coords)])
    return nodes, build_edge_index(nodes)


def test_edge_potential_gated():
    nodes, idx = triangle()
    spec = FeatureSpec.from_names(["bias"])
    assert edge_potential(ModelParams(0, 1, 1, 1, [2.0]), spec, np.zeros(3), idx, nodes, 0) == 0.0


def test_edge_potential_bias_only():
    nodes, idx = triangle(((0, 0, 0), (0.5, 0, 0), (5, 5, 5)))
    spec = FeatureSpec.from_names(["bias"])
    x = np.array([1, 0, 0])
    assert edge_potential(ModelParams(0, 1, 1, 1, [2.0]), spec, x, idx, nodes, 0) == 0.0


def test_edge_potential_triangle():
    nodes, idx = triangle(((0, 0, 0), (1, 0, 0), (0.5, 0.8, 0)))
    spec = FeatureSpec.from_names(["bias", "common_neighbors"])
    assert edge_potential(ModelParams(0, 1, 1, 1, [1.0, 1.0]), spec, np.ones(3), idx, nodes, 0) == 0.0


def test_field_energy_examples():
    nodes, idx = triangle(((0, 0, 0), (0.7, 0, 0), (0, 3, 0)))
    spec = FeatureSpec.from_names(["bias"])
    p = ModelParams(0, 1, 1, 1, [-0.8])
    assert field_energy(p, spec, np.zeros(3), idx, nodes) == 0.0
    assert field_energy(p, spec, np.array([1, 0, 0]), idx, nodes) == pytest.approx(0.8 + 0.64 * 0.7)
    assert prior_logprob_unnorm(p, spec, np.array([1, 0, 0]), idx, nodes) == pytest.approx(-(0.8 + 0.64 * 0.7))


def test_energy_matches_oracle(frozen):
    rng = np.random.default_rng(0)
    f = frozen
    for _ in range(10):
        x = (rng.random(6) < 0.5).astype(np.uint8)
        ref = oracle.energy(x.tolist(), f["coords"], f["systems"], list(f["spec"].names), list(f["params"].beta))
        assert field_energy(f["params"], f["spec"], x, f["idx"], f["nodes"]) == pytest.approx(ref, abs=1e-12)


def test_delta_energy_properties(frozen):
    f = frozen
    args = (f["params"], f["spec"])
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = (rng.random(6) < 0.5).astype(np.uint8)
        i = int(rng.integers(6))
        y = x.copy()
        y[i] ^= 1
        d = delta_energy(*args, x, f["idx"], f["nodes"], i)
        full = field_energy(*args, y, f["idx"], f["nodes"]) - field_energy(*args, x, f["idx"], f["nodes"])
        assert d == pytest.approx(full, abs=1e-12)
        assert delta_energy(*args, y, f["idx"], f["nodes"], i) == pytest.approx(-d, abs=1e-12)
    zero = f["params"].replace(beta=np.zeros(3))
    assert delta_energy(zero, f["spec"], np.ones(6), f["idx"], f["nodes"], 2) == 0.0


def test_partition_function_uniform():
    nodes, idx = triangle()
    spec = FeatureSpec.from_names(["bias", "common_neighbors"])
    assert partition_function(ModelParams(0, 1, 1, 1, [0.0, 0.0]), spec, idx, nodes) == pytest.approx(3 * math.log(2))


def test_partition_function_factorizes_bias_only():
    nodes, idx = triangle(((0, 0, 0), (0.4, 0, 0), (0, 1.1, 0)))
    b = 0.9
    e = np.exp(b - b * b * idx.dist)
    ref = np.sum(np.log1p(e))
    got = partition_function(ModelParams(0, 1, 1, 1, [b]), FeatureSpec.from_names(["bias"]), idx, nodes)
    assert got == pytest.approx(ref, abs=1e-12)


def test_frozen_exact_values(frozen):
    f = frozen
    args = (f["params"], f["spec"])
    assert partition_function(*args, f["idx"], f["nodes"]) == pytest.approx(FROZEN_LOGZ, abs=1e-12)
    assert exact_loglik(*args, f["y"], f["idx"], f["nodes"]) == pytest.approx(FROZEN_LOGLIK, abs=1e-12)
    assert np.allclose(exact_prior_marginals(*args, f["idx"], f["nodes"]), FROZEN_PRIOR, atol=1e-12)
    assert np.allclose(exact_posterior_marginals(*args, f["y"], f["idx"], f["nodes"]), FROZEN_POST, atol=1e-12)


def test_enumeration_matches_oracle_d10():
    rng = np.random.default_rng(5)
    coords = [tuple(rng.normal(size=3)) for _ in range(5)]
    systems = ["a", "b", "a", "b", "b"]
    names = ["bias", "common_neighbors", "same_system"]
    beta = [-0.3, 0.4, 0.5]
    theta = (0.0, 0.6, 0.2, 0.3)
    y = rng.normal(0.3, 0.3, size=10)
    nodes = NodeTable.from_records([(f"n{i}", coords[i], systems[i]) for i in range(5)])
    idx = build_edge_index(nodes)
    spec = FeatureSpec.from_names(names)
    params = ModelParams(*theta, beta)
    ref = oracle.summary(coords, systems, names, beta, theta, list(y))
    assert partition_function(params, spec, idx, nodes) == pytest.approx(ref["logZ"], abs=1e-10)
    assert exact_loglik(params, spec, y, idx, nodes) == pytest.approx(ref["loglik"], abs=1e-10)
    assert np.allclose(exact_posterior_marginals(params, spec, y, idx, nodes), ref["post"], atol=1e-10)


def test_emission_examples():
    p = ModelParams(0.2, 0.7, 0.3, 0.4, [0.0])
    assert emission_loglik(p, [0], [0.2]) == pytest.approx(-math.log(math.sqrt(2 * math.pi) * 0.3))
    sym = ModelParams(0.2, 0.2, 0.3, 0.3, [0.0])
    y = np.array([0.1, 0.5, -0.2])
    assert emission_loglik(sym, [0, 1, 0], y) == pytest.approx(emission_loglik(sym, [1, 1, 1], y))
    x = [1, 0, 1]
    ref = oracle.emission(x, list(y), (0.2, 0.7, 0.3, 0.4))
    assert emission_loglik(p, x, y) == pytest.approx(ref, abs=1e-12)


def test_joint_is_sum(frozen):
    f = frozen
    x = np.array([1, 0, 1, 1, 0, 0])
    args = (f["params"], f["spec"])
    joint = joint_logprob_unnorm(*args, x, f["y"], f["idx"], f["nodes"])
    parts = emission_loglik(f["params"], x, f["y"]) + prior_logprob_unnorm(*args, x, f["idx"], f["nodes"])
    assert joint == pytest.approx(parts, abs=1e-12)


def test_exact_refuses_large_d():
    nodes = NodeTable.from_records([(f"n{i}", (i, 0, 0), "") for i in range(8)])
    idx = build_edge_index(nodes)
    p = ModelParams(0, 1, 1, 1, [0.0])
    with pytest.raises(ExactLimitError, match="sampling"):
        partition_function(p, FeatureSpec.from_names(["bias"]), idx, nodes)
    with pytest.raises(ExactLimitError):
        partition_function(p, FeatureSpec.from_names(["bias"]), build_edge_index(nodes_four()), nodes_four(),
                           d_max_exact=5)


def nodes_four():
    return NodeTable.from_records([(f"n{i}", (i, 1, 0), "") for i in range(4)])


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(0, 1, 1e-5, 1, [0.0])
    with pytest.raises(ValueError):
        ModelParams(0, np.inf, 1, 1, [0.0])
    p = ModelParams(0.1, 0.6, 0.2, 0.3, [1.0, 2.0])
    assert ModelParams.from_vector(p.vector()) == p
    assert p.is_canonical and not p.swapped().is_canonical


def test_label_swap_invariance_for_symmetric_prior(frozen):
    # with beta = 0 the prior is invariant under x -> 1 - x, so relabelling is exact
    f = frozen
    p = f["params"].replace(beta=np.zeros(3))
    a = exact_loglik(p, f["spec"], f["y"], f["idx"], f["nodes"])
    b = exact_loglik(p.swapped(), f["spec"], f["y"], f["idx"], f["nodes"])
    assert a == pytest.approx(b, abs=1e-12)
