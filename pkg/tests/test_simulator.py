import numpy as np
import pytest

from conftest import random_instance
from hmrfnet.model import ModelParams, exact_prior_marginals
from hmrfnet.simulator import (
    generate_dataset,
    sample_emissions,
    sample_prior,
    score_recovery,
    stream_rng,
    threshold_baseline,
)


def test_exact_prior_draws_match_marginals():
    rng = np.random.default_rng(0)
    nodes, idx, spec, params = random_instance(rng, 4)
    X, method, _ = sample_prior(params, spec, idx, nodes, 20000, seed=0)
    assert method == "exact"
    exact = exact_prior_marginals(params, spec, idx, nodes)
    se = np.sqrt(exact * (1 - exact) / len(X))
    assert np.all(np.abs(X.mean(axis=0) - exact) <= 4 * se)


def test_gibbs_prior_path_when_enumeration_disabled():
    rng = np.random.default_rng(1)
    nodes, idx, spec, params = random_instance(rng, 4)
    X, method, sweeps = sample_prior(params, spec, idx, nodes, 4000, seed=1, d_max_exact=0,
                                     gibbs_sweeps=50)
    assert method == "gibbs" and sweeps == 50
    exact = exact_prior_marginals(params, spec, idx, nodes)
    se = np.sqrt(exact * (1 - exact) / len(X))
    assert np.all(np.abs(X.mean(axis=0) - exact) <= 4 * se)


def test_generate_dataset_deterministic_and_labelled():
    rng = np.random.default_rng(2)
    nodes, idx, spec, params = random_instance(rng, 4)
    a, ta = generate_dataset(params, spec, nodes, 12, seed=7)
    b, tb = generate_dataset(params, spec, nodes, 12, seed=7)
    assert all(np.array_equal(s.y, t.y) for s, t in zip(a, b))
    assert np.array_equal(ta.X, tb.X)
    assert [s.subject_id for s in a[:2]] == ["s000", "s001"]
    c, _ = generate_dataset(params, spec, nodes, 12, seed=8)
    assert not all(np.array_equal(s.y, t.y) for s, t in zip(a, c))
    with pytest.raises(ValueError):
        generate_dataset(params, spec, nodes, 0, seed=0)


def test_emission_moments():
    p = ModelParams(-0.2, 0.7, 0.1, 0.3, [0.0])
    X = np.tile([0, 1], (20000, 1))
    Y = sample_emissions(p, X, stream_rng(0, 99))
    assert Y[:, 0].mean() == pytest.approx(-0.2, abs=0.005)
    assert Y[:, 1].std() == pytest.approx(0.3, abs=0.01)


def test_threshold_baseline_counts_and_ties():
    y = np.array([0.5, 0.9, 0.5, 0.1, 0.5])
    assert threshold_baseline(y, 0.2).bits.tolist() == [0, 1, 0, 0, 0]
    # ceil(0.5 * 5) = 3; the two tied 0.5 with the lowest ids win
    assert threshold_baseline(y, 0.5).bits.tolist() == [1, 1, 1, 0, 0]
    assert threshold_baseline(np.arange(10.0), 0.3).bits.sum() == 3
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            threshold_baseline(y, p)


def test_score_recovery_hand_counts():
    truth = np.array([[1, 1, 0, 0], [1, 0, 0, 0]])
    est = np.array([[0.9, 0.2, 0.7, 0.1], [0.6, 0.0, 0.0, 0.0]])
    s = score_recovery(est, truth)
    # pooled: tp 2, fp 1, fn 1
    assert s.precision == pytest.approx(2 / 3) and s.recall == pytest.approx(2 / 3)
    assert s.f1 == pytest.approx(2 / 3)
    assert s.per_subject[1]["f1"] == 1.0
    assert score_recovery(truth, truth).f1 == 1.0
    with pytest.raises(ValueError):
        score_recovery(est[:, :3], truth)
