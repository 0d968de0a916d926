import json

import numpy as np
import pytest

from conftest import ring_nodes
from hmrfnet.cli import main
from hmrfnet.io import read_csv_rows, read_manifest

CONFIG = """seed = 7
nodes = "nodes.csv"
features = ["bias", "common_neighbors"]

[simulate]
n_subjects = 30
beta = [-1.0, 0.5]

[fit]
max_iters = 60

[models]
cn = ["bias", "common_neighbors"]
bias = ["bias"]
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ring_nodes().write_csv(root / "nodes.csv")
    (root / "run.toml").write_text(CONFIG)
    return root


@pytest.fixture(scope="module")
def pipeline(workdir):
    cfg = str(workdir / "run.toml")
    sim = workdir / "sim"
    assert main(["simulate", "--config", cfg, "--out", str(sim)]) == 0
    assert main(["fit", "--config", cfg, "--manifest", str(sim / "manifest.txt"),
                 "--out", str(workdir / "fit")]) == 0
    assert main(["infer", "--config", cfg, "--manifest", str(sim / "manifest.txt"),
                 "--params", str(workdir / "fit" / "params.json"), "--truth", str(sim),
                 "--out", str(workdir / "infer")]) == 0
    return workdir


def test_simulate_outputs(pipeline):
    sim = pipeline / "sim"
    manifest = read_manifest(sim / "manifest.txt")
    assert len(manifest) == 30 and manifest[0] == sim / "subjects" / "s000.csv"
    truth = json.loads((sim / "truth_params.json").read_text())
    assert truth["beta"] == [-1.0, 0.5] and truth["meta"]["seed"] == 7
    assert (sim / "truth_edges_subject_s029.csv").exists()


def test_every_artifact_names_its_run(pipeline):
    files = [p for d in ("sim", "fit", "infer") for p in (pipeline / d).rglob("*") if p.is_file()]
    assert len(files) > 60
    for p in files:
        text = p.read_text()
        if p.suffix == ".json":
            meta = json.loads(text)["meta"]
        else:
            first = text.splitlines()[0]
            assert first.startswith("# "), p
            meta = dict(kv.split("=") for kv in first[2:].split())
        assert str(meta["seed"]) == "7" and len(str(meta["config_hash"])) == 16, p


def test_fit_writes_params_and_trajectory(pipeline):
    params = json.loads((pipeline / "fit" / "params.json").read_text())
    assert params["feature_names"] == ["bias", "common_neighbors"]
    rows = read_csv_rows(pipeline / "fit" / "trajectory.csv")
    assert rows and set(rows[0]) >= {"iter", "alpha0", "beta_1", "grad_norm"}


def test_infer_marginals_and_recovery(pipeline):
    rows = read_csv_rows(pipeline / "infer" / "posterior_marginals.csv")
    assert len(rows) == 30 * 15
    probs = np.array([float(r["prob_present"]) for r in rows])
    assert np.all((probs >= 0) & (probs <= 1))
    report = json.loads((pipeline / "infer" / "recovery_report.json").read_text())
    assert "hmrf_posterior" in report["methods"]
    assert any(k.startswith("threshold_p") for k in report["methods"])


def test_generate_features_compare_validate(pipeline, capsys):
    cfg = str(pipeline / "run.toml")
    sim = pipeline / "sim"
    assert main(["generate", "--config", cfg, "--params", str(pipeline / "fit" / "params.json"),
                 "--n", "3", "--emissions", "--out", str(pipeline / "gen")]) == 0
    assert (pipeline / "gen" / "network_002.csv").exists()
    assert main(["features", "--config", cfg, "--edges", str(sim / "truth_edges_subject_s000.csv"),
                 "--out", str(pipeline / "feat")]) == 0
    feats = read_csv_rows(pipeline / "feat" / "features.csv")
    assert len(feats) == 15 and "common_neighbors" in feats[0]
    assert main(["compare", "--config", cfg, "--manifest", str(sim / "manifest.txt"),
                 "--out", str(pipeline / "cmp")]) == 0
    report = json.loads((pipeline / "cmp" / "bic_report.json").read_text())
    assert sorted(report["ranking"]) == ["bias", "cn"]
    assert main(["validate", "--out", str(pipeline / "val")]) == 0
    assert "PASS" in capsys.readouterr().out


def test_generated_density_matches_fitted_prior(pipeline):
    out = pipeline / "gen_many"
    assert main(["generate", "--config", str(pipeline / "run.toml"), "--params",
                 str(pipeline / "fit" / "params.json"), "--n", "2000", "--out", str(out)]) == 0
    summary = json.loads((out / "generate_summary.json").read_text())
    freq = np.array(summary["edge_frequency"])
    exact = np.array(summary["exact_prior_marginals"])
    se = np.sqrt(exact * (1 - exact) / 2000)
    assert np.all(np.abs(freq - exact) <= 4 * se + 1e-12)
    counts = [len(read_csv_rows(out / f"network_{k:04d}.csv")) for k in range(2000)]
    assert np.mean(counts) == pytest.approx(freq.sum(), abs=1e-9)


def test_missing_seed_is_a_config_error(workdir, capsys):
    (workdir / "noseed.toml").write_text('nodes = "nodes.csv"\n')
    code = main(["simulate", "--config", str(workdir / "noseed.toml"), "--out", str(workdir / "x")])
    assert code == 2
    assert "seed: required" in capsys.readouterr().err


def test_failure_leaves_marker(workdir):
    bad = workdir / "badsubj"
    bad.mkdir()
    (bad / "m.csv").write_text("1,0.2\n0.2,1\n")
    (bad / "manifest.txt").write_text("m.csv\n")
    code = main(["fit", "--config", str(workdir / "run.toml"), "--manifest", str(bad / "manifest.txt"),
                 "--out", str(workdir / "failed")])
    assert code == 1
    assert "expected 6 rows" in (workdir / "failed" / ".failed").read_text()
