import csv
import json
import shutil

import numpy as np
import pytest

from sboed import pipeline
from sboed.cli import main
from sboed.config import PROFILES, config_hash, load_config, resolve, substream
from sboed.errors import ContractError
from sboed.forward import Grid
from sboed.lano import LanoConfig, Surrogate, TrainingSet, linear_layout
from sboed.nn import init_params
from sboed.prior import PriorOperator
from sboed.reduction import ReducedBases

TINY = {
    "grid": {"nx": 13, "ny": 13},
    "reduction": {"n_samples": 30, "n_train": 20, "n_valid": 4, "n_test": 6, "r_m": 6, "r_u": 6, "as_samples": 4},
    "lano": {"d_z": 12, "d_a": 6, "hidden_decoder": 8, "ffn_hidden": 16, "epochs": 4, "batch": 5},
    "rl": {"L": 2, "M": 6, "critic_steps": 2},
    "eval": {"n_test_params": 2, "n_random": 5, "compare_params": 2, "compare_designs": 2, "timing_repeats": 2},
}

METRIC_STAGES = ("data", "reduce", "surrogate", "validate", "policy", "eval", "compare")


def _write(tmp_path, body, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = _write(root, TINY)
    assert main(["all", "--config", str(cfg_path), "--out", str(root / "a")]) == 0
    return root, cfg_path


# -- configuration ----------------------------------------------------------------------------


def test_profiles_share_sections():
    for prof in PROFILES.values():
        assert set(prof) == {"grid", "pde", "prior", "reduction", "lano", "rl", "eval", "seeds", "paths"}
    assert PROFILES["paper"]["lano"]["d_z"] == 200 and PROFILES["desk"]["lano"]["d_z"] == 48


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ContractError):
        resolve("desk", {"lano": {"width": 3}})
    with pytest.raises(ContractError):
        resolve("desk", {"optimiser": {}})
    bad = _write(tmp_path, {"rl": {"lr_actr": 1.0}})
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_config_hash_tracks_content_not_location():
    a = load_config(profile="desk", out="/tmp/a")
    b = load_config(profile="desk", out="/tmp/b")
    assert config_hash(a) == config_hash(b)
    assert config_hash(load_config(profile="desk", seed=5)) != config_hash(a)


def test_stage_sets_must_partition_observations():
    with pytest.raises(ContractError):
        resolve("desk", {"rl": {"stage_sets": [[1, 2], [4, 5, 6]]}})
    with pytest.raises(ContractError):
        resolve("desk", {"rl": {"obs_times": [0.25, 0.3, 0.4, 0.5, 0.6, 0.7]}})


def test_named_substreams_differ():
    a = np.random.default_rng(substream(1, "data")).random(3)
    b = np.random.default_rng(substream(1, "rl")).random(3)
    assert not np.allclose(a, b)
    assert np.array_equal(a, np.random.default_rng(substream(1, "data")).random(3))


# -- commands -----------------------------------------------------------------------------------


def test_empty_dataset_is_a_valid_run(tmp_path):
    empty = {**TINY, "reduction": {**TINY["reduction"], "n_samples": 0, "n_train": 0, "n_valid": 0, "n_test": 0}}
    cfg = _write(tmp_path, empty)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "data" / "manifest.json").read_text())
    assert man["count"] == 0


def test_fixed_seed_gives_identical_data_manifests(tmp_path, tiny_run):
    root, cfg = tiny_run
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = json.loads((root / "a" / "data" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "data" / "manifest.json").read_text())
    assert a["files"] == b["files"] and a["count"] == 30


def test_missing_upstream_is_refused(tmp_path, capsys):
    assert main(["reduce", "--profile", "desk", "--out", str(tmp_path / "none")]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_stale_and_corrupt_artifacts_are_refused(tmp_path, tiny_run):
    root, cfg = tiny_run
    work = tmp_path / "w"
    shutil.copytree(root / "a", work)
    # configuration drift upstream of the surrogate
    drift = _write(tmp_path, {**TINY, "reduction": {**TINY["reduction"], "r_u": 5}}, "drift.json")
    assert main(["validate-surrogate", "--config", str(drift), "--out", str(work)]) == 2
    # data regenerated with another seed after the bases were built
    assert main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(work)]) == 0
    assert main(["validate-surrogate", "--config", str(cfg), "--seed", "7", "--out", str(work)]) == 2
    # corrupt a stored array
    shutil.rmtree(work)
    shutil.copytree(root / "a", work)
    raw = np.fromfile(work / "reduce" / "beta_m.bin")
    raw[0] += 1
    raw.tofile(work / "reduce" / "beta_m.bin")
    assert main(["train-surrogate", "--config", str(cfg), "--out", str(work)]) == 2


def test_pipeline_outputs(tiny_run):
    root, _ = tiny_run
    out = root / "a"
    for stage in METRIC_STAGES:
        doc = json.loads((out / stage / "metrics.json").read_text())
        assert {"config_hash", "build_id", "seed"} <= set(doc)
    with open(out / "policy" / "seed0" / "curves.csv") as fh:
        head = next(csv.reader(fh))
    assert {"step", "objective", "critic_loss", "lr"} <= set(head)
    with open(out / "eval" / "seed1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(0.0 <= float(r["win_rate"]) <= 1.0 for r in rows)
    comp = json.loads((out / "compare" / "metrics.json").read_text())
    assert comp["n_cases"] == 4
    timing = json.loads((out / "compare" / "timing.json").read_text())
    assert timing["speedup"] > 0


def test_eval_without_random_baselines(tmp_path, tiny_run):
    root, _ = tiny_run
    shutil.copytree(root / "a", tmp_path / "w")
    cfg = load_config(_write(tmp_path, TINY), out=tmp_path / "w")
    # the eval section is part of the eval stage hash only, so upstream stays valid
    cfg["eval"]["n_random"] = 0
    pipeline.evaluate(cfg, tmp_path / "w")
    with open(tmp_path / "w" / "eval" / "seed0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["win_rate"] == "" for r in rows)


def test_rerun_reproduces_metrics_bit_identically(tmp_path, tiny_run):
    root, cfg = tiny_run
    assert main(["all", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for stage in METRIC_STAGES:
        a = (root / "a" / stage / "metrics.json").read_bytes()
        b = (tmp_path / "b" / stage / "metrics.json").read_bytes()
        assert a == b, stage


# -- surrogate validation oracle ---------------------------------------------------------------------


def test_validation_on_realizable_linear_bundle():
    cfg = LanoConfig(r_m=3, r_u=4, d_z=5, d_a=2, K=4, kind="linear")
    grid = Grid(5, 5)
    prior = PriorOperator(grid)
    rng = np.random.default_rng(0)
    psi_u = np.linalg.qr(rng.standard_normal((grid.n, 4)))[0]
    bases = ReducedBases(np.zeros((grid.n, 3)), psi_u, np.full(grid.n, 2.0), np.ones(3), np.ones(4))
    sur = Surrogate(init_params(linear_layout(cfg), 1), cfg, bases, prior.mean)
    BM, B0 = rng.standard_normal((6, 3)), rng.standard_normal((6, 4))
    bu, J = sur.batch(BM, B0)
    states = np.concatenate([np.zeros((6, 1, grid.n)), bases.u_bar + bu @ psi_u.T], axis=1)
    err = pipeline.surrogate_errors(sur, bases, states, TrainingSet(BM, B0, bu, J))
    assert err["state_error"].max() <= 1e-6
    assert err["jacobian_error"].max() <= 1e-6
    assert err["projection_floor"].max() <= 1e-10
