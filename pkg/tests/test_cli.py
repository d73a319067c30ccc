import json

import numpy as np
import pytest

from altruism_irl import cli
from altruism_irl.experiment import ExperimentConfig, read_demos, resolve_groups, split_budget, write_demos
from altruism_irl.game import Trajectory

SMALL = {
    "environment": {"num_states": 3, "num_actions": 2},
    "agents": {"count": 3},
    "groups": "first:2",
    "demos": {"trajectories": 4, "length": 20},
    "policy_sgld": {"iterations": 40, "warmup": 20},
    "reward_sgld": {"iterations": 20, "warmup": 10},
    "drp_sgld": {"iterations": 4, "warmup": 2},
    "z_study": {"policies": 3, "n_samples": 200},
    "imitate": {"targets": [0.0, 1.0]},
}


def test_split_budget():
    assert split_budget(10, 3) == [4, 3, 3]
    assert sum(split_budget(7, 7)) == 7
    with pytest.raises(ValueError):
        split_budget(5, 0)


def test_resolve_groups():
    assert resolve_groups("all", 3, 2) == [(0, 1), (0, 2), (1, 2)]
    assert resolve_groups("first:1", 4, 2) == [(0, 1)]
    assert resolve_groups([[2, 0]], 3, 2) == [(0, 2)]
    with pytest.raises(ValueError):
        resolve_groups("random", 3, 2)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert ExperimentConfig.load(path).to_json() == cfg.to_json()
    assert cfg.prior().reward_sigma == pytest.approx(1 / 6)
    assert cfg.with_overrides(method="drp").prior().reward_sigma == pytest.approx(1 / 40)
    kitchen = ExperimentConfig.from_dict({"environment": {"kind": "kitchen"}})
    assert kitchen.prior().policy_sigma == pytest.approx(1 / 40) and kitchen["demos"]["beta"] == 0.05
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"method": "gibbs"})


def test_demo_round_trip(tmp_path):
    demos = {(0, 1): [Trajectory(np.array([0, 2]), np.array([[1, 0], [0, 1]]))]}
    write_demos(demos, tmp_path / "d.jsonl")
    back = read_demos(tmp_path / "d.jsonl")
    np.testing.assert_array_equal(back[(0, 1)][0].actions, demos[(0, 1)][0].actions)


def test_error_reporting(tmp_path, capsys):
    assert cli.main(["infer", "--out", str(tmp_path / "missing")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError" and err["command"] == "infer"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "gibbs"}))
    assert cli.main(["gen-env", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ValueError"


def test_full_pipeline(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(SMALL))
    out = tmp_path / "run"
    args = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in ("gen-env", "gen-demos", "infer", "evaluate", "rank-check", "z-study", "imitate"):
        assert cli.main([cmd] + args) == 0, cmd
    assert cli.main(["infer", "--method", "drp"] + args) == 0
    files = {p.name for p in out.iterdir()}
    assert {"game.json", "profiles.json", "manifest.json", "demos.jsonl", "chain_porp_psg.jsonl",
            "estimate_porp_psg.json", "errors_porp_psg.json", "rank.json", "z_study.csv",
            "imitation.csv", "chain_drp.jsonl"} <= files
    errors = json.loads((out / "errors_porp_psg.json").read_text())
    assert "baseline_definition" in errors and "mean" in errors["lambda_mse_rescaled"]
    lines = (out / "chain_porp_psg.jsonl").read_text().splitlines()
    assert len(lines) == 10
