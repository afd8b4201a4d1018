import json

import numpy as np
import pytest

from advrm.errors import ConfigError, MissingArtifactError, StateError
from advrm.harness import cli
from advrm.harness.config import ExperimentConfig, apply_override, from_dict, load_config
from advrm.harness.manifest import RunManifest
from advrm.harness.pipeline import Pipeline, fmt
from advrm.harness.report import write_report

TINY = {"world": {"n_train_prompts": 16, "n_eval_prompts": 8, "sft_epochs": 3},
        "rm": {"n_pairs": 256},
        "rl": {"max_steps": 6},
        "rounds": 1,
        "attack": {"rl": {"max_steps": 8, "kl_beta": 0.02, "lr": 0.01, "batch_size": 16}, "lam_grid": [1.0],
                   "lam": 1.0},
        "eval": {"eval_every": 2, "rrm_multipliers": [2], "ensemble_lambdas": [0.5], "n_variants": 5}}


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["reproduce", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    return out


def test_config_defaults_validate_and_roundtrip():
    cfg = ExperimentConfig().validate()
    assert from_dict(json.loads(cfg.dumps())) == cfg
    assert cfg.rm.ensemble_size == 2 and cfg.attack.z_threshold == 1.96


def test_config_rejects_unknown_keys_and_bad_types():
    with pytest.raises(ConfigError, match="world.nope"):
        from_dict({"world": {"nope": 1}})
    with pytest.raises(ConfigError):
        from_dict({"seed": "x"})
    with pytest.raises(ConfigError):
        from_dict({"rounds": 1.5})
    with pytest.raises(ConfigError):
        from_dict({"rm": {"ensemble_size": 1}})
    with pytest.raises(ConfigError):
        from_dict({"attack": {"C": 5}})


def test_overrides(tmp_path):
    data = apply_override({}, "attack.rl.lr=0.5")
    assert data == {"attack": {"rl": {"lr": 0.5}}}
    cfg = load_config(None, ["seed=4", "eval.ensemble_lambdas=[0.2]"])
    assert cfg.seed == 4 and cfg.eval.ensemble_lambdas == (0.2,)
    partial = load_config(None, ["rl.kl_beta=0.02", "attack.rl.k=8"])
    assert partial.rl.max_steps == ExperimentConfig().rl.max_steps and partial.rl.kl_beta == 0.02
    assert partial.attack.rl.lr == ExperimentConfig().attack.rl.lr and partial.attack.rl.k == 8
    with pytest.raises(ConfigError):
        apply_override({}, "novalue")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("ADVRM_OUT", str(tmp_path))
    assert ExperimentConfig(seed=3).output_dir() == tmp_path / "seed3"
    assert ExperimentConfig(out_dir="x").output_dir() == type(tmp_path)("x")
    assert ExperimentConfig().output_dir("y") == type(tmp_path)("y")


def test_manifest_roundtrip_and_gating(tmp_path):
    cfg = ExperimentConfig(seed=2)
    m = RunManifest.open(tmp_path, cfg)
    assert RunManifest.load(tmp_path).config == cfg
    with pytest.raises(MissingArtifactError, match="gen-world"):
        m.require("gen-world")
    with pytest.raises(StateError):
        m.mark("x", a="missing.txt")
    (tmp_path / "a.txt").write_text("1")
    m.mark("x", a="a.txt")
    assert RunManifest.load(tmp_path).done("x")
    (tmp_path / "a.txt").unlink()
    assert not m.done("x")
    with pytest.raises(ConfigError):
        RunManifest.open(tmp_path, ExperimentConfig(seed=3))


def test_fmt_is_fixed():
    assert fmt(1.0) == "1.000000" and fmt(True) == "1" and fmt(np.int64(3)) == "3" and fmt(float("nan")) == "nan"


def test_round_gating(tiny_cfg, tmp_path, capsys):
    assert cli.main(["round", "--config", str(tiny_cfg), "--out", str(tmp_path), "--round-index", "1"]) == 2
    assert "rounds 0..0" in capsys.readouterr().err
    assert cli.main(["attack", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 2
    assert "train-rm" in capsys.readouterr().err


def test_stage_commands_are_idempotent(tiny_cfg, tmp_path):
    args = ["--config", str(tiny_cfg), "--out", str(tmp_path)]
    for cmd in ("gen-world", "train-rm", "attack", "filter", "build-pairs", "round", "train-policy"):
        assert cli.main([cmd, *args]) == 0
    stamp = {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*.ckpt")}
    timings = json.loads((tmp_path / "timings.json").read_text())
    assert {"gen-world", "train-rm:r0", "attack:r0", "round:r0", "train-policy:r0"} <= set(timings)
    assert cli.main(["round", *args]) == 0
    assert {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*.ckpt")} == stamp
    assert json.loads((tmp_path / "timings.json").read_text()) == timings


def test_reproduce_outputs(tiny_run):
    m = tiny_run / "metrics"
    for name in ("table1_attack_success.csv", "rounds.csv", "table3_ablation.csv", "correlation.csv",
                 "downstream.csv", "curve_baseline.csv", "hacking_baseline.csv", "attack_trace_r0.csv"):
        assert (m / name).exists(), name
    ablation = (m / "table3_ablation.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in ablation[1:]] == ["full", "no-filtering", "equal-weights", "no-threshold"]
    for fig in ("u_vs_gold.svg", "rlhf_curves.svg", "rounds.svg", "ablation.svg", "attack_success.svg"):
        assert (tiny_run / "figures" / fig).exists()
    assert "missing" not in (tiny_run / "report.md").read_text()


def test_resume_after_interruption_matches(tiny_cfg, tiny_run, tmp_path):
    args = ["--config", str(tiny_cfg), "--out", str(tmp_path)]
    assert cli.main(["reproduce", "--stage", "round", *args]) == 0
    (tmp_path / "models" / "rm_r1_m0.ckpt").unlink()
    assert cli.main(["reproduce", *args]) == 0
    for p in sorted((tiny_run / "metrics").glob("*.csv")):
        assert (tmp_path / "metrics" / p.name).read_bytes() == p.read_bytes(), p.name


def test_seed_override_changes_outputs(tiny_cfg, tiny_run, tmp_path):
    assert cli.main(["reproduce", "--stage", "round", "--seed", "5", "--config", str(tiny_cfg),
                     "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics" / "rounds.csv").read_bytes() != (tiny_run / "metrics" / "rounds.csv").read_bytes()


def test_report_on_empty_dir(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "report.md").read_text()
    assert text.count("_missing: stage not run_") == 7


def test_bad_stage_name(tiny_cfg, tmp_path):
    assert cli.main(["reproduce", "--stage", "nope", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 2
    assert cli.main(["evaluate", "--stage", "nope", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 2


def test_pipeline_refuses_other_config(tiny_run):
    with pytest.raises(ConfigError):
        Pipeline(ExperimentConfig(seed=9), tiny_run)
