import os

import numpy as np
import pytest

from latent_rpg.core.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from latent_rpg.core.config import Config, TrainConfig, load_config
from latent_rpg.core.errors import CheckpointError, ConfigError, RPGError, TrainingDivergence
from latent_rpg.core.graph import parameter
from latent_rpg.core.records import RUN_COLUMNS, RunRecord, RunRow, write_csv

GOOD = """{
  "run": {
    "env": "bandit_b",
    "seed": 7
  },
  "network": {
    "hidden": [8, 8]
  }
}
"""


def test_parses_sections_and_keeps_defaults():
    config = TrainConfig.from_json(GOOD).validate()
    assert config.run.env == "bandit_b"
    assert config.run.seed == 7
    assert config.network.hidden == [8, 8]
    assert config.objective.gamma == Config.GAMMA
    assert config.model.horizon == Config.MODEL_HORIZON


def test_unknown_key_reports_its_line():
    text = GOOD.replace('"seed": 7', '"seed": 7,\n    "sede": 3')
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json(text)
    assert info.value.line == 5
    assert "run.sede" in str(info.value)


def test_wrong_type_and_unknown_section_are_line_anchored():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json(GOOD.replace("7", '"seven"'))
    assert info.value.line == 4
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json('{\n  "run": {"env": "move1"},\n  "extras": {}\n}')
    assert info.value.line == 3


def test_malformed_json_and_missing_env():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json('{\n  "run": {\n    "env": "move1",\n  }\n}')
    assert info.value.line == 4
    with pytest.raises(ConfigError):
        TrainConfig.from_json('{"run": {"seed": 1}}')


def test_validation_rejects_bad_values():
    config = TrainConfig.from_json(GOOD)
    config.objective.gamma = 1.0
    with pytest.raises(ConfigError):
        config.validate()
    config = TrainConfig.from_json(GOOD.replace("bandit_b", "pong"))
    with pytest.raises(ConfigError) as info:
        config.validate()
    assert info.value.line == 3
    assert str(info.value).startswith("line 3: run.env: unknown environment 'pong'")


def test_semantic_errors_point_at_the_offending_key(monkeypatch):
    text = GOOD.replace('"seed": 7', '"seed": 7,\n    "batch_size": 0')
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json(text).validate()
    assert info.value.line == 5
    assert "run.batch_size" in str(info.value)

    # a value from the environment has no file line
    monkeypatch.setenv("RPG_RUN_ENV", "pong")
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json(GOOD).apply_env_overrides().validate()
    assert info.value.line is None

    config = TrainConfig.from_json(GOOD)
    config.objective.gamma = 1.0
    with pytest.raises(ConfigError) as info:
        config.validate()
    assert info.value.line is None


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("RPG_RUN_SEED", "11")
    monkeypatch.setenv("RPG_OBJECTIVE_AUTO_ALPHA", "false")
    monkeypatch.setenv("RPG_NETWORK_HIDDEN", "4,4,4")
    monkeypatch.setenv("RPG_OBJECTIVE_TARGET_ENTROPY", "none")
    config = TrainConfig.from_json(GOOD).apply_env_overrides()
    assert config.run.seed == 11
    assert config.objective.auto_alpha is False
    assert config.network.hidden == [4, 4, 4]
    assert config.objective.target_entropy is None

    monkeypatch.setenv("RPG_RUN_SEED", "eleven")
    with pytest.raises(ConfigError):
        TrainConfig.from_json(GOOD).apply_env_overrides()


def test_unknown_override_is_rejected(monkeypatch):
    monkeypatch.setenv("RPG_RUN_SEEDS", "1")
    with pytest.raises(ConfigError):
        Config.validate()
    monkeypatch.delenv("RPG_RUN_SEEDS")
    Config.validate()


def test_shipped_presets_load(monkeypatch):
    for key in [k for k in os.environ if k.startswith("RPG_") and k not in ("RPG_RUN_SLOW", "RPG_OUTPUT_DIR")]:
        monkeypatch.delenv(key)
    presets = sorted(p for p in os.listdir(Config.CONFIGS_DIR) if p.endswith(".json"))
    assert "bandit_b.json" in presets and "maze.json" in presets
    for name in presets:
        config = load_config(os.path.join(Config.CONFIGS_DIR, name))
        assert TrainConfig.from_json(config.to_json()) == config
    with pytest.raises(ConfigError):
        load_config(os.path.join(Config.CONFIGS_DIR, "missing.json"))


def test_checkpoint_restores_values(tmp_path):
    path = str(tmp_path / "ckpt" / "policy")
    w = parameter(np.arange(6.0).reshape(2, 3), "w")
    b = parameter(np.array([0.5, -0.5]), "b")
    s = parameter(np.array(2.5), "s")
    bin_path, manifest = save_checkpoint(path, [("w", w), ("b", b), ("s", s)])
    assert open(manifest).read() == "w\t2x3\t0\nb\t2\t6\ns\tscalar\t8\n"
    assert os.path.getsize(bin_path) == 9 * 8

    fresh = [("w", parameter(np.zeros((2, 3)))), ("b", parameter(np.zeros(2))), ("s", parameter(np.array(0.0)))]
    load_checkpoint(path, fresh)
    np.testing.assert_array_equal(fresh[0][1].value, w.value)
    np.testing.assert_array_equal(fresh[1][1].value, b.value)
    assert float(fresh[2][1].value) == 2.5
    assert set(read_checkpoint(path)) == {"w", "b", "s"}


def test_checkpoint_mismatches_are_errors(tmp_path):
    path = str(tmp_path / "ckpt")
    w = parameter(np.zeros((2, 3)), "w")
    with pytest.raises(CheckpointError):
        save_checkpoint(path, [("w", w), ("w", w)])
    save_checkpoint(path, [("w", w)])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, [("w", parameter(np.zeros((3, 2))))])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, [("v", parameter(np.zeros((2, 3))))])
    with pytest.raises(CheckpointError):
        read_checkpoint(str(tmp_path / "nowhere"))


def test_run_csv_is_stable(tmp_path):
    record = RunRecord()
    record.append(RunRow(step=0, env_steps=0, return_mean=0.1, return_std=0.0))
    record.append(RunRow(step=1, env_steps=64, return_mean=1 / 3, return_std=0.25, grad_norm=2.0))
    path = record.write_csv(str(tmp_path / "run.csv"))
    lines = open(path, newline="").read().split("\n")
    assert lines[0] == ",".join(RUN_COLUMNS)
    assert lines[2].startswith("1,64,0.333333333333,0.25,0,")
    assert lines[-1] == ""


def test_run_record_invariants(tmp_path):
    record = RunRecord()
    record.append(RunRow(step=1, env_steps=100, return_mean=0.0, return_std=0.0))
    with pytest.raises(RPGError):
        record.append(RunRow(step=2, env_steps=50, return_mean=0.0, return_std=0.0))
    with pytest.raises(TrainingDivergence):
        record.append(RunRow(step=2, env_steps=150, return_mean=float("nan"), return_std=0.0))
    with pytest.raises(RPGError):
        RunRecord().final
    with pytest.raises(RPGError):
        write_csv(str(tmp_path / "bad.csv"), ["a", "b"], [[1]])


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
