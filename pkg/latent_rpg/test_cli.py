import asyncio
import csv
import os

import pytest

from latent_rpg.core.records import COVERAGE_COLUMNS, GRADCHECK_COLUMNS, RUN_COLUMNS
from latent_rpg.main import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, main

TINY = """{
  "run": {"env": "bandit_b", "total_steps": 128, "batch_size": 16, "eval_every": 4, "eval_episodes": 8},
  "latent": {"kind": "categorical", "size": 2},
  "objective": {"estimator": "hybrid"},
  "network": {"hidden": [8], "activation": "tanh"}
}
"""


def _run(*argv) -> int:
    return asyncio.run(main(["--quiet", *argv]))


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(TINY)
    return str(path)


def test_train_writes_run_csv_and_checkpoint(tmp_path, tiny_config):
    out = str(tmp_path / "out")
    assert _run("train", tiny_config, "--out", out) == EXIT_OK
    rows = _rows(os.path.join(out, "run.csv"))
    assert rows[0] == RUN_COLUMNS
    assert [r[1] for r in rows[1:]] == ["0", "64", "128"]
    assert all(len(r) == len(RUN_COLUMNS) for r in rows)
    for name in ("checkpoint.bin", "checkpoint.manifest", "modes.json"):
        assert os.path.exists(os.path.join(out, name))


def test_same_seed_gives_byte_identical_artifacts(tmp_path, tiny_config):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert _run("train", tiny_config, "--seed", "5", "--out", first) == EXIT_OK
    assert _run("train", tiny_config, "--seed", "5", "--out", second) == EXIT_OK
    for name in ("run.csv", "checkpoint.bin", "modes.json"):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read()


def test_config_errors_exit_with_code_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "run": {\n    "seed": 1\n  }\n}\n')
    assert _run("train", str(bad), "--out", str(tmp_path)) == EXIT_CONFIG
    assert "Configuration Error" in capsys.readouterr().out

    typo = tmp_path / "typo.json"
    typo.write_text('{\n  "run": {\n    "env": "bandit_b",\n    "sede": 1\n  }\n}\n')
    assert _run("train", str(typo), "--out", str(tmp_path)) == EXIT_CONFIG
    assert "line 4" in capsys.readouterr().out

    assert _run("train", str(tmp_path / "absent.json"), "--out", str(tmp_path)) == EXIT_CONFIG


def test_gradcheck_smoke_run_passes(tmp_path):
    assert _run("gradcheck", "--trials", "1", "--out", str(tmp_path)) == EXIT_OK
    rows = _rows(tmp_path / "gradcheck.csv")
    assert rows[0] == GRADCHECK_COLUMNS
    assert len(rows) > 1
    assert all(r[4] == "1" for r in rows[1:])


def test_gradcheck_reports_an_injected_fault_and_fails(tmp_path, capsys):
    args = ("gradcheck", "--module", "graph", "--trials", "1", "--inject-fault", "--out", str(tmp_path))
    assert _run(*args) == EXIT_CHECK_FAILED
    assert "fault.broken_square" in capsys.readouterr().out
    rows = {r[0]: r for r in _rows(tmp_path / "gradcheck.csv")[1:]}
    assert rows["fault.broken_square"][4] == "0"
    assert all(r[4] == "1" for key, r in rows.items() if not key.startswith("fault."))


def test_gradcheck_rejects_zero_trials(tmp_path):
    assert _run("gradcheck", "--trials", "0", "--out", str(tmp_path)) == EXIT_CONFIG


def test_bias_demo_flags_the_pathwise_row(tmp_path):
    assert _run("bias-demo", "--env", "bandit_a", "--samples", "20000", "--out", str(tmp_path)) == EXIT_OK
    rows = _rows(tmp_path / "bias.csv")
    header, body = rows[0], rows[1:]
    assert {r[0] for r in body} == {"score", "pathwise", "hybrid"}
    z = header.index("z_score")
    pathwise_mu = next(r for r in body if r[0] == "pathwise" and r[1] == "mu[0]")
    assert abs(float(pathwise_mu[z])) > 5


def test_bias_demo_rejects_multi_step_envs(tmp_path):
    assert _run("bias-demo", "--env", "move2", "--samples", "100", "--out", str(tmp_path)) == EXIT_CONFIG
    assert _run("bias-demo", "--env", "nowhere", "--out", str(tmp_path)) == EXIT_CONFIG


def test_coverage_with_no_steps_is_the_start_room(tmp_path):
    assert _run("coverage", "--steps", "0", "--out", str(tmp_path)) == EXIT_OK
    assert _rows(tmp_path / "coverage.csv") == [COVERAGE_COLUMNS, ["0", "1"]]


def test_coverage_rejects_non_maze_configs(tmp_path, tiny_config):
    assert _run("coverage", "--steps", "10", "--config", tiny_config, "--out", str(tmp_path)) == EXIT_CONFIG


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
