import pytest
import json
import sys
import os

import pandas as pd

# pytest app import fix
sys.path.append(os.path.abspath('.'))

import cli
from config import settings
from services.errors import SimulationAborted


TINY_CONFIG = """
schema_version: 1
name: tiny
topology:
  kind: crossbar
  n: 3
traffic:
  rates:
    - [0.6, 0.3, 0.0]
    - [0.1, 0.0, 0.8]
    - [0.2, 0.6, 0.1]
  tau: 0.9
  normalizer: 0.9
horizon: 400
seed: 2
policies:
  - kind: max_weight
"""


################################ Fixtures #####################################################

@pytest.fixture(autouse=True)
def log_to_tmp(tmp_path, monkeypatch):
    """
    Fixture to keep the rotating log file inside the test directory.
    """
    monkeypatch.setattr(settings, "LOG_FILE", str(tmp_path / "log.log"))
    monkeypatch.setattr(settings, "SYL_SIM_OUT", str(tmp_path / "runs"))


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


################################ Test #####################################################

def test_decompose_bundled_mu(capsys):
    """
    Test the decomposition command on the bundled margin target.
    """
    assert cli.main(["decompose", "./configs/example1_mu.txt", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["member"]
    assert len(report["terms"]) <= 5
    assert report["residual"] <= 1e-9


def test_decompose_margin(capsys):
    """
    Test that the margin flag reports eta* of about 0.0333 for the bundled rate matrix.
    """
    assert cli.main(["decompose", "./configs/eq7_lambda.txt", "--margin"]) == 0
    out = capsys.readouterr().out
    assert "capacity margin eta*: 0.0333" in out


def test_decompose_usage_error(tmp_path, capsys):
    """
    Test that a non-square matrix is a usage error with a JSON record.
    """
    matrix = tmp_path / "bad.txt"
    matrix.write_text("1 0 0\n0 1 0\n", encoding="utf-8")
    assert cli.main(["decompose", str(matrix)]) == 2
    record = error_record(capsys)
    assert record["exit_code"] == 2 and record["error"] == "ConfigurationError"


def test_missing_config_creates_nothing(tmp_path, capsys):
    """
    Test that a missing config exits with a usage error before any output is written.
    """
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(out)]) == 2
    assert not out.exists()
    assert error_record(capsys)["exit_code"] == 2


def test_bad_arguments(capsys):
    """
    Test that argparse failures follow the usage exit code.
    """
    assert cli.main(["launch"]) == 2
    assert error_record(capsys)["error"] == "UsageError"
    assert cli.main(["sweep"]) == 2


def test_run_and_force(tmp_path, config_file, capsys):
    """
    Test a run, the seed override and the force flag.
    """
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config_file), "--seed", "3", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert json.loads((out / "summary.json").read_text())["seed"] == 3
    assert cli.main(["run", "--config", str(config_file), "--out", str(out)]) == 2
    assert cli.main(["run", "--config", str(config_file), "--out", str(out), "--force"]) == 0


def test_run_default_output_root(tmp_path, config_file):
    """
    Test that the output directory defaults to SYL_SIM_OUT/<config name>.
    """
    assert cli.main(["run", "--config", str(config_file)]) == 0
    assert (tmp_path / "runs" / "tiny" / "summary.json").is_file()


def test_sweep_step_zero(config_file, capsys):
    """
    Test that a zero tau step is a usage error.
    """
    argv = ["sweep", "--config", str(config_file), "--tau-from", "0.9", "--tau-to", "0.99", "--step", "0"]
    assert cli.main(argv) == 2


def test_single_cell_sweep_matches_run(tmp_path, config_file):
    """
    Test that a one-cell sweep reports the same mean backlog as the equivalent run.
    """
    run_out = tmp_path / "run"
    sweep_out = tmp_path / "sweep"
    assert cli.main(["run", "--config", str(config_file), "--out", str(run_out)]) == 0
    argv = ["sweep", "--config", str(config_file), "--tau-from", "0.9", "--tau-to", "0.9", "--step", "0.01",
            "--policies", "max_weight", "--seeds", "2", "--out", str(sweep_out), "--plot-scripts"]
    assert cli.main(argv) == 0
    table = pd.read_csv(sweep_out / "sweep.csv")
    summary = json.loads((run_out / "summary.json").read_text())
    assert len(table) == 1
    assert table["mean_backlog"].iloc[0] == summary["mean_backlog"]
    assert (sweep_out / "sweep.gp").is_file()


def test_runtime_failure_exit_code(config_file, monkeypatch, capsys):
    """
    Test that an aborted simulation exits with code 1 and reports the slot.
    """
    def abort(*args, **kwargs):
        raise SimulationAborted("decomposition failed", 7)

    monkeypatch.setattr(cli, "execute_run", abort)
    assert cli.main(["run", "--config", str(config_file)]) == 1
    record = error_record(capsys)
    assert record["exit_code"] == 1 and record["slot"] == 7
