import importlib
import io
import json
import tomllib

import pandas as pd
import pytest

from src.main import main
from tests.conftest import ROOT, SCENARIOS


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(
        json.dumps(
            {
                "scenario": str(SCENARIOS / "nlos_2ue.json"),
                "precoders": ["mrt"],
                "sweep": {"variable": "rho_bs", "values": [20, 30]},
                "fixed": {"M": 8},
                "trials": 3,
                "seed": 1,
            }
        ),
        encoding="utf-8",
    )
    return path


def test_run_writes_csv_and_sidecar(small_config, tmp_path, capsys):
    out = tmp_path / "results.csv"
    assert main(["run", "--config", str(small_config), "--out", str(out), "--threads", "2", "--quiet"]) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 4
    assert set(frame["scheme"]) == {"covariance_shaping", "spatial_multiplexing"}
    assert out.with_suffix(".json").is_file()
    assert "Wrote 4 records" in capsys.readouterr().err


def test_optimize_prints_json(capsys):
    assert main(["optimize", "--scenario", str(SCENARIOS / "nlos_4ue.json"), "--eps", "1e-5"]) == 0
    document = json.loads(capsys.readouterr().out)
    (group,) = document["groups"]
    assert group["ues"] == [0, 1, 2, 3]
    assert len(group["vectors"]) == 4 and len(group["vectors"][0]) == 2
    assert len(group["objective_trace"]) == group["iterations"] + 1


def test_estimate_prints_csv(capsys):
    argv = ["estimate", "--scenario", str(SCENARIOS / "nlos_2ue.json"), "--mode", "full", "--trials", "10"]
    assert main(argv + ["--rho-ue-dbm", "5", "25"]) == 0
    frame = pd.read_csv(io.StringIO(capsys.readouterr().out))
    assert list(frame.columns) == ["ue", "rho_ue_dbm", "nmse"]
    assert len(frame) == 4


def test_validate_command(capsys):
    assert main(["validate"]) == 0
    assert "representation_equivalence" in capsys.readouterr().out


def test_missing_config_exits_with_1(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--quiet"]) == 1
    assert capsys.readouterr().err.startswith("Error:")


def test_bad_config_exits_with_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenario": "x.json", "sweep": {"variable": "K", "values": [1]}}), encoding="utf-8")
    assert main(["run", "--config", str(path)]) == 2
    assert "sweep variable" in capsys.readouterr().err


def test_too_short_pilots_exit_with_2(capsys):
    argv = ["estimate", "--scenario", str(SCENARIOS / "nlos_2ue.json"), "--mode", "full", "--pilots", "2", "--tau", "2"]
    assert main(argv + ["--trials", "2"]) == 2


def test_estimate_accepts_optimizer_settings(capsys):
    argv = ["estimate", "--scenario", str(SCENARIOS / "nlos_2ue.json"), "--mode", "effective", "--trials", "5"]
    argv += ["--eps", "1e-4", "--alpha", "1.0", "--init", "random", "--rho-ue-dbm", "15"]
    assert main(argv) == 0
    frame = pd.read_csv(io.StringIO(capsys.readouterr().out))
    assert len(frame) == 2
    assert frame["nmse"].between(0.0, 1.0).all()


def test_estimate_rejects_bad_step_size(capsys):
    argv = ["estimate", "--scenario", str(SCENARIOS / "nlos_2ue.json"), "--mode", "effective", "--alpha", "0"]
    assert main(argv + ["--trials", "2"]) == 2
    assert "step size" in capsys.readouterr().err


def test_console_script_points_at_main():
    project = tomllib.loads((ROOT / "pyproject.toml").read_text(encoding="utf-8"))
    module, _, attribute = project["project"]["scripts"]["covshape"].partition(":")
    assert getattr(importlib.import_module(module), attribute) is main
