import numpy as np
import pytest

from lib.covariance_model import path_covariance
from src.config import config_from_dict
from src.validate import check_closed_form, check_covariances, check_kronecker, random_scenario, report_frame, validate
from tests.conftest import SCENARIOS


@pytest.fixture(scope="module")
def results():
    return validate()


def test_every_check_passes(results):
    failed = [(r.name, r.measured, r.detail) for r in results if not r.passed]
    assert not failed
    names = {r.name for r in results}
    assert {
        "representation_equivalence",
        "kronecker_delta_constant",
        "kronecker_optimizer_degenerate",
        "pilot_orthogonality",
        "covariance_psd",
        "closed_form_perfect_limit",
        "optimizer_monotone",
    } <= names
    assert any(name.startswith("moment_shared_") for name in names)
    assert any(name.startswith("moment_orthogonal_") for name in names)


def test_kronecker_optimizer_reports_a_constant_objective(rng):
    degenerate = next(r for r in check_kronecker(rng) if r.name == "kronecker_optimizer_degenerate")
    assert degenerate.passed
    assert degenerate.detail == "constant objective"


def test_perturbed_covariance_fails(rng):
    sigmas = [path_covariance(random_scenario(rng), k) for k in range(2)]
    assert check_covariances(sigmas).passed
    broken = check_covariances(sigmas, perturbation=0.1)
    assert not broken.passed
    assert "UE 0" in broken.detail


def test_validate_reports_injected_fault():
    results = validate(perturbation=0.1)
    psd = next(r for r in results if r.name == "covariance_psd")
    assert not psd.passed


def test_closed_form_limit(rng):
    result = check_closed_form(rng, sets=20)
    assert result.passed and result.measured <= 1e-6


def test_report_frame(results):
    frame = report_frame(results)
    assert list(frame.columns) == ["check", "status", "measured", "tolerance", "detail"]
    assert set(frame["status"]) == {"pass"}


def test_scenario_checks_from_config():
    config = config_from_dict(
        {
            "scenario": str(SCENARIOS / "nlos_4ue.json"),
            "sweep": {"variable": "d", "values": [4.0]},
            "fixed": {"M": 16},
        }
    )
    results = validate(config)
    scenario = {r.name: r for r in results if r.name.startswith("scenario_")}
    assert scenario["scenario_covariance_psd"].passed
    monotone = [r for name, r in scenario.items() if name.startswith("scenario_monotone")]
    assert monotone and all(r.passed for r in monotone)
    assert np.all([np.isfinite(r.measured) for r in monotone])
