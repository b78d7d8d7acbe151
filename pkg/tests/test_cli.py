"""
Full flow tests: scenario files through run_scenario / validate_scenario /
report_sweep and the argparse front end, with exit codes and artifacts.
"""
import copy
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from config import EXIT_BLOW_UP, EXIT_CONFIG, EXIT_NON_CONVERGENCE, EXIT_OK, SCENARIO_CONFIGS
from core import read_yaml, report_sweep, run_scenario, validate_scenario, write_yaml
from Evolution.errors import ScenarioError
from Evolution.solvers.eps_solver import initial_profile
from Evolution.trait_model import TraitGrid
from main import main

TINY = {
    "name": "tiny",
    "solver": "eps",
    "grid": {"x_min": -10.0, "x_max": 10.0, "n": 201},
    "kernel": {"family": "cos2", "support_radius": 1.0, "resolution": 129},
    "resources": [{"family": "gaussian", "amplitude": 2.0, "center": 0.0, "width": 1.0}],
    "eps": [0.2],
    "time": {"t_end": 0.2, "n_outputs": 2},
}


def _scenario(tmp_path: Path, name: str = "tiny.scenario", **changes) -> Path:
    data = copy.deepcopy(TINY)
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return write_yaml(tmp_path / name, data)


def _files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ============================================================================
# CONFIGURATION ERRORS
# ============================================================================

def test_unknown_key_is_a_config_error(tmp_path):
    path = _scenario(tmp_path, colour="red")
    out = tmp_path / "runs"
    result = run_scenario(path, out)
    assert result.exit_code == EXIT_CONFIG
    assert result.error["kind"] == "config"
    assert any("colour" in p for p in result.error["problems"])
    assert not out.exists()


def test_malformed_yaml_is_a_config_error(tmp_path):
    path = tmp_path / "broken.scenario"
    path.write_text("name: [unclosed\n", encoding="utf-8")
    assert run_scenario(path, tmp_path / "runs").exit_code == EXIT_CONFIG


@pytest.mark.parametrize("changes", [
    {"eps": [0.0]},
    {"eps": [0.1, 0.1]},
    {"grid": {"x_max": -20.0}},
    {"time": {"t_end": float("inf")}},
    {"resources": [{"family": "gaussian", "center": 0.0}]},
    {"solver": "spectral"},
])
def test_schema_problems(tmp_path, changes):
    result = run_scenario(_scenario(tmp_path, **changes), tmp_path / "runs")
    assert result.exit_code == EXIT_CONFIG
    assert result.run_dir is None


def test_bad_initial_profile_fails_after_loading(tmp_path):
    path = _scenario(tmp_path, grid={"x_min": -3.0, "x_max": 3.0, "n": 61})
    result = run_scenario(path, tmp_path / "runs")
    assert result.exit_code == EXIT_CONFIG
    assert "barrier" in result.error["message"]
    assert not (tmp_path / "runs" / "tiny").exists()


# ============================================================================
# RUNS
# ============================================================================

def test_eps_run_writes_artifacts(tmp_path):
    result = run_scenario(_scenario(tmp_path), tmp_path / "runs")
    assert result.ok
    run_dir = tmp_path / "runs" / "tiny"
    assert result.run_dir == run_dir
    for name in ("manifest.yaml", "eps_0.2/series.csv", "eps_0.2/measures.yaml", "eps_0.2/audit.yaml",
                 "eps_0.2/snapshots/phi_t0.000000.csv", "eps_0.2/snapshots/phi_t0.100000.csv",
                 "eps_0.2/snapshots/phi_t0.200000.csv"):
        assert (run_dir / name).is_file(), name
    manifest = read_yaml(run_dir / "manifest.yaml")
    assert manifest["scenario"]["name"] == "tiny"
    assert "eps_0.2/series.csv" in manifest["artifacts"]
    series = pd.read_csv(run_dir / "eps_0.2" / "series.csv")
    assert series["t"].iloc[-1] == pytest.approx(0.2)
    assert result.summary["eps_runs"]["eps_0.2"]["steps"] > 0


def test_runs_are_deterministic(tmp_path):
    path = _scenario(tmp_path)
    run_scenario(path, tmp_path / "a")
    run_scenario(path, tmp_path / "b")
    first, second = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert first.keys() == second.keys()
    assert first == second


def test_rerun_replaces_the_run_directory(tmp_path):
    path = _scenario(tmp_path)
    out = tmp_path / "runs"
    run_scenario(path, out)
    stray = out / "tiny" / "stale.txt"
    stray.write_text("old", encoding="utf-8")
    run_scenario(path, out)
    assert not stray.exists()


def test_snapshot_is_a_valid_custom_profile(tmp_path):
    run_scenario(_scenario(tmp_path), tmp_path / "runs")
    snapshot = tmp_path / "runs" / "tiny" / "eps_0.2" / "snapshots" / "phi_t0.200000.csv"
    state = initial_profile("custom", {"path": snapshot}, TraitGrid(-10.0, 10.0, 201))
    np.testing.assert_allclose(state.phi, pd.read_csv(snapshot)["phi"].to_numpy(), rtol=0, atol=1e-12)

    restart = _scenario(tmp_path, name="restart.scenario",
                        initial={"name": "custom", "params": {"path": str(snapshot)}})
    assert run_scenario(restart, tmp_path / "again").ok


def test_limit_run_writes_certificates(tmp_path):
    result = run_scenario(_scenario(tmp_path, solver="limit"), tmp_path / "runs")
    assert result.ok
    run_dir = result.run_dir
    measures = read_yaml(run_dir / "limit" / "measures.yaml")
    assert len(measures) == 3
    assert all(entry["passed"] for entry in measures)
    assert measures[-1]["resources"][0] == pytest.approx(0.5, abs=1e-6)
    events = read_yaml(run_dir / "limit" / "events.yaml")
    assert events["inactive_intervals"] == []
    series = pd.read_csv(run_dir / "limit" / "series.csv")
    assert list(series.columns[:3]) == ["t", "I_1", "atoms"]


def test_psi_run_reports_the_gap(tmp_path):
    result = run_scenario(_scenario(tmp_path, solver="psi"), tmp_path / "runs")
    assert result.ok
    gap = read_yaml(result.run_dir / "limit" / "psi_gap.yaml")
    assert np.isfinite(gap["max_gap"]) and gap["max_gap"] >= 0
    assert gap["scheme_self_error"] >= 0
    assert (result.run_dir / "limit" / "psi" / "phi_t0.200000.csv").is_file()


def test_psi_gap_within_twice_the_scheme_self_error(tmp_path):
    result = run_scenario(_scenario(tmp_path, solver="psi", grid={"n": 801}), tmp_path / "runs")
    assert result.ok
    gap = read_yaml(result.run_dir / "limit" / "psi_gap.yaml")
    assert gap["scheme_self_error"] > 0
    assert gap["max_gap"] <= 2 * gap["scheme_self_error"]
    assert gap["within_twice_self_error"] is True


def test_sweep_and_report(tmp_path):
    path = _scenario(tmp_path, eps=[0.1, 0.2])
    result = run_scenario(path, tmp_path / "runs", threads=2, solver="sweep")
    assert result.ok
    run_dir = result.run_dir
    frame = pd.read_csv(run_dir / "sweep_report.csv")
    assert list(frame["eps"]) == [0.2, 0.1]
    assert {"sup_norm_gap", "I_gap_L1", "concentration_width", "audit_passed"} <= set(frame.columns)
    assert (run_dir / "eps_0.1" / "audit.yaml").is_file()

    summary = report_sweep(run_dir)
    assert summary["eps_values"] == [0.2, 0.1]
    assert len(summary["rows"]) == 2
    assert set(read_yaml(run_dir / "sweep_summary.yaml")) >= {"eps_values", "orders", "strictly_decreasing"}


def test_report_needs_a_sweep_directory(tmp_path):
    with pytest.raises(ScenarioError):
        report_sweep(tmp_path)


def test_report_refits_orders(tmp_path):
    pd.DataFrame({
        "eps": [0.05, 0.2, 0.1],
        "sup_norm_gap": [0.025, 0.1, 0.05],
        "I_gap_L1": [0.01, 0.16, 0.04],
        "concentration_width": [0.2, 0.4, 0.3],
    }).to_csv(tmp_path / "sweep_report.csv", index=False)
    summary = report_sweep(tmp_path)
    assert summary["eps_values"] == [0.2, 0.1, 0.05]
    assert summary["orders"]["sup_norm_gap"] == pytest.approx(1.0)
    assert summary["orders"]["I_gap_L1"] == pytest.approx(2.0)
    assert all(summary["strictly_decreasing"].values())


# ============================================================================
# FAILURE EXIT CODES
# ============================================================================

def test_exponent_guard_exits_with_blow_up(tmp_path):
    path = _scenario(tmp_path, tolerances={"exponent_guard": 0.5})
    result = run_scenario(path, tmp_path / "runs")
    assert result.exit_code == EXIT_BLOW_UP
    error = read_yaml(result.run_dir / "error.yaml")
    assert error["kind"] == "blow_up"
    assert error["exit_code"] == EXIT_BLOW_UP
    assert not (result.run_dir / "manifest.yaml").exists()


def test_minimizer_failure_exits_with_non_convergence(tmp_path):
    path = _scenario(tmp_path, solver="limit", tolerances={"max_iters": 1})
    result = run_scenario(path, tmp_path / "runs")
    assert result.exit_code == EXIT_NON_CONVERGENCE
    error = read_yaml(result.run_dir / "error.yaml")
    assert error["kind"] == "non_convergence"
    assert error["time"] == 0.0


# ============================================================================
# VALIDATE
# ============================================================================

def test_validate_bundled_scenario():
    report = validate_scenario(SCENARIO_CONFIGS["single_resource"]["file"])
    assert report["passed"]
    assert report["structure"]["envelope_ok"]
    assert report["warnings"] == []


def test_validate_flags_constant_resource(tmp_path):
    path = _scenario(tmp_path, resources=[{"family": "constant", "amplitude": 2.0}])
    report = validate_scenario(path)
    assert not report["passed"]
    assert not report["structure"]["envelope_ok"]
    assert report["warnings"]


def test_validate_warns_on_duplicate_resources(tmp_path):
    gaussian = {"family": "gaussian", "amplitude": 2.0, "center": 0.0, "width": 1.0}
    report = validate_scenario(_scenario(tmp_path, resources=[gaussian, gaussian]))
    assert report["passed"]
    assert report["structure"]["rank_deficient_samples"] == 64
    assert any("rank deficient" in w for w in report["warnings"])


def test_validate_reports_profile_problems(tmp_path):
    report = validate_scenario(_scenario(tmp_path, grid={"x_min": -3.0, "x_max": 3.0, "n": 61}))
    assert not report["initial_profile_ok"]
    assert "barrier" in report["initial_profile_message"]


# ============================================================================
# COMMAND LINE
# ============================================================================

def test_main_run_and_validate(tmp_path, capsys):
    path = _scenario(tmp_path)
    assert main(["run", str(path), "--out", str(tmp_path / "runs")]) == EXIT_OK
    assert (tmp_path / "runs" / "tiny" / "manifest.yaml").is_file()
    assert main(["validate", str(path)]) == EXIT_OK
    assert "[OK]" in capsys.readouterr().out


def test_main_validate_fails_on_required_checks(tmp_path, capsys):
    flat = _scenario(tmp_path, resources=[{"family": "constant", "amplitude": 2.0}])
    assert main(["validate", str(flat)]) == EXIT_CONFIG
    out = capsys.readouterr().out
    assert "[ERROR]" in out and "failed" in out
    assert "passed with warnings" not in out

    gaussian = {"family": "gaussian", "amplitude": 2.0, "center": 0.0, "width": 1.0}
    assert main(["validate", str(_scenario(tmp_path, resources=[gaussian, gaussian]))]) == EXIT_OK
    assert "passed with warnings" in capsys.readouterr().out


def test_main_config_error(tmp_path, capsys):
    path = _scenario(tmp_path, colour="red")
    assert main(["run", str(path), "--out", str(tmp_path / "runs")]) == EXIT_CONFIG
    assert main(["validate", str(path)]) == EXIT_CONFIG
    assert "[ERROR]" in capsys.readouterr().out
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG


def test_environment_supplies_the_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("EVOLIM_OUT", str(tmp_path / "from_env"))
    monkeypatch.setenv("EVOLIM_THREADS", "not-a-number")
    assert main(["run", str(_scenario(tmp_path))]) == EXIT_OK
    assert (tmp_path / "from_env" / "tiny" / "manifest.yaml").is_file()


def test_flag_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("EVOLIM_OUT", str(tmp_path / "from_env"))
    assert main(["run", str(_scenario(tmp_path)), "-o", str(tmp_path / "from_flag")]) == EXIT_OK
    assert (tmp_path / "from_flag" / "tiny").is_dir()
    assert not (tmp_path / "from_env").exists()


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["simulate"])


# ============================================================================
# BUNDLED SCENARIOS
# ============================================================================

@pytest.mark.slow
def test_bundled_single_resource(tmp_path):
    result = run_scenario(SCENARIO_CONFIGS["single_resource"]["file"], tmp_path)
    assert result.ok
    final_I = result.summary["eps_runs"]["eps_0.05"]["final_I"][0]
    assert 0.45 <= final_I <= 0.55
    assert (result.run_dir / "eps_0.05" / "snapshots" / "phi_t5.000000.csv").is_file()


@pytest.mark.slow
def test_bundled_sweep(tmp_path):
    result = run_scenario(SCENARIO_CONFIGS["sweep"]["file"], tmp_path, threads=3)
    assert result.ok
    frame = pd.read_csv(result.run_dir / "sweep_report.csv")
    assert list(frame["eps"]) == [0.2, 0.1, 0.05]
    assert np.all(np.isfinite(frame[["sup_norm_gap", "I_gap_L1", "concentration_width"]].to_numpy()))
    # both gaps shrink strictly as eps decreases
    assert np.all(np.diff(frame["sup_norm_gap"]) < 0)
    assert np.all(np.diff(frame["I_gap_L1"]) < 0)
    finest = frame[frame["eps"] == 0.05].iloc[0]
    assert abs(finest["final_I_1"] - 0.5) <= 0.05
    summary = result.summary["sweep"]
    assert summary["orders"]["concentration_width"] >= 0.4
    # one set of constants, fitted at eps = 0.2, covers every eps
    assert frame["audit_passed"].all()
    for eps in (0.2, 0.1, 0.05):
        report = read_yaml(result.run_dir / f"eps_{eps:g}" / "audit.yaml")
        assert report["passed"], eps
