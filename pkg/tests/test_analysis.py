"""
Analysis tests: Dirac location, concentration width, resource time-series
diagnostics, eps-vs-limit gaps and the sweep report.
"""
import logging
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.special import erfinv

sys.path.insert(0, str(Path(__file__).parent.parent))

from Evolution.analysis import (
    I_gap_L1, SweepRow, branching_events, build_sweep_report, compare_runs, concentration_width,
    default_window, dirac_locate, fit_order, jump_times, lebesgue_right_continuity, sup_norm_gap,
)
from Evolution.errors import InvalidInputError
from Evolution.solvers.eps_solver import EpsRunConfig, run
from Evolution.solvers.limit_solver import LimitRunConfig, LimitTrace, solve_limit
from Evolution.trait_model import LogDensityState, TraitGrid, log_mass


def _row(eps, gap, l1=None, width=None) -> SweepRow:
    return SweepRow(eps=eps, sup_norm_gap=gap, I_gap_L1=gap if l1 is None else l1,
                    mass_min=0.4, mass_max=0.6, concentration_width=gap if width is None else width,
                    final_I=[0.5])


# ============================================================================
# CONCENTRATION
# ============================================================================

def test_dirac_locate_two_peaks(grid):
    x = grid.nodes
    eps = 0.05
    phi = np.maximum(-(x + 2.0) ** 2, -(x - 2.0) ** 2 - 0.1)
    state = LogDensityState(grid, phi, eps)
    mu = dirac_locate(state)
    assert mu.n_atoms == 2
    np.testing.assert_allclose(mu.locations, [-2.0, 2.0], atol=1e-12)
    gaussian = np.sqrt(np.pi * eps)
    np.testing.assert_allclose(mu.weights, [gaussian, gaussian * np.exp(-0.1 / eps)], rtol=1e-3)
    assert mu.total_mass == pytest.approx(np.exp(log_mass(state)), rel=1e-12)


def test_dirac_locate_threshold_and_limit_object(grid):
    x = grid.nodes
    phi = np.maximum(-(x + 2.0) ** 2, -(x - 2.0) ** 2 - 3.0)
    assert dirac_locate(LogDensityState(grid, phi, 0.05), threshold=1.0).n_atoms == 1
    with pytest.raises(InvalidInputError):
        dirac_locate(LogDensityState(grid, phi, 0.0))


def test_concentration_width_of_a_gaussian(fine_grid):
    eps = 0.05
    state = LogDensityState(fine_grid, -fine_grid.nodes ** 2, eps)
    expected = np.sqrt(eps) * erfinv(0.99)
    assert concentration_width(state, 0.0) == pytest.approx(expected, rel=1e-2)
    narrower = concentration_width(LogDensityState(fine_grid, -fine_grid.nodes ** 2, eps / 4), 0.0)
    assert narrower == pytest.approx(expected / 2, rel=3e-2)
    with pytest.raises(InvalidInputError):
        concentration_width(state, 0.0, fraction=1.0)


def test_concentration_width_inside_bounds(grid):
    x = grid.nodes
    phi = np.maximum(-(x + 2.0) ** 2, -(x - 2.0) ** 2)
    state = LogDensityState(grid, phi, 0.05)
    inside = concentration_width(state, 2.0, bounds=(0.0, 10.0))
    # without bounds the window must reach the other peak
    assert inside < 1.0
    assert concentration_width(state, 2.0) > 3.0


# ============================================================================
# TIME SERIES
# ============================================================================

def test_jump_times():
    times = [0.0, 1.0, 2.0, 3.0]
    I = [[0.5], [0.5], [0.8], [0.805]]
    jumps = jump_times(times, I)
    assert len(jumps) == 1
    assert jumps[0]["t"] == 2.0
    assert jumps[0]["size"] == pytest.approx(0.3)


def test_branching_events(grid):
    trace = LimitTrace(grid, 1, step_times=[0.0, 1.0, 2.0, 3.0],
                       step_I=[np.array([0.5])] * 3, step_atom_counts=[1, 1, 2])
    assert branching_events(trace) == [{"t": 2.0, "from": 1, "to": 2}]


def test_lebesgue_right_continuity():
    times = [0.0, 1.0, 2.0]
    values = [0.0, 1.0, 1.0]
    np.testing.assert_allclose(lebesgue_right_continuity(times, values, 0.0, [0.5, 2.0]), [0.0, 0.5])
    np.testing.assert_allclose(lebesgue_right_continuity(times, values, 1.0, [0.5, 1.0, 5.0]), 0.0)
    with pytest.raises(InvalidInputError):
        lebesgue_right_continuity(times, values, 3.0, [1.0])
    with pytest.raises(InvalidInputError):
        lebesgue_right_continuity(times, values, 0.0, [0.0])


def test_resource_cumulative_and_lookup(grid):
    trace = LimitTrace(grid, 1, step_times=[0.0, 1.0, 2.0, 3.0],
                       step_I=[np.array([1.0]), np.array([2.0]), np.array([3.0])])
    np.testing.assert_allclose(trace.cumulative_resources()[:, 0], [0.0, 1.0, 3.0, 6.0])
    assert trace.resources_at(0.5)[0] == 1.0
    assert trace.resources_at(1.0)[0] == 2.0
    assert trace.resources_at(7.0)[0] == 3.0


# ============================================================================
# GAPS
# ============================================================================

def test_sup_norm_gap_window(grid):
    x = grid.nodes
    gap = sup_norm_gap([np.zeros(grid.n)], [x], grid, window=(-1.01, 1.01))
    assert gap == pytest.approx(1.0)
    assert sup_norm_gap([np.zeros(grid.n)], [x], grid) == pytest.approx(8.0)
    assert default_window(grid) == pytest.approx((-8.0, 8.0))
    with pytest.raises(InvalidInputError):
        sup_norm_gap([x, x], [x], grid)


def test_I_gap_L1():
    gap = I_gap_L1([0.0, 1.0], [[1.0], [0.0]], [0.0], [[0.0]], t_end=2.0)
    assert gap == pytest.approx(1.0)
    two = I_gap_L1([0.0], [[0.5, 0.5]], [0.0, 0.5], [[0.5, 0.5], [0.25, 0.75]], t_end=1.0)
    assert two == pytest.approx(0.25)
    with pytest.raises(InvalidInputError):
        I_gap_L1([0.0], [[0.5]], [0.0], [[0.5, 0.5]], t_end=1.0)


@pytest.fixture
def paired_runs(grid, kernel, single_model):
    eps_trace = run(EpsRunConfig(eps=0.1, t_end=0.5, grid=grid, kernel=kernel, model=single_model, n_outputs=2))
    limit_trace = solve_limit(LimitRunConfig(grid=grid, kernel=kernel, model=single_model, t_end=0.5, n_outputs=2))
    return eps_trace, limit_trace


def test_compare_runs(paired_runs):
    eps_trace, limit_trace = paired_runs
    row = compare_runs(eps_trace, limit_trace)
    assert row.eps == 0.1
    assert np.isfinite(row.sup_norm_gap) and row.sup_norm_gap > 0
    assert row.I_gap_L1 > 0
    assert 0 < row.mass_min <= row.mass_max
    assert 0 < row.concentration_width < 2.0
    assert row.to_dict()["final_I_1"] == pytest.approx(eps_trace.I_array[-1, 0])


def test_compare_runs_rejects_mismatches(paired_runs, grid):
    eps_trace, limit_trace = paired_runs
    with pytest.raises(InvalidInputError, match="grids"):
        compare_runs(eps_trace, LimitTrace(TraitGrid(-10.0, 10.0, 201), 1))
    with pytest.raises(InvalidInputError, match="resource counts"):
        compare_runs(eps_trace, LimitTrace(grid, 2))
    shifted = LimitTrace(grid, 1, snapshots={0.0: limit_trace.snapshots[0.0], 0.5: limit_trace.snapshots[0.5]})
    with pytest.raises(InvalidInputError, match="misaligned"):
        compare_runs(eps_trace, shifted)


# ============================================================================
# SWEEP REPORT
# ============================================================================

def test_fit_order():
    h = np.array([0.1, 0.2, 0.4])
    assert fit_order(h, 3.0 * h ** 2) == pytest.approx(2.0)
    with pytest.raises(InvalidInputError):
        fit_order([0.1], [1.0])
    with pytest.raises(InvalidInputError):
        fit_order([0.1, 0.2], [0.0, 1.0])


def test_sweep_report_orders_rows():
    report = build_sweep_report([_row(0.05, 0.05), _row(0.2, 0.2), _row(0.1, 0.1)])
    assert report.eps_values == [0.2, 0.1, 0.05]
    assert report.orders["sup_norm_gap"] == pytest.approx(1.0)
    summary = report.summary()
    assert all(summary["strictly_decreasing"].values())
    frame = report.to_frame()
    assert list(frame["eps"]) == [0.2, 0.1, 0.05]
    assert "final_I_1" in frame.columns


def test_sweep_report_flags_growth(caplog):
    with caplog.at_level(logging.WARNING, logger="Evolution.analysis"):
        report = build_sweep_report([_row(0.2, 0.1), _row(0.1, 0.102)])
    assert not report.is_decreasing("sup_norm_gap")
    assert report.is_decreasing("sup_norm_gap", 0.05)
    assert "not strictly decreasing" in caplog.text
    assert report.summary()["decreasing_within_5pct"]["sup_norm_gap"]


def test_sweep_report_rejects_bad_rows():
    with pytest.raises(InvalidInputError):
        build_sweep_report([_row(0.1, 0.1), _row(0.1, 0.2)])
    with pytest.raises(InvalidInputError):
        build_sweep_report([_row(0.1, float("nan"))])
    assert build_sweep_report([_row(0.1, 0.0)]).orders["sup_norm_gap"] is None
