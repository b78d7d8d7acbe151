"""
Analysis - concentration diagnostics and the eps -> 0 convergence harness.

Pure post-processing of EpsTrace / LimitTrace objects: Dirac atom location,
mass windows, sup-norm and L1 gaps between the eps-level and limit solutions,
Lebesgue right-continuity of the resources and the sweep report.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import InvalidInputError
from .solvers.eps_solver import EpsTrace
from .solvers.limit_solver import LimitTrace
from .trait_model import DiscreteMeasure, LogDensityState, TraitGrid

logger = logging.getLogger(__name__)

SWEEP_METRICS = ("sup_norm_gap", "I_gap_L1", "concentration_width")


# ============================================================================
# CONCENTRATION
# ============================================================================

def _require_eps(state: LogDensityState) -> None:
    if state.eps <= 0:
        raise InvalidInputError("concentration diagnostics need eps > 0")


def _basins(phi: np.ndarray, threshold: float) -> List[Tuple[int, np.ndarray]]:
    """(peak index, node indices) for every local max above -threshold; basins split at the minima between peaks."""
    n = phi.size
    left_up = np.concatenate(([True], phi[1:] > phi[:-1]))
    right_ok = np.concatenate((phi[:-1] >= phi[1:], [True]))
    peaks = np.flatnonzero(left_up & right_ok & (phi >= -threshold))
    if peaks.size == 0:
        return []
    cuts = [0]
    for a, b in zip(peaks[:-1], peaks[1:]):
        cuts.append(int(a + np.argmin(phi[a:b + 1])) + 1)
    cuts.append(n)
    return [(int(p), np.arange(cuts[i], cuts[i + 1])) for i, p in enumerate(peaks)]


def dirac_locate(state: LogDensityState, threshold: float = 1.0) -> DiscreteMeasure:
    """
    Atoms at the local maxima of phi above -threshold, each weighted by the
    u_eps mass of its basin (log-space quadrature). Every node belongs to one
    basin, so the weights sum to the total mass.
    """
    _require_eps(state)
    phi = np.asarray(state.phi)
    w = state.grid.trapezoid_weights()
    x = state.grid.nodes
    basins = _basins(phi, threshold)
    if not basins:
        return DiscreteMeasure.empty()
    locations = [x[p] for p, _ in basins]
    weights = [float(np.exp(logsumexp(phi[b] / state.eps, b=w[b]))) for _, b in basins]
    return DiscreteMeasure(np.array(locations), np.array(weights))


def concentration_width(state: LogDensityState, center: float, fraction: float = 0.99,
                        bounds: Optional[Tuple[float, float]] = None) -> float:
    """
    Half-width r of the smallest window [center - r, center + r] holding
    `fraction` of the u_eps mass (of the mass inside `bounds` when given).
    """
    _require_eps(state)
    if not 0 < fraction < 1:
        raise InvalidInputError(f"fraction must lie in (0, 1), got {fraction}")
    x = state.grid.nodes
    phi = np.asarray(state.phi)
    inside = np.ones(x.size, dtype=bool) if bounds is None else (x >= bounds[0]) & (x <= bounds[1])
    if inside.sum() < 2:
        raise InvalidInputError("concentration window needs at least two nodes")
    xs = x[inside]
    a = phi[inside] / state.eps
    u = np.exp(a - a.max())
    cumulative = cumulative_trapezoid(u, xs, initial=0.0)
    total = cumulative[-1]

    def excess(r: float) -> float:
        hi = np.interp(center + r, xs, cumulative)
        lo = np.interp(center - r, xs, cumulative)
        return (hi - lo) - fraction * total

    r_max = max(center - xs[0], xs[-1] - center)
    if excess(0.0) >= 0:
        return 0.0
    return float(brentq(excess, 0.0, r_max, xtol=1e-12))


# ============================================================================
# TIME SERIES DIAGNOSTICS
# ============================================================================

def _piecewise_integral(times: np.ndarray, values: np.ndarray, a: float, b: float) -> float:
    """int_a^b f for a right-continuous step function f = values[n] on [times[n], times[n+1])."""
    if b <= a:
        return 0.0
    edges = np.concatenate((times, [np.inf]))
    total = 0.0
    for n in range(times.size):
        lo, hi = max(a, edges[n]), min(b, edges[n + 1])
        if hi > lo:
            total += values[n] * (hi - lo)
    if a < times[0]:
        total += values[0] * (min(b, times[0]) - a)
    return float(total)


def lebesgue_right_continuity(times: Sequence[float], values, t: float,
                              s_values: Sequence[float]) -> np.ndarray:
    """
    (1/s) int_t^{t+s} sum_i |I_i(theta) - I_i(t)| dtheta for every s, with
    I the right-continuous step function taking values[n] on [times[n], times[n+1]).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float).reshape(times.size, -1)
    if not times[0] <= t <= times[-1]:
        raise InvalidInputError(f"t={t} outside the series range [{times[0]}, {times[-1]}]")
    n = int(np.searchsorted(times, t, side="right")) - 1
    deviation = np.abs(values - values[n]).sum(axis=1)
    out = []
    for s in s_values:
        if not s > 0:
            raise InvalidInputError("averaging lengths s must be positive")
        out.append(_piecewise_integral(times, deviation, t, t + s) / s)
    return np.array(out)


def jump_times(times: Sequence[float], I_series, threshold: float = 1e-2) -> List[Dict[str, float]]:
    """Steps where some I_i changes by more than threshold (recorded, never smoothed)."""
    times = np.asarray(times, dtype=float)
    I = np.asarray(I_series, dtype=float).reshape(times.size, -1)
    change = np.abs(np.diff(I, axis=0)).max(axis=1) if times.size > 1 else np.zeros(0)
    return [{"t": float(times[n + 1]), "size": float(change[n])} for n in np.flatnonzero(change > threshold)]


def branching_events(trace: LimitTrace) -> List[Dict[str, float]]:
    """Step times at which the number of (merged) atoms of the metastable measure changes."""
    counts = trace.step_atom_counts
    events = []
    for n in range(1, len(counts)):
        if counts[n] != counts[n - 1]:
            events.append({"t": float(trace.step_times[n]), "from": int(counts[n - 1]), "to": int(counts[n])})
    return events


# ============================================================================
# EPS VS LIMIT COMPARISON
# ============================================================================

def default_window(grid: TraitGrid, fraction: float = 0.8) -> Tuple[float, float]:
    """Central `fraction` of the grid."""
    middle = 0.5 * (grid.x_min + grid.x_max)
    half = 0.5 * fraction * grid.length
    return middle - half, middle + half


def sup_norm_gap(frames_a: Sequence[np.ndarray], frames_b: Sequence[np.ndarray],
                 grid: TraitGrid, window: Optional[Tuple[float, float]] = None) -> float:
    """max over aligned frames and window nodes of |a - b|."""
    if len(frames_a) != len(frames_b) or not frames_a:
        raise InvalidInputError("sup-norm gap needs the same nonzero number of frames")
    window = window or default_window(grid)
    x = grid.nodes
    inside = (x >= window[0]) & (x <= window[1])
    return float(max(np.max(np.abs(np.asarray(a)[inside] - np.asarray(b)[inside]))
                     for a, b in zip(frames_a, frames_b)))


def I_gap_L1(times_a, values_a, times_b, values_b, t_end: float) -> float:
    """int_0^T sum_i |I_a - I_b| dt, both read as right-continuous step functions."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    values_a = np.asarray(values_a, dtype=float).reshape(times_a.size, -1)
    values_b = np.asarray(values_b, dtype=float).reshape(times_b.size, -1)
    if values_a.shape[1] != values_b.shape[1]:
        raise InvalidInputError("resource series have different resource counts")
    grid_t = np.unique(np.concatenate((times_a, times_b, [0.0, t_end])))
    grid_t = grid_t[(grid_t >= 0.0) & (grid_t <= t_end)]
    ia = np.clip(np.searchsorted(times_a, grid_t[:-1], side="right") - 1, 0, times_a.size - 1)
    ib = np.clip(np.searchsorted(times_b, grid_t[:-1], side="right") - 1, 0, times_b.size - 1)
    diff = np.abs(values_a[ia] - values_b[ib]).sum(axis=1)
    return float(np.dot(diff, np.diff(grid_t)))


@dataclass
class SweepRow:
    eps: float
    sup_norm_gap: float
    I_gap_L1: float
    mass_min: float
    mass_max: float
    concentration_width: float
    final_I: List[float] = field(default_factory=list)
    audit_passed: Optional[bool] = None

    def to_dict(self) -> Dict[str, Any]:
        row = {
            "eps": self.eps,
            "sup_norm_gap": self.sup_norm_gap,
            "I_gap_L1": self.I_gap_L1,
            "mass_min": self.mass_min,
            "mass_max": self.mass_max,
            "concentration_width": self.concentration_width,
        }
        for i, v in enumerate(self.final_I):
            row[f"final_I_{i + 1}"] = v
        if self.audit_passed is not None:
            row["audit_passed"] = bool(self.audit_passed)
        return row


def compare_runs(eps_trace: EpsTrace, limit_trace: LimitTrace,
                 window: Optional[Tuple[float, float]] = None,
                 mass_fraction: float = 0.99, tol: float = 1e-9) -> SweepRow:
    """One sweep row: sup-norm gap on the window, L1 resource gap, mass extremes, concentration width."""
    if eps_trace.grid != limit_trace.grid:
        raise InvalidInputError("eps and limit runs use different grids")
    if eps_trace.k != limit_trace.k:
        raise InvalidInputError("eps and limit runs use different resource counts")
    t_eps = eps_trace.snapshot_times
    t_lim = np.array(sorted(limit_trace.snapshots))
    if t_eps.shape != t_lim.shape or np.any(np.abs(t_eps - t_lim) > tol * max(1.0, float(t_lim.max()))):
        raise InvalidInputError(f"output times are misaligned: {t_eps.tolist()} vs {t_lim.tolist()}")

    grid = eps_trace.grid
    gap = sup_norm_gap([eps_trace.snapshots[t] for t in t_eps],
                       [limit_trace.snapshots[t] for t in t_lim], grid, window)
    t_end = float(t_lim.max())
    if limit_trace.step_I:
        lim_times, lim_values = limit_trace.step_times[:-1], limit_trace.step_I_array
    else:
        lim_times, lim_values = limit_trace.times, limit_trace.I_array
    l1 = I_gap_L1(eps_trace.times, eps_trace.I_array, lim_times, lim_values, t_end)

    final_eps = eps_trace.final_state()
    widths = [0.0]
    final_measure = limit_trace.measure_series[-1] if limit_trace.measure_series else DiscreteMeasure.empty()
    basins = dirac_locate(final_eps)
    for x_atom in final_measure.locations:
        bounds = None
        if basins.n_atoms > 1:
            cut = 0.5 * (basins.locations[:-1] + basins.locations[1:])
            j = int(np.searchsorted(cut, x_atom))
            edges = np.concatenate(([grid.x_min], cut, [grid.x_max]))
            bounds = (float(edges[j]), float(edges[j + 1]))
        widths.append(concentration_width(final_eps, float(x_atom), mass_fraction, bounds))

    return SweepRow(
        eps=float(eps_trace.eps),
        sup_norm_gap=gap,
        I_gap_L1=l1,
        mass_min=float(min(eps_trace.mass_series)),
        mass_max=float(max(eps_trace.mass_series)),
        concentration_width=float(max(widths)),
        final_I=[float(v) for v in eps_trace.I_array[-1]],
    )


# ============================================================================
# SWEEP REPORT
# ============================================================================

def fit_order(h_values: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    h = np.asarray(h_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.size < 2 or h.size != e.size:
        raise InvalidInputError("order fit needs at least two (h, error) pairs")
    if np.any(h <= 0) or np.any(e <= 0):
        raise InvalidInputError("order fit needs positive h and errors")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


@dataclass
class SweepReport:
    rows: List[SweepRow] = field(default_factory=list)
    orders: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def eps_values(self) -> List[float]:
        return [r.eps for r in self.rows]

    def series(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows])

    def is_decreasing(self, metric: str, rel_tol: float = 0.0) -> bool:
        """True if the metric decreases along decreasing eps (up to rel_tol growth per step)."""
        values = self.series(metric)
        return bool(np.all(values[1:] < values[:-1] * (1.0 + rel_tol)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.rows])

    def summary(self) -> Dict[str, Any]:
        return {
            "eps_values": [float(e) for e in self.eps_values],
            "orders": {k: (None if v is None else float(v)) for k, v in self.orders.items()},
            "strictly_decreasing": {m: self.is_decreasing(m) for m in SWEEP_METRICS},
            "decreasing_within_5pct": {m: self.is_decreasing(m, 0.05) for m in SWEEP_METRICS},
        }


def build_sweep_report(rows: Sequence[SweepRow]) -> SweepReport:
    """Order rows by decreasing eps, check finiteness and fit the informational orders."""
    rows = sorted(rows, key=lambda r: -r.eps)
    eps = [r.eps for r in rows]
    if len(set(eps)) != len(eps):
        raise InvalidInputError(f"eps values must be distinct, got {eps}")
    for r in rows:
        if not all(np.isfinite([r.sup_norm_gap, r.I_gap_L1, r.concentration_width])):
            raise InvalidInputError(f"non-finite gap in sweep row eps={r.eps}")
    report = SweepReport(list(rows))
    for metric in SWEEP_METRICS:
        values = report.series(metric)
        if len(rows) >= 2 and np.all(values > 0):
            report.orders[metric] = fit_order(eps, values)
        else:
            report.orders[metric] = None
    for metric in SWEEP_METRICS:
        if len(rows) >= 2 and not report.is_decreasing(metric):
            level = "within 5%" if report.is_decreasing(metric, 0.05) else "beyond 5%"
            logger.warning("sweep: %s is not strictly decreasing in eps (%s)", metric, level)
    return report
