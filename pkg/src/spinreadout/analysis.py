"""Count fractions, readout-error curves and readout fidelity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, ReadoutScenario, Spin

DEFAULT_GRID_STEP = 0.01  # ns


def readout_grid(t_max: float, step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    """Uniform grid 0, step, ..., t_max (t_max rounded to a whole number of steps)."""
    if step <= 0 or t_max <= 0:
        raise DomainError("grid step and extent must be positive")
    n = int(round(t_max / step))
    return np.linspace(0.0, n * step, n + 1)


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise DomainError("grid must be a non-empty 1-d sequence")
    if np.any(np.diff(g) <= 0):
        raise DomainError("grid must be strictly increasing")
    if g[0] < 0:
        raise DomainError("grid must start at t >= 0")
    return g


@dataclass(frozen=True, eq=False)
class CountFractionCurve:
    readout_times: np.ndarray
    fractions: np.ndarray
    n_repetitions: int

    def at(self, t: float) -> float:
        return float(np.interp(t, self.readout_times, self.fractions))


@dataclass(frozen=True, eq=False)
class DetectionCDF:
    grid: np.ndarray
    bright: np.ndarray  # C(t)
    dark: np.ndarray    # C_d(t)


@dataclass(frozen=True, eq=False)
class FidelityReport:
    readout_times: np.ndarray
    e_bright: np.ndarray
    e_dark: np.ndarray
    fidelity: np.ndarray
    optimal_time: float
    optimal_fidelity: float
    p_bright: float
    p_dark: float

    def at(self, t: float) -> float:
        """Fidelity at the grid point nearest to ``t``."""
        return float(self.fidelity[np.argmin(np.abs(self.readout_times - t))])


@dataclass(frozen=True, eq=False)
class EmpiricalErrors:
    readout_times: np.ndarray
    e_bright: np.ndarray
    e_dark: np.ndarray
    n_bright: int
    n_dark: int
    extra: dict = field(default_factory=dict)

    @property
    def sigma_bright(self) -> np.ndarray:
        return np.sqrt(self.e_bright * (1 - self.e_bright) / self.n_bright)

    @property
    def sigma_dark(self) -> np.ndarray:
        return np.sqrt(self.e_dark * (1 - self.e_dark) / self.n_dark)


def _cumulative_fraction(times: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Fraction of entries with time <= t for each t in grid; NaN counts as never."""
    hits = np.sort(times[~np.isnan(times)])
    return np.searchsorted(hits, grid, side="right") / times.size


def count_fraction(ensemble, grid) -> CountFractionCurve:
    """Fraction of repetitions with a click no later than each readout time."""
    n = len(ensemble)
    if n == 0:
        raise DomainError("empty ensemble")
    g = _as_grid(grid)
    if g[-1] > ensemble.scenario.pulse_duration + 1e-12:
        raise DomainError("readout times must not exceed the pulse duration")
    return CountFractionCurve(g, _cumulative_fraction(ensemble.detection_time, g), n)


def detection_cdf(scenario: ReadoutScenario, grid, method: str = "analytic", seed: int = 0,
                  n_repetitions: int | None = None) -> DetectionCDF:
    """Bright-state detection CDF without flips or back-action, and leakage-only CDF.

    ``method="montecarlo"`` runs the event-driven engine with those
    processes switched off instead of using the closed forms.
    """
    g = _as_grid(grid)
    s = scenario
    if method == "analytic":
        if s.rise_time > 0:
            pumped = s.excited_population * (g + s.rise_time * np.expm1(-g / s.rise_time))
        else:
            pumped = s.excited_population * g
        c = -np.expm1(-s.overall_efficiency * pumped / s.radiative_lifetime)
        c_d = -np.expm1(-s.leakage_rate * g)
        return DetectionCDF(g, c, c_d)
    if method == "montecarlo":
        from .montecarlo import simulate_ensemble

        n = s.n_repetitions if n_repetitions is None else n_repetitions
        horizon = max(s.pulse_duration, float(g[-1]) * (1 + 1e-9))
        base = s.replace(pulse_duration=horizon, pulse_repetition_time=horizon + 1.0, n_repetitions=n,
                         geometry="Faraday")
        bright = base.replace(spin_flip_time=np.inf, spin_on_time=None, spin_off_time=None,
                              branching_ratio=np.inf, leakage_prob_3ns=0.0, p_bright=1.0, p_dark=0.0)
        dark = base.replace(spin_flip_time=np.inf, spin_on_time=None, spin_off_time=None,
                            p_bright=0.0, p_dark=1.0)
        c = _cumulative_fraction(simulate_ensemble(bright, seed).detection_time, g)
        c_d = _cumulative_fraction(simulate_ensemble(dark, seed + 1).detection_time, g)
        return DetectionCDF(g, c, c_d)
    raise DomainError(f"unknown method {method!r}")


def _check_curves(grid, *curves) -> np.ndarray:
    g = _as_grid(grid)
    for c in curves:
        if np.shape(c) != g.shape:
            raise DomainError("curve does not match the grid")
    return g


def error_bright(grid, c, spin_flip_time: float) -> np.ndarray:
    """Bright-state assignment error: no click, or a flip during the window."""
    g = _check_curves(grid, c)
    return 1.0 - np.asarray(c) * np.exp(-g / spin_flip_time)


def error_dark(grid, c, c_d, spin_flip_time: float, variant: str = "window") -> np.ndarray:
    """Dark-state assignment error: leakage click, or flip to bright then a click.

    The flip term is ``(1/t) * integral_0^t C(t - s) * w(s) ds`` evaluated by
    the trapezoidal rule on the grid (C interpolated linearly off-grid), with
    ``w(s) = 1 - exp(-t/tau_SF)`` for ``variant="window"`` and
    ``w(s) = 1 - exp(-s/tau_SF)`` for ``variant="lag"``. The term is 0 at t = 0.
    """
    g = _check_curves(grid, c, c_d)
    if variant not in ("window", "lag"):
        raise DomainError(f"unknown e_dark variant {variant!r}")
    c = np.asarray(c, dtype=float)
    # C(0) = 0 by definition; anchor the interpolation there
    if g[0] > 0:
        gx, cx = np.concatenate(([0.0], g)), np.concatenate(([0.0], c))
    else:
        gx, cx = g, c
    flip = np.zeros_like(g)
    for i, t in enumerate(g):
        if t <= 0:
            continue
        s = gx[gx <= t]
        if s[-1] < t:
            s = np.append(s, t)
        shifted = np.interp(t - s, gx, cx)
        if variant == "window":
            w = -np.expm1(-t / spin_flip_time)
        else:
            w = -np.expm1(-s / spin_flip_time)
        flip[i] = np.trapezoid(shifted * w, s) / t
    return np.asarray(c_d, dtype=float) + flip


def fidelity(grid, e_b, e_d, p_bright: float = 0.5, p_dark: float = 0.5) -> FidelityReport:
    g = _check_curves(grid, e_b, e_d)
    if abs(p_bright + p_dark - 1.0) > 1e-12:
        raise DomainError("occupancy must sum to 1")
    e_b = np.asarray(e_b, dtype=float)
    e_d = np.asarray(e_d, dtype=float)
    f = 1.0 - p_bright * e_b - p_dark * e_d
    i = int(np.argmax(f))  # first maximum: earliest time wins ties
    return FidelityReport(g, e_b, e_d, f, float(g[i]), float(f[i]), p_bright, p_dark)


def formula_report(scenario: ReadoutScenario, grid=None, variant: str = "window") -> FidelityReport:
    """detection_cdf -> error_bright / error_dark -> fidelity for one scenario."""
    g = readout_grid(scenario.pulse_duration) if grid is None else _as_grid(grid)
    cdf = detection_cdf(scenario, g)
    k_bd, k_db = scenario.flip_rates()
    # the formulas take a single flip time; use each direction's own rate
    tau_b = np.inf if k_bd == 0 else 1.0 / k_bd
    tau_d = np.inf if k_db == 0 else 1.0 / k_db
    e_b = error_bright(g, cdf.bright, tau_b)
    e_d = error_dark(g, cdf.bright, cdf.dark, tau_d, variant=variant)
    return fidelity(g, e_b, e_d, scenario.p_bright, scenario.p_dark)


def empirical_errors(ensemble, grid) -> EmpiricalErrors:
    """Assignment errors measured against the simulated spin at pulse start."""
    g = _as_grid(grid)
    bright = ensemble.initial_spin == Spin.BRIGHT
    dark = ~bright
    nb_, nd_ = int(bright.sum()), int(dark.sum())
    if nb_ == 0 or nd_ == 0:
        raise DomainError("ensemble lacks repetitions starting in one of the spin states")
    t = ensemble.detection_time
    e_b = 1.0 - _cumulative_fraction(t[bright], g)
    e_d = _cumulative_fraction(t[dark], g)
    return EmpiricalErrors(g, e_b, e_d, nb_, nd_)


def empirical_report(ensemble, grid, p_bright: float = 0.5, p_dark: float = 0.5) -> FidelityReport:
    err = empirical_errors(ensemble, grid)
    return fidelity(err.readout_times, err.e_bright, err.e_dark, p_bright, p_dark)
