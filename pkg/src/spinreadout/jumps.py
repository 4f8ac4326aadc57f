"""Quantum-jump tracks, dwell-time statistics and two-pulse correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .core import DomainError, FitError, Spin

DEFAULT_CW_BIN = 12.0  # ns, matches the detector dead time
MIN_DWELLS = 20


@dataclass(frozen=True, eq=False)
class StateTrack:
    bin_times: np.ndarray  # start of each bin / pulse, ns
    states: np.ndarray     # int8 Spin values
    bin_width: float       # spacing of bin starts, ns
    source: str            # "pulsed" or "cw"

    def __len__(self) -> int:
        return self.states.shape[0]


def assign_states(clicks, period: float, start: float = 0.0) -> StateTrack:
    """One assignment per pulse: click -> bright, no click -> dark.

    ``clicks`` may be booleans or per-pulse click times with NaN for none.
    """
    c = np.asarray(clicks)
    if c.dtype.kind == "f":
        c = ~np.isnan(c)
    c = c.astype(bool)
    if period <= 0:
        raise DomainError("period must be positive")
    states = np.where(c, Spin.BRIGHT, Spin.DARK).astype(np.int8)
    return StateTrack(start + period * np.arange(c.size), states, float(period), "pulsed")


def track_from_train(train) -> StateTrack:
    return assign_states(train.click, train.period)


def assign_cw_states(timestamps, duration: float, bin_width: float = DEFAULT_CW_BIN) -> StateTrack:
    """Bin a CW click stream; a bin with at least one click is bright.

    A trailing partial bin is dropped.
    """
    if bin_width <= 0 or duration <= 0:
        raise DomainError("bin width and duration must be positive")
    n = int(math.floor(duration / bin_width + 1e-9))
    t = np.asarray(timestamps, dtype=float)
    idx = np.floor(t / bin_width).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n)]
    occupied = np.zeros(n, dtype=bool)
    occupied[idx] = True
    states = np.where(occupied, Spin.BRIGHT, Spin.DARK).astype(np.int8)
    return StateTrack(bin_width * np.arange(n), states, float(bin_width), "cw")


def smooth_majority(track: StateTrack, window: int = 3) -> StateTrack:
    """Centered majority vote over ``window`` bins (odd); edges keep their value."""
    if window < 1 or window % 2 == 0:
        raise DomainError("window must be a positive odd integer")
    s = track.states.astype(np.int64)
    h = window // 2
    if window == 1 or s.size < window:
        return track
    dark_votes = np.convolve(s, np.ones(window, dtype=np.int64), mode="valid")
    out = track.states.copy()
    out[h:s.size - h] = np.where(dark_votes > h, Spin.DARK, Spin.BRIGHT)
    return StateTrack(track.bin_times, out, track.bin_width, track.source)


def _runs(states: np.ndarray):
    change = np.flatnonzero(np.diff(states)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [states.size])))
    return starts, lengths


def dwell_times(track: StateTrack, include_censored: bool = False) -> list[tuple[Spin, float]]:
    """Run-length encode the track into (state, duration) pairs.

    The first and last runs are cut by the observation window and are left
    out unless ``include_censored``.
    """
    if len(track) == 0:
        raise DomainError("empty track")
    starts, lengths = _runs(track.states)
    if not include_censored:
        starts, lengths = starts[1:-1], lengths[1:-1]
    return [(Spin(int(track.states[a])), float(n * track.bin_width)) for a, n in zip(starts, lengths)]


@dataclass(frozen=True, eq=False)
class WaitingTimeHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    fitted_time_constant: float  # MLE (sample mean)
    fitted_error: float
    lsq_time_constant: float     # log-linear cross-check
    lsq_error: float
    lsq_degenerate: bool
    n_dwells: int
    total_duration: float

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def _durations(dwells) -> np.ndarray:
    out = []
    for d in dwells:
        out.append(d[1] if isinstance(d, tuple) else d)
    return np.asarray(out, dtype=float)


def fit_waiting_times(dwells, bin_width: float, state: Spin | None = None) -> WaitingTimeHistogram:
    """Histogram of dwell durations with an exponential MLE and a log-linear cross-check.

    ``dwells`` holds (state, duration) pairs or bare durations; ``state``
    restricts the fit to one spin state.
    """
    if state is not None:
        dwells = [d for d in dwells if d[0] == state]
    d = _durations(dwells)
    if d.size < MIN_DWELLS:
        raise DomainError(f"need at least {MIN_DWELLS} dwell intervals, got {d.size}")
    if bin_width <= 0 or np.any(d <= 0):
        raise DomainError("bin width and durations must be positive")
    tau = float(d.mean())
    tau_err = tau / math.sqrt(d.size)
    n_bins = int(math.floor(d.max() / bin_width)) + 1
    edges = bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(d, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    lsq_tau, lsq_err, degenerate = math.nan, math.nan, True
    if keep.sum() >= 3:
        # weighted fit of log counts; Poisson weights sqrt(counts)
        w = np.sqrt(counts[keep])
        a = np.column_stack((np.ones(keep.sum()), centers[keep])) * w[:, None]
        b = np.log(counts[keep]) * w
        coef, *_ = np.linalg.lstsq(a, b, rcond=None)
        slope = coef[1]
        if slope < 0:
            cov = np.linalg.inv(a.T @ a)
            lsq_tau = -1.0 / slope
            lsq_err = math.sqrt(cov[1, 1]) / slope ** 2
            degenerate = False
    return WaitingTimeHistogram(edges, counts, tau, tau_err, lsq_tau, lsq_err, degenerate,
                                int(d.size), float(d.sum()))


@dataclass(frozen=True)
class ConditionalProbability:
    probability: float
    lower: float
    upper: float
    n_condition: int
    n_success: int

    @property
    def sigma(self) -> float:
        p = self.probability
        return math.sqrt(p * (1 - p) / self.n_condition)


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    z = stats.norm.ppf(0.5 + confidence / 2)
    p = k / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return lo, hi


def conditional_probability(outcome1, outcome2, condition: Spin = Spin.BRIGHT,
                            confidence: float = 0.95) -> ConditionalProbability:
    """P(second read bright | first read == condition) with a Wilson interval.

    Outcomes are booleans, True meaning read as bright (a click).
    """
    o1 = np.asarray(outcome1, dtype=bool)
    o2 = np.asarray(outcome2, dtype=bool)
    if o1.shape != o2.shape:
        raise DomainError("outcome arrays differ in length")
    sel = o1 if Spin(condition) == Spin.BRIGHT else ~o1
    n = int(sel.sum())
    if n == 0:
        raise DomainError("no pair satisfies the condition")
    k = int(o2[sel].sum())
    lo, hi = wilson_interval(k, n, confidence)
    return ConditionalProbability(k / n, lo, hi, n, k)


@dataclass(frozen=True)
class DecayFit:
    tau: float
    tau_error: float
    p0: float
    p_inf: float
    covariance: np.ndarray
    residual: float


def decay_model(tau, p0, p_inf, tau_fit):
    return p_inf + (p0 - p_inf) * np.exp(-np.asarray(tau) / tau_fit)


def fit_conditional_decay(delays, probabilities, sigma=None) -> DecayFit:
    """Fit p(t) = p_inf + (p0 - p_inf) exp(-t / tau) to a delay sweep."""
    x = np.asarray(delays, dtype=float)
    y = np.asarray(probabilities, dtype=float)
    if x.size < 5 or x.shape != y.shape:
        raise DomainError("need at least 5 delay points")
    s = None if sigma is None else np.asarray(sigma, dtype=float)
    span = float(x.max() - x.min())
    if span <= 0:
        raise DomainError("delays must span a range")
    guess = (y[np.argmin(x)], y[np.argmax(x)], span / 3)
    try:
        popt, pcov = optimize.curve_fit(decay_model, x, y, p0=guess, sigma=s,
                                        absolute_sigma=s is not None,
                                        bounds=([-np.inf, -np.inf, 1e-9], [np.inf, np.inf, np.inf]),
                                        xtol=1e-12, ftol=1e-12, max_nfev=2000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"decay fit did not converge: {exc}") from exc
    res = float(np.sum((decay_model(x, *popt) - y) ** 2))
    p0, p_inf, tau = popt
    amp_err = math.sqrt(abs(pcov[0, 0]) + abs(pcov[1, 1]) - 2 * pcov[0, 1]) if np.all(np.isfinite(pcov)) else math.inf
    tau_err = math.sqrt(pcov[2, 2]) if np.isfinite(pcov[2, 2]) else math.inf
    if abs(p0 - p_inf) <= max(3 * amp_err, 1e-9) or not math.isfinite(tau_err) or tau > 1e3 * span:
        raise FitError("no resolvable decay in the sweep (flat or unbounded time constant)",
                       residual=res, params=tuple(popt))
    return DecayFit(float(tau), float(tau_err), float(p0), float(p_inf), pcov, res)
