"""Intensity correlations, bunching fits and the three-level rate model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .core import DomainError, FitError, ReadoutScenario

DEFAULT_EXCLUSION = 5 * 0.110  # ns, five radiative lifetimes at the 2 T operating point


@dataclass(frozen=True, eq=False)
class CorrelationCurve:
    delays: np.ndarray
    g2: np.ndarray
    baseline: float = 1.0
    sigma: Optional[np.ndarray] = None  # per-bin standard error, if known
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.shape(self.delays) != np.shape(self.g2):
            raise DomainError("delays and g2 differ in shape")


# --------------------------------------------------------------------------
# estimation from timestamps


def g2_estimate(timestamps, bin_width: float, max_delay: float,
                duration: Optional[float] = None, chunk: int = 1 << 18) -> CorrelationCurve:
    """All-pairs delay histogram normalised to the uncorrelated expectation.

    Bins are [j*w, (j+1)*w) in |delay|; the returned curve is mirrored to
    negative delays (bin centres) so it is symmetric by construction. The
    expectation per bin is ``N(N-1)/T^2 * (T - tau) * w`` for a stream of
    ``N`` clicks spanning ``T``.
    """
    t = np.asarray(timestamps, dtype=float)
    if t.size < 2:
        raise DomainError("need at least 2 timestamps")
    if np.any(np.diff(t) < 0):
        raise DomainError("timestamps must be sorted ascending")
    if bin_width <= 0 or max_delay < bin_width:
        raise DomainError("need bin_width > 0 and max_delay >= bin_width")
    n_bins = int(math.floor(max_delay / bin_width + 1e-9))
    edges = bin_width * np.arange(n_bins + 1)
    # cumulative pair counts below each edge, accumulated in chunks of origins
    below = np.zeros(n_bins + 1, dtype=np.int64)
    for a in range(0, t.size, chunk):
        origins = t[a:a + chunk]
        idx = np.arange(a, a + origins.size)
        for j, e in enumerate(edges[1:], start=1):
            later = np.searchsorted(t, origins + e, side="left") - (idx + 1)
            below[j] += int(np.clip(later, 0, None).sum())
    counts = np.diff(below)
    span = float(t[-1] - t[0]) if duration is None else float(duration)
    if span <= 0:
        raise DomainError("timestamps span zero time")
    centers = 0.5 * (edges[:-1] + edges[1:])
    expected = t.size * (t.size - 1) / span ** 2 * np.clip(span - centers, 0, None) * bin_width
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(expected > 0, counts / expected, np.nan)
        sig = np.where(expected > 0, np.sqrt(np.maximum(counts, 1)) / expected, np.nan)
    delays = np.concatenate((-centers[::-1], centers))
    return CorrelationCurve(delays, np.concatenate((g[::-1], g)), 1.0,
                            np.concatenate((sig[::-1], sig)), np.concatenate((counts[::-1], counts)))


# --------------------------------------------------------------------------
# bunching model


def bunching_model(tau, tau_on: float, tau_off: float) -> np.ndarray:
    """Blinking-emitter correlation 1 + (tau_off/tau_on) exp(-(1/tau_on + 1/tau_off)|tau|)."""
    return 1.0 + tau_off / tau_on * np.exp(-(1.0 / tau_on + 1.0 / tau_off) * np.abs(tau))


@dataclass(frozen=True)
class BunchingFit:
    tau_on: float
    tau_off: float
    amplitude: float
    correlation_time: float
    residual: float
    covariance: np.ndarray  # of (tau_on, tau_off)
    n_points: int

    @property
    def tau_on_error(self) -> float:
        return math.sqrt(self.covariance[0, 0])

    @property
    def tau_off_error(self) -> float:
        return math.sqrt(self.covariance[1, 1])


def bunching_fit(curve: CorrelationCurve, exclude_antibunching_window: float = DEFAULT_EXCLUSION,
                 max_iterations: int = 200) -> BunchingFit:
    """Least-squares fit of the bunching model over |tau| > the exclusion window.

    The fit runs on amplitude A = tau_off/tau_on and correlation time
    T = 1/(1/tau_on + 1/tau_off), then maps back via tau_off = T (1 + A)
    and tau_on = tau_off / A.
    """
    x = np.abs(np.asarray(curve.delays, dtype=float))
    y = np.asarray(curve.g2, dtype=float)
    sel = (x > exclude_antibunching_window) & np.isfinite(y)
    if curve.sigma is not None:
        sig = np.asarray(curve.sigma, dtype=float)
        sel &= np.isfinite(sig) & (sig > 0)
        w = 1.0 / sig[sel]
    else:
        w = np.ones(sel.sum())
    x, y = x[sel], y[sel]
    if x.size < 3:
        raise DomainError("fewer than 3 points outside the exclusion window")
    excess = y - 1.0
    a0 = float(np.mean(excess[np.argsort(x)[:max(3, x.size // 20)]]))
    if not a0 > 0:
        raise FitError("no bunching detectable: amplitude <= 0", params=(a0,))
    # initial correlation time from where the excess falls below a0/e
    below = np.flatnonzero(excess < a0 / math.e)
    t0 = float(np.sort(x)[0] if below.size == 0 else x[below].min())
    t0 = max(t0, float(np.min(x)) + 1e-9)

    def resid(p):
        a, tc = p
        return w * (a * np.exp(-x / tc) - excess)

    def jac(p):
        a, tc = p
        e = np.exp(-x / tc)
        return np.column_stack((w * e, w * a * e * x / tc ** 2))

    sol = optimize.least_squares(resid, (a0, t0), jac=jac, method="lm", xtol=1e-10,
                                 ftol=1e-15, gtol=1e-15, max_nfev=max_iterations * 3)
    a, tc = sol.x
    chi2 = float(np.sum(sol.fun ** 2))
    if not sol.success or not np.all(np.isfinite(sol.x)):
        raise FitError(f"bunching fit did not converge: {sol.message}", chi2, tuple(sol.x))
    dof = max(1, x.size - 2)
    jtj = sol.jac.T @ sol.jac
    try:
        cov_p = np.linalg.inv(jtj) * (chi2 / dof)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular normal matrix in bunching fit", chi2, tuple(sol.x)) from exc
    if not a > 0 or not tc > 0 or a <= 2 * math.sqrt(max(cov_p[0, 0], 0.0)):
        raise FitError("no bunching detectable: amplitude not significantly > 0", chi2, tuple(sol.x))
    tau_off = tc * (1 + a)
    tau_on = tau_off / a
    # d(tau_on, tau_off)/d(A, T)
    d = np.array([[-tc / a ** 2, (1 + a) / a],
                  [tc, 1 + a]])
    cov = d @ cov_p @ d.T
    return BunchingFit(float(tau_on), float(tau_off), float(a), float(tc), chi2, cov, int(x.size))


# --------------------------------------------------------------------------
# three-level rate model: 0 = bright ground, 1 = dark ground, 2 = exciton


@dataclass(frozen=True)
class RateModel:
    pump_rate: float
    gamma_s: float
    gamma_d: float
    k_bd: float
    k_db: float

    def __post_init__(self):
        for name in ("pump_rate", "gamma_s", "gamma_d", "k_bd", "k_db"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def from_scenario(cls, scenario: ReadoutScenario, saturation: float) -> "RateModel":
        """Pump at ``saturation`` times the saturation power: P = s * Gamma_total / 2."""
        if saturation < 0:
            raise DomainError("saturation must be >= 0")
        gamma_s = 1.0 / scenario.radiative_lifetime
        gamma_d = gamma_s / scenario.branching_ratio
        k_bd, k_db = scenario.flip_rates()
        return cls(saturation * (gamma_s + gamma_d) / 2.0, gamma_s, gamma_d, k_bd, k_db)

    def with_gamma_d(self, gamma_d: float) -> "RateModel":
        return RateModel(self.pump_rate, self.gamma_s, gamma_d, self.k_bd, self.k_db)

    @property
    def branching_ratio(self) -> float:
        return math.inf if self.gamma_d == 0 else self.gamma_s / self.gamma_d

    def generator(self) -> np.ndarray:
        """Matrix M with d(rho)/dt = M rho, rho = (bright, dark, exciton)."""
        p, gs, gd, kb, kd = self.pump_rate, self.gamma_s, self.gamma_d, self.k_bd, self.k_db
        return np.array([
            [-p - kb, kd, gs],
            [kb, -kd, gd],
            [p, 0.0, -gs - gd],
        ])

    @property
    def max_rate(self) -> float:
        return float(np.max(np.abs(np.diag(self.generator()))))


def rate_steady_state(model: RateModel) -> np.ndarray:
    """Stationary (rho_bright, rho_dark, rho_exciton)."""
    m = model.generator()
    if not np.any(m):
        raise DomainError("all rates are zero: steady state is not unique")
    a = m.copy()
    a[2, :] = 1.0
    b = np.array([0.0, 0.0, 1.0])
    try:
        with np.errstate(all="ignore"):
            rho = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DomainError("singular rate system: steady state is not unique") from exc
    if not np.all(np.isfinite(rho)) or np.max(np.abs(m @ rho)) > 1e-9 * max(1.0, model.max_rate):
        raise DomainError("singular rate system: steady state is not unique")
    rho = np.where(np.abs(rho) < 1e-15, 0.0, rho)
    return rho


def propagate(model: RateModel, rho0, times) -> np.ndarray:
    """rho(t) = expm(M t) rho0 for each t; returns shape (len(times), 3)."""
    m = model.generator()
    times = np.asarray(times, dtype=float)
    rho0 = np.asarray(rho0, dtype=float)
    vals, vecs = linalg.eig(m)
    if np.linalg.cond(vecs) < 1e8:
        coef = np.linalg.solve(vecs, rho0)
        out = (np.exp(np.outer(times, vals)) * coef) @ vecs.T
        return np.real(out)
    return np.array([linalg.expm(m * t) @ rho0 for t in times])


def _limit_from(model: RateModel, rho0) -> np.ndarray:
    # long-time limit of a reducible chain: keep only the zero modes
    m = model.generator()
    vals, vecs = linalg.eig(m)
    if np.linalg.cond(vecs) >= 1e8:
        raise DomainError("singular rate system: long-time limit is ill-conditioned")
    coef = np.linalg.solve(vecs, np.asarray(rho0, dtype=float))
    zero = np.abs(vals) <= 1e-12 * max(1.0, model.max_rate)
    return np.real(vecs[:, zero] @ coef[zero])


def g2_from_rates(model: RateModel, grid) -> CorrelationCurve:
    """g2(tau) = rho_x(tau | start in bright ground) / rho_x(steady state).

    When the chain is reducible (e.g. no spin flips at all) the steady state
    is the one reached from the bright ground state.
    """
    grid = np.asarray(grid, dtype=float)
    try:
        rho_ss = rate_steady_state(model)
    except DomainError:
        rho_ss = _limit_from(model, (1.0, 0.0, 0.0))
    if rho_ss[2] <= 0:
        raise DomainError("steady-state exciton population is zero")
    rho = propagate(model, (1.0, 0.0, 0.0), np.abs(grid))
    return CorrelationCurve(grid, rho[:, 2] / rho_ss[2], 1.0)


@dataclass(frozen=True)
class BranchingFit:
    branching_ratio: float
    lower: float
    upper: float
    gamma_d: float
    gamma_d_error: float
    residual: float


class NonIdentifiableError(FitError):
    """The residual landscape does not pin the branching ratio."""

    def __init__(self, message: str, lower_bound: float, residual: float = math.nan):
        super().__init__(message, residual)
        self.lower_bound = lower_bound


def fit_branching_ratio(measured: CorrelationCurve, template: RateModel,
                        exclude_antibunching_window: float = 0.0,
                        r_range: tuple[float, float] = (1.0, 1e6)) -> BranchingFit:
    """One-dimensional least squares over gamma_d with all other rates from ``template``.

    The interval is gamma_d +/- one standard error from the residual
    curvature, mapped to R = Gamma_s / gamma_d. Per-point ``sigma`` on the
    measured curve turns the objective into a chi-square.
    """
    x = np.asarray(measured.delays, dtype=float)
    y = np.asarray(measured.g2, dtype=float)
    weighted = measured.sigma is not None
    sel = np.isfinite(y) & (np.abs(x) >= exclude_antibunching_window)
    if weighted:
        sig = np.asarray(measured.sigma, dtype=float)
        sel &= np.isfinite(sig) & (sig > 0)
    x, y = x[sel], y[sel]
    if x.size < 3:
        raise DomainError("too few points to fit")
    w = 1.0 / sig[sel] if weighted else 1.0
    gs = template.gamma_s
    lo_log, hi_log = math.log(gs / r_range[1]), math.log(gs / r_range[0])

    def ssr_gamma(gd):
        return float(np.sum(((g2_from_rates(template.with_gamma_d(gd), x).g2 - y) * w) ** 2))

    def ssr_log(u):
        return ssr_gamma(math.exp(u))

    # coarse scan, then bounded refinement around the best cell
    grid = np.linspace(lo_log, hi_log, 41)
    vals = np.array([ssr_log(u) for u in grid])
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(ssr_log, bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-10})
    u = float(res.x)
    gd = math.exp(u)
    s_min = float(res.fun)
    # chi-square with known sigma, otherwise scale by the residual variance
    s2 = 1.0 if weighted else s_min / max(1, x.size - 1)
    h = max(1e-4 * gd, 1e-12)
    curv = (ssr_gamma(gd + h) - 2 * s_min + ssr_gamma(max(gd - h, 0.0))) / h ** 2
    at_edge = u - lo_log < 1e-3 * (hi_log - lo_log)
    if at_edge or not curv > 0:
        bound = gs / (gd + 2 * math.sqrt(2 * s2 / curv)) if curv > 0 else r_range[1]
        raise NonIdentifiableError("branching ratio not identifiable: residual flat toward R -> inf",
                                   lower_bound=bound, residual=s_min)
    sigma = math.sqrt(2 * s2 / curv)
    r = gs / gd
    lower = gs / (gd + sigma)
    upper = gs / (gd - sigma) if gd > sigma else math.inf
    if not math.isfinite(upper):
        raise NonIdentifiableError("branching ratio has no finite upper bound",
                                   lower_bound=lower, residual=s_min)
    return BranchingFit(r, lower, upper, gd, sigma, s_min)
