"""Domain types, scenario presets and the efficiency budget.

Units: times in nanoseconds except ``radiative_lifetime_ps``; rates in ns^-1
(equivalently GHz for ordinary frequencies).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Optional


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class FitError(RuntimeError):
    """A fit did not converge or the data cannot constrain the model."""

    def __init__(self, message: str, residual: float = math.nan, params: tuple = ()):
        super().__init__(message)
        self.residual = residual
        self.params = tuple(params)


class Geometry(str, enum.Enum):
    FARADAY = "Faraday"
    VOIGT = "Voigt"


class Spin(enum.IntEnum):
    BRIGHT = 0
    DARK = 1


class Source(enum.IntEnum):
    NONE = 0
    EMITTER = 1
    LEAKAGE = 2


# Lifetime x Purcell factor at the operating point used for readout
# (110 ps at F_P = 6.1). The 0 T point (79 ps at 8.5) gives the same product.
LIFETIME_PURCELL_PRODUCT_PS = 110.0 * 6.1


@dataclass(frozen=True)
class EfficiencyBudget:
    beta: float
    kappa_top_fraction: float
    eta_optics: float
    eta_coupler: float
    eta_detector: float

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (0.0 <= v <= 1.0):
                raise DomainError(f"{f.name}={v} outside [0, 1]")


def overall_efficiency(budget: EfficiencyBudget) -> float:
    """Probability that an exciton produces a detector click.

    Factor ranges are checked when the budget is constructed.
    """
    return (budget.beta * budget.kappa_top_fraction * budget.eta_optics
            * budget.eta_coupler * budget.eta_detector)


# Factor sets used for the presets.
BUDGET_ZERO_FIELD = EfficiencyBudget(0.86, 0.96, 0.69, 0.80, 0.82)
BUDGET_FARADAY_PREDICTED = EfficiencyBudget(0.80, 0.96, 0.69, 0.80, 0.82)
# optics x coupler = 0.90 is only known as a product; carried in eta_optics.
BUDGET_OPTIMIZED = EfficiencyBudget(12.0 / 13.0, 0.96, 0.90, 1.0, 0.95)


def leakage_rate_from_window(prob_in_window: float, window: float) -> float:
    """Poisson rate (ns^-1) giving probability ``prob_in_window`` of >= 1 click in ``window`` ns."""
    if not (0.0 <= prob_in_window < 1.0):
        raise DomainError(f"window probability must be in [0, 1), got {prob_in_window}")
    if not window > 0:
        raise DomainError(f"window must be positive, got {window}")
    return -math.log1p(-prob_in_window) / window


def window_probability(rate: float, window: float) -> float:
    """Inverse of :func:`leakage_rate_from_window`."""
    return -math.expm1(-rate * window)


def _rate(time_ns: float) -> float:
    return 0.0 if math.isinf(time_ns) else 1.0 / time_ns


@dataclass(frozen=True)
class ReadoutScenario:
    """Parameter set of one readout configuration.

    ``spin_on_time``/``spin_off_time`` override the symmetric
    ``spin_flip_time`` with mean bright/dark dwell times. ``rise_time`` > 0
    switches on an exponential turn-on of the exciton population at the
    start of each bright interval; 0 means instantaneous.
    """

    overall_efficiency: float
    radiative_lifetime_ps: float
    spin_flip_time: float
    branching_ratio: float
    leakage_prob_3ns: float
    pulse_duration: float
    pulse_repetition_time: float
    purcell_factor: float = 6.1
    bare_decay_rate: float = 0.3
    excited_population: float = 0.5
    detector_dead_time: float = 12.0
    n_repetitions: int = 100_000
    p_bright: float = 0.5
    p_dark: float = 0.5
    geometry: Geometry = Geometry.FARADAY
    spin_on_time: Optional[float] = None
    spin_off_time: Optional[float] = None
    rise_time: float = 0.0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if isinstance(self.geometry, str) and not isinstance(self.geometry, Geometry):
            object.__setattr__(self, "geometry", parse_geometry(self.geometry))
        object.__setattr__(self, "n_repetitions", int(self.n_repetitions))
        self.validate()

    def validate(self) -> None:
        def check(cond, msg):
            if not cond:
                raise DomainError(msg)

        check(0.0 <= self.overall_efficiency <= 1.0, "overall_efficiency must be in [0, 1]")
        check(self.radiative_lifetime_ps > 0, "radiative_lifetime_ps must be > 0")
        check(self.spin_flip_time > 0, "spin_flip_time must be > 0")
        check(self.branching_ratio > 0, "branching_ratio must be > 0")
        check(0.0 <= self.leakage_prob_3ns < 1.0, "leakage_prob_3ns must be in [0, 1)")
        check(self.purcell_factor >= 0, "purcell_factor must be >= 0")
        check(0.0 <= self.excited_population <= 1.0, "excited_population must be in [0, 1]")
        check(self.detector_dead_time >= 0, "detector_dead_time must be >= 0")
        check(self.pulse_duration > 0, "pulse_duration must be > 0")
        check(self.pulse_duration < self.pulse_repetition_time,
              "pulse_duration must be shorter than pulse_repetition_time")
        check(self.n_repetitions >= 1, "n_repetitions must be >= 1")
        check(0.0 <= self.p_bright <= 1.0 and 0.0 <= self.p_dark <= 1.0, "occupancy out of range")
        check(abs(self.p_bright + self.p_dark - 1.0) <= 1e-12, "p_bright + p_dark must equal 1")
        check(self.rise_time >= 0, "rise_time must be >= 0")
        for name in ("spin_on_time", "spin_off_time"):
            v = getattr(self, name)
            check(v is None or v > 0, f"{name} must be > 0")
        # emission outcomes (click, back-action flip) are exclusive categories
        check(self.overall_efficiency + self.backaction_probability <= 1.0 + 1e-12,
              "overall_efficiency + 1/(branching_ratio + 1) must not exceed 1")
        if self.geometry is Geometry.VOIGT:
            check(math.isclose(self.branching_ratio, self.purcell_factor, rel_tol=1e-9),
                  "Voigt geometry requires branching_ratio == purcell_factor")

    # derived quantities -------------------------------------------------

    @property
    def radiative_lifetime(self) -> float:
        """Radiative lifetime in ns."""
        return self.radiative_lifetime_ps * 1e-3

    @property
    def emission_rate(self) -> float:
        return self.excited_population / self.radiative_lifetime

    @property
    def detection_rate(self) -> float:
        return self.overall_efficiency * self.emission_rate

    @property
    def backaction_probability(self) -> float:
        return 1.0 / (self.branching_ratio + 1.0)

    @property
    def cycling_fraction(self) -> float:
        return self.branching_ratio / (self.branching_ratio + 1.0)

    @property
    def tau_on(self) -> float:
        return self.spin_flip_time if self.spin_on_time is None else self.spin_on_time

    @property
    def tau_off(self) -> float:
        return self.spin_flip_time if self.spin_off_time is None else self.spin_off_time

    def flip_rates(self) -> tuple[float, float]:
        """Co-tunnelling rates (bright->dark, dark->bright) in ns^-1."""
        return _rate(self.tau_on), _rate(self.tau_off)

    @property
    def leakage_rate(self) -> float:
        return leakage_rate_from_window(self.leakage_prob_3ns, 3.0)

    def replace(self, **changes) -> "ReadoutScenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["geometry"] = self.geometry.value
        return d


def parse_geometry(value: str) -> Geometry:
    for g in Geometry:
        if value.strip().lower() == g.value.lower():
            return g
    raise DomainError(f"unknown geometry {value!r}")


PRESET_NAMES = ("ZeroField", "Faraday2T", "Optimized", "VoigtPresent", "VoigtOptimized")


def lifetime_for_purcell(purcell_factor: float) -> float:
    """Radiative lifetime (ps) scaled from the measured operating point."""
    return LIFETIME_PURCELL_PRODUCT_PS / purcell_factor


def scenario_preset(name: str) -> ReadoutScenario:
    if name == "ZeroField":
        # <0.1 % leakage per 2 ns pulse, re-expressed per 3 ns
        leak = window_probability(leakage_rate_from_window(0.001, 2.0), 3.0)
        return ReadoutScenario(
            name=name,
            overall_efficiency=0.37,
            radiative_lifetime_ps=79.0,
            purcell_factor=8.5,
            spin_flip_time=math.inf,
            branching_ratio=math.inf,
            leakage_prob_3ns=leak,
            pulse_duration=2.0,
            pulse_repetition_time=100.0,
            # degenerate transitions: every spin state is driven
            p_bright=1.0,
            p_dark=0.0,
        )
    faraday = ReadoutScenario(
        name="Faraday2T",
        overall_efficiency=0.25,
        radiative_lifetime_ps=110.0,
        purcell_factor=6.1,
        spin_flip_time=158.0,
        branching_ratio=600.0,
        leakage_prob_3ns=0.014,
        pulse_duration=5.0,
        pulse_repetition_time=100.0,
    )
    optimized = faraday.replace(
        name="Optimized",
        overall_efficiency=0.76,
        purcell_factor=12.0,
        radiative_lifetime_ps=lifetime_for_purcell(12.0),
    )
    if name == "Faraday2T":
        return faraday
    if name == "Optimized":
        return optimized
    if name == "VoigtPresent":
        return faraday.replace(name=name, geometry=Geometry.VOIGT, branching_ratio=faraday.purcell_factor)
    if name == "VoigtOptimized":
        return optimized.replace(name=name, geometry=Geometry.VOIGT, branching_ratio=optimized.purcell_factor)
    raise DomainError(f"unknown preset {name!r}; expected one of {', '.join(PRESET_NAMES)}")
