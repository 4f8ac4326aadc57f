"""Event-driven Monte Carlo of pulsed (and CW) spin readout.

Within a readout window the spin is a two-state telegraph process. While
bright, the emitter decays at ``excited_population / radiative_lifetime``;
each decay is exclusively either a back-action decay that flips the spin
(probability ``1/(R+1)``), a detected photon (probability ``eta``) or a lost
photon. Laser leakage adds a Poisson click process during the pulse. A
registered click blinds the detector for ``detector_dead_time``; only the
first registered click of a pulse is kept in the record.

All randomness comes from :mod:`spinreadout.rng`; repetition ``k`` always
consumes stream ``k``, so results do not depend on ``workers``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .core import DomainError, ReadoutScenario, Source, Spin
from .rng import RngContract, stream_key, uniform

MEMORY_BUDGET_BYTES = 1 << 30
_NEVER = -1.0e300
_ONE = np.uint64(1)


class ResourceError(RuntimeError):
    """The requested simulation would exceed the configured memory budget."""


# --------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True)
def _evolve(key, ctr, spin, duration, k_bd, k_db):
    """Free co-tunnelling evolution for ``duration`` ns."""
    t = 0.0
    while True:
        k = k_bd if spin == 0 else k_db
        if k <= 0.0:
            break
        t += -math.log(uniform(key, ctr)) / k
        ctr += _ONE
        if t >= duration:
            break
        spin = 1 - spin
    return ctr, spin


@nb.njit(cache=True, nogil=True)
def _window(key, ctr, spin, t_end, r_emit, rise, eta, q, k_bd, k_db, lam, dead, dead_until,
            flip_buf, click_buf, src_buf):
    """Simulate one driven window [0, t_end).

    Returns (ctr, spin, dead_until, n_flips, n_clicks); the buffers receive
    as many entries as fit, the counts are exact.
    """
    nflip = 0
    nclick = 0
    t = 0.0
    bright_since = 0.0
    fcap = flip_buf.shape[0]
    ccap = click_buf.shape[0]
    while True:
        if spin == 0:
            r_e = r_emit
            k_f = k_bd
        else:
            r_e = 0.0
            k_f = k_db
        tot = r_e + k_f + lam
        if tot <= 0.0:
            break
        t += -math.log(uniform(key, ctr)) / tot
        ctr += _ONE
        if t >= t_end:
            break
        x = uniform(key, ctr) * tot
        ctr += _ONE
        if x < r_e:
            if rise > 0.0:
                accept = -math.expm1(-(t - bright_since) / rise)
                reject = uniform(key, ctr) >= accept
                ctr += _ONE
                if reject:
                    continue
            y = uniform(key, ctr)
            ctr += _ONE
            if y < q:
                spin = 1
                if nflip < fcap:
                    flip_buf[nflip] = t
                nflip += 1
            elif y < q + eta:
                if t >= dead_until:
                    if nclick < ccap:
                        click_buf[nclick] = t
                        src_buf[nclick] = 1
                    nclick += 1
                    dead_until = t + dead
        elif x < r_e + k_f:
            spin = 1 - spin
            if spin == 0:
                bright_since = t
            if nflip < fcap:
                flip_buf[nflip] = t
            nflip += 1
        else:
            if t >= dead_until:
                if nclick < ccap:
                    click_buf[nclick] = t
                    src_buf[nclick] = 2
                nclick += 1
                dead_until = t + dead
    return ctr, spin, dead_until, nflip, nclick


@nb.njit(cache=True, nogil=True)
def _ensemble_kernel(seed, start, stop, p_bright, gap, t_pulse, r_emit, rise, eta, q, k_bd, k_db,
                     lam, dead, init_spin, click, source, final_spin, flips, nflips):
    cbuf = np.empty(1)
    sbuf = np.empty(1, dtype=np.int8)
    for k in range(start, stop):
        key = stream_key(seed, np.uint64(k))
        ctr = np.uint64(0)
        spin = 0 if uniform(key, ctr) < p_bright else 1
        ctr += _ONE
        ctr, spin = _evolve(key, ctr, spin, gap, k_bd, k_db)
        init_spin[k] = spin
        ctr, spin, _, nf, nc = _window(key, ctr, spin, t_pulse, r_emit, rise, eta, q, k_bd, k_db,
                                       lam, dead, _NEVER, flips[k], cbuf, sbuf)
        nflips[k] = nf
        final_spin[k] = spin
        if nc > 0:
            click[k] = cbuf[0]
            source[k] = sbuf[0]
        else:
            click[k] = np.nan
            source[k] = 0


@nb.njit(cache=True, nogil=True)
def _two_pulse_kernel(seed, start, stop, p_bright, gap, t_pulse, delay, carry_dead, r_emit, rise,
                      eta, q, k_bd, k_db, lam, dead, spin1, spin2, click1, click2):
    cbuf = np.empty(1)
    sbuf = np.empty(1, dtype=np.int8)
    fbuf = np.empty(0)
    for k in range(start, stop):
        key = stream_key(seed, np.uint64(k))
        ctr = np.uint64(0)
        spin = 0 if uniform(key, ctr) < p_bright else 1
        ctr += _ONE
        ctr, spin = _evolve(key, ctr, spin, gap, k_bd, k_db)
        spin1[k] = spin
        ctr, spin, dead_until, _, nc = _window(key, ctr, spin, t_pulse, r_emit, rise, eta, q, k_bd,
                                               k_db, lam, dead, _NEVER, fbuf, cbuf, sbuf)
        click1[k] = cbuf[0] if nc > 0 else np.nan
        ctr, spin = _evolve(key, ctr, spin, delay, k_bd, k_db)
        spin2[k] = spin
        dead_until = dead_until - t_pulse - delay if carry_dead else _NEVER
        ctr, spin, _, _, nc = _window(key, ctr, spin, t_pulse, r_emit, rise, eta, q, k_bd, k_db,
                                      lam, dead, dead_until, fbuf, cbuf, sbuf)
        click2[k] = cbuf[0] if nc > 0 else np.nan


@nb.njit(cache=True, nogil=True)
def _train_kernel(key, n_pulses, p_bright, spacing, t_pulse, r_emit, rise, eta, q, k_bd, k_db, lam,
                  dead, spin_at_start, click):
    cbuf = np.empty(1)
    sbuf = np.empty(1, dtype=np.int8)
    fbuf = np.empty(0)
    ctr = np.uint64(0)
    spin = 0 if uniform(key, ctr) < p_bright else 1
    ctr += _ONE
    dead_until = _NEVER
    for i in range(n_pulses):
        if i > 0:
            ctr, spin = _evolve(key, ctr, spin, spacing, k_bd, k_db)
            dead_until -= t_pulse + spacing
        spin_at_start[i] = spin
        ctr, spin, dead_until, _, nc = _window(key, ctr, spin, t_pulse, r_emit, rise, eta, q, k_bd,
                                               k_db, lam, dead, dead_until, fbuf, cbuf, sbuf)
        click[i] = cbuf[0] if nc > 0 else np.nan


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class DetectionRecord:
    repetition_index: int
    detection_time: Optional[float]
    detection_source: Source
    true_initial_spin: Spin
    spin_flip_times: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class TraceEnsemble:
    """Columnar store of one ensemble; ``records`` materialises DetectionRecords."""

    scenario: ReadoutScenario
    seed: int
    initial_spin: np.ndarray   # int8, Spin values
    detection_time: np.ndarray  # float64, NaN when no click
    source: np.ndarray          # int8, Source values
    final_spin: np.ndarray
    flip_times: np.ndarray      # (n, capacity), valid up to flip_count
    flip_count: np.ndarray

    def __len__(self) -> int:
        return self.detection_time.shape[0]

    def record(self, k: int) -> DetectionRecord:
        t = self.detection_time[k]
        return DetectionRecord(
            repetition_index=k,
            detection_time=None if np.isnan(t) else float(t),
            detection_source=Source(int(self.source[k])),
            true_initial_spin=Spin(int(self.initial_spin[k])),
            spin_flip_times=tuple(float(x) for x in self.flip_times[k, :self.flip_count[k]]),
        )

    @property
    def records(self) -> list[DetectionRecord]:
        return [self.record(k) for k in range(len(self))]

    @property
    def detected(self) -> np.ndarray:
        return ~np.isnan(self.detection_time)

    def same_as(self, other: "TraceEnsemble") -> bool:
        """Bit-level equality of all simulated columns."""
        cols = ("initial_spin", "detection_time", "source", "final_spin", "flip_count")
        if not all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True) for c in cols):
            return False
        for k in range(len(self)):
            m = self.flip_count[k]
            if not np.array_equal(self.flip_times[k, :m], other.flip_times[k, :m]):
                return False
        return True


def _kernel_params(s: ReadoutScenario):
    k_bd, k_db = s.flip_rates()
    return (s.emission_rate, s.rise_time, s.overall_efficiency, s.backaction_probability,
            k_bd, k_db, s.leakage_rate, s.detector_dead_time)


def _chunks(n: int, workers: int):
    workers = max(1, int(workers))
    edges = np.linspace(0, n, workers + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunked(fn, n: int, workers: int):
    chunks = _chunks(n, workers)
    if len(chunks) == 1:
        fn(*chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for f in [pool.submit(fn, a, b) for a, b in chunks]:
            f.result()


def _u64(seed: int) -> np.uint64:
    RngContract(seed, 0)  # range check
    return np.uint64(seed)


def simulate_repetition(scenario: ReadoutScenario, rng: RngContract, initial_spin: Spin | int,
                        flip_capacity: int = 256) -> DetectionRecord:
    """One readout pulse starting from ``initial_spin``."""
    spin0 = Spin(int(initial_spin))
    fbuf = np.empty(flip_capacity)
    cbuf = np.empty(1)
    sbuf = np.empty(1, dtype=np.int8)
    _, _, _, nf, nc = _window(np.uint64(rng.key), np.uint64(0), int(spin0), scenario.pulse_duration,
                              *_kernel_params(scenario), _NEVER, fbuf, cbuf, sbuf)
    if nf > flip_capacity:
        return simulate_repetition(scenario, rng, initial_spin, flip_capacity=2 * nf)
    return DetectionRecord(
        repetition_index=rng.stream_id,
        detection_time=float(cbuf[0]) if nc else None,
        detection_source=Source(int(sbuf[0])) if nc else Source.NONE,
        true_initial_spin=spin0,
        spin_flip_times=tuple(float(x) for x in fbuf[:nf]),
    )


def simulate_ensemble(scenario: ReadoutScenario, seed: int, workers: int = 1,
                      memory_budget: int = MEMORY_BUDGET_BYTES,
                      flip_capacity: int = 4) -> TraceEnsemble:
    """Simulate ``scenario.n_repetitions`` independent readout repetitions.

    Before each pulse the spin drawn from the occupancy relaxes under
    co-tunnelling for the inter-pulse gap.
    """
    n = scenario.n_repetitions
    if n < 1:
        raise DomainError("n_repetitions must be >= 1")
    bytes_needed = n * (8 * (2 + flip_capacity) + 3)
    if bytes_needed > memory_budget:
        raise ResourceError(f"ensemble needs ~{bytes_needed} bytes, budget is {memory_budget}")
    init_spin = np.empty(n, dtype=np.int8)
    final_spin = np.empty(n, dtype=np.int8)
    source = np.empty(n, dtype=np.int8)
    click = np.empty(n)
    flips = np.zeros((n, flip_capacity))
    nflips = np.empty(n, dtype=np.int64)
    seed64 = _u64(seed)
    gap = scenario.pulse_repetition_time - scenario.pulse_duration
    params = _kernel_params(scenario)

    def run(a, b):
        _ensemble_kernel(seed64, a, b, scenario.p_bright, gap, scenario.pulse_duration, *params,
                         init_spin, click, source, final_spin, flips, nflips)

    _run_chunked(run, n, workers)
    most = int(nflips.max())
    if most > flip_capacity:
        return simulate_ensemble(scenario, seed, workers, memory_budget, flip_capacity=most)
    return TraceEnsemble(scenario, int(seed), init_spin, click, source, final_spin, flips, nflips)


@dataclass(frozen=True, eq=False)
class TwoPulseResult:
    delay: float
    spin1: np.ndarray
    spin2: np.ndarray
    click1: np.ndarray
    click2: np.ndarray

    @property
    def outcome1(self) -> np.ndarray:
        """True where the first pulse was read as bright."""
        return ~np.isnan(self.click1)

    @property
    def outcome2(self) -> np.ndarray:
        return ~np.isnan(self.click2)


def simulate_two_pulse(scenario: ReadoutScenario, delay: float, seed: int,
                       enforce_dead_time: bool = True, workers: int = 1) -> TwoPulseResult:
    """Two readout pulses of ``pulse_duration`` separated by a free-evolution gap ``delay``.

    ``delay`` runs from the end of the first pulse to the start of the
    second. With ``enforce_dead_time`` the gap must be at least the dead
    time and a click in pulse one keeps the detector blind into pulse two;
    without it the two pulses are read by independent detector windows.
    """
    if delay < 0:
        raise DomainError("delay must be >= 0")
    if enforce_dead_time and delay < scenario.detector_dead_time:
        raise DomainError(f"delay {delay} ns is shorter than the detector dead time "
                          f"{scenario.detector_dead_time} ns")
    n = scenario.n_repetitions
    spin1 = np.empty(n, dtype=np.int8)
    spin2 = np.empty(n, dtype=np.int8)
    click1 = np.empty(n)
    click2 = np.empty(n)
    seed64 = _u64(seed)
    gap = scenario.pulse_repetition_time - scenario.pulse_duration
    params = _kernel_params(scenario)

    def run(a, b):
        _two_pulse_kernel(seed64, a, b, scenario.p_bright, gap, scenario.pulse_duration, float(delay),
                          enforce_dead_time, *params, spin1, spin2, click1, click2)

    _run_chunked(run, n, workers)
    return TwoPulseResult(float(delay), spin1, spin2, click1, click2)


@dataclass(frozen=True, eq=False)
class PulseTrain:
    period: float
    pulse_duration: float
    true_spin: np.ndarray  # spin at each pulse start
    click: np.ndarray      # click time within each pulse, NaN if none

    @property
    def pulse_starts(self) -> np.ndarray:
        return np.arange(self.click.shape[0]) * self.period

    @property
    def clicked(self) -> np.ndarray:
        return ~np.isnan(self.click)


def simulate_pulse_train(scenario: ReadoutScenario, n_pulses: int, seed: int, spacing: float = 12.0,
                         pulse_duration: Optional[float] = None, stream_id: int = 0) -> PulseTrain:
    """Back-to-back readout pulses with ``spacing`` ns between the end of one and the start of the next.

    The spin evolves continuously through the whole train and the detector
    dead time carries over pulse boundaries.
    """
    if n_pulses < 1:
        raise DomainError("n_pulses must be >= 1")
    if spacing < 0:
        raise DomainError("spacing must be >= 0")
    t_pulse = scenario.pulse_duration if pulse_duration is None else float(pulse_duration)
    spin = np.empty(n_pulses, dtype=np.int8)
    click = np.empty(n_pulses)
    key = np.uint64(RngContract(seed, stream_id).key)
    _train_kernel(key, int(n_pulses), scenario.p_bright, float(spacing), t_pulse,
                  *_kernel_params(scenario), spin, click)
    return PulseTrain(t_pulse + spacing, t_pulse, spin, click)


@dataclass(frozen=True, eq=False)
class PhotonStream:
    duration: float
    timestamps: np.ndarray   # registered clicks, ns, ascending
    sources: np.ndarray
    flip_times: np.ndarray   # true spin flips
    initial_spin: Spin


def simulate_cw_stream(scenario: ReadoutScenario, duration: float, seed: int,
                       dead_time: Optional[float] = None, leakage_rate: Optional[float] = None,
                       stream_id: int = 0) -> PhotonStream:
    """Continuous-wave drive for ``duration`` ns.

    ``dead_time`` defaults to the scenario's; several detectors behind beam
    splitters are represented by a reduced effective dead time.
    """
    if duration <= 0:
        raise DomainError("duration must be positive")
    s = scenario
    dead = s.detector_dead_time if dead_time is None else float(dead_time)
    lam = s.leakage_rate if leakage_rate is None else float(leakage_rate)
    key = np.uint64(RngContract(seed, stream_id).key)
    p = _kernel_params(s)
    spin0 = 0 if uniform(key, np.uint64(0)) < s.p_bright else 1
    k_bd, k_db = s.flip_rates()
    expect_clicks = duration * (s.detection_rate + lam) + 64
    expect_flips = duration * (k_bd + k_db + s.emission_rate * s.backaction_probability) + 64
    ccap, fcap = int(1.2 * expect_clicks), int(1.2 * expect_flips)
    while True:
        fbuf = np.empty(fcap)
        cbuf = np.empty(ccap)
        sbuf = np.empty(ccap, dtype=np.int8)
        _, _, _, nf, nc = _window(key, np.uint64(1), spin0, float(duration), p[0], p[1], p[2], p[3],
                                  p[4], p[5], lam, dead, _NEVER, fbuf, cbuf, sbuf)
        if nf <= fcap and nc <= ccap:
            break
        ccap, fcap = max(ccap, nc), max(fcap, nf)
    return PhotonStream(float(duration), cbuf[:nc].copy(), sbuf[:nc].copy(), fbuf[:nf].copy(), Spin(spin0))


def telegraph_poisson_stream(rate_on: float, tau_on: float, tau_off: float, duration: float,
                             seed: int, rate_off: float = 0.0) -> np.ndarray:
    """Poisson photons gated by a two-state telegraph signal (ideal detector).

    Intended as a synthetic blinking source for correlation analysis.
    """
    if min(tau_on, tau_off, duration) <= 0:
        raise DomainError("dwell times and duration must be positive")
    rng = np.random.default_rng(seed)
    # mean cycle tau_on + tau_off; draw enough dwells in one go
    n_cycles = int(duration / (tau_on + tau_off) * 1.2) + 16
    on = rng.uniform() < tau_on / (tau_on + tau_off)
    chunks = []
    t = 0.0
    while t < duration:
        first = np.where(np.arange(2 * n_cycles) % 2 == 0, on, not on)
        dwell = rng.exponential(np.where(first, tau_on, tau_off))
        edges = t + np.concatenate(([0.0], np.cumsum(dwell)))
        for a, b, is_on in zip(edges[:-1], edges[1:], first):
            if a >= duration:
                break
            b = min(b, duration)
            r = rate_on if is_on else rate_off
            if r > 0:
                k = rng.poisson(r * (b - a))
                chunks.append(rng.uniform(a, b, size=k))
        t = edges[-1]
        on = not first[-1]
    if not chunks:
        return np.empty(0)
    return np.sort(np.concatenate(chunks))
