"""Command-line experiment runner.

    spinreadout --config Faraday2T --experiment fidelity --seed 1 --out runs/f2t

``--config`` takes a scenario file or a preset name. Scenario fields can be
overridden through ``SPINREADOUT_<FIELD>`` environment variables (for
example ``SPINREADOUT_SPIN_FLIP_TIME=200``). Every run writes
``manifest.json``, ``summary.json`` and experiment-specific CSV files.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import correlation as co
from . import io
from . import jumps as ju
from . import montecarlo as mc
from .core import (BUDGET_FARADAY_PREDICTED, BUDGET_OPTIMIZED, BUDGET_ZERO_FIELD, PRESET_NAMES,
                   DomainError, FitError, ReadoutScenario, Spin, overall_efficiency, scenario_preset)

ENV_PREFIX = "SPINREADOUT_"
EXPERIMENTS = ("count_fraction", "fidelity", "two_pulse_sweep", "jump_train", "cw_jumps", "g2",
               "rate_equations", "efficiency_budget", "prediction_suite")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

TWO_PULSE_DELAYS = (12.0, 25.0, 50.0, 75.0, 100.0, 150.0, 200.0, 300.0, 400.0)
READ_PULSE = 3.0       # ns, pulse length used for jump and two-pulse experiments
TRAIN_SPACING = 12.0   # ns between pulses
TRAIN_DURATION = 2.4e6  # ns of pulsed measurement
CW_DURATION = 5.0e6
CW_DEAD_TIME = 3.0     # four detectors behind splitters, 12 ns each
G2_DURATION = 2.0e6
PREDICTION_PRESETS = ("Optimized", "VoigtPresent", "VoigtOptimized")


@dataclasses.dataclass(frozen=True)
class RunManifest:
    scenario: dict
    experiment: str
    seed: int
    output_directory: str
    grid_step_ps: float
    workers: int
    tool_version: str = __version__
    timestamp: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            out[key[len(ENV_PREFIX):].lower()] = value
    return out


def resolve_scenario(config: str, overrides: dict | None = None) -> ReadoutScenario:
    """Scenario from a file, or from a preset name when no such file exists."""
    if not os.path.exists(config) and config in PRESET_NAMES:
        return io.parse_scenario(f"preset = {config}\n", f"<preset {config}>", overrides)
    return io.load_scenario(config, overrides)


def _grid(scenario: ReadoutScenario, step_ps: float, t_max: float | None = None) -> np.ndarray:
    return an.readout_grid(scenario.pulse_duration if t_max is None else t_max, step_ps * 1e-3)


# --------------------------------------------------------------------------
# experiments: each returns a results dict and writes its CSVs into ``out``


def exp_count_fraction(s, seed, out, step_ps, workers):
    ens = mc.simulate_ensemble(s, seed, workers=workers)
    curve = an.count_fraction(ens, _grid(s, step_ps))
    sigma = np.sqrt(curve.fractions * (1 - curve.fractions) / curve.n_repetitions)
    io.write_csv(out / "count_fraction.csv", ["t_ns", "count_fraction", "sigma"],
                 [curve.readout_times, curve.fractions, sigma])
    marks = [t for t in (1.0, 1.8, 3.0, 5.0) if t <= s.pulse_duration]
    return {"n_repetitions": len(ens),
            "count_fraction_at": {io.fmt(t): curve.at(t) for t in marks}}


def exp_fidelity(s, seed, out, step_ps, workers):
    g = _grid(s, step_ps)
    formula = an.formula_report(s, g)
    ens = mc.simulate_ensemble(s, seed, workers=workers)
    emp = an.empirical_report(ens, g, s.p_bright, s.p_dark)
    io.write_report_csv(out / "fidelity_formula.csv", formula)
    io.write_report_csv(out / "fidelity_montecarlo.csv", emp)
    return {"formula": io.report_summary(formula), "montecarlo": io.report_summary(emp),
            "n_repetitions": len(ens)}


def two_pulse_sweep(s, seed, delays=TWO_PULSE_DELAYS, workers=1, pulse=READ_PULSE):
    """Conditional probability P(bright, bright) sweep; returns rows and the decay fit."""
    sp = s.replace(pulse_duration=pulse)
    rows = []
    for i, d in enumerate(delays):
        res = mc.simulate_two_pulse(sp, d, seed + i, workers=workers)
        rows.append(ju.conditional_probability(res.outcome1, res.outcome2, Spin.BRIGHT))
    fit = ju.fit_conditional_decay(delays, [r.probability for r in rows], [r.sigma for r in rows])
    return rows, fit


def exp_two_pulse_sweep(s, seed, out, step_ps, workers):
    rows, fit = two_pulse_sweep(s, seed, workers=workers)
    io.write_csv(out / "two_pulse.csv", ["delay_ns", "probability", "lower", "upper", "n_condition"],
                 [list(TWO_PULSE_DELAYS), [r.probability for r in rows], [r.lower for r in rows],
                  [r.upper for r in rows], [r.n_condition for r in rows]])
    sp = s.replace(pulse_duration=READ_PULSE)
    formula = an.formula_report(sp, _grid(sp, step_ps))
    return {"tau_fit_ns": fit.tau, "tau_fit_error_ns": fit.tau_error, "p0": fit.p0, "p_inf": fit.p_inf,
            "one_minus_e_bright_3ns": 1 - float(formula.e_bright[-1])}


def jump_train(s, seed, duration=TRAIN_DURATION, spacing=TRAIN_SPACING, pulse=READ_PULSE):
    n = int(duration // (pulse + spacing))
    train = mc.simulate_pulse_train(s, n, seed, spacing=spacing, pulse_duration=pulse)
    return train, ju.track_from_train(train)


def exp_jump_train(s, seed, out, step_ps, workers):
    train, track = jump_train(s, seed)
    hist = ju.fit_waiting_times(ju.dwell_times(track), track.bin_width)
    io.write_track_csv(out / "track.csv", track)
    io.write_histogram_csv(out / "waiting_times.csv", hist)
    smooth = ju.fit_waiting_times(ju.dwell_times(ju.smooth_majority(track)), track.bin_width)
    return {"n_pulses": len(track), "period_ns": track.bin_width,
            "mle_ns": hist.fitted_time_constant, "mle_error_ns": hist.fitted_error,
            "lsq_ns": hist.lsq_time_constant, "n_dwells": hist.n_dwells,
            "smoothed_mle_ns": smooth.fitted_time_constant}


def exp_cw_jumps(s, seed, out, step_ps, workers):
    stream = mc.simulate_cw_stream(s, CW_DURATION, seed, dead_time=CW_DEAD_TIME)
    track = ju.assign_cw_states(stream.timestamps, CW_DURATION)
    hist = ju.fit_waiting_times(ju.dwell_times(track), track.bin_width)
    io.write_track_csv(out / "track.csv", track)
    io.write_histogram_csv(out / "waiting_times.csv", hist)
    io.write_timestamps_binary(out / "timestamps.bin", stream.timestamps)
    return {"duration_ns": CW_DURATION, "n_clicks": int(stream.timestamps.size),
            "mle_ns": hist.fitted_time_constant, "mle_error_ns": hist.fitted_error,
            "lsq_ns": hist.lsq_time_constant, "n_dwells": hist.n_dwells}


def exp_g2(s, seed, out, step_ps, workers):
    # correlation setups split the light over two detectors, so dead time is not limiting
    stream = mc.simulate_cw_stream(s, G2_DURATION, seed, dead_time=0.0)
    curve = co.g2_estimate(stream.timestamps, 5.0, 1500.0, duration=G2_DURATION)
    io.write_curve_csv(out / "g2.csv", curve)
    fit = co.bunching_fit(curve, 5 * s.radiative_lifetime)
    return {"n_clicks": int(stream.timestamps.size), "tau_on_ns": fit.tau_on, "tau_off_ns": fit.tau_off,
            "tau_on_error_ns": fit.tau_on_error, "tau_off_error_ns": fit.tau_off_error,
            "amplitude": fit.amplitude}


def exp_rate_equations(s, seed, out, step_ps, workers):
    sats = np.round(np.logspace(-1, 1.5, 26), 9)
    pops = np.array([co.rate_steady_state(co.RateModel.from_scenario(s, x)) for x in sats])
    io.write_csv(out / "populations.csv", ["saturation", "rho_bright", "rho_dark", "rho_exciton"],
                 [sats, pops[:, 0], pops[:, 1], pops[:, 2]])
    model = co.RateModel.from_scenario(s, 4.0)
    grid = np.linspace(0.0, 1000.0, 501)
    curve = co.g2_from_rates(model, grid)
    io.write_curve_csv(out / "g2_rates.csv", curve)
    rng = np.random.default_rng(seed)
    noisy = co.CorrelationCurve(grid, curve.g2 * (1 + 0.01 * rng.standard_normal(grid.size)),
                                sigma=np.maximum(0.01 * curve.g2, 1e-6))
    result = {"rho_at_4x_saturation": co.rate_steady_state(model),
              "initialization_fidelity_4x": float(co.rate_steady_state(model)[1])}
    try:
        br = co.fit_branching_ratio(noisy, model)
        result.update(branching_ratio=br.branching_ratio, branching_lower=br.lower, branching_upper=br.upper)
    except co.NonIdentifiableError as exc:
        result.update(branching_ratio="unbounded", branching_lower=exc.lower_bound)
    return result


def exp_efficiency_budget(s, seed, out, step_ps, workers):
    budgets = {"zero_field": BUDGET_ZERO_FIELD, "faraday_predicted": BUDGET_FARADAY_PREDICTED,
               "optimized": BUDGET_OPTIMIZED}
    fields = [f.name for f in dataclasses.fields(BUDGET_ZERO_FIELD)]
    rows = {k: [getattr(b, f) for f in fields] + [overall_efficiency(b)] for k, b in budgets.items()}
    with open(out / "efficiency_budget.csv", "w") as fh:
        fh.write(",".join(["budget"] + fields + ["overall"]) + "\n")
        for k, vals in rows.items():
            fh.write(",".join([k] + [io.fmt(v) for v in vals]) + "\n")
    return {k: v[-1] for k, v in rows.items()}


def prediction_suite(seed: int, step_ps: float = 10.0, reps: int | None = None, workers: int = 1) -> list[dict]:
    """Monte Carlo readout fidelity for the prediction presets."""
    table = []
    for i, name in enumerate(PREDICTION_PRESETS):
        s = scenario_preset(name)
        if reps is not None:
            s = s.replace(n_repetitions=reps)
        ens = mc.simulate_ensemble(s, seed + i, workers=workers)
        rep = an.empirical_report(ens, _grid(s, step_ps), s.p_bright, s.p_dark)
        table.append({"preset": name, "optimal_time_ns": rep.optimal_time,
                      "optimal_fidelity": rep.optimal_fidelity, "fidelity_at_3ns": rep.at(3.0),
                      "fidelity_at_1ns": rep.at(1.0)})
    return table


def exp_prediction_suite(s, seed, out, step_ps, workers):
    reps = s.n_repetitions
    table = prediction_suite(seed, step_ps, reps, workers)
    keys = ["preset", "optimal_time_ns", "optimal_fidelity", "fidelity_at_3ns", "fidelity_at_1ns"]
    with open(out / "prediction_suite.csv", "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in table:
            fh.write(",".join(row[k] if isinstance(row[k], str) else io.fmt(row[k]) for k in keys) + "\n")
    return {"presets": table}


RUNNERS = {name: globals()[f"exp_{name}"] for name in EXPERIMENTS}


# --------------------------------------------------------------------------


def execute(scenario: ReadoutScenario, experiment: str, seed: int, out_dir, grid_step_ps: float = 10.0,
            workers: int = 1) -> dict:
    if experiment not in RUNNERS:
        raise DomainError(f"unknown experiment {experiment!r}")
    if grid_step_ps <= 0:
        raise DomainError("grid step must be positive")
    out = io.ensure_dir(out_dir)
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(stamp), _dt.timezone.utc) if stamp else _dt.datetime.now(_dt.timezone.utc)
    manifest = RunManifest(scenario.to_dict(), experiment, int(seed), str(out), float(grid_step_ps),
                           int(workers), timestamp=when.isoformat(timespec="seconds"))
    io.write_json(out / "manifest.json", manifest.to_dict(), rounded=False)
    results = RUNNERS[experiment](scenario, int(seed), out, float(grid_step_ps), int(workers))
    summary = {"experiment": experiment, "scenario": scenario.to_dict(), "results": results,
               "provenance": {"tool_version": __version__, "seed": int(seed),
                              "grid_step_ps": float(grid_step_ps), "scenario_name": scenario.name}}
    io.write_json(out / "summary.json", summary)
    return summary


def scenario_from_manifest(data: dict) -> ReadoutScenario:
    d = {}
    for key, value in data.items():
        # non-finite floats are stored as text
        if isinstance(value, str) and key not in ("name", "geometry"):
            value = float(value)
        d[key] = value
    return ReadoutScenario(**d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinreadout", description="Spin readout simulation experiments.")
    p.add_argument("--config", help="scenario file or preset name (" + ", ".join(PRESET_NAMES) + ")")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.add_argument("--reps", type=int, help="override n_repetitions")
    p.add_argument("--grid-step-ps", type=float, default=10.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--manifest", help="re-run from an existing manifest.json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.manifest:
            data = json.loads(Path(args.manifest).read_text())
            scenario = scenario_from_manifest(data["scenario"])
            experiment, seed = data["experiment"], data["seed"]
            step, out = data["grid_step_ps"], args.out or data["output_directory"]
        else:
            if not (args.config and args.experiment and args.out):
                print("error: --config, --experiment and --out are required", file=sys.stderr)
                return EXIT_CONFIG
            overrides = env_overrides()
            if args.reps is not None:
                overrides["n_repetitions"] = args.reps
            scenario = resolve_scenario(args.config, overrides)
            experiment, seed, step, out = args.experiment, args.seed, args.grid_step_ps, args.out
        if step <= 0 or args.workers < 1:
            raise ValueError("--grid-step-ps must be positive and --workers at least 1")
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = execute(scenario, experiment, seed, out, step, args.workers)
    except FitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DomainError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(io._canonical(summary["results"]), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
