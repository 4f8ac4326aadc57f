"""Scenario files, CSV exports and the binary record format.

Scenario files are ``key = value`` lines; ``#`` starts a comment. A
``preset = <name>`` line seeds all fields from a preset, later keys
override it. Binary files start with three little-endian uint64 words:
magic, format version and record count.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from pathlib import Path

import numpy as np

from .core import DomainError, ReadoutScenario, parse_geometry, scenario_preset

FLOAT_FORMAT = "%.9g"
BINARY_VERSION = 1
MAGIC_ENSEMBLE = int.from_bytes(b"SRENSMB\x00", "little")
MAGIC_TIMESTAMPS = int.from_bytes(b"SRTSTMP\x00", "little")
_HEADER = np.dtype([("magic", "<u8"), ("version", "<u8"), ("count", "<u8")])
ENSEMBLE_RECORD = np.dtype([("repetition", "<u8"), ("initial_spin", "u1"), ("source", "u1"),
                            ("detection_time_ns", "<f8")])


class ConfigError(ValueError):
    """Malformed scenario file; carries the 1-based line and column."""

    def __init__(self, message: str, path: str = "<string>", line: int = 0, column: int = 0):
        super().__init__(f"{path}:{line}:{column}: {message}")
        self.path, self.line, self.column = path, line, column


_FIELDS = {f.name: f for f in dataclasses.fields(ReadoutScenario)}
_INT_FIELDS = {"n_repetitions"}
_OPTIONAL = {"spin_on_time", "spin_off_time"}


def fmt(x) -> str:
    """Canonical text for one number (9 significant digits)."""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return FLOAT_FORMAT % x


def _parse_value(key: str, raw: str):
    text = raw.strip()
    if key == "geometry":
        return parse_geometry(text)
    if key == "name":
        return text
    if key in _OPTIONAL and text.lower() in ("none", ""):
        return None
    if key in _INT_FIELDS:
        return int(text)
    return float(text)


def parse_scenario(text: str, path: str = "<string>", overrides: dict | None = None) -> ReadoutScenario:
    values: dict = {}
    preset = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", path, lineno, len(body) - len(body.lstrip()) + 1)
        key_part, val_part = body.split("=", 1)
        key = key_part.strip()
        key_col = len(key_part) - len(key_part.lstrip()) + 1
        val_col = len(key_part) + 2 + (len(val_part) - len(val_part.lstrip()))
        if key == "preset":
            try:
                preset = scenario_preset(val_part.strip())
            except DomainError as exc:
                raise ConfigError(str(exc), path, lineno, val_col) from None
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", path, lineno, key_col)
        try:
            values[key] = _parse_value(key, val_part)
        except (ValueError, DomainError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}", path, lineno, val_col) from None
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}", "<override>", 0, 0)
        try:
            values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        except (ValueError, DomainError) as exc:
            raise ConfigError(f"bad override for {key}: {exc}", "<override>", 0, 0) from None
    try:
        if preset is not None:
            return preset.replace(**values)
        return ReadoutScenario(**values)
    except TypeError as exc:
        raise ConfigError(f"incomplete scenario: {exc}", path, 0, 0) from None
    except DomainError as exc:
        raise ConfigError(f"invalid scenario: {exc}", path, 0, 0) from None


def load_scenario(path, overrides: dict | None = None) -> ReadoutScenario:
    p = Path(path)
    text = p.read_text()  # OSError propagates to the caller
    return parse_scenario(text, str(p), overrides)


def dump_scenario(scenario: ReadoutScenario) -> str:
    lines = []
    for key, value in scenario.to_dict().items():
        if value is None:
            value = "none"
        elif isinstance(value, float) and math.isfinite(value):
            value = repr(value)  # shortest exact text, so files round-trip
        elif not isinstance(value, str):
            value = fmt(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# CSV


def write_csv(path, header: list[str], columns) -> None:
    cols = [np.asarray(c) for c in columns]
    n = {c.shape[0] for c in cols}
    if len(n) != 1:
        raise DomainError("columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))


def write_ensemble_csv(path, ensemble) -> None:
    n = len(ensemble)
    write_csv(path, ["repetition", "initial_spin", "detection_time_ns", "source"],
              [np.arange(n), ensemble.initial_spin, ensemble.detection_time, ensemble.source])


def write_track_csv(path, track) -> None:
    write_csv(path, ["bin_start_ns", "state"], [track.bin_times, track.states])


def write_histogram_csv(path, hist) -> None:
    write_csv(path, ["bin_center_ns", "count"], [hist.bin_centers, hist.counts])


def write_curve_csv(path, curve) -> None:
    write_csv(path, ["tau_ns", "g2"], [curve.delays, curve.g2])


def write_report_csv(path, report) -> None:
    write_csv(path, ["t_ns", "e_bright", "e_dark", "fidelity"],
              [report.readout_times, report.e_bright, report.e_dark, report.fidelity])


def report_summary(report) -> dict:
    return {"optimal_time_ns": report.optimal_time, "optimal_fidelity": report.optimal_fidelity,
            "p_bright": report.p_bright, "p_dark": report.p_dark}


def _canonical(obj, rounded: bool = True):
    if isinstance(obj, dict):
        return {str(k): _canonical(v, rounded) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v, rounded) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canonical(v, rounded) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return fmt(x)
        return float(fmt(x)) if rounded else x
    if hasattr(obj, "value"):
        return obj.value
    return obj


def write_json(path, obj, rounded: bool = True) -> None:
    """Sorted-key JSON; ``rounded`` limits floats to 9 significant digits."""
    with open(path, "w") as fh:
        json.dump(_canonical(obj, rounded), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# binary


def _write_binary(path, magic: int, records: np.ndarray) -> None:
    header = np.array([(magic, BINARY_VERSION, records.shape[0])], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())


def _read_binary(path, magic: int, dtype) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise DomainError(f"{path}: truncated header")
    head = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if int(head["magic"]) != magic:
        raise DomainError(f"{path}: wrong magic number")
    if int(head["version"]) != BINARY_VERSION:
        raise DomainError(f"{path}: unsupported version {int(head['version'])}")
    count = int(head["count"])
    body = raw[_HEADER.itemsize:]
    if len(body) != count * np.dtype(dtype).itemsize:
        raise DomainError(f"{path}: record count does not match file size")
    return np.frombuffer(body, dtype=dtype).copy()


def write_ensemble_binary(path, ensemble) -> None:
    rec = np.empty(len(ensemble), dtype=ENSEMBLE_RECORD)
    rec["repetition"] = np.arange(len(ensemble))
    rec["initial_spin"] = ensemble.initial_spin
    rec["source"] = ensemble.source
    rec["detection_time_ns"] = ensemble.detection_time
    _write_binary(path, MAGIC_ENSEMBLE, rec)


def read_ensemble_binary(path) -> np.ndarray:
    return _read_binary(path, MAGIC_ENSEMBLE, ENSEMBLE_RECORD)


def write_timestamps_binary(path, timestamps) -> None:
    _write_binary(path, MAGIC_TIMESTAMPS, np.asarray(timestamps, dtype="<f8"))


def read_timestamps(path) -> np.ndarray:
    """Timestamps (ns) from the binary stream format or a one-value-per-line CSV."""
    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(8)
    if len(head) == 8 and int.from_bytes(head, "little") == MAGIC_TIMESTAMPS:
        return _read_binary(p, MAGIC_TIMESTAMPS, "<f8").astype(float)
    values = []
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            try:
                values.append(float(s))
            except ValueError:
                if not values and lineno == 1:
                    continue  # header line
                raise DomainError(f"{p}:{lineno}: not a number: {s!r}") from None
    return np.asarray(values, dtype=float)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
