import json

import pytest

from spinreadout import cli


def run(argv):
    return cli.main([str(a) for a in argv])


def test_missing_config_file(tmp_path):
    assert run(["--config", tmp_path / "nope.cfg", "--experiment", "fidelity", "--out", tmp_path]) == 2


def test_bad_config_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("preset = Faraday2T\nspin_flip_time = fast\n")
    assert run(["--config", cfg, "--experiment", "fidelity", "--out", tmp_path / "o"]) == 2
    assert "bad.cfg:2:18" in capsys.readouterr().err


def test_unknown_experiment_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        run(["--config", "Faraday2T", "--experiment", "nonsense", "--out", tmp_path])
    assert info.value.code == 2


def test_required_flags(tmp_path):
    assert run(["--config", "Faraday2T"]) == 2


def test_zero_field_count_fraction(tmp_path):
    out = tmp_path / "zf"
    assert run(["--config", "ZeroField", "--experiment", "count_fraction", "--reps", 20000,
                "--out", out]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"experiment", "scenario", "results", "provenance"}
    assert summary["results"]["count_fraction_at"]["1.8"] >= 0.97
    assert (out / "count_fraction.csv").read_text().startswith("t_ns,count_fraction,sigma\n")


def test_fidelity_summary_and_manifest_rerun(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["--config", "Faraday2T", "--experiment", "fidelity", "--reps", 5000, "--seed", 4,
                "--out", a]) == 0
    res = json.loads((a / "summary.json").read_text())["results"]
    assert 0.9 < res["formula"]["optimal_fidelity"] <= 1
    assert res["n_repetitions"] == 5000
    assert run(["--manifest", a / "manifest.json", "--out", b, "--workers", 2]) == 0
    for name in ("summary.json", "fidelity_formula.csv", "fidelity_montecarlo.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINREADOUT_SPIN_FLIP_TIME", "42")
    out = tmp_path / "env"
    assert run(["--config", "Faraday2T", "--experiment", "efficiency_budget", "--out", out]) == 0
    assert json.loads((out / "manifest.json").read_text())["scenario"]["spin_flip_time"] == 42.0


def test_bad_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINREADOUT_SPIN_FLIP_TIME", "soon")
    assert run(["--config", "Faraday2T", "--experiment", "fidelity", "--out", tmp_path]) == 2


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["--config", "Faraday2T", "--experiment", "efficiency_budget",
                "--out", blocker / "sub"]) == 4


def test_invalid_grid_step_is_config_error(tmp_path):
    assert run(["--config", "Faraday2T", "--experiment", "fidelity", "--grid-step-ps", 0,
                "--out", tmp_path / "g"]) == 2


def test_domain_failure_is_numeric_error(tmp_path):
    # a fit that cannot converge: no spin flips, so no decay in the sweep
    cfg = tmp_path / "frozen.cfg"
    cfg.write_text("preset = Faraday2T\nspin_flip_time = inf\nbranching_ratio = inf\n"
                   "leakage_prob_3ns = 0\nn_repetitions = 2000\n")
    assert run(["--config", cfg, "--experiment", "two_pulse_sweep", "--out", tmp_path / "t"]) == 3
