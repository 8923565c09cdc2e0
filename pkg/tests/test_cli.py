import json

import numpy as np
import pytest

from iaekf.cli import main
from iaekf.filters import load_records_csv


def test_simulate_then_filter_echo(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--steps", "40", "--seed", "3", "--out", str(sim)]) == 0
    flt = tmp_path / "flt"
    assert main(["filter", "--input", str(sim / "trajectory.csv"), "--out", str(flt)]) == 0
    records = load_records_csv(flt / "records_ri.csv")
    # first row carries the configured initial estimate
    np.testing.assert_array_equal(records[0].q_plus, [1.0, 0.0, 0.0, 0.0])
    assert len(records) == 41


def test_filter_li_variant(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--steps", "20", "--out", str(sim)])
    flt = tmp_path / "flt"
    assert main(["filter", "--input", str(sim / "trajectory.csv"), "--filter", "li", "--out", str(flt)]) == 0
    assert (flt / "records_li.csv").exists()


def test_adapt_outputs(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--steps", "30", "--seed", "5", "--out", str(sim)])
    adp = tmp_path / "adp"
    rc = main(
        [
            "adapt", "--input", str(sim / "trajectory.csv"), "--window", "20",
            "--var-eta", "40", "--var-meas", "2e-3", "--max-iter", "4", "--out", str(adp),
        ]
    )
    assert rc == 0
    doc = json.loads((adp / "em_result.json").read_text())
    assert doc["iterations"] == 4
    assert doc["config"]["window"] == 20


def test_adapt_window_bounds(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--steps", "10", "--out", str(sim)])
    rc = main(["adapt", "--input", str(sim / "trajectory.csv"), "--window", "99", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "single-run",\n  "seed": }\n')
    rc = main(["montecarlo", "--experiment", "gain-compare", "--config", str(bad)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_unknown_config_field_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "gain-compare", "mc_rnus": 3}\n')
    rc = main(["montecarlo", "--experiment", "gain-compare", "--config", str(bad)])
    assert rc == 1
    assert "mc_rnus" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path):
    rc = main(["filter", "--input", str(tmp_path / "nope.csv")])
    assert rc == 1


def test_montecarlo_smoke(tmp_path, capsys):
    out = tmp_path / "mc"
    rc = main(
        [
            "montecarlo", "--experiment", "covariance-mc",
            "--runs", "5", "--windows", "20", "--seed", "1", "--out", str(out),
        ]
    )
    assert rc == 0
    assert (out / "covariance_estimates.csv").exists()
    summary = json.loads(capsys.readouterr().out)
    assert "windows" in summary


def test_montecarlo_bad_windows(tmp_path):
    rc = main(["montecarlo", "--experiment", "covariance-mc", "--windows", "a,b"])
    assert rc == 1
