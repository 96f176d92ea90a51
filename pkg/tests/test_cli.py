import json
import math
import subprocess
import sys

import numpy as np
import pytest

from spectrans.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, emit_plot, main
from spectrans.errors import InvalidInputError
from spectrans.io import read_csv_columns, write_csv

HN = {"type": "hatano_nelson", "parameters": {"tL": 3, "tR": 1}}
SSH0 = {"type": "ssh", "parameters": {"t1": 1.3, "t2": 1, "t3": 0, "gamma": 4 / 3}}


def run(tmp_path, sub, cfg, name="run"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    return main([sub, "--config", str(path), "--out", str(out)]), out


def test_metric_sweep_hn(tmp_path):
    cfg = {"model": HN, "sweep": {"variable": "mu", "lo": -1.0, "hi": 0.0, "steps": 101}, "plot": True}
    rc, out = run(tmp_path, "metric-sweep", cfg)
    assert rc == EXIT_OK
    cols = read_csv_columns(out / "metric.csv")
    assert list(cols) == ["mu", "gw_thermo", "gw_finite", "n_delta_gw", "area", "flags"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["argmin"] == pytest.approx(-0.5 * math.log(3), abs=0.01)
    assert (out / "metric.svg").read_text().lstrip().startswith("<?xml")


def test_outputs_are_byte_identical(tmp_path):
    cfg = {
        "model": SSH0,
        "sweep": {"variable": "mu", "lo": -0.8, "hi": -0.3, "steps": 41},
        "finite": {"N": 40},
        "plot": True,
    }
    _, a = run(tmp_path, "metric-sweep", cfg, "a")
    _, b = run(tmp_path, "metric-sweep", cfg, "b")
    for f in ("metric.csv", "summary.json", "metric.svg"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_oracle_and_transport_roundtrip(tmp_path):
    rc, orc = run(tmp_path, "oracle-gbz", {"model": SSH0, "finite": {"N": 40}}, "orc")
    assert rc == EXIT_OK
    pts = read_csv_columns(orc / "gbz_points.csv")
    assert list(pts) == ["re_beta", "im_beta", "re_E", "im_E", "pair_index"]
    mod = np.hypot(pts["re_beta"], pts["im_beta"])
    assert np.allclose(mod, 0.5674, atol=1e-3)
    cloud = str(orc / "obc_spectrum.csv")
    rc, tr = run(tmp_path, "transport", {"clouds": [cloud, cloud]}, "tr")
    assert rc == EXIT_OK
    assert json.loads((tr / "summary.json").read_text())["w2"] == 0.0
    plan = read_csv_columns(tr / "transport.csv")
    assert np.array_equal(plan["source"], plan["target"])


def test_topo_scan_finds_transition(tmp_path):
    cfg = {
        "model": {"type": "ssh", "parameters": {"t1": 0.3, "t2": 0.4, "t3": 0, "gamma": 1}},
        "sweep": {"variable": "t1", "lo": 0.25, "hi": 0.35, "steps": 5},
    }
    rc, out = run(tmp_path, "topo-scan", cfg)
    assert rc == EXIT_OK
    (t,) = json.loads((out / "summary.json").read_text())["transitions"]
    assert t == pytest.approx(0.30, abs=1e-3)


def test_plot_subcommand(tmp_path):
    curve = write_csv(tmp_path / "c.csv", {"h": [0.0, 0.5, 1.0], "gw_h": [0.0, 0.1, 2.0], "flags": ["", "", "singular"]})
    rc, out = run(tmp_path, "plot", {"curve": str(curve), "ranges": [[0.2, 0.4]]})
    assert rc == EXIT_OK
    assert (out / "c.svg").exists()


def test_emit_plot_rejects_empty_curve(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("mu,gw_thermo\n")
    with pytest.raises(InvalidInputError):
        emit_plot(empty, tmp_path / "e.svg")


@pytest.mark.parametrize(
    "cfg",
    [
        {"model": {"type": "nope"}, "sweep": {"lo": 0, "hi": 1, "steps": 3}},
        {"model": HN, "sweep": {"lo": 1, "hi": 0, "steps": 3}},
        {"model": HN},
        {"model": HN, "sweep": {"lo": 0, "hi": 1, "steps": "many"}},
        {"model": HN, "sweep": {"variable": "h", "lo": 0, "hi": 1, "steps": 3}},
    ],
)
def test_invalid_config_exits_1(tmp_path, cfg):
    assert run(tmp_path, "metric-sweep", cfg)[0] == EXIT_CONFIG


def test_unparseable_config_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{bad")
    assert main(["metric-sweep", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["metric-sweep", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_numerical_failure_exits_2(tmp_path):
    cfg = {
        "model": {"type": "quasiperiodic", "parameters": {"lambdas": [0.5], "N": 55}},
        "sweep": {"variable": "h", "lo": 0.1, "hi": 0.4, "steps": 50},
    }
    rc, out = run(tmp_path, "quasi-sweep", cfg)
    assert rc == EXIT_NUMERIC
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "NotFoundError"


def test_console_script_entry_point(tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"clouds": ["x.csv"]}))
    proc = subprocess.run(
        [sys.executable, "-m", "spectrans.cli", "transport", "--config", str(cfg), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_CONFIG
    assert "invalid config" in proc.stderr
