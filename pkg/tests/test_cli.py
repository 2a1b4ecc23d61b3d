import csv
import io
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from holdertest.cli import REPORT_SCHEMA, run


def invoke(*argv):
    out = io.StringIO()
    code = run(list(argv), stdout=out)
    text = out.getvalue()
    return code, text, (json.loads(text) if text else None)


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


UNIFORM = {"density": {"builtin": "uniform_box"}, "holder": {"alpha": 1.0, "L": 1.0}, "norm": {"t": 1.0}, "n": 100}


def test_analyze_uniform(tmp_path):
    code, _, rep = invoke("analyze", "-c", write_config(tmp_path, UNIFORM))
    assert code == 0 and rep["status"] == "ok"
    assert rep["rho_bulk"] == pytest.approx(0.1585, abs=1e-4)
    assert rep["tail_mass"] == 0
    jsonschema.validate(rep, REPORT_SCHEMA)


def test_test_out_of_box_points_reject(tmp_path):
    data = tmp_path / "x.csv"
    data.write_text("\n".join(str(v) for v in np.linspace(1.5, 2.5, 20)) + "\n")
    code, _, rep = invoke("test", "-c", write_config(tmp_path, UNIFORM), "--data", str(data))
    assert code == 0
    assert rep["report"]["psi_out"] and rep["report"]["decision"]


def test_csv_header_detection(tmp_path):
    data = tmp_path / "x.csv"
    rng = np.random.default_rng(0)
    data.write_text("x\n" + "\n".join(repr(float(v)) for v in rng.uniform(size=40)) + "\n")
    code, _, rep = invoke("test", "-c", write_config(tmp_path, UNIFORM), "--data", str(data))
    assert code == 0 and rep["report"]["n_used"] == 40 and not rep["report"]["psi_out"]


def test_prior_artifacts(tmp_path):
    cfg = {**UNIFORM, "n": 200, "prior": {"kind": "bulk"}, "output": str(tmp_path / "out")}
    code, _, rep = invoke("prior", "-c", write_config(tmp_path, cfg))
    assert code == 0
    with open(tmp_path / "out" / "prior_density.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "p0", "p"] and len(rows) == 513
    meta = json.loads((tmp_path / "out" / "prior_metadata.json").read_text())
    assert meta["kind"] == "bulk" and meta["separation"] > 0


def test_calibrate_and_simulate(tmp_path):
    cfg = {**UNIFORM, "simulation": {"eta": 0.3, "trials": 100, "n_grid": [100, 200]}, "output": str(tmp_path)}
    code, _, rep = invoke("calibrate", "-c", write_config(tmp_path, cfg))
    assert code == 0 and rep["thresholds"]["bulk"] is not None
    code, _, rep = invoke("simulate", "-c", write_config(tmp_path, cfg))
    assert code == 0 and [r["n"] for r in rep["rows"]] == [100, 200]
    assert (tmp_path / "simulate.csv").read_text().startswith("n,type_I,type_II")


def test_set_override(tmp_path):
    path = write_config(tmp_path, UNIFORM)
    _, _, a = invoke("analyze", "-c", path, "--set", "n=400")
    assert a["plan"]["n"] == 400
    _, _, b = invoke("analyze", "-c", path, "--set", "ledger.c_B=0.05")
    assert b["cutoffs"]["c_h"] < a["cutoffs"]["c_h"]


def test_seed_resolution(tmp_path, monkeypatch):
    path = write_config(tmp_path, UNIFORM)
    monkeypatch.setenv("HOLDERTEST_SEED", "17")
    assert invoke("analyze", "-c", path)[2]["seed"] == 17
    assert invoke("analyze", "-c", path, "--seed", "3")[2]["seed"] == 3
    monkeypatch.setenv("HOLDERTEST_SEED", "seventeen")
    assert invoke("analyze", "-c", path)[0] == 2


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "density": {"builtin": "uniform_box"},\n  "n": 100,\n  "holder": {"alpha": -1}\n}\n')
    assert invoke("analyze", "-c", str(bad))[0] == 2
    assert "bad.json:4" in capsys.readouterr().err
    assert invoke("analyze", "-c", write_config(tmp_path, {**UNIFORM, "density": {"builtin": "nope"}}))[0] == 2
    assert invoke("analyze", "-c", write_config(tmp_path, {**UNIFORM, "density": {"grid": "missing.csv"}}))[0] == 2
    assert invoke("analyze", "-c", write_config(tmp_path, {**UNIFORM, "surprise": 1}))[0] == 2
    assert invoke("frobnicate")[0] == 2


def test_domain_errors_exit_one(tmp_path):
    cfg = {**UNIFORM, "n": 200, "prior": {"kind": "tail"}}
    code, _, rep = invoke("prior", "-c", write_config(tmp_path, cfg))
    assert code == 1 and rep["status"] == "error"
    jsonschema.validate(rep, REPORT_SCHEMA)


def test_grid_density(tmp_path):
    grid = tmp_path / "g.csv"
    x = np.linspace(0, 1, 201)
    grid.write_text("\n".join(f"{float(a)!r},1.0" for a in x) + "\n")
    cfg = {"density": {"grid": str(grid)}, "n": 100}
    code, _, rep = invoke("analyze", "-c", write_config(tmp_path, cfg))
    assert code == 0 and rep["tail_mass"] == 0


def test_identical_runs_are_byte_identical(tmp_path):
    path = write_config(tmp_path, {**UNIFORM, "thresholds": {"calibrate": True, "trials": 100}})
    data = tmp_path / "x.csv"
    data.write_text("\n".join(repr(float(v)) for v in np.random.default_rng(1).uniform(size=50)) + "\n")
    cmd = [sys.executable, "-m", "holdertest", "test", "-c", path, "--data", str(data), "--seed", "5"]
    a = subprocess.run(cmd, capture_output=True, check=True).stdout
    b = subprocess.run(cmd, capture_output=True, check=True).stdout
    assert a == b and json.loads(a)["thresholds"]["seed"] == 5
