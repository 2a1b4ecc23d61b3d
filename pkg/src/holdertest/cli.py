"""Command-line entry point: ``holdertest <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import adversarial, gof, harness, levelsets, partition
from .density import BUILTINS, DensityModel, DomainError, HolderSpec, ParameterError, from_grid, make_builtin

COMMANDS = ("analyze", "test", "simulate", "rates", "prior", "calibrate")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_ledger_props = {f.name: _pos for f in fields(levelsets.ConstantsLedger)}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "density": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": sorted(BUILTINS)},
                "params": {"type": "object"},
                "grid": {"type": "string"},
                "header": {"type": "boolean"},
            },
            "oneOf": [{"required": ["builtin"], "not": {"required": ["grid"]}},
                      {"required": ["grid"], "not": {"required": ["builtin"]}}],
        },
        "holder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha": _pos, "L": _pos, "c_star": _num, "delta": _num},
        },
        "norm": {"type": "object", "additionalProperties": False, "properties": {"t": _num}},
        "ledger": {"type": "object", "additionalProperties": False, "properties": _ledger_props},
        "n": {"type": "integer", "minimum": 4},
        "seed": {"type": "integer", "minimum": 0},
        "data": {"type": "string"},
        "header": {"type": "boolean"},
        "output": {"type": "string"},
        "resolution": {"type": "integer", "minimum": 8},
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"bulk": {"type": ["number", "null"]}, "psi1": {"type": ["number", "null"]},
                           "calibrate": {"type": "boolean"}, "trials": {"type": "integer", "minimum": 100},
                           "eta": _pos},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "trials": {"type": "integer", "minimum": 1},
                "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
                "threshold_mode": {"enum": ["calibrated", "ledger"]},
                "calibration_trials": {"type": "integer", "minimum": 100},
                "alternative": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"kind": {"enum": ["auto", "bulk", "tail"]}, "amplitude": _num,
                                   "c": _pos, "fill": {"type": "boolean"}, "spikes": {"type": "integer", "minimum": 1}},
                },
            },
        },
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": ["bulk", "tail", "remainder"]}, "C_phi": _pos, "c_down": _pos,
                           "c_r": _pos, "rel_amplitude": _pos, "c": _pos, "fill": {"type": "boolean"},
                           "grid_points": {"type": "integer", "minimum": 2}},
        },
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["command", "seed", "status"],
    "properties": {"command": {"enum": list(COMMANDS)}, "seed": {"type": "integer"},
                   "status": {"enum": ["ok", "error"]}},
}


class ConfigError(ValueError):
    """Configuration problem reported with exit status 2."""


DOMAIN_ERRORS = (adversarial.AmplitudeError, adversarial.RegimeError, adversarial.GeometryError,
                 adversarial.EnvelopeError, harness.SearchError, harness.InsufficientData, levelsets.NumericError,
                 levelsets.DegenerateConfiguration, partition.PartitionError, gof.InputError, DomainError)
CONFIG_ERRORS = (ConfigError, ParameterError, levelsets.ConfigurationError)


# ---------------------------------------------------------------------------
# configuration

def _line_of(text: str, key: Optional[str]) -> Optional[int]:
    if not text or not key:
        return None
    needle = f'"{key}"'
    pos = text.find(needle)
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list) -> dict:
    out = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set {item}: expected key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"--set {item}: empty key")
        node = out
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {item}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path: Optional[str], overrides: list, command: str) -> dict:
    text = ""
    cfg: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}:1: top level must be an object")
    cfg = apply_overrides(cfg, overrides)
    cfg.setdefault("command", command)
    if cfg["command"] != command:
        raise ConfigError(f"{path or '--set'}:{_line_of(text, 'command') or 1}: config is for "
                          f"{cfg['command']!r}, not {command!r}")
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.path) or "<root>"
        key = next((str(p) for p in reversed(err.path) if isinstance(p, str)), None)
        line = _line_of(text, key)
        origin = f"{path}:{line}" if path and line else (path or "--set")
        raise ConfigError(f"{origin}: {where}: {err.message}")
    for key in ("data",):
        if key in cfg and not Path(cfg[key]).is_file():
            raise ConfigError(f"{path or '--set'}:{_line_of(text, key) or 1}: {key}: no such file {cfg[key]!r}")
    if "density" in cfg and "grid" in cfg["density"] and not Path(cfg["density"]["grid"]).is_file():
        raise ConfigError(f"{path or '--set'}:{_line_of(text, 'grid') or 1}: density.grid: "
                          f"no such file {cfg['density']['grid']!r}")
    return cfg


def resolve_seed(cfg: dict) -> int:
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("HOLDERTEST_SEED")
    if env is None:
        return 0
    try:
        seed = int(env)
    except ValueError:
        raise ConfigError(f"HOLDERTEST_SEED: not an integer ({env!r})") from None
    if seed < 0:
        raise ConfigError("HOLDERTEST_SEED: must be nonnegative")
    return seed


def _holder(cfg: dict) -> HolderSpec:
    h = {"alpha": 1.0, "L": 1.0, **cfg.get("holder", {})}
    return HolderSpec(**h)


def _read_csv(path: str, header: Optional[bool]) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if header is None and rows:
        try:
            [float(c) for c in rows[0]]
            header = False
        except ValueError:
            header = True
    if header:
        rows = rows[1:]
    try:
        arr = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric CSV entry ({exc})") from None
    if arr.size and len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{path}: rows have differing column counts")
    return arr


def build_density(cfg: dict) -> DensityModel:
    entry = cfg.get("density")
    if entry is None:
        raise ConfigError("density: exactly one of builtin or grid is required")
    holder = _holder(cfg)
    if "builtin" in entry:
        return make_builtin(entry["builtin"], entry.get("params"), holder)
    table = _read_csv(entry["grid"], entry.get("header"))
    if table.ndim != 2 or table.shape[1] < 2:
        raise ConfigError(f"{entry['grid']}: grid CSV needs d coordinate columns and one value column")
    return from_grid(table[:, :-1], table[:, -1], holder, name=Path(entry["grid"]).stem)


def _norm(cfg: dict) -> levelsets.NormSpec:
    return levelsets.NormSpec(**cfg.get("norm", {}))


def _ledger(cfg: dict) -> levelsets.ConstantsLedger:
    return levelsets.ConstantsLedger(**cfg.get("ledger", {}))


def _test_config(cfg: dict, seed: int, thresholds=None) -> gof.TestConfig:
    return gof.TestConfig(holder=_holder(cfg), norm=_norm(cfg), ledger=_ledger(cfg), thresholds=thresholds,
                          resolution=cfg.get("resolution"), seed=seed)


def _simulation(cfg: dict, seed: int) -> harness.SimulationConfig:
    sim = dict(cfg.get("simulation", {}))
    alt = dict(sim.pop("alternative", {"kind": "auto"}))
    alt.pop("amplitude", None)
    return harness.SimulationConfig(seed=seed, holder=_holder(cfg), norm=_norm(cfg), ledger=_ledger(cfg),
                                    resolution=cfg.get("resolution"), alternative=alt, **sim)


def _n(cfg: dict) -> int:
    if "n" not in cfg:
        raise ConfigError("n: required for this subcommand")
    return int(cfg["n"])


# ---------------------------------------------------------------------------
# subcommands

def _out_dir(cfg: dict) -> Optional[Path]:
    if "output" not in cfg:
        return None
    p = Path(cfg["output"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_rows(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])


def cmd_analyze(cfg: dict, seed: int) -> dict:
    model = build_density(cfg)
    n = _n(cfg)
    plan = gof.plan_test(model, n, _test_config(cfg, seed))
    out = {"cutoffs": plan.cutoffs.to_dict(), "plan": plan.describe(),
           "rho_bulk": plan.cutoffs.rho_bulk, "tail_mass": plan.cutoffs.tail_mass}
    target = _out_dir(cfg)
    if target is not None and plan.covering is not None and plan.covering.indices is not None:
        partition.export_covering(target / "tail_covering.csv", plan.covering)
        out["artifacts"] = ["tail_covering.csv"]
    return out


def _thresholds(cfg: dict, plan: gof.TestPlan, seed: int):
    entry = cfg.get("thresholds")
    if not entry:
        return None
    if entry.get("calibrate"):
        eta = entry.get("eta", 0.3)
        k = max(1, harness.active_components(plan))
        return harness.calibrate_thresholds(plan.model, plan.n, eta / k, entry.get("trials", 500), seed, plan=plan)
    return gof.CalibratedThresholds(bulk=entry.get("bulk"), psi1=entry.get("psi1"), eta=float("nan"), trials=0,
                                    seed=seed)


def cmd_test(cfg: dict, seed: int) -> dict:
    if "data" not in cfg:
        raise ConfigError("data: a sample CSV is required for test")
    model = build_density(cfg)
    pts = _read_csv(cfg["data"], cfg.get("header"))
    if pts.size == 0:
        raise gof.InputError("sample CSV holds no observations")
    if pts.shape[1] != model.d:
        raise ConfigError(f"{cfg['data']}: {pts.shape[1]} columns but the density is {model.d}-dimensional")
    n = len(pts) - len(pts) % 2
    plan = gof.plan_test(model, max(n, 4), _test_config(cfg, seed)) if n >= 4 else None
    if plan is None:
        raise gof.InputError(f"need at least 4 observations, got {len(pts)}")
    thr = _thresholds(cfg, plan, seed)
    report = gof.combined_test(pts, model, plan=plan, config=_test_config(cfg, seed, thr))
    return {"report": report.to_dict(), "thresholds": None if thr is None else thr.to_dict()}


def cmd_calibrate(cfg: dict, seed: int) -> dict:
    model = build_density(cfg)
    n = _n(cfg)
    sim = cfg.get("simulation", {})
    eta = sim.get("eta", 0.3)
    trials = sim.get("calibration_trials", sim.get("trials", 500))
    plan = gof.plan_test(model, n, _test_config(cfg, seed))
    k = max(1, harness.active_components(plan))
    thr = harness.calibrate_thresholds(model, n, eta / k, max(100, trials), seed, plan=plan)
    return {"thresholds": thr.to_dict(), "components": k, "n": n}


def cmd_simulate(cfg: dict, seed: int) -> dict:
    model = build_density(cfg)
    sim = _simulation(cfg, seed)
    amplitude = cfg.get("simulation", {}).get("alternative", {}).get("amplitude")
    rows = []
    for n in sim.n_grid:
        plan = gof.plan_test(model, n, sim.test_config())
        alt = None
        rho = None
        if amplitude is not None:
            fam = harness.default_family(plan, sim)
            alt, rho = fam.sampler(amplitude), fam.separation(amplitude)
        est = harness.estimate_risk(model, alt, sim, n=n, plan=plan)
        rows.append({"n": n, "type_I": est.type_I, "type_II": est.type_II, "se_I": est.se_I, "se_II": est.se_II,
                     "rho": rho, "rho_theory": plan.cutoffs.rho_star,
                     "breakdown_null": est.breakdown_null, "breakdown_alt": est.breakdown_alt})
    target = _out_dir(cfg)
    if target is not None:
        _write_rows(target / "simulate.csv", ["n", "type_I", "type_II", "se_I", "se_II", "rho", "rho_theory"],
                    [[r[k] for k in ("n", "type_I", "type_II", "se_I", "se_II", "rho", "rho_theory")] for r in rows])
    return {"rows": rows, "simulation": sim.to_dict()}


def cmd_rates(cfg: dict, seed: int) -> dict:
    model = build_density(cfg)
    sim = _simulation(cfg, seed)
    fit = harness.rate_regression(model, sim)
    target = _out_dir(cfg)
    if target is not None:
        _write_rows(target / "rates.csv", ["n", "rho_hat", "rho_theory", "slope"],
                    [[r["n"], r["rho_hat"], r["rho_theory"], fit.slope] for r in fit.rows])
    return {"fit": fit.to_dict(), "simulation": sim.to_dict()}


def cmd_prior(cfg: dict, seed: int) -> dict:
    model = build_density(cfg)
    n = _n(cfg)
    entry = dict(cfg.get("prior", {}))
    kind = entry.pop("kind", "bulk")
    points = entry.pop("grid_points", 512)
    plan = gof.plan_test(model, n, _test_config(cfg, seed))
    work, cut, led = plan.working, plan.cutoffs, plan.config.ledger
    if kind == "bulk":
        real = adversarial.bulk_prior(work, cut, seed=seed, ledger=led, **entry)
    elif kind == "tail":
        real = adversarial.tail_prior(work, cut, seed=seed, ledger=led, **entry)
    else:
        real = adversarial.remainder_prior(work, n, seed=seed, ledger=led, norm=plan.config.norm, cutoffs=cut,
                                           **entry)
    meta = {"kind": real.kind, "seed": seed, "separation": real.separation, "amplitudes": real.amplitudes,
            "t": real.t, "metadata": real.summary() if hasattr(real, "summary") else {}}
    target = _out_dir(cfg)
    if target is not None:
        if work.d != 1:
            raise ConfigError("prior grid export supports d = 1 only")
        lo, hi = work.support
        x = np.linspace(lo[0], hi[0], points).reshape(-1, 1)
        _write_rows(target / "prior_density.csv", ["x1", "p0", "p"],
                    [[float(a), float(b), float(c)] for a, b, c in zip(x[:, 0], work(x), real.density(x))])
        (target / "prior_metadata.json").write_text(dumps(meta) + "\n", encoding="utf-8")
        meta["artifacts"] = ["prior_density.csv", "prior_metadata.json"]
    return meta


HANDLERS = {"analyze": cmd_analyze, "test": cmd_test, "simulate": cmd_simulate, "rates": cmd_rates,
            "prior": cmd_prior, "calibrate": cmd_calibrate}


# ---------------------------------------------------------------------------
# output

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="holdertest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry by dot-path; VALUE is parsed as JSON when possible")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="sample CSV (no index column, one column per coordinate)")
        p.add_argument("--header", action="store_true", default=None, help="sample CSV has a header row")
        p.add_argument("--output", "-o", help="directory for CSV artifacts")
    return parser


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    seed = 0
    try:
        overrides = list(args.overrides)
        for key in ("seed", "data", "header", "output"):
            val = getattr(args, key)
            if val is not None:
                overrides.append(f"{key}={json.dumps(val)}")
        cfg = load_config(args.config, overrides, args.command)
        seed = resolve_seed(cfg)
        body = HANDLERS[args.command](cfg, seed)
    except CONFIG_ERRORS as exc:
        print(f"holdertest: configuration error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"holdertest: {type(exc).__name__}: {exc}", file=sys.stderr)
        stdout.write(dumps({"command": args.command, "status": "error", "error": type(exc).__name__,
                            "message": str(exc), "seed": seed}) + "\n")
        return 1
    report = {"command": args.command, "status": "ok", "seed": seed, **body}
    stdout.write(dumps(report) + "\n")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
