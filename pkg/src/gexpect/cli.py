"""Command-line driver: ``gexpect <command> --config <path> --out <dir>``.

Every run writes ``result.json`` (metadata, scalars, files, checks) and a
canonical copy of the config into the output directory. Exit codes: 0 success,
1 computation error, 2 configuration error (including CFL), 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .core import ModelSpec, UncertaintyBox
from .expr import ParseError, parse_field
from .gbsde import PicardError, picard_solve
from .lattice import CFLError, GridSpec, check_cfl, grid_for_model
from .montecarlo import (
    HeatSetup,
    PolicySpec,
    counterexample_limit,
    mc_policy_value,
    quad_var_report,
    representation_scan,
    sample_paths,
)
from .pde import BSBSpec, bsb_price, heat_model, multi_band_hjb, solve_hjb

COMMANDS = ("gheat", "hjb", "bsde", "bsb", "scan", "mc", "counterexample", "verify", "validate")
REQUIRED = {
    "gheat": ("heat", "grid"),
    "hjb": ("model", "grid"),
    "bsde": ("model", "grid"),
    "bsb": ("bsb",),
    "mc": ("bsb", "mc"),
    "counterexample": ("counterexample",),
    "verify": ("suite",),
}
EXIT_OK, EXIT_COMPUTE, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[dict]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{d['path']}: {d['message']}" for d in diagnostics))


def load_schema() -> dict:
    return json.loads(resources.files("gexpect").joinpath("config.schema.json").read_text())


def canonical_json(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# -- building objects from config sections --------------------------------------------------


def _box(bands) -> UncertaintyBox:
    return UncertaintyBox(tuple(tuple(b) for b in bands))


def build_model(sec: dict) -> ModelSpec:
    kw = {k: sec[k] for k in ("n", "b", "h", "sigma", "g", "f", "lipschitz", "mode") if k in sec}
    bands3 = tuple(_box(b) for b in sec["bands3"]) if "bands3" in sec else None
    return ModelSpec(box=_box(sec["box"]), terminal=str(sec["terminal"]), bands3=bands3, **kw)


def build_grid(sec: dict, model: ModelSpec) -> GridSpec:
    log_space = bool(sec.get("log_space", False))
    if "Nt" in sec:
        return GridSpec(sec["x_min"], sec["x_max"], sec["Nx"], sec["T"], sec["Nt"], log_space)
    probe = model.replace(box=_hull(model.bands3), bands3=None) if model.bands3 else model
    return grid_for_model(probe, sec["x_min"], sec["x_max"], sec["Nx"], sec["T"], sec.get("cfl", 0.9), log_space)


def _hull(boxes) -> UncertaintyBox:
    return UncertaintyBox(tuple((min(b.bands[j][0] for b in boxes), max(b.bands[j][1] for b in boxes)) for j in range(boxes[0].dim)))


def build_heat(cfg: dict) -> ModelSpec:
    sec = cfg["heat"]
    box = _box(sec["box"])
    return heat_model(str(sec["phi"]), box, box.dim, sec.get("mode", "inf"))


def build_bsb(sec: dict, side: str = "offer") -> BSBSpec:
    kw = {k: sec[k] for k in ("Nx", "width", "cfl") if k in sec}
    spec = BSBSpec(str(sec["payoff"]), float(sec.get("r", 0.0)), sec["sigma_lo"], sec["sigma_hi"], sec["spot"], sec["T"], side, **kw)
    if "Nt" in sec:
        g = spec.default_grid()
        grid = GridSpec(g.x_min, g.x_max, g.Nx, g.T, sec["Nt"], True)
        spec = BSBSpec(spec.payoff, spec.r, spec.sigma_lo, spec.sigma_hi, spec.spot, spec.T, side, grid=grid, **kw)
    return spec


# -- validation ----------------------------------------------------------------------------


def _diag(path, message) -> dict:
    return {"path": path, "message": message}


def _walk_exprs(cfg: dict):
    """(path, text) of every expression-valued field."""
    m = cfg.get("model", {})
    for key in ("terminal", "g"):
        if key in m:
            yield f"model.{key}", m[key]
    for key in ("b", "f"):
        for i, e in enumerate(m.get(key, [])):
            yield f"model.{key}[{i}]", e
    for key in ("h", "sigma"):
        for i, row in enumerate(m.get(key, [])):
            for j, e in enumerate(row):
                yield f"model.{key}[{i}][{j}]", e
    if "phi" in cfg.get("heat", {}):
        yield "heat.phi", cfg["heat"]["phi"]
    if "payoff" in cfg.get("bsb", {}):
        yield "bsb.payoff", cfg["bsb"]["payoff"]


def _band_checks(cfg: dict):
    boxes = []
    if "model" in cfg:
        boxes.append(("model.box", cfg["model"].get("box", [])))
        for k, b in enumerate(cfg["model"].get("bands3", [])):
            boxes.append((f"model.bands3[{k}]", b))
    if "heat" in cfg:
        boxes.append(("heat.box", cfg["heat"].get("box", [])))
    for path, box in boxes:
        for j, (lo, hi) in enumerate(box):
            if lo > hi:
                yield _diag(f"{path}[{j}]", f"band lower bound {lo} exceeds upper bound {hi}")
    if "counterexample" in cfg:
        lo, hi = cfg["counterexample"]["band"]
        if lo > hi:
            yield _diag("counterexample.band", f"band lower bound {lo} exceeds upper bound {hi}")
    b = cfg.get("bsb")
    if b and b["sigma_lo"] > b["sigma_hi"]:
        yield _diag("bsb.sigma_lo", f"sigma_lo {b['sigma_lo']} exceeds sigma_hi {b['sigma_hi']}")


def validate(cfg, command: str | None = None) -> list[dict]:
    """All problems found in ``cfg``; an empty list means the config is runnable."""
    schema = load_schema()
    errs = sorted(jsonschema.Draft202012Validator(schema).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    out = [_diag(".".join(str(p) for p in e.absolute_path) or "<root>", e.message) for e in errs]
    if out:
        return out
    for sec in REQUIRED.get(command, ()):
        if sec not in cfg:
            out.append(_diag(sec, f"section required by '{command}' is missing"))
    if command == "scan" and "bsb" not in cfg and "heat" not in cfg:
        out.append(_diag("scan", "scan needs a 'bsb' or a 'heat' section"))
    for path, text in _walk_exprs(cfg):
        try:
            parse_field(text)
        except ParseError as exc:
            out.append(_diag(path, f"expression error: {exc}"))
    out.extend(_band_checks(cfg))
    if out:
        return out
    # semantic construction and the explicit-step stability condition
    try:
        model = None
        if "model" in cfg:
            model = build_model(cfg["model"])
        elif "heat" in cfg:
            model = build_heat(cfg)
        if model is not None and "grid" in cfg:
            grid = build_grid(cfg["grid"], model)
            probe = model.replace(box=_hull(model.bands3), bands3=None) if model.bands3 else model
            check_cfl(probe, grid)
        if "bsb" in cfg:
            spec = build_bsb(cfg["bsb"])
            check_cfl(spec.model(), spec.default_grid())
    except CFLError as exc:
        section = "bsb" if "bsb" in cfg and "grid" not in cfg else "grid"
        out.append(_diag(f"{section}.Nt", f"{exc}; use Nt >= {math.ceil(_t_of(cfg) / exc.max_dt)} or omit Nt"))
    except (ValueError, KeyError) as exc:
        out.append(_diag("<semantic>", str(exc)))
    return out


def _t_of(cfg: dict) -> float:
    return float(cfg["grid"]["T"] if "grid" in cfg else cfg["bsb"]["T"])


# -- commands ------------------------------------------------------------------------------


class Run:
    """Accumulates the outputs of one command."""

    def __init__(self, out: Path, threads: int, emit_policy: bool):
        self.out = out
        self.threads = threads
        self.emit_policy = emit_policy
        self.scalars: dict = {}
        self.files: dict = {}
        self.checks: dict = {}

    def file(self, key: str, name: str) -> Path:
        self.files[key] = name
        return self.out / name


def _surface_outputs(run: Run, cfg: dict, surface, policy, name: str = "surface.csv"):
    surface.to_csv(run.file(name.removesuffix(".csv"), name), policy if run.emit_policy else None)
    v0 = surface.values[0]
    run.scalars["value_min_t0"] = float(np.min(v0))
    run.scalars["value_max_t0"] = float(np.max(v0))
    run.scalars["Nt"] = surface.grid.Nt
    if "x0" in cfg and surface.grid.n == 1:
        run.scalars["value_at_x0"] = surface.at(cfg["x0"], 0)
    run.checks["finite"] = bool(np.all(np.isfinite(surface.values)))


def cmd_gheat(cfg, run: Run):
    model = build_heat(cfg)
    surface, policy = solve_hjb(model, build_grid(cfg["grid"], model))
    _surface_outputs(run, cfg, surface, policy)


def cmd_hjb(cfg, run: Run):
    model = build_model(cfg["model"])
    grid = build_grid(cfg["grid"], model)
    surface, policy = multi_band_hjb(model, grid) if model.bands3 else solve_hjb(model, grid)
    _surface_outputs(run, cfg, surface, policy)


def cmd_bsde(cfg, run: Run):
    model = build_model(cfg["model"])
    grid = build_grid(cfg["grid"], model)
    p = cfg.get("picard", {})
    surface, diag = picard_solve(model, grid, p.get("tol", 1e-8), p.get("max_iter", 100), p.get("y0", 0.0))
    _surface_outputs(run, cfg, surface, None)
    diag.to_csv(run.file("picard", "picard.csv"))
    run.scalars.update(iterations=diag.iterations, final_delta=diag.deltas[-1], beta=diag.beta)
    run.checks["contraction"] = all(r < 1 for r in diag.ratios)


def cmd_bsb(cfg, run: Run):
    prices = {}
    for side in ("offer", "bid"):
        res = bsb_price(build_bsb(cfg["bsb"], side))
        prices[side] = res.price
        res.surface.to_csv(run.file(side, f"{side}.csv"), res.policy if run.emit_policy else None)
        run.checks[f"{side}_finite"] = bool(np.all(np.isfinite(res.surface.values)))
    run.scalars.update(offer=prices["offer"], bid=prices["bid"], spread=prices["offer"] - prices["bid"])
    run.checks["bid_le_offer"] = prices["bid"] <= prices["offer"] + 1e-12


def cmd_scan(cfg, run: Run):
    sc = cfg.get("scan", {})
    use_bsb = sc.get("setup", "bsb" if "bsb" in cfg else "heat") == "bsb"
    if use_bsb:
        setup = build_bsb(cfg["bsb"])
    else:
        h = cfg["heat"]
        if len(h["box"]) != 1:
            raise ConfigError([_diag("heat.box", "scan needs a single band")])
        setup = HeatSetup(str(h["phi"]), float(sc.get("x", cfg.get("x0", 0.0))), float(sc.get("T", 1.0)), tuple(h["box"][0]))
    res = representation_scan(setup, sc.get("Na", 21))
    res.to_csv(run.file("scan", "scan.csv"))
    run.scalars.update(inf=res.inf, sup=res.sup, argmin=res.argmin, argmax=res.argmax)


def _mc_policy(cfg, spec: BSBSpec) -> PolicySpec:
    pol = cfg["mc"]["policy"]
    band = spec.box.bands[0]
    kind = pol["kind"]
    if kind == "constant":
        if "value" not in pol:
            raise ConfigError([_diag("mc.policy.value", "constant policy needs a value")])
        return PolicySpec.constant(pol["value"], band)
    if kind == "random":
        return PolicySpec.random(band)
    res = bsb_price(spec)
    if kind == "lookup":
        return PolicySpec.lookup(res.policy)
    return PolicySpec.bangbang(res.surface, spec.model())


def cmd_mc(cfg, run: Run):
    mc = cfg["mc"]
    spec = build_bsb(cfg["bsb"], mc.get("side", "bid"))
    policy = _mc_policy(cfg, spec)
    chunk = mc.get("chunk", 10_000)
    est = mc_policy_value(spec, policy, spec.payoff, mc["n_paths"], mc["n_steps"], mc["seed"], chunk=chunk, threads=run.threads)
    run.scalars.update(mean=est.mean, stderr=est.stderr, n_paths=est.n)
    # quadratic-variation audit on the first chunk of paths (same streams as above)
    batch = sample_paths(spec, policy, min(chunk, mc["n_paths"]), mc["n_steps"], mc["seed"])
    qv = quad_var_report(batch)
    qv.to_csv(run.file("quadvar", "quadvar.csv"))
    lo, hi = qv.extremal
    run.scalars.update(qv_violations=qv.violations, qv_min_ratio=lo, qv_max_ratio=hi)
    run.checks["quadvar_in_band"] = qv.violations == 0


def cmd_counterexample(cfg, run: Run):
    c = cfg["counterexample"]
    res = counterexample_limit(c["band"], c["deltas"])
    res.to_csv(run.file("counterexample", "counterexample.csv"))
    run.scalars.update(value_min=min(res.values), value_max=max(res.values), qs_limit=res.qs_limit)
    run.checks["gap_persists"] = min(res.values) > res.qs_limit


def _lookup(ns: dict, key):
    if isinstance(key, (int, float)):
        return float(key)
    if key not in ns:
        raise ConfigError([_diag("suite.assertions", f"unknown quantity '{key}'")])
    return float(ns[key])


def check_assertion(a: dict, ns: dict) -> bool:
    lhs, rhs, tol, op = _lookup(ns, a["lhs"]), _lookup(ns, a["rhs"]), float(a.get("tol", 0.0)), a["op"]
    if op in ("==", "approx"):
        return abs(lhs - rhs) <= tol
    if op == "rel":
        return abs(lhs - rhs) <= tol * abs(rhs)
    if op == "<=":
        return lhs <= rhs + tol
    if op == ">=":
        return lhs >= rhs - tol
    if op == "<":
        return lhs < rhs + tol
    return lhs > rhs - tol


def cmd_verify(cfg, run: Run, base: Path):
    suite = cfg["suite"]
    ns: dict = {}
    for sc in suite.get("scenarios", []):
        if "config" in sc:
            sub = sc["config"]
        elif "config_path" in sc:
            sub = json.loads((base / sc["config_path"]).read_text())
        else:
            raise ConfigError([_diag(f"suite.scenarios.{sc['name']}", "needs 'config' or 'config_path'")])
        diags = validate(sub, sc["command"])
        if diags:
            raise ConfigError([_diag(f"{sc['name']}.{d['path']}", d["message"]) for d in diags])
        sub_dir = run.out / sc["name"]
        doc = execute(sc["command"], sub, sub_dir, run.threads, run.emit_policy)
        for k, v in doc["scalars"].items():
            ns[f"{sc['name']}.{k}"] = v
        for k, v in doc["checks"].items():
            run.checks[f"{sc['name']}.{k}"] = v
        run.files[sc["name"]] = f"{sc['name']}/result.json"
    for i, a in enumerate(suite.get("assertions", [])):
        run.checks[f"assert[{i}] {a['lhs']} {a['op']} {a['rhs']}"] = check_assertion(a, ns)
    acc = suite.get("acceptance", [])
    if acc:
        from .acceptance import CRITERIA

        for k in sorted(CRITERIA) if acc == "all" else acc:
            res = CRITERIA[k]()
            print(res.line(), file=sys.stderr)
            run.checks[f"criterion_{k}"] = res.passed
            run.scalars[f"criterion_{k}_seconds"] = res.seconds
    run.scalars.update(ns)


HANDLERS = {
    "gheat": cmd_gheat,
    "hjb": cmd_hjb,
    "bsde": cmd_bsde,
    "bsb": cmd_bsb,
    "scan": cmd_scan,
    "mc": cmd_mc,
    "counterexample": cmd_counterexample,
}


def execute(command: str, cfg: dict, out: Path, threads: int = 1, emit_policy: bool = False, base: Path | None = None) -> dict:
    """Run ``command`` on a validated config; writes and returns the result document."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(out, threads, emit_policy)
    t0 = time.perf_counter()
    if command == "verify":
        cmd_verify(cfg, run, base or Path.cwd())
    else:
        HANDLERS[command](cfg, run)
    (out / "config.json").write_text(canonical_json(cfg) + "\n")
    doc = {
        "command": command,
        "metadata": {
            "config_sha256": config_hash(cfg),
            "versions": {
                "gexpect": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "threads": threads,
            "wall_time_s": time.perf_counter() - t0,
        },
        "scalars": {k: _plain(v) for k, v in run.scalars.items()},
        "files": {**run.files, "config": "config.json"},
        "checks": {k: bool(v) for k, v in run.checks.items()},
    }
    (out / "result.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _plain(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("GEXPECT_THREADS")
    return int(env) if env else 1


def _fail(code: int, kind: str, message: str, diagnostics=None) -> int:
    err = {"error": kind, "message": message}
    if diagnostics:
        err["diagnostics"] = diagnostics
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gexpect", description="Sublinear expectation solvers")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", type=Path, default=None, help="output directory (not needed for validate)")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: $GEXPECT_THREADS or 1)")
    ap.add_argument("--emit-policy", action="store_true", help="add optimal-vertex columns to surface CSVs")
    args = ap.parse_args(argv)

    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_CONFIG, "config", f"cannot read config: {exc}")
    if args.command == "validate":
        diags = validate(cfg)
        print(json.dumps({"valid": not diags, "diagnostics": diags}, indent=2))
        return EXIT_CONFIG if diags else EXIT_OK
    diags = validate(cfg, args.command)
    if diags:
        return _fail(EXIT_CONFIG, "config", "invalid configuration", diags)
    if args.out is None:
        return _fail(EXIT_CONFIG, "config", "--out is required")
    threads = _threads(args.threads)
    if threads < 1:
        return _fail(EXIT_CONFIG, "config", "threads must be >= 1")
    try:
        doc = execute(args.command, cfg, args.out, threads, args.emit_policy, base=args.config.parent)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.diagnostics)
    except CFLError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (ArithmeticError, PicardError, ValueError) as exc:
        return _fail(EXIT_COMPUTE, "computation", f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - any other failure is still reported as JSON
        return _fail(EXIT_COMPUTE, "internal", f"{type(exc).__name__}: {exc}")
    failed = [k for k, v in doc["checks"].items() if not v]
    if args.command == "verify" and failed:
        return _fail(EXIT_VERIFY, "verification", "checks failed", failed)
    print(json.dumps(doc["scalars"], sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
