"""Batch driver: ``fde-lab run <config.json>`` and ``fde-lab plot <report.json> --quantity NAME``.

Exit codes: 0 all checks passed, 1 a check failed (or plot quantity missing),
2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fde_lab import diagnostics as dg
from fde_lab import funcineq as fi
from fde_lab.domain import build_grid
from fde_lab.errors import ConfigurationError, FDELabError, ParameterError, RunFailure, SolverError
from fde_lab.evolve import (
    DtPolicy,
    StopCriterion,
    estimate_extinction_time,
    evolve_base,
    evolve_rescaled,
    rescaled_image,
    save_trajectory,
)
from fde_lab.steady import first_eigenpair, initial_data, solve_steady, weighted_eigenpair

EXIT_OK, EXIT_CHECK, EXIT_SCHEMA, EXIT_SOLVER = 0, 1, 2, 3
EXPERIMENTS = ("steady", "evolve_base", "evolve_rescaled", "diagnose", "funcineq")
INITIAL_KINDS = ("scaled_steady", "steady_plus_bump", "weighted_eigenfunction")

# check name -> (comparison, default tolerance)
CHECKS = {
    "steady_residual": ("le", 1e-8),
    "J_monotone": ("le", 0.0),
    "dissipation_rel_mid": ("le", 0.05),
    "bc_margin": ("le", 0.0),
    "harnack_c0": ("le", 10.0),
    "rate_r2": ("ge", 0.95),
    "extinction_r2": ("ge", 0.99),
    "sobolev_samples": ("le", 0.0),
    "ode_bound": ("le", 1e-9),
    "bridge": ("le", 0.0),
}
DEFAULT_CHECKS = {
    "steady": ["steady_residual"],
    "evolve_base": ["J_monotone"],
    "evolve_rescaled": ["J_monotone", "bc_margin"],
    "diagnose": ["J_monotone", "bc_margin"],
    "funcineq": ["sobolev_samples", "ode_bound", "bridge"],
}


# -- configuration ------------------------------------------------------------------------------


@dataclass
class RunConfig:
    experiment: str
    grid: dict
    p: float
    b: float = 0.0
    initial: dict = field(default_factory=lambda: {"kind": "scaled_steady", "a": 0.5})
    dt_policy: dict = field(default_factory=dict)
    t_end: float | None = None
    checks: dict = field(default_factory=dict)
    output: str = "fde_lab_out"
    seed: int = 0
    name: str | None = None

    def echo(self) -> dict:
        return {"schema": 1, "experiment": self.experiment, "grid": self.grid, "p": self.p, "b": self.b,
                "initial": self.initial, "dt_policy": self.dt_policy, "t_end": self.t_end, "checks": self.checks,
                "output": self.output, "seed": self.seed, "name": self.name}


class SchemaError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _number(obj, path, *, integer=False):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)) or (integer and not float(obj).is_integer()):
        raise SchemaError(path, f"expected {'an integer' if integer else 'a number'}, got {obj!r}")
    if not math.isfinite(obj):
        raise SchemaError(path, "must be finite")
    return int(obj) if integer else float(obj)


def _keys(obj, path, allowed, required=()):
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    for k in obj:
        if k not in allowed:
            raise SchemaError(f"{path}.{k}" if path else k, "unknown field")
    for k in required:
        if k not in obj:
            raise SchemaError(f"{path}.{k}" if path else k, "missing required field")


def parse_config(data: dict) -> RunConfig:
    """Validate a ``schema: 1`` document; errors name the offending field path."""
    top = ("schema", "experiment", "grid", "p", "b", "initial", "dt_policy", "t_end", "checks", "output", "seed", "name")
    _keys(data, "", top, ("schema", "experiment", "grid", "p"))
    if data["schema"] != 1:
        raise SchemaError("schema", f"unsupported schema version {data['schema']!r}")
    exp = data["experiment"]
    if exp not in EXPERIMENTS:
        raise SchemaError("experiment", f"must be one of {list(EXPERIMENTS)}")
    g = data["grid"]
    _keys(g, "grid", ("dimension", "extents", "N"), ("dimension", "N"))
    dim = _number(g["dimension"], "grid.dimension", integer=True)
    if dim not in (1, 2):
        raise SchemaError("grid.dimension", "must be 1 or 2")
    extents = g.get("extents", [[0.0, 1.0]] * dim)
    if not isinstance(extents, list) or len(extents) != dim:
        raise SchemaError("grid.extents", f"expected {dim} [a, b] pairs")
    for i, e in enumerate(extents):
        if not isinstance(e, list) or len(e) != 2:
            raise SchemaError(f"grid.extents[{i}]", "expected an [a, b] pair")
        a, b = (_number(v, f"grid.extents[{i}]") for v in e)
        if not b > a:
            raise SchemaError(f"grid.extents[{i}]", "degenerate extent")
    N = g["N"]
    Ns = N if isinstance(N, list) else [N] * dim
    if len(Ns) != dim:
        raise SchemaError("grid.N", f"expected {dim} node counts")
    for i, n in enumerate(Ns):
        if _number(n, "grid.N", integer=True) < 3:
            raise SchemaError("grid.N", "need at least 3 nodes per axis")
    p = _number(data["p"], "p")
    if not p > 1:
        raise SchemaError("p", f"must exceed 1, got {p}")
    b = _number(data.get("b", 0.0), "b")
    init = data.get("initial", {"kind": "scaled_steady", "a": 0.5})
    _keys(init, "initial", ("kind", "a", "center", "width", "amplitude", "scale"), ("kind",))
    if init["kind"] not in INITIAL_KINDS:
        raise SchemaError("initial.kind", f"must be one of {list(INITIAL_KINDS)}")
    for k in ("a", "width", "amplitude", "scale"):
        if k in init:
            _number(init[k], f"initial.{k}")
    dtp = data.get("dt_policy", {})
    _keys(dtp, "dt_policy", ("dt", "extinction_fraction", "snapshot_every", "snapshot_interval", "max_steps"))
    for k in ("dt", "extinction_fraction", "snapshot_interval"):
        if dtp.get(k) is not None and _number(dtp[k], f"dt_policy.{k}") <= 0:
            raise SchemaError(f"dt_policy.{k}", "must be positive")
    for k in ("snapshot_every", "max_steps"):
        if k in dtp and _number(dtp[k], f"dt_policy.{k}", integer=True) < 1:
            raise SchemaError(f"dt_policy.{k}", "must be >= 1")
    t_end = data.get("t_end")
    if t_end is not None and _number(t_end, "t_end") <= 0:
        raise SchemaError("t_end", "must be positive")
    if exp == "evolve_rescaled" and t_end is None:
        raise SchemaError("t_end", "required for evolve_rescaled")
    checks = data.get("checks", {})
    if isinstance(checks, list):
        checks = {c: None for c in checks}
    if not isinstance(checks, dict):
        raise SchemaError("checks", "expected an object mapping check names to tolerances")
    for k, v in checks.items():
        if k not in CHECKS:
            raise SchemaError(f"checks.{k}", f"unknown check; known: {sorted(CHECKS)}")
        if v is not None:
            _number(v, f"checks.{k}")
    output = data.get("output", "fde_lab_out")
    if not isinstance(output, str):
        raise SchemaError("output", "expected a string")
    seed = _number(data.get("seed", 0), "seed", integer=True)
    name = data.get("name")
    if name is not None and not isinstance(name, str):
        raise SchemaError("name", "expected a string")
    return RunConfig(exp, {"dimension": dim, "extents": extents, "N": N}, p, b, dict(init), dict(dtp), t_end,
                     dict(checks), output, seed, name)


# -- report -------------------------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    checks: list = field(default_factory=list)  # {name, passed, value, tolerance}
    manifest: list = field(default_factory=list)  # {path, sha256}
    timing: float = 0.0
    status: str = "ok"
    message: str = ""

    def to_dict(self) -> dict:
        return {"config": self.config, "checks": self.checks, "manifest": self.manifest,
                "timing_seconds": self.timing, "status": self.status, "message": self.message}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Writer:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []
        root.mkdir(parents=True, exist_ok=True)

    def text(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.files.append(path)
        return path

    def extend(self, paths):
        self.files.extend(Path(p) for p in paths)

    def manifest(self) -> list:
        return [{"path": str(p.relative_to(self.root)), "sha256": _sha256(p)} for p in sorted(set(self.files))]


def _check(report: RunReport, cfg: RunConfig, name: str, value: float):
    if name not in _active_checks(cfg):
        return
    op, default = CHECKS[name]
    tol = cfg.checks.get(name)
    tol = default if tol is None else tol
    passed = value <= tol if op == "le" else value >= tol
    report.checks.append({"name": name, "passed": bool(passed), "value": float(value), "tolerance": float(tol), "comparison": op})


def _active_checks(cfg: RunConfig):
    return set(cfg.checks) if cfg.checks else set(DEFAULT_CHECKS[cfg.experiment])


def _write_series(w: _Writer, rep: dg.DiagnosticsReport):
    for name, s in sorted(rep.series.items()):
        w.text(f"series/{name}.csv", s.to_csv())


# -- pipelines ----------------------------------------------------------------------------------------


def _grid(cfg):
    g = cfg.grid
    return build_grid(g["dimension"], g["extents"], g["N"])


def _initial(cfg, steady, grid):
    params = {k: v for k, v in cfg.initial.items() if k != "kind"}
    return initial_data(cfg.initial["kind"], params, steady, grid)


def _policy(cfg) -> DtPolicy:
    return DtPolicy(**cfg.dt_policy)


def _run_steady(cfg, w, report):
    grid = _grid(cfg)
    steady = solve_steady(cfg.p, cfg.b, grid)
    eig = first_eigenpair(grid)
    weig = weighted_eigenpair(grid, cfg.p, cfg.b)
    for stem, obj in (("steady", steady), ("eigen", eig), ("weighted_eigen", weig)):
        obj.save(w.root / stem)
        w.extend([w.root / f"{stem}.csv", w.root / f"{stem}.json"])
    _check(report, cfg, "steady_residual", steady.residual_norm)
    return None


def _base_run(cfg, grid):
    steady = solve_steady(cfg.p, cfg.b, grid)
    u0 = _initial(cfg, steady, grid).u
    traj = evolve_base(u0, cfg.p, cfg.b, _policy(cfg), StopCriterion(t_end=cfg.t_end))
    return steady, traj


def _run_evolve_base(cfg, w, report):
    grid = _grid(cfg)
    steady, traj = _base_run(cfg, grid)
    w.extend(save_trajectory(traj, w.root / "trajectory"))
    Tstar = None
    if traj.status == "extinct":
        est = estimate_extinction_time(traj)
        Tstar = est.Tstar
        _check(report, cfg, "extinction_r2", est.r_squared)
    rep = dg.base_report(traj, Tstar)
    if len(traj) >= 3:
        rel = dg.dissipation_residual(traj, relative=True)
        rep.series["dissipation_residual_rel"] = rel
        mid = int(np.argmin(np.abs(rel.t - rel.t[-1] / 2)))
        _check(report, cfg, "dissipation_rel_mid", rel.values[mid])
    slopes = dg.energy_slopes(traj)
    _check(report, cfg, "J_monotone", float(slopes.max()) if slopes.size else 0.0)
    return rep


def _rescaled_checks(cfg, report, traj, rep):
    slopes = dg.energy_slopes(traj)
    _check(report, cfg, "J_monotone", float(slopes.max()) if slopes.size else 0.0)
    if "bc_margin" in rep.series and len(rep.series["bc_margin"]):
        _check(report, cfg, "bc_margin", float(rep.series["bc_margin"].values.max()))
    _check(report, cfg, "harnack_c0", rep.constants["c0"])
    if "rate_r2" in rep.constants:
        _check(report, cfg, "rate_r2", rep.constants["rate_r2"])
    elif "rate_r2" in _active_checks(cfg):
        _check(report, cfg, "rate_r2", 0.0)


def _run_evolve_rescaled(cfg, w, report):
    grid = _grid(cfg)
    steady = solve_steady(cfg.p, cfg.b, grid)
    v0 = _initial(cfg, steady, grid).u
    traj = evolve_rescaled(v0, cfg.p, cfg.b, _policy(cfg), t_end=cfg.t_end)
    w.extend(save_trajectory(traj, w.root / "trajectory"))
    rep = dg.rescaled_report(traj, steady)
    _rescaled_checks(cfg, report, traj, rep)
    return rep


def _run_diagnose(cfg, w, report):
    """Base run to extinction, estimate T*, and analyse the rescaled image."""
    grid = _grid(cfg)
    steady, traj = _base_run(cfg, grid)
    est = estimate_extinction_time(traj)
    resc = rescaled_image(traj, est.Tstar)
    w.extend(save_trajectory(resc, w.root / "rescaled_trajectory"))
    rep = dg.rescaled_report(resc, steady)
    rep.constants["Tstar"] = est.Tstar
    rep.constants["extinction_r2"] = est.r_squared
    for l in (0, 1):
        try:
            env = dg.scaling_envelope(traj, est.Tstar, l)
            rep.constants[f"envelope_C{l}"] = env.sup
        except FDELabError:
            pass
    _check(report, cfg, "extinction_r2", est.r_squared)
    _rescaled_checks(cfg, report, resc, rep)
    return rep


def _run_funcineq(cfg, w, report):
    grid = _grid(cfg)
    rng = np.random.default_rng(cfg.seed)
    out = {"chi": {}}
    for n, p in ((1, 2.0), (3, 2.0), (4, 3.0), (grid.dimension, cfg.p)):
        pack = fi.chi_exponent(n, p)
        out["chi"][f"n={n},p={p!r}"] = {"s": pack.s, "chi": pack.chi}
    times = tuple(np.linspace(0.0, 1.0, 9))
    fam = fi.PiecewiseLinearFamily(grid, times)
    C = fi.empirical_sobolev_constant(fam, cfg.p, seed=cfg.seed)
    ratios = [fi.weighted_sobolev_ratio(fam.sample(rng), cfg.p) for _ in range(100)]
    out["sobolev"] = {"empirical_constant": C, "max_sample_ratio": max(ratios)}
    _check(report, cfg, "sobolev_samples", max(ratios) - C)
    worst = -math.inf
    for _ in range(50):
        params = fi.random_ode_parameters(rng)
        bound = fi.ode_bound(*params)
        traj = fi.ode_rk4_oracle(*params)
        worst = max(worst, float(traj.max() / bound - 1) if bound > 0 else float(traj.max()))
    out["ode"] = {"max_relative_excess": worst}
    _check(report, cfg, "ode_bound", worst)
    u = fi.SpaceTimeFunction.from_callable(grid, np.linspace(0.0, 1.0, 17), lambda *a: a[-2])
    res = fi.campanato_seminorm(u, 0.5, cfg.p, bridge=True)
    excess = max((b.lhs - b.bound * b.rhs for b in res.bridge), default=0.0)
    out["campanato"] = {"value": res.value, "bridge_constant": res.bridge_constant}
    _check(report, cfg, "bridge", excess)
    w.text("funcineq.json", json.dumps(out, indent=2, sort_keys=True, default=float))
    w.text("campanato.json", fi.norm_json(res.value, res.policy.to_dict()))
    return None


PIPELINES = {
    "steady": _run_steady,
    "evolve_base": _run_evolve_base,
    "evolve_rescaled": _run_evolve_rescaled,
    "diagnose": _run_diagnose,
    "funcineq": _run_funcineq,
}


def run(cfg: RunConfig) -> tuple[int, RunReport]:
    """Execute one experiment; returns (exit code, report). The report is written to ``report.json``."""
    root = Path(cfg.output)
    w = _Writer(root)
    report = RunReport(cfg.echo())
    start = time.perf_counter()
    code = EXIT_OK
    try:
        grid = _grid(cfg)
        if cfg.experiment in ("steady", "evolve_base", "evolve_rescaled", "diagnose"):
            lam1 = first_eigenpair(grid).value
            if cfg.b >= lam1:
                raise ParameterError(f"b = {cfg.b} must be below the first Dirichlet eigenvalue {lam1!r}")
        rep = PIPELINES[cfg.experiment](cfg, w, report)
        if rep is not None:
            w.text("diagnostics.json", rep.to_json())
            _write_series(w, rep)
        failed = [c["name"] for c in report.checks if not c["passed"]]
        if failed:
            code = EXIT_CHECK
            report.status, report.message = "check_failed", "failed checks: " + ", ".join(failed)
    except (ConfigurationError, ParameterError) as exc:
        code, report.status, report.message = EXIT_SCHEMA, "config_error", str(exc)
    except SolverError as exc:
        code, report.status, report.message = EXIT_SOLVER, "solver_failure", str(exc)
        partial = getattr(exc, "partial", None)
        if isinstance(exc, RunFailure) and partial is not None:
            w.extend(save_trajectory(partial, root / "partial_trajectory"))
    except Exception as exc:  # every termination path maps to an exit code
        code, report.status, report.message = EXIT_SOLVER, "failure", f"{type(exc).__name__}: {exc}"
    report.timing = time.perf_counter() - start
    report.manifest = w.manifest()
    (root / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=float))
    return code, report


def _load_configs(path: Path, out: str | None, seed: int | None) -> list[RunConfig]:
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError("<file>", f"cannot read JSON config: {exc}") from exc
    if isinstance(data, dict) and "experiments" in data:
        _keys(data, "", ("schema", "experiments"), ("schema", "experiments"))
        if data["schema"] != 1:
            raise SchemaError("schema", f"unsupported schema version {data['schema']!r}")
        if not isinstance(data["experiments"], list) or not data["experiments"]:
            raise SchemaError("experiments", "expected a non-empty list")
        raw = [dict(e, schema=1) if isinstance(e, dict) else e for e in data["experiments"]]
        listed = True
    else:
        raw, listed = [data], False
    cfgs = []
    for i, item in enumerate(raw):
        try:
            cfg = parse_config(item)
        except SchemaError as exc:
            if listed:
                raise SchemaError(f"experiments[{i}].{exc.path}", str(exc).split(": ", 1)[1]) from exc
            raise
        if seed is not None:
            cfg.seed = seed
        if out is not None:
            cfg.output = out if not listed else str(Path(out) / (cfg.name or f"{i:02d}_{cfg.experiment}"))
        elif listed:
            cfg.output = str(Path(cfg.output) / (cfg.name or f"{i:02d}_{cfg.experiment}"))
        cfgs.append(cfg)
    return cfgs


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FDE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def cmd_run(args) -> int:
    try:
        cfgs = _load_configs(Path(args.config), args.out, args.seed)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    with ThreadPoolExecutor(max_workers=min(_threads(), len(cfgs))) as pool:
        results = list(pool.map(run, cfgs))
    for cfg, (code, report) in zip(cfgs, results):
        status = "ok" if code == EXIT_OK else report.message
        print(f"{cfg.experiment} -> {cfg.output}: {status}")
    codes = [c for c, _ in results]
    # the most severe outcome wins: schema > solver > check
    for code in (EXIT_SCHEMA, EXIT_SOLVER, EXIT_CHECK):
        if code in codes:
            if code == EXIT_SCHEMA:
                for _, rep in results:
                    if rep.status == "config_error":
                        print(f"config error: {rep.message}", file=sys.stderr)
            return code
    return EXIT_OK


def emit_plotdata(report_path, quantity: str, out=None) -> Path:
    """Write ``t,value`` CSV for ``quantity`` taken from the diagnostics next to ``report_path``."""
    report_path = Path(report_path)
    diag_path = report_path if report_path.name == "diagnostics.json" else report_path.parent / "diagnostics.json"
    if not diag_path.exists():
        raise KeyError(quantity)
    rep = dg.DiagnosticsReport.from_dict(json.loads(diag_path.read_text()))
    if quantity not in rep.series:
        raise KeyError(quantity)
    out = Path(out) if out is not None else report_path.parent / f"{quantity}.csv"
    rep.series[quantity].to_csv(out)
    return out


def cmd_plot(args) -> int:
    try:
        path = emit_plotdata(args.report, args.quantity, args.out)
    except KeyError:
        print(f"quantity {args.quantity!r} not present in the report", file=sys.stderr)
        return EXIT_CHECK
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fde-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment(s) in a JSON config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    r.set_defaults(func=cmd_run)
    pl = sub.add_parser("plot", help="export a TimeSeries from a report as t,value CSV")
    pl.add_argument("report")
    pl.add_argument("--quantity", required=True)
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SCHEMA if exc.code else EXIT_OK
    try:
        return args.func(args)
    except FDELabError as exc:  # anything not mapped above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER if isinstance(exc, SolverError) else EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
