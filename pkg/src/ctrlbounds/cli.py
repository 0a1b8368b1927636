"""Batch command-line entry point.

Usage: ``ctrlbounds <subcommand> <config-file>`` with subcommands
primal, dual1, dual2, search, hjb-check, bench, diagnose-degeneracy.

The configuration is a flat ``key = value`` text file with dotted
sections (``box.points = 401``), '#' comments, and comma-separated
lists; there are no positional arguments beyond the subcommand and the
config path, so the echoed config in report.json fully determines the
run.  Every run writes ``report.json`` (results, tool version, echoed
config, machine-readable error codes) and ``series.csv`` into the
output directory.  Exit status: 0 success, 1 validation error, 2 a
weak-duality alarm fired (dual below primal beyond three combined
standard errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dual import PathwiseDPConfig, SpatialBox, degeneracy_diagnostic, dual_v1, dual_v2
from .errors import ConfigError, CtrlBoundsError, UnknownIdentifier
from .hjb_bench import hjb_residual
from .model import TestFunction
from .paths import TimeGrid
from .primal import KIND_ORACLE, BoundEstimate, primal_bound
from .registry import get_benchmark, get_family, resolve_policy
from .search import SearchConfig, SearchTrace, gap_report, minimize_dual

SUBCOMMANDS = ("primal", "dual1", "dual2", "search", "hjb-check", "bench",
               "diagnose-degeneracy")

CONVERGENCE_COLUMNS = ("n_steps", "dt", "primal", "primal_se",
                       "dual1", "dual1_se", "dual2", "gap")
TRACE_COLUMNS = ("iteration", "objective", "objective_se", "is_best")


def _parse_scalar(token: str):
    token = token.strip()
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines with dotted keys into a flat dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("BAD_CONFIG", f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError("BAD_CONFIG", f"line {lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",")]
        else:
            out[key] = _parse_scalar(value)
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("IO_ERROR", f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


@dataclass
class RunConfig:
    """A validated run request: subcommand plus the raw key-value map."""

    subcommand: str
    options: dict

    def get(self, key, default=None):
        return self.options.get(key, default)

    def as_list(self, key, default):
        val = self.options.get(key, default)
        if val is None:
            return None
        return list(val) if isinstance(val, list) else [val]


def _fmt_csv(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt_csv(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def emit_plot_data(obj, path) -> None:
    """Write plottable CSV: search traces get iteration/objective columns,
    anything tabular the convergence-study columns."""
    if isinstance(obj, SearchTrace):
        rows = []
        incumbent = np.inf
        for e in obj.entries:
            is_best = e.objective <= incumbent
            incumbent = min(incumbent, e.objective)
            rows.append({
                "iteration": e.iteration,
                "objective": e.objective,
                "objective_se": e.estimate.std_error if e.estimate is not None else 0.0,
                "is_best": is_best,
            })
        _write_csv(path, TRACE_COLUMNS, rows)
    else:
        _write_csv(path, CONVERGENCE_COLUMNS, list(obj))


def _resolve_h(rc: RunConfig, bench) -> tuple[TestFunction, str]:
    name = rc.get("h", "oracle")
    if name == "oracle":
        if bench.oracle_h is None:
            raise ConfigError("UNKNOWN_H", f"{bench.problem_id} has no oracle test function")
        return bench.oracle_h, "oracle"
    try:
        family = get_family(name)
    except UnknownIdentifier as exc:
        raise ConfigError("UNKNOWN_H", str(exc)) from exc
    params = rc.get("h.params")
    theta = np.asarray(params, float) if params is not None else np.asarray(family.initial)
    if theta.shape != (family.dim,):
        raise ConfigError("BAD_CONFIG",
                          f"h.params must have {family.dim} entries for family {name}")
    return family.build(theta), f"{name}{tuple(round(float(v), 12) for v in theta)}"


def _resolve_box(rc: RunConfig, bench) -> SpatialBox:
    lo = rc.get("box.lo")
    hi = rc.get("box.hi")
    box = bench.default_box
    lo = box.lo if lo is None else np.atleast_1d(np.asarray(lo, float))
    hi = box.hi if hi is None else np.atleast_1d(np.asarray(hi, float))
    return SpatialBox(lo=lo, hi=hi,
                      points=int(rc.get("box.points", box.points)),
                      refine_levels=int(rc.get("box.refine", box.refine_levels)))


def _resolve_dp(rc: RunConfig, box: SpatialBox) -> PathwiseDPConfig:
    lo = rc.get("dp.lo")
    hi = rc.get("dp.hi")
    return PathwiseDPConfig(
        lo=box.lo if lo is None else np.atleast_1d(np.asarray(lo, float)),
        hi=box.hi if hi is None else np.atleast_1d(np.asarray(hi, float)),
        points=int(rc.get("dp.points", 161)),
        control_points=int(rc.get("dp.control_points", 17)),
        control_refine=bool(rc.get("dp.control_refine", False)),
        engine=str(rc.get("dp.engine", "auto")),
        chunk_size=int(rc.get("dp.chunk", 1024)),
    )


def _common(rc: RunConfig):
    pid = rc.get("problem")
    if pid is None:
        raise ConfigError("BAD_CONFIG", "config key 'problem' is required")
    try:
        bench = get_benchmark(str(pid))
    except UnknownIdentifier as exc:
        raise ConfigError("UNKNOWN_PROBLEM", str(exc)) from exc
    t = float(rc.get("t", bench.default_t))
    x_raw = rc.get("x")
    x = (bench.default_x0 if x_raw is None
         else np.atleast_1d(np.asarray(x_raw, float)))
    seed = int(rc.get("seed", 1234))
    n_paths = int(rc.get("n_paths", 10000))
    n_steps = int(rc.get("n_steps", 1000))
    grid = TimeGrid(t, bench.problem.T, n_steps)
    return bench, t, x, seed, n_paths, grid


def _policy(rc: RunConfig, bench):
    name = str(rc.get("policy", "oracle"))
    try:
        return resolve_policy(bench, name, value=rc.get("policy.value"))
    except UnknownIdentifier as exc:
        raise ConfigError("UNKNOWN_POLICY", str(exc)) from exc


def _estimate_row(n_steps, dt, primal=None, dual1=None, dual2=None, gap=None):
    return {
        "n_steps": n_steps,
        "dt": dt,
        "primal": primal.value if primal else None,
        "primal_se": primal.std_error if primal else None,
        "dual1": dual1.value if dual1 else None,
        "dual1_se": dual1.std_error if dual1 else None,
        "dual2": dual2.value if dual2 else None,
        "gap": gap,
    }


def _run_primal(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    policy = _policy(rc, bench)
    est = primal_bound(bench.problem, policy, t, x, n_paths, grid, seed,
                       problem_id=bench.problem_id)
    return {"primal": est.to_dict()}, [_estimate_row(grid.n_steps, grid.dt, primal=est)], 0


def _run_dual1(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    h, h_id = _resolve_h(rc, bench)
    dp = _resolve_dp(rc, _resolve_box(rc, bench))
    est = dual_v1(bench.problem, h, t, x, n_paths, grid, dp, seed,
                  problem_id=bench.problem_id, h_id=h_id)
    return {"dual1": est.to_dict()}, [_estimate_row(grid.n_steps, grid.dt, dual1=est)], 0


def _run_dual2(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    h, h_id = _resolve_h(rc, bench)
    box = _resolve_box(rc, bench)
    est = dual_v2(bench.problem, h, t, x, box, grid,
                  problem_id=bench.problem_id, h_id=h_id)
    return {"dual2": est.to_dict()}, [_estimate_row(grid.n_steps, grid.dt, dual2=est)], 0


def _run_search(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    family_id = rc.get("h")
    if family_id in (None, "oracle"):
        raise ConfigError("BAD_CONFIG", "search requires 'h' to name a parametric family")
    try:
        family = get_family(str(family_id))
    except UnknownIdentifier as exc:
        raise ConfigError("UNKNOWN_H", str(exc)) from exc
    box = _resolve_box(rc, bench)
    config = SearchConfig(
        time_grid=grid, box=box, dp=_resolve_dp(rc, box),
        n_paths=int(rc.get("search.n_paths", 2000)),
        require_supersolution=bool(rc.get("search.require_supersolution", False)),
    )
    objective = str(rc.get("search.objective", "dual_v2"))
    budget = int(rc.get("search.budget", 200))
    trace = minimize_dual(bench.problem, family, objective, t, x, budget, seed, config,
                          problem_id=bench.problem_id)
    best = trace.best
    results = {
        "n_evaluations": len(trace.entries),
        "best_index": trace.best_index,
        "best_params": list(best.params),
        "best_objective": best.objective,
        "best_estimate": best.estimate.to_dict() if best.estimate else None,
        "trace": [
            {"iteration": e.iteration, "params": list(e.params),
             "objective": e.objective, "reason": e.reason}
            for e in trace.entries
        ],
    }
    return results, trace, 0


def _run_hjb_check(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    h, h_id = _resolve_h(rc, bench)
    n_times = int(rc.get("hjb.time_points", 9))
    span = bench.problem.T - bench.problem.t0
    times = bench.problem.t0 + span * (np.arange(n_times) + 0.5) / n_times
    if rc.get("box.lo") is not None or rc.get("box.points") is not None:
        box = _resolve_box(rc, bench)
    else:
        box = bench.residual_box
    tol = float(rc.get("hjb.tol", bench.residual_tol))
    report = hjb_residual(bench.problem, h, times, box, tol=tol)
    return {"h_id": h_id, "hjb": report.to_dict()}, [], 0


def _run_bench(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    h, h_id = _resolve_h(rc, bench)
    policy = _policy(rc, bench)
    box = _resolve_box(rc, bench)
    dp = _resolve_dp(rc, box)
    dual1_paths = int(rc.get("dual1.n_paths", n_paths))
    rows = []
    runs = []
    failed = False
    for n_steps in rc.as_list("bench.n_steps", [grid.n_steps]):
        g = TimeGrid(t, bench.problem.T, int(n_steps))
        p_est = primal_bound(bench.problem, policy, t, x, n_paths, g, seed,
                             problem_id=bench.problem_id)
        d1 = dual_v1(bench.problem, h, t, x, dual1_paths, g, dp, seed,
                     problem_id=bench.problem_id, h_id=h_id)
        d2 = dual_v2(bench.problem, h, t, x, box, g,
                     problem_id=bench.problem_id, h_id=h_id)
        g1 = gap_report(p_est, d1)
        g2 = gap_report(p_est, d2)
        run_failed = g1.failed or g2.failed
        failed = failed or run_failed
        rows.append(_estimate_row(g.n_steps, g.dt, primal=p_est, dual1=d1, dual2=d2,
                                  gap=g2.gap))
        runs.append({
            "n_steps": g.n_steps, "dt": g.dt,
            "primal": p_est.to_dict(), "dual1": d1.to_dict(), "dual2": d2.to_dict(),
            "gap_primal_dual1": g1.to_dict(), "gap_primal_dual2": g2.to_dict(),
            "failed": run_failed,
        })
    results = {"h_id": h_id, "runs": runs, "failed": failed}
    if bench.oracle_h is not None:
        oracle = BoundEstimate(
            value=bench.oracle_value(t, x), std_error=0.0, n_paths=0,
            kind=KIND_ORACLE, dt=0.0, n_steps=0, problem_id=bench.problem_id,
            h_id="oracle", t=t, x=tuple(np.asarray(x, float)),
        )
        results["oracle"] = oracle.to_dict()
    return results, rows, 2 if failed else 0


def _run_diagnose(rc: RunConfig):
    bench, t, x, seed, n_paths, grid = _common(rc)
    h, h_id = _resolve_h(rc, bench)
    box = _resolve_box(rc, bench)
    dp = _resolve_dp(rc, box)
    tol = float(rc.get("degeneracy.tol", 1e-8))
    report = degeneracy_diagnostic(bench.problem, h, t, x, n_paths, grid, dp, box,
                                   seed, tol=tol)
    return {"h_id": h_id, "degeneracy": report.to_dict()}, [], 0


_DISPATCH = {
    "primal": _run_primal,
    "dual1": _run_dual1,
    "dual2": _run_dual2,
    "search": _run_search,
    "hjb-check": _run_hjb_check,
    "bench": _run_bench,
    "diagnose-degeneracy": _run_diagnose,
}


def _write_report(out_dir: Path, subcommand: str, options: dict, results, error) -> None:
    doc = {
        "tool": {"name": "ctrlbounds", "version": __version__},
        "subcommand": subcommand,
        "config": options,
        "results": results,
        "error": error,
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(rc: RunConfig) -> int:
    """Execute one configured run; writes report.json and series.csv."""
    out_dir = Path(str(rc.get("output_dir", ".")))
    out_dir.mkdir(parents=True, exist_ok=True)
    if rc.subcommand not in _DISPATCH:
        _write_report(out_dir, rc.subcommand, rc.options, None,
                      {"code": "UNKNOWN_SUBCOMMAND", "message": rc.subcommand})
        return 1
    try:
        results, series, status = _DISPATCH[rc.subcommand](rc)
    except ConfigError as exc:
        _write_report(out_dir, rc.subcommand, rc.options, None,
                      {"code": exc.code, "message": str(exc)})
        return 1
    except (CtrlBoundsError, ValueError) as exc:
        _write_report(out_dir, rc.subcommand, rc.options, None,
                      {"code": "RUN_ERROR", "message": f"{type(exc).__name__}: {exc}"})
        return 1
    _write_report(out_dir, rc.subcommand, rc.options, results, None)
    emit_plot_data(series, out_dir / "series.csv")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ctrlbounds",
        description="Primal and dual bounds for controlled-diffusion optimal control",
    )
    parser.add_argument("--version", action="version", version=f"ctrlbounds {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a key = value config file")
    args = parser.parse_args(argv)
    try:
        options = load_config(args.config)
    except ConfigError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    code = run(RunConfig(subcommand=args.subcommand, options=options))
    if code:
        print(f"run finished with exit status {code}; see report.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
