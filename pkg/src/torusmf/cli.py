"""Command-line front end: reproducible runs with manifest-tracked artifacts.

Subcommands
-----------
solve      minimize J at a fixed coupling (or a list of couplings)
continue   warm-started continuation toward the critical coupling
green      report the Robin constant and local expansion coefficients
testfn     build the concentrating family and fit its expansion
report     verify and consolidate an existing run directory

Configuration is one YAML file (--config); --grid and --out override the
corresponding fields. The resolved configuration is echoed into the run
manifest so a run can be reproduced byte-for-byte from its artifacts
alone. Exit status: 0 all requested checks passed, 1 numerical failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io as run_io
from . import report as report_mod
from .blowup import (
    EIGHT_PI,
    continuation_run,
    default_schedule,
    inf_J_formula,
    j_expansion_fit,
)
from .green import green_function, robin_constant
from .prescribed import PrescribedFunction
from .solver import SolverOptions, SolverState, cold_start, minimize
from .spectral import ScalarField, grid

USAGE_ERROR = 2
NUMERICAL_ERROR = 1


class ConfigError(ValueError):
    """Invalid or missing configuration field; carries the field name."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return raw


def _resolve_h(cfg: dict) -> PrescribedFunction:
    spec = cfg.get("h")
    if spec is None:
        raise ConfigError("missing field: h")
    try:
        return PrescribedFunction.from_spec(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid field h: {exc}") from exc


def _resolve_grid(cfg: dict, override: int | None):
    n = override if override is not None else cfg.get("grid", {}).get("n", 256)
    n = int(n)
    if n < 16 or n & (n - 1):
        raise ConfigError(f"invalid field grid.n: {n} (need a power of two >= 16)")
    return grid(n)


def _resolve_solver_options(cfg: dict) -> SolverOptions:
    section = cfg.get("solver", {})
    if not isinstance(section, dict):
        raise ConfigError("invalid field solver: must be a mapping")
    allowed = {
        "dt_init",
        "dt_max",
        "tol_residual",
        "max_steps",
        "newton_enabled",
        "newton_tol",
    }
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"invalid field solver.{sorted(unknown)[0]}")
    try:
        return SolverOptions(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid field solver: {exc}") from exc


def _resolved_config(cfg: dict, mode: str, g, h: PrescribedFunction, extra: dict) -> dict:
    opts = _resolve_solver_options(cfg)
    fields = ("dt_init", "dt_max", "tol_residual", "max_steps",
              "newton_enabled", "newton_tol")
    out = {
        "mode": mode,
        "grid": {"n": g.n},
        "h": h.spec_dict(),
        "solver": {k: getattr(opts, k) for k in fields},
    }
    out.update(extra)
    return out


def _prepare_out(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(default_name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _state_summary(state: SolverState) -> dict:
    return {
        "rho": state.rho,
        "residual": state.residual,
        "J_value": state.J_value,
        "mass": state.mass,
        "max_u": float(np.max(state.u.values)),
        "steps": state.step_count,
        "converged": state.converged,
    }


def _cmd_solve(args, cfg: dict) -> int:
    h = _resolve_h(cfg)
    g = _resolve_grid(cfg, args.grid)
    opts = _resolve_solver_options(cfg)
    section = cfg.get("solve", {})
    rho_list = section.get("rho", 4.0 * math.pi)
    if not isinstance(rho_list, list):
        rho_list = [rho_list]
    rho_list = [float(r) for r in rho_list]
    for r in rho_list:
        if not 0.0 < r <= EIGHT_PI:
            raise ConfigError(f"invalid field solve.rho: {r} outside (0, 8 pi]")
    if sorted(rho_list) != rho_list:
        raise ConfigError("invalid field solve.rho: list must be increasing")

    out = _prepare_out(args, "run_solve")
    u0 = (
        cold_start(g, h, amplitude=float(section.get("amplitude", 1.0)))
        if section.get("start", "zero") == "bump"
        else ScalarField(g, np.zeros((g.n, g.n)))
    )
    results = []
    for r in rho_list:
        state = minimize(r, h, u0, opts)
        results.append((r, state))
        if not args.quiet:
            print(
                f"rho {r:.6f}: residual {state.residual:.3e}, "
                f"J {state.J_value:.12f}, steps {state.step_count}"
            )
    summary = _state_summary(results[-1][1])
    summary["tol_residual"] = opts.tol_residual
    if len(results) > 1:
        summary["J_by_rho"] = [[r, st.J_value] for r, st in results]
    run_io.write_json(out / "summary.json", summary)
    if section.get("snapshot", True):
        run_io.write_field_snapshot(
            out / "solution.bin",
            results[-1][1].u,
            {"field": "u", "rho": results[-1][1].rho},
        )
    resolved = _resolved_config(cfg, "solve", g, h, {"solve": {"rho": rho_list}})
    run_io.write_manifest(out, resolved)
    ok = all(st.residual <= opts.tol_residual for _, st in results)
    if len(results) > 1:
        js = [st.J_value for _, st in results]
        ok = ok and all(b < a for a, b in zip(js, js[1:]))
    return 0 if ok else NUMERICAL_ERROR


def _cmd_continue(args, cfg: dict) -> int:
    h = _resolve_h(cfg)
    g = _resolve_grid(cfg, args.grid)
    opts = _resolve_solver_options(cfg)
    section = cfg.get("continue", {})
    if "schedule" in section:
        schedule = [float(e) for e in section["schedule"]]
    else:
        schedule = default_schedule(
            eps_start=float(section.get("eps_start", 1.0)),
            ratio=float(section.get("ratio", 0.5)),
            eps_min=float(section.get("eps_min", 1.0e-4)),
        )
    if any(b >= a for a, b in zip(schedule, schedule[1:])) or not schedule:
        raise ConfigError("invalid field continue.schedule: must decrease")

    out = _prepare_out(args, "run_continue")
    result = continuation_run(h, schedule, opts, g=g)
    if len(result) == 0:
        print("continuation produced no records", file=sys.stderr)
        return NUMERICAL_ERROR
    run_io.write_diagnostics_csv(out / "diagnostics.csv", result.records)
    final = result.records[-1]
    summary = {
        "stages": len(result),
        "halted": result.halted,
        "final_eps": final.eps,
        "final_lambda": final.lam,
        "final_identity_ratio": final.identity_ratio,
        "final_J": final.J_value,
        "blowup_regime": bool(final.asymptotic),
        "inf_J_formula": inf_J_formula(h, robin_constant(g)),
    }
    if section.get("critical_solve", False) and result.halted is None:
        state = minimize(EIGHT_PI, h, result.states[-1].u, opts)
        summary["critical_solve_residual"] = state.residual
    run_io.write_json(out / "summary.json", summary)
    if section.get("snapshot", False):
        run_io.write_field_snapshot(
            out / "final_state.bin",
            result.states[-1].u,
            {"field": "u", "eps": final.eps, "rho": EIGHT_PI - final.eps},
        )
    resolved = _resolved_config(
        cfg, "continue", g, h, {"continue": {"schedule": schedule}}
    )
    run_io.write_manifest(out, resolved)
    if not args.quiet:
        print(
            f"stages {len(result)}, final eps {final.eps:.3e}, "
            f"peak height {final.lam:.4f}, halted: {result.halted or 'schedule end'}"
        )
    failed = result.halted is not None and result.halted.startswith("solver_failure")
    return NUMERICAL_ERROR if failed else 0


def _cmd_green(args, cfg: dict) -> int:
    g = _resolve_grid(cfg, args.grid)
    section = cfg.get("green", {})
    pole = tuple(float(c) for c in section.get("pole", (0.0, 0.0)))
    gd = green_function(g, pole).with_expansion()
    exp_fit = gd.expansion
    out = _prepare_out(args, "run_green")
    summary = {
        "n": g.n,
        "pole": list(pole),
        "robin_constant": gd.robin,
        "expansion": {
            "b1": exp_fit.b1,
            "b2": exp_fit.b2,
            "c1": exp_fit.c1,
            "c2": exp_fit.c2,
            "c3": exp_fit.c3,
        },
    }
    run_io.write_json(out / "summary.json", summary)
    h = PrescribedFunction.constant(1.0)
    run_io.write_manifest(out, _resolved_config(cfg, "green", g, h, {"green": {"pole": list(pole)}}))
    if not args.quiet:
        print(
            f"robin constant {gd.robin:.12f}, quadratic trace "
            f"{exp_fit.c1 + exp_fit.c3:.6f}"
        )
    return 0


def _cmd_testfn(args, cfg: dict) -> int:
    h = _resolve_h(cfg)
    g = _resolve_grid(cfg, args.grid)
    section = cfg.get("testfn", {})
    center = tuple(float(c) for c in section.get("center", (0.0, 0.0)))
    eps_lo = float(section.get("eps_min", 1.0e-4))
    eps_hi = float(section.get("eps_max", 1.0e-2))
    count = int(section.get("count", 9))
    if not 0.0 < eps_lo < eps_hi:
        raise ConfigError("invalid field testfn.eps_min/eps_max")
    eps_list = np.logspace(math.log10(eps_lo), math.log10(eps_hi), count)

    gd = green_function(g, center).with_expansion()
    intercept, slope = j_expansion_fit(h, center, eps_list, gd)
    hp = float(h.evaluate(*center))
    lap_log = float(h.log_laplacian(*center))
    summary = {
        "center": list(center),
        "eps_list": [float(e) for e in eps_list],
        "intercept": intercept,
        "intercept_target": -1.0 - math.log(math.pi) - math.log(hp) - gd.robin / 2.0,
        "slope": slope,
        "slope_target": -(lap_log + EIGHT_PI) / 4.0,
        "robin_constant": gd.robin,
    }
    out = _prepare_out(args, "run_testfn")
    run_io.write_json(out / "summary.json", summary)
    run_io.write_manifest(
        out,
        _resolved_config(
            cfg,
            "testfn",
            g,
            h,
            {"testfn": {"center": list(center), "count": count,
                        "eps_min": eps_lo, "eps_max": eps_hi}},
        ),
    )
    rel_c = abs(intercept - summary["intercept_target"]) / abs(summary["intercept_target"])
    rel_s = abs(slope - summary["slope_target"]) / abs(summary["slope_target"])
    if not args.quiet:
        print(
            f"intercept {intercept:.6f} (target {summary['intercept_target']:.6f}, "
            f"rel {rel_c:.2e}); slope {slope:.4f} "
            f"(target {summary['slope_target']:.4f}, rel {rel_s:.2e})"
        )
    return 0 if rel_c <= 0.02 and rel_s <= 0.15 else NUMERICAL_ERROR


def _cmd_report(args, cfg: dict) -> int:
    if args.out is None:
        raise ConfigError("report mode needs --out pointing at a run directory")
    report = report_mod.render_report(Path(args.out))
    if not args.quiet:
        text = (Path(args.out) / "report.txt").read_text(encoding="utf-8")
        print(text, end="")
    return 0 if report.all_passed else NUMERICAL_ERROR


_COMMANDS = {
    "solve": _cmd_solve,
    "continue": _cmd_continue,
    "green": _cmd_green,
    "testfn": _cmd_testfn,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="torusmf",
        description="mean-field equation laboratory on the unit torus",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML configuration file")
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--grid", type=int, default=None, help="grid size override")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except run_io.IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except Exception as exc:  # numerical failures carry their diagnostics
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
