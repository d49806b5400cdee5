"""Consolidated reports over completed run directories.

A run directory (as written by the command-line front end) contains a
manifest, a diagnostics CSV for continuation runs, and JSON summaries.
This module verifies artifact integrity, aggregates the tables, fits the
asymptotic trends, and emits a plain-text report with a pass/fail table
keyed to the acceptance-check identifiers AC1..AC11, plus plot-ready PNG
figures rendered alongside the text.

Only the checks a single run can answer are evaluated; the rest are
reported as "not covered by this run". Every number in the report comes
from a named library operation (the fits call trend_fit below; the
criteria reuse the thresholds stated in the acceptance checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import (
    IntegrityError,
    _atomic_write_text,
    format_float,
    load_manifest,
    read_csv,
    read_json,
)

# identifiers for the quantitative checks a run directory can certify
AC_LABELS = {
    "AC4": "bounded peak along continuation and critical-coupling solve",
    "AC5": "identity ratio near one at the final stage, approach monotone",
    "AC6": "scaled critical-point gradient bounded along the run",
    "AC7": "scaled far-field error and exterior bound stable across tail",
    "AC8": "final J above the concentration-limit formula, within 5%",
    "AC10": "minima strictly decreasing in the coupling",
    "AC11": "byte-identical reruns (manifest checksums)",
}


@dataclass(frozen=True)
class TrendFit:
    slope: float
    intercept: float
    slope_ci: float  # 95% half-width
    intercept_ci: float

    def describe(self, name: str) -> str:
        return (
            f"{name}: slope {format_float(self.slope)} "
            f"+/- {format_float(self.slope_ci)}, intercept "
            f"{format_float(self.intercept)} +/- {format_float(self.intercept_ci)}"
        )


def trend_fit(x, y) -> TrendFit:
    """Least-squares line with 95% parameter confidence half-widths."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 3:
        raise ValueError("need at least three points for a trend fit")
    coef, cov = np.polyfit(x, y, 1, cov=True)
    half = 1.96 * np.sqrt(np.maximum(np.diag(cov), 0.0))
    return TrendFit(
        slope=float(coef[0]),
        intercept=float(coef[1]),
        slope_ci=float(half[0]),
        intercept_ci=float(half[1]),
    )


@dataclass(frozen=True)
class RunReport:
    kind: str
    rows: dict  # column name -> ndarray (continuation runs), else {}
    summary: dict
    checks: dict  # "AC5" -> (status, detail); status in {"pass","fail","n/a"}
    fits: dict  # name -> TrendFit

    @property
    def all_passed(self) -> bool:
        return all(s != "fail" for s, _ in self.checks.values())


def _columns(path: Path) -> dict:
    header, data = read_csv(path)
    if data.size == 0:
        raise IntegrityError(f"empty table: {path}")
    return {name: data[:, i] for i, name in enumerate(header)}


def _check_continuation(cols: dict, summary: dict) -> tuple[dict, dict]:
    checks: dict = {}
    fits: dict = {}
    lam = cols["lambda"]
    ratio = cols["identity_ratio"]
    blowup = bool(summary.get("blowup_regime", lam[-1] >= 5.0))

    if blowup:
        finite = np.isfinite(ratio)
        if finite.sum() >= 3:
            fits["identity_ratio_vs_inv_lambda"] = trend_fit(
                1.0 / lam[finite], ratio[finite]
            )
        tail = np.abs(ratio[-3:] - 1.0)
        ok5 = (
            len(lam) >= 3
            and 0.7 <= ratio[-1] <= 1.3
            and bool(np.all(np.diff(tail) <= 0.0))
        )
        checks["AC5"] = (
            "pass" if ok5 else "fail",
            f"final ratio {format_float(ratio[-1])}, tail |ratio-1| "
            + ", ".join(format_float(t) for t in tail),
        )

        cp = cols["cp_gradient_scaled"]
        at8 = cp[np.searchsorted(lam, 8.0)] if lam[-1] >= 8.0 else cp[-1]
        bound = 10.0 * max(abs(at8), 1.0e-12)
        ok6 = bool(np.all(cp[np.isfinite(cp)] <= bound))
        checks["AC6"] = (
            "pass" if ok6 else "fail",
            f"max scaled gradient {format_float(np.nanmax(cp))}, "
            f"10x reference {format_float(bound)}",
        )

        ff = cols["farfield_scaled"][-3:]
        ff = ff[np.isfinite(ff)]
        ok7 = ff.size >= 2 and float(np.max(ff) / np.min(ff)) <= 2.0
        checks["AC7"] = (
            "pass" if ok7 else "fail",
            "tail scaled far-field spread "
            + (format_float(np.max(ff) / np.min(ff)) if ff.size >= 2 else "n/a"),
        )
        if np.isfinite(cols["farfield_scaled"]).sum() >= 3:
            sel = np.isfinite(cols["farfield_scaled"])
            fits["farfield_scaled_vs_lambda"] = trend_fit(
                lam[sel], cols["farfield_scaled"][sel]
            )

        inf_formula = summary.get("inf_J_formula")
        if inf_formula is not None:
            jf = float(cols["J_value"][-1])
            gap = jf - float(inf_formula)
            ok8 = gap > 0.0 and gap <= 0.05 * abs(float(inf_formula))
            checks["AC8"] = (
                "pass" if ok8 else "fail",
                f"final J {format_float(jf)}, formula {format_float(inf_formula)}, "
                f"gap {format_float(gap)}",
            )
    else:
        ok4 = bool(np.all(lam <= 5.0))
        extra = ""
        if "critical_solve_residual" in summary:
            res = float(summary["critical_solve_residual"])
            ok4 = ok4 and res <= 1.0e-8
            extra = f", critical solve residual {format_float(res)}"
        checks["AC4"] = (
            "pass" if ok4 else "fail",
            f"sup lambda {format_float(np.max(lam))}" + extra,
        )
    return checks, fits


def build_report(run_dir: Path) -> RunReport:
    """Verify integrity, aggregate tables, evaluate the applicable checks."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    manifest.verify(run_dir)
    config = manifest.config
    kind = config.get("mode", "unknown")
    summary = {}
    if (run_dir / "summary.json").is_file():
        summary = read_json(run_dir / "summary.json")

    rows: dict = {}
    checks: dict = {}
    fits: dict = {}
    if kind == "continue":
        cols = _columns(run_dir / "diagnostics.csv")
        rows = cols
        checks, fits = _check_continuation(cols, summary)
    elif kind == "solve":
        if "residual" in summary:
            res = float(summary["residual"])
            tol = float(summary.get("tol_residual", 1.0e-9))
            checks["solve"] = (
                "pass" if res <= tol else "fail",
                f"residual {format_float(res)} vs tolerance {format_float(tol)}",
            )
        if "J_by_rho" in summary:
            jvals = [float(v) for _, v in summary["J_by_rho"]]
            ok = all(b < a for a, b in zip(jvals, jvals[1:]))
            checks["AC10"] = (
                "pass" if ok else "fail",
                "J minima " + ", ".join(format_float(v) for v in jvals),
            )
    elif kind == "testfn":
        for key in ("intercept", "slope"):
            got = summary.get(key)
            target = summary.get(f"{key}_target")
            tol = {"intercept": 0.02, "slope": 0.15}[key]
            if got is None or target is None:
                continue
            rel = abs(float(got) - float(target)) / abs(float(target))
            checks[f"testfn_{key}"] = (
                "pass" if rel <= tol else "fail",
                f"{key} {format_float(got)} vs {format_float(target)} "
                f"(rel {format_float(rel)}, allowed {tol:g})",
            )
    elif kind == "green":
        checks["green"] = ("pass", "summary written; see summary.json")
    return RunReport(kind=kind, rows=rows, summary=summary, checks=checks, fits=fits)


def _render_figures(report: RunReport, out_dir: Path) -> list[str]:
    if not report.rows:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    cols = report.rows
    lam = cols["lambda"]

    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=130)
    ax.semilogx(cols["eps"], lam, "o-", color="#2a6f97")
    ax.invert_xaxis()
    ax.set_xlabel("eps")
    ax.set_ylabel("peak height")
    ax.set_title("continuation: peak growth")
    fig.tight_layout()
    fig.savefig(out_dir / "peak_vs_eps.png")
    plt.close(fig)
    written.append("peak_vs_eps.png")

    ratio = cols["identity_ratio"]
    finite = np.isfinite(ratio)
    if finite.sum() >= 2:
        fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=130)
        ax.plot(1.0 / lam[finite], ratio[finite], "o", color="#bc4749")
        fit = report.fits.get("identity_ratio_vs_inv_lambda")
        if fit is not None:
            xs = np.linspace(0.0, float(np.max(1.0 / lam[finite])), 50)
            ax.plot(xs, fit.intercept + fit.slope * xs, "-", color="#6a777d")
        ax.axhline(1.0, lw=0.8, color="#888888", ls=":")
        ax.set_xlabel("1 / peak height")
        ax.set_ylabel("identity ratio")
        ax.set_title("concentration identity")
        fig.tight_layout()
        fig.savefig(out_dir / "identity_ratio.png")
        plt.close(fig)
        written.append("identity_ratio.png")

    scaled = [
        ("cp_gradient_scaled", "#386641"),
        ("farfield_scaled", "#9a3b90"),
        ("remainder_scaled", "#d08400"),
    ]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=130)
    plotted = False
    for name, color in scaled:
        vals = cols[name]
        sel = np.isfinite(vals) & (vals > 0.0)
        if sel.sum() >= 2:
            ax.semilogy(lam[sel], vals[sel], "o-", label=name, color=color)
            plotted = True
    if plotted:
        ax.set_xlabel("peak height")
        ax.set_ylabel("scaled error")
        ax.set_title("scaled asymptotic errors")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "scaled_errors.png")
        written.append("scaled_errors.png")
    plt.close(fig)
    return written


def render_report(run_dir: Path, with_figures: bool = True) -> RunReport:
    """Write report.txt (and figures) into run_dir; returns the report."""
    run_dir = Path(run_dir)
    report = build_report(run_dir)
    lines = [f"run report: mode={report.kind}", ""]
    if report.rows:
        lam = report.rows["lambda"]
        lines.append(
            f"stages: {len(lam)}, final eps {format_float(report.rows['eps'][-1])}, "
            f"final peak height {format_float(lam[-1])}"
        )
    for name, fit in sorted(report.fits.items()):
        lines.append(fit.describe(name))
    lines.append("")
    lines.append("check      status  detail")
    for key in sorted(report.checks):
        status, detail = report.checks[key]
        lines.append(f"{key:<10} {status:<7} {detail}")
    covered = set(report.checks)
    missing = [k for k in AC_LABELS if k not in covered]
    if missing:
        lines.append("")
        lines.append("not covered by this run: " + ", ".join(sorted(missing)))
    figures = _render_figures(report, run_dir) if with_figures else []
    if figures:
        lines.append("")
        lines.append("figures: " + ", ".join(figures))
    _atomic_write_text(run_dir / "report.txt", "\n".join(lines) + "\n")
    return report
