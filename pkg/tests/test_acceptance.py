"""Acceptance checks AC1..AC11: one test per criterion, quantitative
thresholds inline. AC5 through AC8 share one concentration run (module
fixture) because they certify different aspects of the same family.
"""

from __future__ import annotations

import math
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

import oracle_ewald
from conftest import random_band_limited
from torusmf.blowup import (
    EIGHT_PI,
    continuation_run,
    default_schedule,
    inf_J_formula,
    j_expansion_fit,
)
from torusmf.functional import eval_J, grad_J
from torusmf.green import green_function, robin_constant
from torusmf.io import read_json
from torusmf.prescribed import PrescribedFunction
from torusmf.solver import SolverOptions, minimize
from torusmf.spectral import ScalarField, grid, integrate

H_GAUSS = PrescribedFunction.gaussian_bump_exp()  # max 1 at the origin
H_COS = PrescribedFunction.cosine_sum(1.0, ((0.5, 1, 1),))  # stays positive


@pytest.fixture(scope="module")
def g1024():
    return grid(1024)


@pytest.fixture(scope="module")
def blowup_run(g1024):
    """Concentration run shared by AC5..AC8: coupling driven toward its
    critical value with the bump weight, peak resolved throughout."""
    t0 = time.perf_counter()
    result = continuation_run(
        H_GAUSS, default_schedule(1.0, 0.5, 1.0e-6), g=g1024
    )
    elapsed = time.perf_counter() - t0
    assert result.halted == "resolution_guard"
    return result, elapsed


def test_ac01_gradient_consistency(g64):
    """20 random band-limited fields at n=64: analytic gradient vs central
    finite differences of the energy, relative error <= 1e-6, under 10 s."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2026)
    worst = 0.0
    for _ in range(20):
        u = random_band_limited(g64, rng, kmax=8, amplitude=0.5)
        w = random_band_limited(g64, rng, kmax=8, amplitude=1.0)
        dt = 1e-5
        up = ScalarField(g64, u.values + dt * w.values)
        um = ScalarField(g64, u.values - dt * w.values)
        fd = (
            eval_J(up, EIGHT_PI, H_COS).value - eval_J(um, EIGHT_PI, H_COS).value
        ) / (2 * dt)
        ip = integrate(ScalarField(g64, grad_J(u, EIGHT_PI, H_COS).values * w.values))
        worst = max(worst, abs(fd - ip) / max(abs(fd), abs(ip), 1e-30))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-6, f"worst relative gradient error {worst:.3e}"
    assert elapsed <= 10.0, f"took {elapsed:.1f} s"


def test_ac02_green_function_correctness(g512):
    """n=512: mean zero to 1e-12, symmetry to 1e-10, Robin constant within
    1e-6 of the lattice-sum oracle and pole-independent to 1e-8, under 30 s."""
    t0 = time.perf_counter()
    gd0 = green_function(g512, (0.0, 0.0))
    assert abs(float(np.mean(gd0.field.values))) <= 1e-12

    p = (153 / 512, 204 / 512)  # generic on-grid pole
    gdp = green_function(g512, p)
    # symmetry: the field of one pole sampled at the other, both ways
    v_0_at_p = gd0.field.values[153, 204]
    v_p_at_0 = gdp.field.values[0, 0]
    assert abs(v_0_at_p - v_p_at_0) <= 1e-10

    assert abs(gd0.robin - oracle_ewald.ewald_robin()) <= 1e-6
    assert abs(gd0.robin - gdp.robin) <= 1e-8
    elapsed = time.perf_counter() - t0
    assert elapsed <= 30.0, f"took {elapsed:.1f} s"


def test_ac03_trivial_critical_point(g256):
    """Constant weight, quarter-critical coupling, random small start: the
    normalized solution is the zero field with residual <= 1e-10, under 60 s."""
    t0 = time.perf_counter()
    h = PrescribedFunction.constant(1.0)
    rng = np.random.default_rng(7)
    u0 = random_band_limited(g256, rng, kmax=8, amplitude=0.05)
    st = minimize(4 * np.pi, h, u0, SolverOptions(tol_residual=1e-11))
    elapsed = time.perf_counter() - t0
    assert st.converged and st.normalized
    assert st.residual <= 1e-10, f"residual {st.residual:.3e}"
    assert float(np.max(np.abs(st.u.values))) <= 1e-8
    assert elapsed <= 60.0, f"took {elapsed:.1f} s"


def test_ac04_existence_regime(g512):
    """Positive-condition weight 1 + 0.5 cos(2 pi x1) cos(2 pi x2): peaks stay
    bounded (sup <= 5) down to eps = 1e-4 and the critical-coupling solve
    converges to residual <= 1e-8, under 10 min at n=512."""
    t0 = time.perf_counter()
    sched = default_schedule(1.0, 0.5, 1.0e-4)
    if sched[-1] > 1.0e-4:
        sched.append(1.0e-4)
    opts = SolverOptions(tol_residual=1e-10)
    result = continuation_run(H_COS, sched, opts, g=g512)
    assert result.halted is None, result.halted
    lam_sup = max(r.lam for r in result)
    assert lam_sup <= 5.0, f"sup lambda {lam_sup:.4f}"
    final = minimize(EIGHT_PI, H_COS, result.states[-1].u, opts)
    elapsed = time.perf_counter() - t0
    assert final.residual <= 1e-8, f"critical residual {final.residual:.3e}"
    assert elapsed <= 600.0, f"took {elapsed:.1f} s"


def test_ac05_blowup_identity(blowup_run):
    """Bump weight (negative condition at the maximum): the run reaches peak
    height in [8, 12] with identity ratio in [0.7, 1.3] at the final stage
    and |ratio - 1| non-increasing over the last three stages, under 30 min."""
    result, elapsed = blowup_run
    final = result[-1]
    assert 8.0 <= final.lam <= 12.0, f"final peak height {final.lam:.4f}"
    assert 0.7 <= final.identity_ratio <= 1.3, (
        f"final identity ratio {final.identity_ratio:.4f}"
    )
    tail = [abs(r.identity_ratio - 1.0) for r in result.records[-3:]]
    assert all(b <= a for a, b in zip(tail, tail[1:])), (
        f"tail |ratio - 1| not monotone: {tail}"
    )
    assert elapsed <= 1800.0, f"took {elapsed:.1f} s"


def test_ac06_critical_point_condition(blowup_run):
    """Scaled peak-location criticality |grad 2 ln h| e^{lambda/2} stays
    bounded by 10x its value at peak height 8 (absolute 1e-12 floor guards
    the exactly-critical case where every sample is zero)."""
    result, _ = blowup_run
    lams = np.array([r.lam for r in result])
    cps = np.array([r.cp_gradient_scaled for r in result])
    at8 = cps[int(np.searchsorted(lams, 8.0))]
    finite = np.isfinite(cps)
    assert finite.any()
    bound = 10.0 * abs(at8) + 1e-12
    assert np.all(cps[finite] <= bound), (
        f"max scaled gradient {np.max(cps[finite]):.3e} vs bound {bound:.3e}"
    )


def test_ac07_farfield_estimate(blowup_run):
    """Scaled far-field error and the exterior bound sup|u + lambda| are
    recorded along the run and stable within 2x across the schedule tail."""
    result, _ = blowup_run
    ff = np.array([r.farfield_scaled for r in result.records[-3:]])
    ob = np.array([r.outside_bound for r in result.records[-3:]])
    assert np.all(np.isfinite(ff)) and np.all(np.isfinite(ob))
    ff_spread = float(np.max(ff) / np.min(ff))
    ob_spread = float(np.max(ob) / np.min(ob))
    assert ff_spread <= 2.0, f"scaled far-field tail spread {ff_spread:.3f}"
    assert ob_spread <= 2.0, f"exterior-bound tail spread {ob_spread:.3f}"


def test_ac08_infimum_formula(blowup_run, g1024):
    """The final J value sits above the closed-form concentration limit
    -1 - ln pi - (ln max h + robin/2), within 5% of its magnitude."""
    result, _ = blowup_run
    formula = inf_J_formula(H_GAUSS, robin_constant(g1024))
    j_final = result[-1].J_value
    gap = j_final - formula
    assert gap > 0.0, f"final J {j_final:.6f} under formula {formula:.6f}"
    assert gap <= 0.05 * abs(formula), (
        f"gap {gap:.6f} exceeds 5% of |{formula:.6f}|"
    )


def test_ac09_test_function_expansion(g1024):
    """Energy-expansion fit over eps in [1e-4, 1e-2] at n=1024: intercept
    within 2% of the analytic constant and slope within 15% of
    -(lap ln h + 8 pi)/4 at the center."""
    t0 = time.perf_counter()
    gd = green_function(g1024, (0.0, 0.0)).with_expansion()
    intercept, slope = j_expansion_fit(
        H_GAUSS, (0.0, 0.0), np.logspace(-4, -2, 9), gd
    )
    c_target = inf_J_formula(H_GAUSS, gd.robin)
    s_target = -(float(H_GAUSS.log_laplacian(0.0, 0.0)) + EIGHT_PI) / 4.0
    elapsed = time.perf_counter() - t0
    assert elapsed <= 300.0, f"took {elapsed:.1f} s"
    rel_c = abs(intercept - c_target) / abs(c_target)
    assert rel_c <= 0.02, (
        f"intercept {intercept:.6f} vs target {c_target:.6f} (rel {rel_c:.2%})"
    )
    rel_s = abs(slope - s_target) / abs(s_target)
    assert rel_s <= 0.15, (
        f"slope {slope:.4f} vs target {s_target:.4f} (rel {rel_s:.2%}); "
        f"the desk-scale eps window carries construction terms of order "
        f"eps (large constants) that the eps ln(1/eps) model absorbs into "
        f"the slope"
    )


def test_ac10_monotone_minima(g256):
    """Computed minima at couplings 2 pi, 4 pi, 6 pi for the bounded-family
    weight decrease strictly in the coupling."""
    opts = SolverOptions(tol_residual=1e-10)
    jvals = []
    for rho in (2 * np.pi, 4 * np.pi, 6 * np.pi):
        st = minimize(rho, H_COS, ScalarField(g256, np.zeros((256, 256))), opts)
        assert st.converged
        jvals.append(st.J_value)
    assert jvals[0] > jvals[1] > jvals[2], f"minima not decreasing: {jvals}"


def test_ac11_determinism(tmp_path):
    """Two identical continuation runs through the command-line interface
    produce byte-identical CSV tables."""
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        yaml.safe_dump(
            {
                "h": {"kind": "gaussian_bump_exp", "params": [1.0, 1.0]},
                "grid": {"n": 64},
                "continue": {"eps_start": 1.0, "ratio": 0.5, "eps_min": 0.05},
            }
        ),
        encoding="utf-8",
    )
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        proc = subprocess.run(
            [sys.executable, "-m", "torusmf.cli", "continue",
             "--config", str(cfg), "--out", str(out), "--quiet"],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
    a = (outs[0] / "diagnostics.csv").read_bytes()
    b = (outs[1] / "diagnostics.csv").read_bytes()
    assert a == b
    assert read_json(outs[0] / "summary.json") == read_json(outs[1] / "summary.json")
