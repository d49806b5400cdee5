from __future__ import annotations

import math

import numpy as np
import pytest

from torusmf.blowup import (
    DELTA0,
    EIGHT_PI,
    GUARD_SPACINGS,
    BlowupDiagnostics,
    bubble_fit,
    continuation_run,
    cp_condition_check,
    default_schedule,
    farfield_check,
    identity_residual,
)
from torusmf.green import GreenData, green_field
from torusmf.prescribed import PrescribedFunction
from torusmf.solver import SolverState
from torusmf.spectral import ScalarField, grid, torus_distance, wrap_displacement

H_GAUSS = PrescribedFunction.gaussian_bump_exp()


def _diag(eps: float, lam: float, peak=(0.0, 0.0)) -> BlowupDiagnostics:
    nan = math.nan
    return BlowupDiagnostics(
        eps=eps, lam=lam, peak=peak, rho_eps=EIGHT_PI - eps,
        identity_lhs=nan, identity_rhs=nan, identity_ratio=nan,
        remainder_scaled=nan, cp_gradient=nan, farfield_error=nan,
        outside_bound=nan, bubble_lambda_fit=nan, bubble_center=(nan, nan),
        bubble_sup_deviation=nan, J_value=nan, mass=1.0, asymptotic=lam >= 5.0,
    )


def _synthetic_state(g, lam, q, rho):
    # exact concentration profile for h identically one: c = rho / 8
    c = rho / 8.0
    x1, x2 = np.broadcast_arrays(g.x1, g.x2)
    rsq = wrap_displacement(x1, q[0]) ** 2 + wrap_displacement(x2, q[1]) ** 2
    u = lam - 2.0 * np.log1p(c * np.exp(lam) * rsq)
    return SolverState(
        u=ScalarField(g, u), rho=rho, residual=0.0, mass=1.0,
        J_value=0.0, normalized=True, step_count=0,
    )


def test_default_schedule_geometric():
    s = default_schedule(1.0, 0.5, 1e-3)
    assert s[0] == 1.0
    assert all(b == pytest.approx(0.5 * a) for a, b in zip(s, s[1:]))
    assert s[-1] >= 1e-3 > s[-1] * 0.5


@pytest.mark.parametrize("ratio", [0.0, 1.0, 1.7, -0.2])
def test_default_schedule_ratio_validation(ratio):
    with pytest.raises(ValueError):
        default_schedule(1.0, ratio, 1e-3)


def test_identity_needs_asymptotic_regime():
    with pytest.raises(ValueError):
        identity_residual(_diag(1e-3, 4.0), H_GAUSS)


def test_identity_matches_documented_formula():
    eps, lam = 1e-3, 8.0
    ratio, remainder = identity_residual(_diag(eps, lam), H_GAUSS)
    # h(0,0) = 1 and Lap ln h(0,0) = -4 pi^2 for the unit-decay bump
    rhs = (16 * np.pi / ((EIGHT_PI - eps) * 1.0)) * (-4 * np.pi**2 + EIGHT_PI) \
        * lam * math.exp(-lam)
    assert ratio == pytest.approx(-eps / rhs, rel=1e-12)
    assert remainder == pytest.approx((-eps - rhs) * math.exp(lam), rel=1e-12)


def test_identity_rejects_nonpositive_h_at_peak():
    h = PrescribedFunction.cosine_sum(0.0, ((1.0, 1, 0),))
    from torusmf.prescribed import PositivityError

    with pytest.raises(PositivityError):
        identity_residual(_diag(1e-3, 8.0, peak=(0.5, 0.0)), h)


def test_bubble_fit_recovers_synthetic_profile(g256):
    lam, q = 6.0, (0.3, 0.55)
    state = _synthetic_state(g256, lam, q, rho=EIGHT_PI - 1e-2)
    lam_fit, q_fit, sup_dev = bubble_fit(state, PrescribedFunction.constant(1.0))
    assert lam_fit == pytest.approx(lam, abs=1e-8)
    assert torus_distance(q_fit, q) <= 1e-8
    assert sup_dev <= 1e-8


def test_bubble_fit_guards_low_peaks(g256):
    state = _synthetic_state(g256, 2.0, (0.5, 0.5), rho=4 * np.pi)
    with pytest.raises(ValueError):
        bubble_fit(state, PrescribedFunction.constant(1.0))


def test_farfield_check_vanishes_on_pure_green_tail(g256):
    pole = (0.25, 0.5)
    gd = GreenData(pole=pole, field=green_field(g256, pole), robin=math.nan)
    rho_eps = EIGHT_PI - 0.1
    u = rho_eps * gd.field.values + 3.7
    state = SolverState(
        u=ScalarField(g256, u), rho=EIGHT_PI - 0.1, residual=0.0, mass=1.0,
        J_value=0.0, normalized=False, step_count=0,
    )
    farfield_error, outside_bound = farfield_check(state, gd, rho_eps=rho_eps)
    assert farfield_error <= 1e-10
    lam = float(np.max(u))
    assert 0.0 < outside_bound <= 2.0 * lam  # sup |u + lam| <= 2 sup |u|


def test_cp_condition_closed_form():
    # h = 1 + 0.5 cos(2 pi x1) cos(2 pi x2); at (1/8, 0) only the x1 slope
    # survives: d(ln h)/dx1 = -pi sin(pi/4) / (1 + 0.5 cos(pi/4))
    h = PrescribedFunction.cosine_sum(1.0, ((0.5, 1, 1),))
    comp = -np.pi * np.sin(np.pi / 4) / (1.0 + 0.5 * np.cos(np.pi / 4))
    expected = 2.0 * abs(comp)
    got = cp_condition_check(_diag(1e-3, 8.0, peak=(0.125, 0.0)), h, robin=-5.24)
    assert got == pytest.approx(expected, rel=1e-12)


def test_cp_condition_zero_at_symmetric_maximum():
    assert cp_condition_check(_diag(1e-3, 8.0), H_GAUSS, robin=0.0) == 0.0


def test_cp_condition_positive_off_the_maximum():
    at_max = cp_condition_check(_diag(1e-3, 8.0), H_GAUSS, robin=0.0)
    nearby = cp_condition_check(_diag(1e-3, 8.0, peak=(0.05, 0.0)), H_GAUSS, robin=0.0)
    assert nearby > at_max


def test_continuation_validates_schedule(g64):
    with pytest.raises(ValueError):
        continuation_run(H_GAUSS, [], g=g64)
    with pytest.raises(ValueError):
        continuation_run(H_GAUSS, [0.5, 0.5], g=g64)
    with pytest.raises(ValueError):
        continuation_run(H_GAUSS, [1.0, -0.5], g=g64)


def test_constant_h_stays_flat(g64):
    h = PrescribedFunction.constant(1.0)
    out = continuation_run(h, default_schedule(1.0, 0.5, 1e-2), g=g64)
    assert out.halted is None
    assert len(out) == len(default_schedule(1.0, 0.5, 1e-2))
    for rec in out:
        assert rec.lam <= 0.1
        assert not rec.asymptotic
        assert math.isnan(rec.identity_ratio)
        assert math.isnan(rec.farfield_error)  # check not applicable, flagged as NaN
        assert rec.rho_eps < EIGHT_PI - rec.eps  # local mass is a strict part


def test_short_continuation_is_deterministic(g64):
    sched = default_schedule(1.0, 0.5, 0.05)
    a = continuation_run(H_GAUSS, sched, g=g64)
    b = continuation_run(H_GAUSS, sched, g=g64)
    assert a.halted == b.halted and len(a) == len(b)
    for ra, rb in zip(a, b):
        assert ra == rb  # bitwise-identical dataclasses


def test_blowup_continuation_invariants(g256):
    out = continuation_run(H_GAUSS, default_schedule(1.0, 0.5, 1e-6), g=g256)
    assert out.halted == "resolution_guard"
    assert len(out) >= 5
    lams = [r.lam for r in out]
    assert all(b > a for a, b in zip(lams, lams[1:]))
    for rec, st in zip(out.records, out.states):
        # every kept record resolves its own bubble scale
        assert math.exp(-rec.lam / 2.0) >= GUARD_SPACINGS * g256.spacing
        assert torus_distance(rec.peak, (0.0, 0.0)) <= 2 * g256.spacing
        assert st.converged and st.normalized
        assert "solver" not in (out.halted or "")
        # the scaled local-mass defect stays bounded along the branch
        # (recorded ceiling, measured high water mark about 161)
        assert rec.mass_defect_scaled <= 400.0
        if rec.asymptotic:
            # both sides of the expansion identity carry the sign of -eps
            assert rec.identity_lhs < 0.0 and rec.identity_rhs < 0.0
            # recorded ceiling, measured high water mark about 84
            assert math.isfinite(rec.remainder_scaled)
            assert abs(rec.remainder_scaled) <= 200.0
    last = out[-1]
    assert last.asymptotic
    assert 0.3 <= last.identity_ratio <= 1.5
    assert math.isfinite(last.bubble_lambda_fit)
    assert abs(last.bubble_lambda_fit - last.lam) <= 0.2 * last.lam
    assert torus_distance(last.bubble_center, last.peak) <= 2 * g256.spacing
    # local mass quantization: rho_eps approaches 8 pi from inside the ball
    assert last.rho_eps == pytest.approx(EIGHT_PI, rel=0.2)
    assert last.farfield_scaled <= 10.0
    assert last.outside_bound <= 2.0 * last.lam
