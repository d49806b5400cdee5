from __future__ import annotations

import math

import numpy as np
import pytest

from torusmf.blowup import (
    RegressionError,
    ResolutionError,
    TestFunctionSpec as FamilySpec,
    build_test_function,
    bump_eta,
    inf_J_formula,
    j_expansion_fit,
)
from torusmf.functional import eval_J
from torusmf.green import green_function
from torusmf.prescribed import PositivityError, PrescribedFunction
from torusmf.spectral import ScalarField

H_GAUSS = PrescribedFunction.gaussian_bump_exp()


def test_cutoff_plateaus_and_symmetry():
    t = np.array([-1.0, 0.0, 1.0])
    assert np.all(bump_eta(t) == 1.0)
    assert np.all(bump_eta(np.array([2.0, 3.0, 10.0])) == 0.0)
    mid = np.linspace(1.05, 1.95, 19)
    vals = bump_eta(mid)
    assert np.all((vals > 0.0) & (vals < 1.0))
    assert np.all(np.diff(vals) < 0.0)
    assert bump_eta(1.5) == pytest.approx(0.5, abs=1e-15)
    assert np.max(np.abs(bump_eta(mid) + bump_eta(3.0 - mid) - 1.0)) <= 1e-15


def test_spec_defaults_and_interface_constant():
    eps, robin = 1e-3, -5.2
    spec = FamilySpec.create((0.0, 0.0), eps, robin)
    assert spec.alpha_eps == pytest.approx(eps**-0.25, rel=1e-15)
    assert spec.r_inner == pytest.approx(eps**0.25, rel=1e-14)
    # the continuity constant in closed form: r1^2 = sqrt(eps) here
    assert spec.C_eps == pytest.approx(-2.0 * math.log1p(math.sqrt(eps)) - robin,
                                       rel=1e-14)
    assert spec.b1 == 0.0 and spec.b2 == 0.0


def test_spec_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        FamilySpec.create((0.0, 0.0), 0.0, 0.0)


def test_build_peak_value_closed_form(green512_origin):
    eps = 1e-3
    spec = FamilySpec.create((0.0, 0.0), eps, green512_origin.robin)
    phi = build_test_function(spec, green512_origin, H_GAUSS)
    # at the center grid point the inner formula collapses to -ln(eps)
    assert float(np.max(phi.values)) == pytest.approx(-math.log(eps), rel=1e-12)


def test_build_requires_matching_pole(green512_origin):
    spec = FamilySpec.create((0.3, 0.3), 1e-3, green512_origin.robin)
    with pytest.raises(ValueError):
        build_test_function(spec, green512_origin, H_GAUSS)


def test_build_requires_resolved_inner_radius(g256):
    gd = green_function(g256, (0.0, 0.0))
    spec = FamilySpec.create((0.0, 0.0), 5e-7, gd.robin)
    assert spec.r_inner < 8.0 * g256.spacing
    with pytest.raises(ResolutionError):
        build_test_function(spec, gd, H_GAUSS)


def test_build_requires_positive_center(g256):
    h = PrescribedFunction.cosine_sum(0.0, ((1.0, 1, 0),))
    gd = green_function(g256, (0.5, 0.0))
    spec = FamilySpec.create((0.5, 0.0), 1e-3, gd.robin)
    with pytest.raises(PositivityError):
        build_test_function(spec, gd, h)


def test_field_has_no_interface_jump(green512_origin):
    # radial increments along a row through the center stay at the smooth
    # scale across both matching circles (a seam would show up as an O(1)
    # step between adjacent samples)
    eps = 1e-3
    spec = FamilySpec.create((0.0, 0.0), eps, green512_origin.robin)
    phi = build_test_function(spec, green512_origin, H_GAUSS)
    row = phi.values[:, 0]
    g = phi.grid
    r = np.minimum(np.arange(g.n), g.n - np.arange(g.n)) * g.spacing
    band = (r > 0.5 * spec.r_inner) & (r < 3.0 * spec.r_inner)
    incr = np.abs(np.diff(row))[band[:-1]]
    # the profile slope peaks near 4 / (0.5 r1) at the band's inner edge;
    # a seam would cost an O(C_eps) ~ 5 step in a single increment
    assert float(np.max(incr)) <= 12.0 * g.spacing / spec.r_inner


def test_J_of_family_decreases_toward_concentration(green512_origin):
    # for this h the second coefficient of the energy expansion is negative
    # (Lap ln h + 8 pi < 0 at the center), so J decreases along shrinking eps
    vals = []
    for eps in np.logspace(-2, -3, 6):
        spec = FamilySpec.create(
            (0.0, 0.0), float(eps), green512_origin.robin
        )
        phi = build_test_function(spec, green512_origin, H_GAUSS)
        vals.append(eval_J(phi, 8 * np.pi, H_GAUSS).value)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_fit_validation_errors(green512_origin):
    with pytest.raises(ValueError):
        j_expansion_fit(H_GAUSS, (0.0, 0.0), [1e-3, 1e-2], green512_origin)
    with pytest.raises(ValueError):
        j_expansion_fit(
            H_GAUSS, (0.0, 0.0), [1e-3, 3e-3, 1e-2], green512_origin
        )


def test_fit_intercept_hits_formula(green512_origin):
    eps_list = np.logspace(-4, -2, 9)
    intercept, slope = j_expansion_fit(
        H_GAUSS, (0.0, 0.0), eps_list, green512_origin
    )
    target = inf_J_formula(H_GAUSS, green512_origin.robin)
    assert abs(intercept - target) <= 0.02 * abs(target)
    assert math.isfinite(slope)


def test_fit_flags_nonlinear_samples(green512_origin):
    with pytest.raises(RegressionError) as exc:
        j_expansion_fit(
            H_GAUSS, (0.0, 0.0), np.logspace(-4, -2, 9), green512_origin,
            residual_tol=1e-6,
        )
    assert exc.value.residuals.shape == (9,)


def test_fit_intercept_for_flat_weight(green512_origin):
    # the flat weight has no log-gradient corrections, so the intercept is
    # purely the constant; the two-decade window still carries about 2.6%
    # of curvature bias from the construction terms, hence the allowance
    h = PrescribedFunction.constant(1.0)
    intercept, _ = j_expansion_fit(
        h, (0.0, 0.0), np.logspace(-4, -2, 9), green512_origin
    )
    target = inf_J_formula(h, green512_origin.robin)
    assert abs(intercept - target) <= 0.04 * abs(target)


def test_family_value_beats_zero_field(g512, green512_origin):
    spec = FamilySpec.create((0.0, 0.0), 1e-3, green512_origin.robin)
    phi = build_test_function(spec, green512_origin, H_GAUSS)
    rho = 8 * math.pi - 1e-3
    zero = eval_J(ScalarField(g512, np.zeros((512, 512))), rho, H_GAUSS)
    assert eval_J(phi, rho, H_GAUSS).value < zero.value


def test_inf_J_formula_closed_form():
    h = PrescribedFunction.gaussian_bump_exp(scale=2.0)
    robin = -5.0
    expected = -1.0 - math.log(math.pi) - (math.log(2.0) + robin / 2.0)
    assert inf_J_formula(h, robin) == pytest.approx(expected, rel=1e-15)


def test_inf_J_formula_scale_shift():
    # doubling h lowers the constant by exactly ln 2
    robin = -5.242
    a = inf_J_formula(PrescribedFunction.gaussian_bump_exp(), robin)
    b = inf_J_formula(PrescribedFunction.gaussian_bump_exp(scale=2.0), robin)
    assert b - a == pytest.approx(-math.log(2.0), abs=1e-14)
