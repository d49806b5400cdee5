"""The variational functional J_rho, its gradient, and related diagnostics.

    J_rho(u) = (1/(2 rho)) * integral |grad u|^2 + integral u - ln|integral h e^u|

Critical points solve the mean-field equation

    -Laplace(u) = rho * (h e^u / integral(h e^u) - 1).

J is invariant under u -> u + const (the unit area makes the shift cancel
between the mean term and the logarithm), so minimizers form lines; the
solver fixes the gauge afterwards by normalizing the mass to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prescribed import PrescribedFunction
from .spectral import (
    ScalarField,
    TorusGrid,
    dirichlet_energy,
    grid,
    laplacian,
    max_location,
    refine_peak,
    torus_distance,
)

EIGHT_PI = 8.0 * np.pi

MASS_FLOOR = 1.0e-12

_FLAT_REL = 1.0e-12

_MAX_CRITICAL_POINTS = 64


class DegenerateMassError(ArithmeticError):
    """integral(h e^u) vanished or overflowed; ln|mass| is undefined."""


class NoPositivityRegionError(ValueError):
    """h never reaches its positivity floor on the grid."""


@dataclass(frozen=True)
class FunctionalEval:
    """The four components of J_rho at one field.

    `mass` may be negative (the functional uses ln|mass|); downstream
    normalization requires a positive mass, so callers check the sign via
    `negative_mass` before shifting.
    """

    rho: float
    dirichlet: float
    mean_term: float
    mass: float
    value: float

    @property
    def negative_mass(self) -> bool:
        return self.mass < 0.0


def _checked_mass(hv: np.ndarray, eu: np.ndarray) -> float:
    mass = float(np.mean(hv * eu))
    if not np.isfinite(mass) or abs(mass) <= MASS_FLOOR:
        raise DegenerateMassError(
            f"integral(h e^u) = {mass!r} is degenerate; ln|mass| undefined"
        )
    return mass


def eval_J(u: ScalarField, rho: float, h: PrescribedFunction) -> FunctionalEval:
    if rho <= 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    hv = h.evaluate(u.grid.x1, u.grid.x2)
    eu = np.exp(u.values)
    mass = _checked_mass(hv, eu)
    dirichlet = dirichlet_energy(u) / (2.0 * rho)
    mean_term = u.mean()
    return FunctionalEval(
        rho=float(rho),
        dirichlet=dirichlet,
        mean_term=mean_term,
        mass=mass,
        value=dirichlet + mean_term - float(np.log(abs(mass))),
    )


def grad_J(u: ScalarField, rho: float, h: PrescribedFunction) -> ScalarField:
    """L2 gradient -(1/rho) Laplace(u) + 1 - h e^u / mass; integrates to 0."""
    if rho <= 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    g = u.grid
    hv = h.evaluate(g.x1, g.x2)
    eu = np.exp(u.values)
    mass = _checked_mass(hv, eu)
    lap = laplacian(u)
    return ScalarField(g, -lap.values / rho + 1.0 - hv * eu / mass)


def pde_residual_norm(u: ScalarField, rho: float, h: PrescribedFunction) -> float:
    """L2 norm of Laplace(u) + rho (h e^u / mass - 1).

    This is the mean-field equation misfit, equal to rho times the norm of
    grad_J, and it is invariant under the mass-one normalization shift.
    """
    g = u.grid
    hv = h.evaluate(g.x1, g.x2)
    eu = np.exp(u.values)
    mass = _checked_mass(hv, eu)
    r = laplacian(u).values + rho * (hv * eu / mass - 1.0)
    return float(np.sqrt(np.mean(r * r)))


def mt_check(u: ScalarField) -> tuple[float, float]:
    """Sharp-constant exponential inequality diagnostic.

    Returns (lhs, rhs_core) with lhs = ln integral(e^u) and
    rhs_core = (1/(16 pi)) integral|grad u|^2 + integral(u); the inequality
    asserts lhs <= rhs_core + c for a universal c, so lhs - rhs_core is the
    sample's implied constant.
    """
    lhs = float(np.log(np.mean(np.exp(u.values))))
    rhs_core = dirichlet_energy(u) / (16.0 * np.pi) + u.mean()
    return lhs, rhs_core


# -- existence condition ------------------------------------------------------


@dataclass(frozen=True)
class ExistencePoint:
    x1: float
    x2: float
    h_value: float
    log_laplacian: float
    condition_value: float  # log_laplacian + 8 pi
    satisfied: bool


@dataclass(frozen=True)
class ExistenceReport:
    points: tuple[ExistencePoint, ...]
    all_satisfied: bool
    flat: bool
    robin: float
    grid_n: int


def _local_maxima_mask(v: np.ndarray) -> np.ndarray:
    out = np.ones_like(v, dtype=bool)
    for d1 in (-1, 0, 1):
        for d2 in (-1, 0, 1):
            if d1 == 0 and d2 == 0:
                continue
            out &= v >= np.roll(np.roll(v, d1, axis=0), d2, axis=1)
    return out


def existence_condition(
    h: PrescribedFunction,
    robin: float,
    g: TorusGrid | None = None,
    dedup_radius: float = 0.05,
) -> ExistenceReport:
    """Minimizing-solution criterion at the critical coupling.

    Locates the local maxima of 2 ln h + robin on the positivity set (robin
    is constant on the torus, so these are the maxima of h) and evaluates
    Laplace(ln h) + 8 pi at each; the sufficient condition for a minimizer
    is that the value is positive at every maximum.
    """
    if g is None:
        g = grid(256)
    hv = h.evaluate(*np.broadcast_arrays(g.x1, g.x2))
    mask = hv >= h.positivity_floor()
    if not mask.any():
        raise NoPositivityRegionError(
            "prescribed function is below its positivity floor everywhere on the grid"
        )
    span = float(hv.max() - hv.min())
    flat = span <= _FLAT_REL * max(1.0, abs(float(hv.max())))
    points: list[ExistencePoint] = []
    if flat:
        cond = float(h.log_laplacian(0.0, 0.0)) + EIGHT_PI
        points.append(
            ExistencePoint(0.0, 0.0, float(hv[0, 0]), cond - EIGHT_PI, cond, cond > 0.0)
        )
    else:
        hfield = ScalarField(g, hv)
        cand = _local_maxima_mask(hv) & mask
        ii, jj = np.nonzero(cand)
        order = np.argsort(-hv[ii, jj], kind="stable")
        kept: list[tuple[float, float]] = []
        for idx in order:
            i, j = int(ii[idx]), int(jj[idx])
            pk = refine_peak(hfield, i, j)
            if any(torus_distance((pk.x1, pk.x2), q) < dedup_radius for q in kept):
                continue
            kept.append((pk.x1, pk.x2))
            loglap = float(h.log_laplacian(pk.x1, pk.x2))
            cond = loglap + EIGHT_PI
            points.append(
                ExistencePoint(pk.x1, pk.x2, float(pk.value), loglap, cond, cond > 0.0)
            )
            if len(points) >= _MAX_CRITICAL_POINTS:
                break
        # global argmax is a maximum even if the mask logic missed it
        if not points:
            pk = max_location(hfield)
            loglap = float(h.log_laplacian(pk.x1, pk.x2))
            cond = loglap + EIGHT_PI
            points.append(
                ExistencePoint(pk.x1, pk.x2, float(pk.value), loglap, cond, cond > 0.0)
            )
    return ExistenceReport(
        points=tuple(points),
        all_satisfied=all(p.satisfied for p in points),
        flat=flat,
        robin=float(robin),
        grid_n=g.n,
    )
