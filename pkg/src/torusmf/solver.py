"""Minimization of J_rho: semi-implicit gradient flow with a Newton endgame.

The flow is du/dt = Laplace(u) + rho (h e^u / mass - 1), stepped with the
Laplacian implicit in Fourier space and the nonlinearity explicit:

    u_new = (I - dt Laplace)^{-1} (u + dt rho (h e^u / mass - 1)).

Steps are accepted only when J does not increase (J is the flow's Lyapunov
function); on rejection dt halves. Near a minimizer the flow hands off to a
mean-zero Newton iteration solved matrix-free by preconditioned CG.

Residuals are reported in equation form throughout:

    residual = L2 norm of ( Laplace(u) + rho (h e^u / mass - 1) ),

which is rho times the norm of grad_J and is unchanged by the final
mass-one normalization shift, so the converged bound survives it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .functional import DegenerateMassError, MASS_FLOOR
from .prescribed import PrescribedFunction
from .spectral import ScalarField, TorusGrid, dirichlet_from_rfft, max_location

DT_UNDERFLOW = 1.0e-12

NEWTON_BASIN = 1.0e-3

_DT_GROW = 1.5
_DT_SHRINK = 0.5
_J_SLACK = 1.0e-13
_U_CAP = 400.0  # exp overflow guard; legitimate peaks stay far below

_NEWTON_MAX_ITERS = 12
_CG_MAX_ITERS = 400
_CG_RTOL = 1.0e-6


class StagnationError(RuntimeError):
    """dt underflowed without an acceptable step; carries the stuck state."""

    def __init__(self, message: str, state: "SolverState"):
        super().__init__(message)
        self.state = state


class NonConvergenceError(RuntimeError):
    """Step budget exhausted; carries the last state and the max-u trajectory
    (a steadily climbing trajectory is the signature of blow-up)."""

    def __init__(self, message: str, state: "SolverState", trajectory):
        super().__init__(message)
        self.state = state
        self.trajectory = tuple(float(v) for v in trajectory)


class NormalizationError(RuntimeError):
    """Converged mass was not positive; the mass-one gauge does not exist."""

    def __init__(self, message: str, state: "SolverState"):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SolverOptions:
    dt_init: float = 1.0e-3
    dt_max: float = 1.0
    tol_residual: float = 1.0e-9
    max_steps: int = 200_000
    newton_enabled: bool = True
    newton_tol: float = 1.0e-11

    def __post_init__(self):
        if self.dt_init <= 0.0 or self.tol_residual <= 0.0:
            raise ValueError("dt_init and tol_residual must be positive")


@dataclass(frozen=True)
class SolverState:
    """Solver snapshot. `residual` is the equation-form misfit norm defined
    in the module docstring; `step_count` counts accepted flow steps plus
    Newton updates."""

    u: ScalarField
    rho: float
    residual: float
    mass: float
    J_value: float
    normalized: bool
    step_count: int
    dt_last: float = 0.0
    newton_failed: bool = False
    converged: bool = False


# -- shared evaluation helpers -------------------------------------------------


class _Engine:
    """Workspace holding the per-grid arrays one solve reuses every step."""

    def __init__(self, g: TorusGrid, rho: float, h: PrescribedFunction):
        self.g = g
        self.rho = float(rho)
        self.hv = h.evaluate(*np.broadcast_arrays(g.x1, g.x2))

    def components(self, u_vals: np.ndarray, u_hat: np.ndarray):
        """mass, J, residual for a field given alongside its spectrum."""
        g, rho = self.g, self.rho
        eu = np.exp(u_vals)
        mass = float(np.mean(self.hv * eu))
        if not np.isfinite(mass) or abs(mass) <= MASS_FLOOR:
            raise DegenerateMassError(f"integral(h e^u) = {mass!r} is degenerate")
        dirichlet = dirichlet_from_rfft(g, u_hat) / (2.0 * rho)
        mean_u = float(u_hat[0, 0].real) / g.n**2
        j = dirichlet + mean_u - float(np.log(abs(mass)))
        lap_u = np.fft.irfft2(u_hat * g.lap_symbol, s=(g.n, g.n))
        misfit = lap_u + rho * (self.hv * eu / mass - 1.0)
        residual = float(np.sqrt(np.mean(misfit * misfit)))
        return eu, mass, j, residual

    def nonlinearity_hat(self, eu: np.ndarray, mass: float) -> np.ndarray:
        n_hat = np.fft.rfft2(self.rho * (self.hv * eu / mass - 1.0))
        n_hat[0, 0] = 0.0  # compatibility: the source integrates to zero
        return n_hat

    def try_step(self, u_hat, n_hat, dt):
        g = self.g
        u_hat_new = (u_hat + dt * n_hat) / (1.0 - dt * g.lap_symbol)
        u_new = np.fft.irfft2(u_hat_new, s=(g.n, g.n))
        return u_new, u_hat_new

    def state_from(self, u_vals, u_hat, **kw) -> SolverState:
        _, mass, j, residual = self.components(u_vals, u_hat)
        return SolverState(
            u=ScalarField(self.g, u_vals),
            rho=self.rho,
            mass=mass,
            J_value=j,
            residual=residual,
            **kw,
        )


def _flow_advance(eng: _Engine, u_vals, u_hat, eu, mass, j, dt):
    """One accepted semi-implicit step starting from dt, halving on
    J increase. Returns (u_vals, u_hat, eu, mass, j, residual, dt_accepted)
    or raises StagnationError (caller attaches the state)."""
    n_hat = eng.nonlinearity_hat(eu, mass)
    while True:
        u_new, u_hat_new = eng.try_step(u_hat, n_hat, dt)
        accept = False
        if float(np.max(u_new)) <= _U_CAP:
            with np.errstate(over="ignore", invalid="ignore"):
                eu_new = np.exp(u_new)
                mass_new = float(np.mean(eng.hv * eu_new))
                if np.isfinite(mass_new) and abs(mass_new) > MASS_FLOOR:
                    dir_new = dirichlet_from_rfft(eng.g, u_hat_new) / (2.0 * eng.rho)
                    mean_new = float(u_hat_new[0, 0].real) / eng.g.n**2
                    j_new = dir_new + mean_new - float(np.log(abs(mass_new)))
                    accept = np.isfinite(j_new) and j_new <= j + _J_SLACK * max(
                        1.0, abs(j)
                    )
        if accept:
            lap_u = np.fft.irfft2(u_hat_new * eng.g.lap_symbol, s=(eng.g.n, eng.g.n))
            misfit = lap_u + eng.rho * (eng.hv * eu_new / mass_new - 1.0)
            residual = float(np.sqrt(np.mean(misfit * misfit)))
            return u_new, u_hat_new, eu_new, mass_new, j_new, residual, dt
        dt *= _DT_SHRINK
        if dt < DT_UNDERFLOW:
            raise StagnationError(
                f"no acceptable step above dt = {DT_UNDERFLOW:g}", None
            )


def flow_step(state: SolverState, dt: float, h: PrescribedFunction) -> SolverState:
    """One accepted flow step from `state`, halving dt internally on J
    increase. The accepted dt is reported in `dt_last`."""
    if abs(state.mass) <= MASS_FLOOR:
        raise DegenerateMassError("flow_step requires a nondegenerate mass")
    eng = _Engine(state.u.grid, state.rho, h)
    u_hat = np.fft.rfft2(state.u.values)
    eu, mass, j, _ = eng.components(state.u.values, u_hat)
    try:
        u_new, u_hat_new, _, mass_new, j_new, residual, dt_acc = _flow_advance(
            eng, state.u.values, u_hat, eu, mass, j, dt
        )
    except StagnationError as err:
        err.state = state
        raise
    return SolverState(
        u=ScalarField(state.u.grid, u_new),
        rho=state.rho,
        residual=residual,
        mass=mass_new,
        J_value=j_new,
        normalized=False,
        step_count=state.step_count + 1,
        dt_last=dt_acc,
    )


def initial_state(
    u0: ScalarField, rho: float, h: PrescribedFunction
) -> SolverState:
    """Wrap a field as an unconverged solver state with fresh diagnostics."""
    eng = _Engine(u0.grid, rho, h)
    u_hat = np.fft.rfft2(u0.values)
    return eng.state_from(
        u0.values, u_hat, normalized=False, step_count=0, dt_last=0.0
    )


def cold_start(g: TorusGrid, h: PrescribedFunction, amplitude: float = 1.0,
               width: float = 0.1) -> ScalarField:
    """Smooth periodic bump centered at the maximum of h.

    Biases the flow toward the concentrating branch; the profile uses
    sin^2 of the coordinate offsets so it is analytic on the torus.
    """
    hf = ScalarField(g, h.evaluate(*np.broadcast_arrays(g.x1, g.x2)))
    pk = max_location(hf)
    x1, x2 = np.broadcast_arrays(g.x1, g.x2)
    d = (
        np.sin(np.pi * (x1 - pk.x1)) ** 2 + np.sin(np.pi * (x2 - pk.x2)) ** 2
    ) / np.pi**2
    return ScalarField(g, amplitude * np.exp(-d / (2.0 * width**2)))


def minimize(
    rho: float,
    h: PrescribedFunction,
    u0: ScalarField,
    opts: SolverOptions = SolverOptions(),
) -> SolverState:
    """Minimize J_rho from u0; converged states are normalized to mass one.

    Guaranteed to converge for subcritical rho; at the critical coupling a
    minimizer may not exist, in which case the step budget runs out and the
    NonConvergenceError carries the climbing max-u trajectory.
    """
    if not 0.0 < rho <= 8.0 * np.pi:
        raise ValueError(f"rho must lie in (0, 8 pi], got {rho}")
    g = u0.grid
    eng = _Engine(g, rho, h)
    u_vals = u0.values
    u_hat = np.fft.rfft2(u_vals)
    eu, mass, j, residual = eng.components(u_vals, u_hat)
    dt = opts.dt_init
    steps = 0
    trajectory = [float(np.max(u_vals))]
    newton_failed = False
    newton_gate = NEWTON_BASIN

    def current_state() -> SolverState:
        return SolverState(
            u=ScalarField(g, u_vals),
            rho=rho,
            residual=residual,
            mass=mass,
            J_value=j,
            normalized=False,
            step_count=steps,
            dt_last=dt,
            newton_failed=newton_failed,
        )

    while residual > opts.tol_residual:
        # source-scale-relative basin: at large peaks the absolute residual of
        # a warm start sits far above NEWTON_BASIN while relatively it is tiny
        scale = max(1.0, rho * float(np.max(eng.hv * eu)) / abs(mass))
        if opts.newton_enabled and residual <= newton_gate * scale:
            refined = _newton_core(current_state(), h, tol=opts.newton_tol)
            if refined.residual < residual:
                u_vals = refined.u.values
                u_hat = np.fft.rfft2(u_vals)
                eu, mass, j, residual = eng.components(u_vals, u_hat)
                steps = refined.step_count
                trajectory.append(float(np.max(u_vals)))
            # missing newton_tol is harmless if the run target was still met
            newton_failed = refined.newton_failed and residual > opts.tol_residual
            if residual <= opts.tol_residual:
                break
            # retry only after the flow earns another order of magnitude
            newton_gate = residual / scale / 10.0
            continue
        if steps >= opts.max_steps:
            raise NonConvergenceError(
                f"no convergence within {opts.max_steps} steps "
                f"(residual {residual:.3e})",
                current_state(),
                trajectory,
            )
        try:
            u_vals, u_hat, eu, mass, j, residual, dt_acc = _flow_advance(
                eng, u_vals, u_hat, eu, mass, j, dt
            )
        except StagnationError as err:
            err.state = current_state()
            raise
        steps += 1
        trajectory.append(float(np.max(u_vals)))
        dt = min(dt_acc * _DT_GROW, opts.dt_max)

    state = SolverState(
        u=ScalarField(g, u_vals),
        rho=rho,
        residual=residual,
        mass=mass,
        J_value=j,
        normalized=False,
        step_count=steps,
        dt_last=dt,
        # the loop exits only at the target, so any earlier Newton stall
        # (e.g. a tol below the roundoff floor) did not impair this state
        newton_failed=False,
        converged=True,
    )
    return normalize_mass(state, h)


def normalize_mass(state: SolverState, h: PrescribedFunction) -> SolverState:
    """Shift u by -ln(mass) so the mass is one; J and the equation-form
    residual are invariant under the shift."""
    if state.mass <= 0.0:
        raise NormalizationError(
            f"cannot normalize: mass = {state.mass:.3e} is not positive", state
        )
    eng = _Engine(state.u.grid, state.rho, h)
    u_vals = state.u.values - np.log(state.mass)
    u_hat = np.fft.rfft2(u_vals)
    return eng.state_from(
        u_vals,
        u_hat,
        normalized=True,
        step_count=state.step_count,
        dt_last=state.dt_last,
        newton_failed=state.newton_failed,
        converged=state.converged,
    )


# -- Newton endgame -------------------------------------------------------------


def newton_refine(state: SolverState, h: PrescribedFunction, tol: float) -> SolverState:
    """Mean-zero Newton iteration on F(u) = Laplace(u) + rho (h e^u/mass - 1).

    The linearized operator is applied matrix-free and solved with CG (the
    negated linearization is symmetric positive semidefinite on the mean-zero
    subspace near minimizers), preconditioned by (rho - Laplace)^{-1}.
    Failure to improve returns the best state with `newton_failed` set
    rather than raising.
    """
    if state.residual > NEWTON_BASIN * (1.0 + 1.0e-12):
        raise ValueError(
            f"newton_refine outside its basin: residual {state.residual:.3e} > {NEWTON_BASIN:g}"
        )
    return _newton_core(state, h, tol)


def _newton_core(state: SolverState, h: PrescribedFunction, tol: float) -> SolverState:
    # no basin gate: minimize() enters on a source-scale-relative criterion,
    # trusting the strict-decrease line search to reject bad regimes
    if state.residual <= tol:
        return state
    g = state.u.grid
    rho = state.rho
    eng = _Engine(g, rho, h)
    nsq = g.n * g.n
    precond_symbol = 1.0 / (rho - g.lap_symbol)

    u_vals = state.u.values.copy()
    eu = np.exp(u_vals)
    mass = float(np.mean(eng.hv * eu))
    residual_vec, residual = _misfit(eng, u_vals, eu, mass)
    best_vals, best_res = u_vals.copy(), residual
    steps = state.step_count
    failed = False
    weak_streak = 0  # consecutive accepted steps improving by under 10%

    for _ in range(_NEWTON_MAX_ITERS):
        if residual <= tol:
            break
        if weak_streak >= 2:
            # grinding at the roundoff floor; further solves cannot help
            failed = residual > tol
            break
        dens = eng.hv * eu / mass  # integrates to one

        def matvec(w_flat):
            w = w_flat.reshape(g.n, g.n)
            w = w - w.mean()
            lap_w = np.fft.irfft2(np.fft.rfft2(w) * g.lap_symbol, s=(g.n, g.n))
            out = -(lap_w + rho * (dens * w - dens * np.mean(dens * w)))
            out -= out.mean()
            return out.ravel()

        def psolve(r_flat):
            r = r_flat.reshape(g.n, g.n)
            r_hat = np.fft.rfft2(r)
            r_hat[0, 0] = 0.0
            return np.fft.irfft2(r_hat * precond_symbol, s=(g.n, g.n)).ravel()

        op = LinearOperator((nsq, nsq), matvec=matvec, dtype=np.float64)
        pre = LinearOperator((nsq, nsq), matvec=psolve, dtype=np.float64)
        b = residual_vec - residual_vec.mean()
        delta_flat, info = cg(
            op, b.ravel(), rtol=_CG_RTOL, atol=0.0, maxiter=_CG_MAX_ITERS, M=pre
        )
        if info < 0 or not np.isfinite(delta_flat).all():
            failed = True
            break
        delta = delta_flat.reshape(g.n, g.n)
        improved = False
        for scale in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
            u_try = u_vals + scale * delta
            with np.errstate(over="ignore"):
                eu_try = np.exp(u_try)
                mass_try = float(np.mean(eng.hv * eu_try))
            if not np.isfinite(mass_try) or abs(mass_try) <= MASS_FLOOR:
                continue
            vec_try, res_try = _misfit(eng, u_try, eu_try, mass_try)
            if res_try < residual:
                weak_streak = weak_streak + 1 if res_try > 0.9 * residual else 0
                u_vals, eu, mass = u_try, eu_try, mass_try
                residual_vec, residual = vec_try, res_try
                steps += 1
                improved = True
                break
        if not improved:
            failed = True
            break
        if residual < best_res:
            best_vals, best_res = u_vals.copy(), residual
    else:
        failed = residual > tol

    if best_res < residual:
        u_vals, residual = best_vals, best_res
    u_hat = np.fft.rfft2(u_vals)
    return eng.state_from(
        u_vals,
        u_hat,
        normalized=False,
        step_count=steps,
        dt_last=state.dt_last,
        newton_failed=failed,
        converged=residual <= tol,
    )


def _misfit(eng: _Engine, u_vals, eu, mass):
    lap_u = np.fft.irfft2(np.fft.rfft2(u_vals) * eng.g.lap_symbol, s=(eng.g.n, eng.g.n))
    vec = lap_u + eng.rho * (eng.hv * eu / mass - 1.0)
    return vec, float(np.sqrt(np.mean(vec * vec)))
