"""Dual (adjoint) solver and its transpose, the linearized state solver.

The forward scheme, once its fixed-point loop has converged, defines one
large block-bidiagonal linear relation between trajectory perturbations and
residuals.  The dual sweep implemented here solves the exact transpose of
that relation, so the assembled gradient differentiates the discrete cost
itself, not a continuum approximation of it.  Two consequences worth the
bookkeeping:

* the multipliers ``lam^m, eta^m`` attached to step ``m -> m+1`` satisfy
  equations whose coefficients (reaction, convection, donor selection) are
  frozen at the *new* state ``(u^{m+1}, v^{m+1})`` of that step, and whose
  tracking sources carry the trapezoid weight of level ``m+1``;

* within one level the two multipliers are coupled - ``eta^m`` appears in
  the ``lam^m`` equation and ``lam^m`` in the ``eta^m`` equation - and the
  ``lam`` equation contains the transposed convection ``-kappa grad lam .
  grad v``, which is not symmetric.  Both couplings are resolved by the
  same device the forward solver uses: a per-level fixed point that lags
  them one inner sweep, leaving only symmetric positive definite solves
  for CG.  At convergence the coupled equations hold exactly.

Backward from the zero terminal pair, step ``m`` solves (all coefficients
at level ``m+1``, ``w`` the trapezoid weight of level ``m+1``)

    (1/tau - lap + 2 mu u_+ - r) lam^m + kappa T[lam^m] - eta^m
        = lam^{m+1}/tau + w gamma_u (u - u_d)
    (1/tau + 1 - lap - f^m) eta^m + kappa div(u_+ grad lam^m)
        = eta^{m+1}/tau + w gamma_v (v - v_d)

where ``T`` is the exact transpose of the conservative chemotaxis stencil
(a discrete ``-grad lam . grad v``).  Note the sign of the coupling
``+kappa div(u_+ grad lam)`` in the ``eta`` equation: with the opposite
sign the assembled gradient fails every finite-difference check for
``kappa != 0``, while with this one the mismatch sits at the quadrature
level and vanishes under refinement.

`solve_linearized_dual` marches the exact transpose of the sweep forward
in time; it is the Gateaux derivative of the discrete trajectory map and
pairs with the dual sweep in a duality identity that holds to solver
tolerance (see `kscontrol.verify.duality_gap`).

The linearization drops the positive-part kinks (it differentiates as if
``u > 0`` and ``v > 0`` pointwise); dual and linearized solves drop them
symmetrically, so their duality is exact regardless, and the gradient is
exact wherever the trajectory stays positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mesh
from .control import ControlField, CostWeights, TrackingTargets
from .errors import PicardDivergenceError, StepConditioningError
from .forward import ModelParams, PicardSettings, StateTrajectory, TimeGrid
from .linalg import DEFAULT_CG_TOL, solve_cg
from .mesh import Field2D, Scheme


@dataclass
class AdjointTrajectory:
    """Multipliers at all levels; the terminal fields are exactly zero.

    ``lam[m]`` and ``eta[m]`` belong to the step ``m -> m+1``; the entries
    at index ``nt`` close the recursion and are identically zero.
    """

    time_grid: TimeGrid
    lam: list[Field2D]
    eta: list[Field2D]


def _check_lambda_shift(inv_tau: float, react: np.ndarray, tau: float) -> None:
    if inv_tau + float(react.min()) <= 0.0:
        raise StepConditioningError(
            f"dual density equation loses definiteness at tau = {tau:g}: "
            "the reaction shift 1/tau - r + 2 mu u_+ must stay positive; "
            "reduce the time step"
        )


def _check_eta_shift(inv_tau: float, f_vals: np.ndarray, tau: float) -> None:
    if inv_tau + 1.0 - float(f_vals.max()) <= 0.0:
        raise StepConditioningError(
            f"dual signal equation loses definiteness at tau = {tau:g}: "
            "1/tau + 1 - f must stay positive; reduce the time step or the control"
        )


def step_adjoint(
    lambda_next: Field2D,
    eta_next: Field2D,
    state_new: tuple[Field2D, Field2D],
    f_now: Field2D,
    targets_new: tuple[Field2D, Field2D],
    params: ModelParams,
    weights: CostWeights,
    tau: float,
    scheme: Scheme = "central",
    cg_tol: float = DEFAULT_CG_TOL,
    settings: PicardSettings = PicardSettings(),
    tracking_weight: float = 1.0,
) -> tuple[Field2D, Field2D]:
    """One backward step ``m+1 -> m`` of the coupled dual system.

    Parameters
    ----------
    lambda_next, eta_next : Field2D
        Multipliers of the following step (zero at the terminal level).
    state_new : (Field2D, Field2D)
        The forward pair ``(u^{m+1}, v^{m+1})`` this step linearizes around.
    f_now : Field2D
        Control of step ``m`` scattered onto the grid.
    targets_new : (Field2D, Field2D)
        Tracking targets at level ``m+1``.
    tracking_weight : float
        Trapezoid weight of level ``m+1`` (1/2 at the final level).

    The per-level fixed point lags the convection term and the
    cross-coupling by one inner sweep; each sweep is two SPD solves.
    """
    u_new, v_new = state_new
    u_d, v_d = targets_new
    grid = mesh.check_same_grid(lambda_next, eta_next, u_new, v_new, f_now, u_d, v_d)
    hx, hy = grid.hx, grid.hy
    inv_tau = 1.0 / tau

    upos = np.maximum(u_new.values, 0.0)
    react = 2.0 * params.mu * upos - params.r
    _check_lambda_shift(inv_tau, react, tau)
    _check_eta_shift(inv_tau, f_now.values, tau)

    lap_diag = mesh.laplacian_diag(grid)
    shift_eta = inv_tau + 1.0 - f_now.values

    def apply_lam(x: np.ndarray) -> np.ndarray:
        return inv_tau * x - mesh.laplacian_array(x, hx, hy) + react * x

    def apply_eta(x: np.ndarray) -> np.ndarray:
        return shift_eta * x - mesh.laplacian_array(x, hx, hy)

    rhs_lam_base = lambda_next.values * inv_tau
    if weights.gamma_u != 0.0:
        rhs_lam_base = rhs_lam_base + (
            tracking_weight * weights.gamma_u * (u_new.values - u_d.values)
        )
    rhs_eta_base = eta_next.values * inv_tau
    if weights.gamma_v != 0.0:
        rhs_eta_base = rhs_eta_base + (
            tracking_weight * weights.gamma_v * (v_new.values - v_d.values)
        )

    lam_bar = lambda_next.values
    eta_bar = eta_next.values
    increment = np.inf
    for _ in range(settings.max_iters):
        rhs_eta = rhs_eta_base
        if params.kappa != 0.0:
            rhs_eta = rhs_eta - params.kappa * mesh.weighted_diffusion_arrays(
                upos, lam_bar, v_new.values, hx, hy, scheme
            )
        eta_now = solve_cg(apply_eta, rhs_eta, shift_eta + lap_diag,
                           rtol=cg_tol, x0=eta_bar)

        rhs_lam = rhs_lam_base + eta_now
        if params.kappa != 0.0:
            rhs_lam = rhs_lam - params.kappa * mesh.chemotaxis_adjoint_arrays(
                lam_bar, v_new.values, hx, hy, scheme
            )
        lam_now = solve_cg(apply_lam, rhs_lam, inv_tau + lap_diag + react,
                           rtol=cg_tol, x0=lam_bar)

        area = grid.cell_area
        increment = max(
            mesh.l2_norm_array(lam_now - lam_bar, area)
            / max(mesh.l2_norm_array(lam_now, area), 1e-30),
            mesh.l2_norm_array(eta_now - eta_bar, area)
            / max(mesh.l2_norm_array(eta_now, area), 1e-30),
        )
        lam_bar, eta_bar = lam_now, eta_now
        if increment < settings.tol:
            return Field2D(grid, lam_now), Field2D(grid, eta_now)
    raise PicardDivergenceError(
        f"dual fixed point stalled after {settings.max_iters} sweeps "
        f"(last relative increment {increment:.3e})",
        last_increment=increment,
    )


def solve_adjoint(
    state: StateTrajectory,
    control: ControlField,
    targets: TrackingTargets,
    params: ModelParams,
    weights: CostWeights,
    scheme: Scheme = "central",
    cg_tol: float = DEFAULT_CG_TOL,
    settings: PicardSettings = PicardSettings(),
) -> AdjointTrajectory:
    """Sweep the dual system backward along a stored state trajectory.

    Returns multipliers at every level ``0 .. nt`` with the terminal pair
    identically zero.  The solve is deterministic: repeated calls on the
    same inputs produce bitwise-identical results.

    Raises
    ------
    StepConditioningError
        If a reaction shift makes one of the SPD solves indefinite.
    PicardDivergenceError
        If a per-level fixed point fails to reach its tolerance.
    """
    grid = state.grid
    if control.region.grid != grid:
        raise mesh.GridMismatchError("control region grid differs from state grid")
    if control.time_grid != state.time_grid:
        raise ValueError("control time grid differs from state time grid")

    nt = state.time_grid.nt
    tau = state.time_grid.tau
    zero = mesh.constant_field(grid, 0.0)
    lam: list[Field2D] = [zero.copy() for _ in range(nt + 1)]
    eta: list[Field2D] = [zero.copy() for _ in range(nt + 1)]

    for m in range(nt - 1, -1, -1):
        try:
            lam[m], eta[m] = step_adjoint(
                lam[m + 1],
                eta[m + 1],
                (state.u[m + 1], state.v[m + 1]),
                control.field_at(m),
                targets.at(m + 1),
                params,
                weights,
                tau,
                scheme,
                cg_tol,
                settings,
                tracking_weight=0.5 if m + 1 == nt else 1.0,
            )
        except PicardDivergenceError as err:
            err.time_index = m
            raise
    return AdjointTrajectory(state.time_grid, lam, eta)


def solve_linearized_dual(
    state: StateTrajectory,
    control: ControlField,
    params: ModelParams,
    source_u: list[Field2D],
    source_v: list[Field2D],
    scheme: Scheme = "central",
    cg_tol: float = DEFAULT_CG_TOL,
    settings: PicardSettings = PicardSettings(),
) -> tuple[list[Field2D], list[Field2D]]:
    """Exact transpose of the dual sweep: the linearized state solver.

    Marches, forward in time from a zero initial pair, the derivative of
    the converged forward scheme around ``state``.  ``source_u[m]`` and
    ``source_v[m]`` (length ``nt``) enter the step producing level
    ``m+1``; ``U[m], V[m]`` approximate the trajectory perturbation at
    level ``m+1``.  A perturbation ``df`` of the control corresponds to
    ``source_v[m] = df^m v^{m+1} 1_C``.

    Within each level ``U`` and ``V`` are coupled exactly as in the dual
    sweep, and the same inner fixed point resolves the coupling, so the
    duality pairing with `solve_adjoint` holds to solver tolerance.
    """
    grid = state.grid
    nt = state.time_grid.nt
    tau = state.time_grid.tau
    if len(source_u) != nt or len(source_v) != nt:
        raise ValueError(f"need one source per step: expected {nt} levels")
    inv_tau = 1.0 / tau
    hx, hy = grid.hx, grid.hy
    lap_diag = mesh.laplacian_diag(grid)
    area = grid.cell_area

    U: list[Field2D] = []
    V: list[Field2D] = []
    u_prev = np.zeros((grid.nx, grid.ny))
    v_prev = np.zeros((grid.nx, grid.ny))

    for m in range(nt):
        u_new = state.u[m + 1]
        v_new = state.v[m + 1]
        f_now = control.field_at(m)
        upos = np.maximum(u_new.values, 0.0)
        react = 2.0 * params.mu * upos - params.r
        _check_lambda_shift(inv_tau, react, tau)
        _check_eta_shift(inv_tau, f_now.values, tau)
        shift_v = inv_tau + 1.0 - f_now.values

        def apply_u(x: np.ndarray) -> np.ndarray:
            return inv_tau * x - mesh.laplacian_array(x, hx, hy) + react * x

        def apply_v(x: np.ndarray) -> np.ndarray:
            return shift_v * x - mesh.laplacian_array(x, hx, hy)

        rhs_u_base = source_u[m].values + u_prev * inv_tau
        rhs_v_base = source_v[m].values + v_prev * inv_tau

        u_bar = u_prev
        v_bar = v_prev
        increment = np.inf
        done = False
        for _ in range(settings.max_iters):
            rhs_u = rhs_u_base
            if params.kappa != 0.0:
                rhs_u = rhs_u - params.kappa * (
                    mesh.chemotaxis_divergence_arrays(u_bar, v_new.values, hx, hy, scheme)
                    + mesh.weighted_diffusion_arrays(upos, v_bar, v_new.values, hx, hy, scheme)
                )
            u_lin = solve_cg(apply_u, rhs_u, inv_tau + lap_diag + react,
                             rtol=cg_tol, x0=u_bar)
            rhs_v = rhs_v_base + u_lin
            v_lin = solve_cg(apply_v, rhs_v, shift_v + lap_diag, rtol=cg_tol, x0=v_bar)
            increment = max(
                mesh.l2_norm_array(u_lin - u_bar, area)
                / max(mesh.l2_norm_array(u_lin, area), 1e-30),
                mesh.l2_norm_array(v_lin - v_bar, area)
                / max(mesh.l2_norm_array(v_lin, area), 1e-30),
            )
            u_bar, v_bar = u_lin, v_lin
            if increment < settings.tol:
                done = True
                break
        if not done:
            err = PicardDivergenceError(
                f"linearized fixed point stalled after {settings.max_iters} sweeps "
                f"(last relative increment {increment:.3e})",
                last_increment=increment,
            )
            err.time_index = m
            raise err
        U.append(Field2D(grid, u_bar))
        V.append(Field2D(grid, v_bar))
        u_prev, v_prev = u_bar, v_bar

    return U, V
