"""Control variables on the space-time cylinder and their calculus.

A control is piecewise constant in time: one masked spatial field per time
level ``n = 0 .. nt-1``, active on ``[t_n, t_{n+1})``.  All quadrature over
the control cylinder is left-endpoint in time and cell-area in space,
matching how the forward scheme samples the control.  Values are stored
compactly (one row per level, one column per masked cell); outside the
control region the control is identically zero.

The regularization exponent ``p`` lives in (2, 3); its integrand derivative
``sgn(f) |f|^(p-1)`` is continuous with value 0 at ``f = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Optional

import numpy as np

from .errors import GridMismatchError
from .mesh import Field2D, RegionMask

if TYPE_CHECKING:  # pragma: no cover
    from .adjoint import AdjointTrajectory
    from .forward import StateTrajectory, TimeGrid


@dataclass
class ControlField:
    """Piecewise-constant-in-time control supported on a region mask.

    ``values`` has shape ``(nt, m)`` where ``m`` is the number of masked
    cells; level ``n`` holds on ``[t_n, t_{n+1})``.
    """

    time_grid: "TimeGrid"
    region: RegionMask
    values: np.ndarray

    def __post_init__(self):
        if self.region.count < 1:
            raise ValueError("control region must contain at least one cell")
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.time_grid.nt, self.region.count)
        if self.values.shape != expected:
            raise ValueError(f"control values shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control contains non-finite values")

    @classmethod
    def zeros(cls, time_grid: "TimeGrid", region: RegionMask) -> "ControlField":
        return cls(time_grid, region, np.zeros((time_grid.nt, region.count)))

    @classmethod
    def from_constant(cls, time_grid: "TimeGrid", region: RegionMask, value: float) -> "ControlField":
        return cls(time_grid, region, np.full((time_grid.nt, region.count), float(value)))

    def field_at(self, level: int) -> Field2D:
        """Scatter level ``level`` onto the full grid (zero outside the mask)."""
        full = np.zeros((self.region.grid.nx, self.region.grid.ny))
        full[self.region.inside] = self.values[level]
        return Field2D(self.region.grid, full)

    def copy(self) -> "ControlField":
        return ControlField(self.time_grid, self.region, self.values.copy())

    def layout_matches(self, other: "ControlField | GradientField") -> bool:
        return (
            self.time_grid == other.time_grid
            and self.region.grid == other.region.grid
            and np.array_equal(self.region.inside, other.region.inside)
        )


@dataclass
class GradientField:
    """Reduced gradient, laid out exactly like the control it differentiates."""

    time_grid: "TimeGrid"
    region: RegionMask
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.time_grid.nt, self.region.count)
        if self.values.shape != expected:
            raise ValueError(f"gradient values shape {self.values.shape}, expected {expected}")


@dataclass(frozen=True)
class CostWeights:
    """Nonnegative weights of the three cost terms."""

    gamma_u: float = 1.0
    gamma_v: float = 1.0
    gamma_f: float = 1e-3

    def __post_init__(self):
        if self.gamma_u < 0 or self.gamma_v < 0 or self.gamma_f < 0:
            raise ValueError("cost weights must be nonnegative")


@dataclass(frozen=True)
class AdmissibleSet:
    """Pointwise constraint set: unconstrained, or a box ``[f_min, f_max]``."""

    kind: Literal["unconstrained", "box"] = "unconstrained"
    f_min: float = -np.inf
    f_max: float = np.inf

    def __post_init__(self):
        if self.kind not in ("unconstrained", "box"):
            raise ValueError(f"unknown admissible set kind {self.kind!r}")
        if self.kind == "box":
            if not (np.isfinite(self.f_min) and np.isfinite(self.f_max)):
                raise ValueError("box bounds must be finite")
            if not self.f_min <= self.f_max:
                raise ValueError("box requires f_min <= f_max")

    @property
    def bounded(self) -> bool:
        return self.kind == "box"


def require_well_posed(weights: CostWeights, admissible: AdmissibleSet) -> None:
    """Existence hypothesis: without regularization the set must be bounded."""
    if weights.gamma_f == 0.0 and not admissible.bounded:
        raise ValueError(
            "gamma_f = 0 requires a bounded admissible set: use a box constraint "
            "or a positive control-cost weight"
        )


@dataclass
class TrackingTargets:
    """Desired states; each entry is a single field or one field per level."""

    u_d: "Field2D | list[Field2D]"
    v_d: "Field2D | list[Field2D]"

    def at(self, level: int) -> tuple[Field2D, Field2D]:
        u_d = self.u_d[level] if isinstance(self.u_d, list) else self.u_d
        v_d = self.v_d[level] if isinstance(self.v_d, list) else self.v_d
        return u_d, v_d


def project(f: ControlField, admissible: AdmissibleSet) -> ControlField:
    """Pointwise projection onto the admissible set (identity if unconstrained)."""
    if admissible.kind == "unconstrained":
        return f.copy()
    clipped = np.clip(f.values, admissible.f_min, admissible.f_max)
    return ControlField(f.time_grid, f.region, clipped)


def _qc_weight(f: ControlField) -> float:
    # space-time measure of one control degree of freedom
    return f.region.grid.cell_area * f.time_grid.tau


def qc_norm(values: np.ndarray, f: ControlField) -> float:
    """Discrete L2 norm over the control cylinder for control-shaped arrays."""
    return float(np.sqrt(np.sum(values * values) * _qc_weight(f)))


def control_cost(f: ControlField, gamma_f: float, p: float) -> float:
    """Regularization term ``(gamma_f / p) * sum |f|^p`` over the cylinder."""
    if gamma_f < 0:
        raise ValueError("gamma_f must be nonnegative")
    if gamma_f == 0.0:
        return 0.0
    return gamma_f / p * float(np.sum(np.abs(f.values) ** p)) * _qc_weight(f)


def reduced_gradient(
    f: ControlField,
    state: "StateTrajectory",
    adjoint: "AdjointTrajectory",
    gamma_f: float,
    p: float,
) -> GradientField:
    """Gradient of the reduced cost with respect to the control.

    Per level ``n`` and masked cell: ``gamma_f * sgn(f) |f|^(p-1) + v @ eta``
    with the state and the multiplier both sampled at level ``n`` - the
    left-endpoint sampling that matches the control quadrature.  The exact
    discrete pairing would use the implicit state value ``v^{n+1}``; the
    left-endpoint choice differs from it by one time step's drift of ``v``,
    an O(tau) perturbation that vanishes under refinement and is far inside
    every tolerance the optimizer works to.  (Both factors shrink together
    near a tracking optimum, where ``eta -> 0``.)
    """
    inside = f.region.inside
    nt = f.time_grid.nt
    vals = np.empty_like(f.values)
    for n in range(nt):
        coupling = state.v[n].values[inside] * adjoint.eta[n].values[inside]
        vals[n] = coupling
    if gamma_f != 0.0:
        fv = f.values
        vals = vals + gamma_f * np.sign(fv) * np.abs(fv) ** (p - 1.0)
    return GradientField(f.time_grid, f.region, vals)


def vi_residual(
    f: ControlField,
    d: GradientField,
    admissible: AdmissibleSet,
    step: float = 1.0,
) -> float:
    """Projected-gradient fixed-point residual ``||f - P(f - step * d)||``.

    Measured in the discrete L2 norm over the control cylinder; zero exactly
    at points satisfying the first-order optimality condition.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not f.layout_matches(d):
        raise GridMismatchError("control and gradient layouts differ")
    trial = f.values - step * d.values
    if admissible.kind == "box":
        trial = np.clip(trial, admissible.f_min, admissible.f_max)
    return qc_norm(f.values - trial, f)
