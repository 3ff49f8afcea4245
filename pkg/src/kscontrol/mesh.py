"""Cell-centered finite volumes on a rectangle with zero-flux boundaries.

The grid covers ``[0, Lx] x [0, Ly]`` with ``nx * ny`` uniform cells; all
unknowns live at cell centers ``((i + 0.5) hx, (j + 0.5) hy)`` stored in
arrays of shape ``(nx, ny)``.  Homogeneous Neumann conditions enter through
mirrored ghost cells, which makes every operator here conservative: the
discrete integral of ``laplacian_neumann`` and of ``chemotaxis_divergence``
vanishes identically because interior face fluxes telescope and boundary
fluxes are zero by construction.

Besides the two divergence-form operators the module provides the exact
transpose of the chemotaxis stencil with respect to its density argument
(needed by the dual problem) and a face-coefficient diffusion operator that
is self-transposed.  Keeping the transposes here, next to the stencils they
mirror, is what makes the discrete duality identity checkable to solver
precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import GridMismatchError

Scheme = Literal["central", "upwind"]


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centered grid on ``[0, Lx] x [0, Ly]``."""

    Lx: float
    Ly: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain side lengths must be positive")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("need at least two cells per direction")

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` center coordinate arrays of shape ``(nx, ny)``."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")


@dataclass
class Field2D:
    """One scalar unknown per cell.  Values must stay finite."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid "
                f"({self.grid.nx}, {self.grid.ny})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def copy(self) -> "Field2D":
        return Field2D(self.grid, self.values.copy())


def constant_field(grid: GridSpec, value: float) -> Field2D:
    return Field2D(grid, np.full((grid.nx, grid.ny), float(value)))


def field_from_function(grid: GridSpec, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Field2D:
    """Sample ``fn(x, y)`` at cell centers."""
    X, Y = grid.cell_centers()
    return Field2D(grid, np.broadcast_to(fn(X, Y), (grid.nx, grid.ny)).astype(float).copy())


@dataclass
class RegionMask:
    """Boolean cell selection, used for the control support."""

    grid: GridSpec
    inside: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=bool)
        if self.inside.shape != (self.grid.nx, self.grid.ny):
            raise ValueError("mask shape does not match grid")

    @classmethod
    def rectangle(cls, grid: GridSpec, x0: float, y0: float, x1: float, y1: float) -> "RegionMask":
        """Cells whose centers fall in ``[x0, x1] x [y0, y1]``."""
        X, Y = grid.cell_centers()
        return cls(grid, (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1))

    @classmethod
    def everywhere(cls, grid: GridSpec) -> "RegionMask":
        return cls(grid, np.ones((grid.nx, grid.ny), dtype=bool))

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @property
    def area(self) -> float:
        return self.count * self.grid.cell_area


def check_same_grid(*objs) -> GridSpec:
    grid = objs[0].grid
    for other in objs[1:]:
        if other.grid != grid:
            raise GridMismatchError("fields live on different grids")
    return grid


# ---------------------------------------------------------------------------
# raw-array kernels (shape (nx, ny); hot paths, no Field2D wrapping)
# ---------------------------------------------------------------------------

def laplacian_array(vals: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Five-point Neumann Laplacian via mirrored ghost cells."""
    p = np.pad(vals, 1, mode="edge")
    return (p[2:, 1:-1] - 2.0 * vals + p[:-2, 1:-1]) / (hx * hx) + (
        p[1:-1, 2:] - 2.0 * vals + p[1:-1, :-2]
    ) / (hy * hy)


def laplacian_diag(grid: GridSpec) -> np.ndarray:
    """Diagonal of ``-laplacian_array`` (boundary cells lose mirror links)."""
    cnt_x = np.full((grid.nx, 1), 2.0)
    cnt_x[0, 0] = cnt_x[-1, 0] = 1.0
    cnt_y = np.full((1, grid.ny), 2.0)
    cnt_y[0, 0] = cnt_y[0, -1] = 1.0
    return cnt_x / grid.hx**2 + cnt_y / grid.hy**2


def _face_gradients(v: np.ndarray, hx: float, hy: float):
    gx = (v[1:, :] - v[:-1, :]) / hx
    gy = (v[:, 1:] - v[:, :-1]) / hy
    return gx, gy


def _face_weights(gx: np.ndarray, gy: np.ndarray, scheme: Scheme):
    """Left/bottom cell weight per interior face; right/top weight is 1-w.

    Central: arithmetic mean.  Upwind: full weight to the cell the face
    gradient of v points away from (the donor for flux ``u * grad v``).
    """
    if scheme == "central":
        wx = np.full_like(gx, 0.5)
        wy = np.full_like(gy, 0.5)
    elif scheme == "upwind":
        wx = (gx > 0.0).astype(float)
        wy = (gy > 0.0).astype(float)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return wx, wy


def chemotaxis_divergence_arrays(
    u: np.ndarray, v: np.ndarray, hx: float, hy: float, scheme: Scheme,
    select_from: np.ndarray | None = None,
) -> np.ndarray:
    """``div_h(u_face * grad_h v)`` with zero-flux boundary faces.

    ``select_from`` optionally decouples the upwind donor selection from the
    field whose gradient carries the flux; the linearized problem needs the
    donor pattern frozen at the base state.
    """
    gx, gy = _face_gradients(v, hx, hy)
    if select_from is v or select_from is None:
        sx, sy = gx, gy
    else:
        sx, sy = _face_gradients(select_from, hx, hy)
    wx, wy = _face_weights(sx, sy, scheme)

    fx = (wx * u[:-1, :] + (1.0 - wx) * u[1:, :]) * gx
    fy = (wy * u[:, :-1] + (1.0 - wy) * u[:, 1:]) * gy

    out = np.zeros_like(u)
    out[:-1, :] += fx / hx
    out[1:, :] -= fx / hx
    out[:, :-1] += fy / hy
    out[:, 1:] -= fy / hy
    return out


def chemotaxis_adjoint_arrays(
    w: np.ndarray, v: np.ndarray, hx: float, hy: float, scheme: Scheme,
    select_from: np.ndarray | None = None,
) -> np.ndarray:
    """Exact transpose of ``u -> chemotaxis_divergence_arrays(u, v)``.

    Cellwise this is a flux-weighted average of ``-grad w . grad v``, the
    convection term of the first dual equation.  Transposition is with
    respect to the cell-area inner product; since the weights do not depend
    on ``u`` the identity ``<C u, w> = <u, C^T w>`` holds to round-off.
    """
    gx, gy = _face_gradients(v, hx, hy)
    if select_from is v or select_from is None:
        sx, sy = gx, gy
    else:
        sx, sy = _face_gradients(select_from, hx, hy)
    wx, wy = _face_weights(sx, sy, scheme)

    tx = gx * (w[1:, :] - w[:-1, :]) / hx
    ty = gy * (w[:, 1:] - w[:, :-1]) / hy

    out = np.zeros_like(w)
    out[:-1, :] -= wx * tx
    out[1:, :] -= (1.0 - wx) * tx
    out[:, :-1] -= wy * ty
    out[:, 1:] -= (1.0 - wy) * ty
    return out


def weighted_diffusion_arrays(
    coeff: np.ndarray, phi: np.ndarray, ref: np.ndarray,
    hx: float, hy: float, scheme: Scheme,
) -> np.ndarray:
    """``div_h(coeff_face * grad_h phi)`` with donor selection frozen at ``ref``.

    For fixed face coefficients this operator is symmetric, so it serves
    both the state linearization in ``phi`` and its transpose in the second
    dual equation.
    """
    sx, sy = _face_gradients(ref, hx, hy)
    wx, wy = _face_weights(sx, sy, scheme)
    cx = wx * coeff[:-1, :] + (1.0 - wx) * coeff[1:, :]
    cy = wy * coeff[:, :-1] + (1.0 - wy) * coeff[:, 1:]

    fx = cx * (phi[1:, :] - phi[:-1, :]) / hx
    fy = cy * (phi[:, 1:] - phi[:, :-1]) / hy

    out = np.zeros_like(phi)
    out[:-1, :] += fx / hx
    out[1:, :] -= fx / hx
    out[:, :-1] += fy / hy
    out[:, 1:] -= fy / hy
    return out


# ---------------------------------------------------------------------------
# Field2D-level API
# ---------------------------------------------------------------------------

def laplacian_neumann(f: Field2D) -> Field2D:
    """Discrete Laplacian with zero-flux boundaries.

    Exact on constants, self-transposed, and ``integrate(laplacian(f)) == 0``
    to round-off for any field.
    """
    return Field2D(f.grid, laplacian_array(f.values, f.grid.hx, f.grid.hy))


def chemotaxis_divergence(u: Field2D, v: Field2D, scheme: Scheme = "central") -> Field2D:
    """Conservative discretization of ``div(u grad v)``; sign applied by caller."""
    grid = check_same_grid(u, v)
    return Field2D(grid, chemotaxis_divergence_arrays(u.values, v.values, grid.hx, grid.hy, scheme))


def chemotaxis_divergence_adjoint(w: Field2D, v: Field2D, scheme: Scheme = "central") -> Field2D:
    """Transpose of ``chemotaxis_divergence`` in its density argument."""
    grid = check_same_grid(w, v)
    return Field2D(grid, chemotaxis_adjoint_arrays(w.values, v.values, grid.hx, grid.hy, scheme))


def integrate(f: Field2D) -> float:
    """Cell-area quadrature of the field over the whole rectangle."""
    return float(f.values.sum()) * f.grid.cell_area


def inner(f: Field2D, g: Field2D) -> float:
    """Discrete L2 inner product (cell-area weighted)."""
    check_same_grid(f, g)
    return float(np.sum(f.values * g.values)) * f.grid.cell_area


def l2_norm_array(vals: np.ndarray, cell_area: float) -> float:
    return float(np.sqrt(np.sum(vals * vals) * cell_area))


@dataclass(frozen=True)
class FieldNorms:
    l2: float
    lp: float
    h1_seminorm: float
    linf: float


def norms(f: Field2D, p: float = 2.0) -> FieldNorms:
    """Discrete L2, Lp, H1-seminorm (face differences) and max norms.

    ``p`` must lie in (1, inf); ``lp`` with ``p = 2`` coincides with ``l2``.
    """
    if not p > 1.0:
        raise ValueError("p must exceed 1")
    g = f.grid
    vals = f.values
    area = g.cell_area
    l2 = l2_norm_array(vals, area)
    lp = float(np.sum(np.abs(vals) ** p) * area) ** (1.0 / p)
    gx = (vals[1:, :] - vals[:-1, :]) / g.hx
    gy = (vals[:, 1:] - vals[:, :-1]) / g.hy
    h1 = float(np.sqrt((np.sum(gx * gx) + np.sum(gy * gy)) * area))
    linf = float(np.max(np.abs(vals))) if vals.size else 0.0
    return FieldNorms(l2=l2, lp=lp, h1_seminorm=h1, linf=linf)
