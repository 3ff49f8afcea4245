"""Matrix-free preconditioned conjugate gradient on 2D arrays.

All implicit systems assembled by the time steppers are symmetric positive
definite (shifted Neumann Laplacians plus nonnegative diagonal terms), so a
single CG routine with Jacobi preconditioning covers every solve.  The
operator is passed as a callable acting on ``(nx, ny)`` arrays; nothing is
ever assembled.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import LinearSolverError

DEFAULT_CG_TOL = 1e-10


def solve_cg(
    apply_op: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    diag: np.ndarray,
    rtol: float = DEFAULT_CG_TOL,
    max_iters: Optional[int] = None,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Solve ``A x = rhs`` for SPD ``A`` given by ``apply_op``.

    Parameters
    ----------
    apply_op : callable
        Applies the operator to a 2D array, returning a new array.
    rhs : ndarray
        Right-hand side, any 2D shape.
    diag : ndarray
        Diagonal of the operator (Jacobi preconditioner).
    rtol : float
        Relative residual target ``||rhs - A x|| <= rtol * ||rhs||``.
    max_iters : int, optional
        Iteration cap; defaults to ``rhs.size + 100``.
    x0 : ndarray, optional
        Warm start.  Defaults to zero.

    Raises
    ------
    LinearSolverError
        If the residual target is not met within the iteration cap.
    """
    b_norm = float(np.sqrt(np.sum(rhs * rhs)))
    if b_norm == 0.0:
        return np.zeros_like(rhs)
    if max_iters is None:
        max_iters = rhs.size + 100

    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = x0.copy()
        r = rhs - apply_op(x)

    target = rtol * b_norm
    r_norm = float(np.sqrt(np.sum(r * r)))
    if r_norm <= target:
        return x

    z = r / diag
    p = z.copy()
    rz = float(np.sum(r * z))
    for _ in range(max_iters):
        ap = apply_op(p)
        alpha = rz / float(np.sum(p * ap))
        x += alpha * p
        r -= alpha * ap
        r_norm = float(np.sqrt(np.sum(r * r)))
        if r_norm <= target:
            return x
        z = r / diag
        rz_next = float(np.sum(r * z))
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise LinearSolverError("conjugate gradient did not converge", r_norm / b_norm)
