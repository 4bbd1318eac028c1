"""Damped Newton-Raphson over any equation system, on a sparse LU kernel.

The iteration is plain Newton with optional per-entry voltage-step clamping;
globalization against distant starts is the continuation layer's job, not a
line search here. Convergence is judged on the residual infinity norm (the
physical current mismatch), never on step size.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equations import EquationSystem, SolverState
from .errors import SingularJacobianError

#: Relative ratio of |diag(U)| extremes below which a factorization is
#: reported as near-singular.
NEAR_SINGULAR_RATIO = 1e-13


@dataclass(frozen=True)
class VoltageClamp:
    """Limit per-iteration voltage moves; multipliers and slacks run free."""

    delta_max: float = 0.1


@dataclass(frozen=True)
class NewtonOptions:
    tol_residual: float = 1e-8
    max_iter: int = 50
    limiting: VoltageClamp | None = VoltageClamp()
    diverge_norm: float = 1e6


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DIVERGED = "diverged"
    SINGULAR = "singular_jacobian"
    BREAKDOWN = "numerical_breakdown"


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list[float]
    status: SolveStatus
    condition_flag: str = "ok"          # "ok" | "near-singular" | "singular"
    wall_time: float = 0.0
    message: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_history": list(self.residual_history),
            "status": self.status.value,
            "condition_flag": self.condition_flag,
            "wall_time": self.wall_time,
            "message": self.message,
        }

    def same_outcome(self, other: "SolveReport") -> bool:
        """Equality up to wall time, which is hardware noise."""
        return (self.converged == other.converged
                and self.iterations == other.iterations
                and self.residual_history == other.residual_history
                and self.status == other.status
                and self.condition_flag == other.condition_flag)


class ReusableLu:
    """LU factorization bound to one sparsity pattern.

    The pattern is fixed at first factorization; refactorizing with a
    matrix of a different pattern is an error. (The underlying kernel
    redoes the symbolic analysis internally, but callers get the
    pattern-stability guarantee they rely on.)
    """

    def __init__(self, matrix: sp.spmatrix):
        m = matrix.tocsc()
        m.sort_indices()
        self._pattern = (m.shape, m.indptr.copy(), m.indices.copy())
        self._lu = None
        self.condition_flag = "ok"
        self._factorize(m)

    def _factorize(self, m: sp.csc_matrix) -> None:
        _check_structure(m)
        try:
            self._lu = spla.splu(m)
        except RuntimeError as exc:
            self.condition_flag = "singular"
            raise SingularJacobianError(f"LU factorization failed: {exc}") from exc
        udiag = np.abs(self._lu.U.diagonal())
        top = udiag.max() if udiag.size else 0.0
        if top == 0.0 or udiag.min() < NEAR_SINGULAR_RATIO * top:
            self.condition_flag = "near-singular"

    def refactorize(self, matrix: sp.spmatrix) -> None:
        m = matrix.tocsc()
        m.sort_indices()
        shape, indptr, indices = self._pattern
        if m.shape != shape or not np.array_equal(m.indptr, indptr) \
                or not np.array_equal(m.indices, indices):
            raise SingularJacobianError("matrix pattern changed between factorizations")
        self.condition_flag = "ok"
        self._factorize(m)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


def _check_structure(m: sp.csc_matrix) -> None:
    csr = m.tocsr()
    row_counts = np.diff(csr.indptr)
    empty = np.flatnonzero(row_counts == 0)
    if empty.size:
        raise SingularJacobianError(
            f"structurally singular: row {int(empty[0])} has no entries",
            row=int(empty[0]))
    col_counts = np.diff(m.indptr)
    empty = np.flatnonzero(col_counts == 0)
    if empty.size:
        raise SingularJacobianError(
            f"structurally singular: column {int(empty[0])} has no entries",
            row=int(empty[0]))


def sparse_lu_solve(matrix: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Solve J x = rhs by sparse LU with threshold partial pivoting.

    Raises ``SingularJacobianError`` on structural singularity (naming the
    empty row or column) or on a zero pivot during factorization.
    """
    return ReusableLu(matrix).solve(rhs)


def newton_solve(system: EquationSystem, x0: SolverState,
                 opts: NewtonOptions | None = None) -> tuple[SolverState, SolveReport]:
    """Iterate x <- x + a*dx with J dx = -F until the residual passes tol.

    Deterministic: identical inputs reproduce the identical iterate path
    and report (wall time aside). The iterate reached so far is always
    returned, converged or not.
    """
    opts = opts or NewtonOptions()
    system.check_state(x0)
    t0 = time.perf_counter()
    state = x0.copy()
    vr_idx = state.layout.indices_of_kind("vr")
    vi_idx = state.layout.indices_of_kind("vi")

    history: list[float] = []
    status = SolveStatus.MAX_ITER
    cond = "ok"
    message = ""
    iterations = 0

    for k in range(opts.max_iter + 1):
        rj = system.evaluate(state)
        if not np.all(np.isfinite(rj.residual)):
            status = SolveStatus.BREAKDOWN
            message = "non-finite residual"
            break
        norm = float(np.max(np.abs(rj.residual))) if rj.residual.size else 0.0
        history.append(norm)
        if norm <= opts.tol_residual:
            status = SolveStatus.CONVERGED
            iterations = k
            break
        if norm > opts.diverge_norm:
            status = SolveStatus.DIVERGED
            message = f"residual norm {norm:.3e} above divergence threshold"
            break
        if k == opts.max_iter:
            status = SolveStatus.MAX_ITER
            message = "iteration limit reached"
            break
        try:
            lu = ReusableLu(rj.jacobian)
            step = lu.solve(-rj.residual)
        except SingularJacobianError as exc:
            status = SolveStatus.SINGULAR
            cond = "singular"
            message = str(exc)
            break
        if lu.condition_flag == "near-singular":
            cond = "near-singular"
        if not np.all(np.isfinite(step)):
            status = SolveStatus.BREAKDOWN
            message = "non-finite Newton step"
            break
        if isinstance(opts.limiting, VoltageClamp):
            d = opts.limiting.delta_max
            step[vr_idx] = np.clip(step[vr_idx], -d, d)
            step[vi_idx] = np.clip(step[vi_idx], -d, d)
        alpha = system.step_guard(state, step)
        state.values += alpha * step
        iterations = k + 1

    report = SolveReport(
        converged=status is SolveStatus.CONVERGED,
        iterations=iterations,
        residual_history=history,
        status=status,
        condition_flag=cond,
        wall_time=time.perf_counter() - t0,
        message=message,
    )
    return state, report


def fd_jacobian_check(system: EquationSystem, state: SolverState,
                      step: float = 1e-6) -> float:
    """Max entrywise relative gap between analytic and central-difference J.

    Dense column scan, intended for test-sized systems. The relative gap
    uses max(1, |entry|) in the denominator so near-zero entries compare
    absolutely.
    """
    system.check_state(state)
    n = len(state.layout)
    analytic = system.evaluate(state).jacobian.toarray()
    fd = np.zeros_like(analytic)
    work = state.copy()
    for j in range(n):
        base = work.values[j]
        work.values[j] = base + step
        fp = system.evaluate(work).residual.copy()
        work.values[j] = base - step
        fm = system.evaluate(work).residual
        work.values[j] = base
        fd[:, j] = (fp - fm) / (2.0 * step)
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))
