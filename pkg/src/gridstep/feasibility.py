"""Feasibility-quantifying power flow via minimized slack current injections.

Plain power flow has no solution when demand cannot be met; this module
instead solves the first-order optimality system of

    minimize ||I_slack||^2  subject to  F(X) + I_slack = 0

where fictitious slack currents sit on every live current-balance row. A
feasible network converges with zero slack; an infeasible one converges to
the smallest current support that would make it solvable, localizing the
deficit bus by bus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
import scipy.sparse as sp

from .equations import (EquationSystem, PowerFlowSystem, ResidualJacobian,
                        SolverState, StampAccumulator, StateLayout)
from .errors import LayoutError, SolveFailure
from .netmodel import Network


class InfeasibilitySystem(EquationSystem):
    """Optimality system over the extended state [X, I_slack, lambda].

    Residual blocks, in order:
      1. constraint rows  F(X) + I_slack (slack entries only on live
         current-balance rows; pins and magnitude rows are definitional),
      2. slack gradient   2*I_slack + lambda on the matching rows,
      3. state gradient   (dF/dX)^T lambda.

    The Jacobian carries the exact curvature term d/dX[(dF/dX)^T lambda];
    only fixed-power injections and magnitude rows contribute to it.
    """

    def __init__(self, net: Network, *,
                 anchor_voltages: Mapping[int, complex] | None = None):
        self.core = PowerFlowSystem(net, anchor_voltages=anchor_voltages,
                                    kkt_rows=True)
        self.net = net
        self.n_x = len(self.core.layout)
        self.n_c = len(self.core.rows)

        slack_buses = self.core.slack_row_buses
        self.slack_row_idx = np.array(
            [self.core.rows.index_of("kcl_r", b) for b in slack_buses]
            + [self.core.rows.index_of("kcl_i", b) for b in slack_buses],
            dtype=int)
        self.m = len(self.slack_row_idx)

        labels: list[tuple[str, Any]] = list(self.core.layout.entries)
        labels += [("isr", b) for b in slack_buses]
        labels += [("isi", b) for b in slack_buses]
        labels += [("lam", lbl) for lbl in self.core.rows.entries]
        self.layout = StateLayout(labels)

        rows: list[tuple[str, Any]] = [("c", lbl) for lbl in self.core.rows.entries]
        rows += [("gis", ("isr", b)) for b in slack_buses]
        rows += [("gis", ("isi", b)) for b in slack_buses]
        rows += [("gx", lbl) for lbl in self.core.layout.entries]
        self.rows = StateLayout(rows)

    def _split(self, values: np.ndarray):
        n_x, m = self.n_x, self.m
        return values[:n_x], values[n_x:n_x + m], values[n_x + m:]

    def evaluate(self, state: SolverState) -> ResidualJacobian:
        self.check_state(state)
        x, i_s, lam = self._split(state.values)
        n_x, n_c, m = self.n_x, self.n_c, self.m

        acc = StampAccumulator(n_c, n_x, self.core.pinned_rows)
        self.core.accumulate(x, acc)
        jrows = np.asarray(acc.rows, dtype=int)
        jcols = np.asarray(acc.cols, dtype=int)
        jvals = np.asarray(acc.vals, dtype=float)

        residual = np.zeros(n_x + m + n_c)
        residual[:n_c] = acc.residual
        residual[self.slack_row_idx] += i_s
        residual[n_c:n_c + m] = 2.0 * i_s + lam[self.slack_row_idx]
        core_jac = sp.coo_matrix((jvals, (jrows, jcols)), shape=(n_c, n_x)).tocsr()
        residual[n_c + m:] = core_jac.T @ lam

        hr, hc, hv = self.core.hessian_triplets(x, lam)

        rows = np.concatenate([
            jrows,                                    # (c, x)
            self.slack_row_idx,                       # (c, is)
            np.arange(n_c, n_c + m),                  # (gis, is)
            np.arange(n_c, n_c + m),                  # (gis, lam)
            n_c + m + jcols,                          # (gx, lam) = transpose
            n_c + m + np.asarray(hr, dtype=int),      # (gx, x) curvature
        ])
        cols = np.concatenate([
            jcols,
            n_x + np.arange(m),
            n_x + np.arange(m),
            n_x + m + self.slack_row_idx,
            n_x + m + jrows,
            np.asarray(hc, dtype=int),
        ])
        vals = np.concatenate([
            jvals,
            np.ones(m),
            np.full(m, 2.0),
            np.ones(m),
            jvals,
            np.asarray(hv, dtype=float),
        ])
        n = n_x + m + n_c
        jac = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        return ResidualJacobian(residual, jac)

    def flat_start(self) -> SolverState:
        vals = np.zeros(len(self.layout))
        vals[:self.n_x] = self.core.flat_start().values
        return SolverState(self.layout, vals)

    def reseed(self, state: SolverState, rhs_shift: np.ndarray | None = None
               ) -> SolverState:
        """Restart point with slacks absorbing the current-balance residual.

        Sets I_slack to close the constraint block exactly (against an
        optional external injection ``rhs_shift`` on the rows) and lambda
        to the matching stationary value. Used to rescue solves whose
        iterates stagnate with inactive slacks.
        """
        self.check_state(state)
        x, i_s, _ = self._split(state.values)
        acc = StampAccumulator(self.n_c, self.n_x, self.core.pinned_rows)
        self.core.accumulate(x, acc)
        c = acc.residual.copy()
        if rhs_shift is not None:
            c -= rhs_shift[:self.n_c]
        c[self.slack_row_idx] += i_s
        new = state.copy()
        is_new = i_s - c[self.slack_row_idx]
        new.values[self.n_x:self.n_x + self.m] = is_new
        lam = np.zeros(self.n_c)
        lam[self.slack_row_idx] = -2.0 * is_new
        new.values[self.n_x + self.m:] = lam
        return new

    def slack_pairs(self, state: SolverState) -> list[tuple[int, float, float]]:
        """Per-bus slack injections (bus, re, im)."""
        self.check_state(state)
        _, i_s, _ = self._split(state.values)
        half = self.m // 2
        buses = self.core.slack_row_buses
        return [(b, float(i_s[k]), float(i_s[half + k]))
                for k, b in enumerate(buses)]


def build_infeasibility_system(net: Network, *,
                               anchor_voltages: Mapping[int, complex] | None = None
                               ) -> InfeasibilitySystem:
    return InfeasibilitySystem(net, anchor_voltages=anchor_voltages)


@dataclass(frozen=True)
class SlackEntry:
    bus: int
    slack_re: float
    slack_im: float
    magnitude: float


@dataclass(frozen=True)
class InfeasibilityReport:
    entries: tuple[SlackEntry, ...]   # sorted by magnitude, largest first
    total: float                      # sum of squared magnitudes

    @property
    def max_magnitude(self) -> float:
        return self.entries[0].magnitude if self.entries else 0.0

    def to_dict(self) -> dict:
        return {
            "buses": [{
                "bus_id": e.bus, "slack_re": e.slack_re,
                "slack_im": e.slack_im, "magnitude": e.magnitude,
            } for e in self.entries],
            "total": self.total,
        }


def infeasibility_report(system: InfeasibilitySystem, state: SolverState,
                         tol: float = 1e-6) -> InfeasibilityReport:
    """Summarize slack injections of a converged feasibility solve.

    Refuses states that do not satisfy the optimality system to ``tol``;
    an unconverged state has no meaningful infeasibility reading.
    """
    if state.layout != system.layout:
        raise LayoutError("state does not belong to this system")
    resid = system.evaluate(state).residual
    worst = float(np.max(np.abs(resid))) if resid.size else 0.0
    if worst > tol:
        raise SolveFailure(
            f"state is not a converged solution (residual {worst:.3e} > {tol:g})")
    entries = []
    total = 0.0
    for bus, re, im in system.slack_pairs(state):
        mag = float(np.hypot(re, im))
        total += re * re + im * im
        entries.append(SlackEntry(bus, re, im, mag))
    entries.sort(key=lambda e: (-e.magnitude, e.bus))
    return InfeasibilityReport(tuple(entries), total)


def solve_infeasibility(net: Network, opts=None, *,
                        anchor_voltages: Mapping[int, complex] | None = None,
                        max_reseeds: int = 2):
    """Cold feasibility solve with slack-reseeding rescue.

    Starts from the flat profile with zero slacks and multipliers. If the
    iteration stalls there (infeasible networks can park the duals at
    zero, reducing the step map to plain power flow), the slacks are
    re-seeded to absorb the standing mismatch and the solve restarts.
    Returns (system, state, report).
    """
    from .solver import NewtonOptions, newton_solve

    opts = opts or NewtonOptions()
    system = build_infeasibility_system(net, anchor_voltages=anchor_voltages)
    state = system.flat_start()
    state, report = newton_solve(system, state, opts)
    reseeds = 0
    while not report.converged and reseeds < max_reseeds:
        reseeds += 1
        prior_iters = report.iterations
        prior_hist = report.residual_history
        state = system.reseed(state)
        state, report = newton_solve(system, state, opts)
        report.iterations += prior_iters
        report.residual_history = prior_hist + report.residual_history
        report.message = (report.message + f" (after slack reseed {reseeds})").strip()
    return system, state, report
