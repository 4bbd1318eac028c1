"""Warm-start continuation between successive network configurations.

Given the solved state of a previous network and the equation system of the
current one, the residual R = F(x_prev) is the exact image of the discrete
change between the two: by the substitution theorem, removing a branch and
injecting its terminal currents leaves every voltage unchanged, so F(x_prev)
collects precisely those change currents. The solve then traces

    H(X, gamma) = F(X) - gamma * R = 0

from gamma = 1, where x_prev is already a root, down to gamma = 0, the
unmodified current network, re-solving after each step of an adaptive gamma
schedule. R stays frozen at its gamma=1 value for the whole trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Mapping, Sequence

import numpy as np

from .equations import (EquationSystem, ResidualJacobian, SolverState,
                        build_pf_system)
from .errors import HomotopyStalled, LayoutError
from .feasibility import build_infeasibility_system
from .netmodel import Network, NetworkDelta, apply_delta
from .solver import NewtonOptions, SolveReport, SolveStatus, newton_solve

Family = Literal["pf", "ipf", "opf"]


@dataclass
class HomotopyProblem(EquationSystem):
    """Target system with a fixed injection scaled by gamma.

    At gamma=1 the prior solution is an exact root; at gamma=0 the
    evaluation is bit-identical to the bare target. The Jacobian never
    changes: the injection is constant in X.
    """

    target: EquationSystem
    r: np.ndarray
    gamma: float

    def __post_init__(self):
        self.layout = self.target.layout
        self.rows = self.target.rows
        self.r = np.asarray(self.r, dtype=float)
        if self.r.shape != (len(self.rows),):
            raise LayoutError("injection vector does not match the row layout")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    def evaluate(self, state: SolverState) -> ResidualJacobian:
        rj = self.target.evaluate(state)
        if self.gamma == 0.0:
            return rj
        return ResidualJacobian(rj.residual - self.gamma * self.r, rj.jacobian)

    def flat_start(self) -> SolverState:
        return self.target.flat_start()

    def step_guard(self, state: SolverState, step: np.ndarray) -> float:
        return self.target.step_guard(state, step)

    def with_gamma(self, gamma: float) -> "HomotopyProblem":
        return HomotopyProblem(self.target, self.r, gamma)


@dataclass(frozen=True)
class GammaSchedule:
    """Adaptive step policy for the descent of gamma from 1 to 0.

    Intermediate sub-problems are scaffolding for the next one, so they
    converge to the looser ``stage_tol``; only the final gamma=0 solve is
    held to the caller's residual tolerance.
    """

    initial_step: float = 0.25
    shrink: float = 0.5
    grow: float = 1.5
    max_step: float = 0.5
    min_step: float = 1e-4
    stage_tol: float = 1e-4

    def __post_init__(self):
        if not (0.0 < self.min_step <= self.initial_step <= 1.0):
            raise ValueError("need 0 < min_step <= initial_step <= 1")


@dataclass(frozen=True)
class PathRecord:
    gamma: float
    iterations: int
    residual_norm: float
    report: SolveReport | None = None
    state: SolverState | None = None


@dataclass
class HomotopyPath:
    records: list[PathRecord] = field(default_factory=list)

    @property
    def gammas(self) -> list[float]:
        return [r.gamma for r in self.records]

    @property
    def total_iterations(self) -> int:
        return sum(r.iterations for r in self.records)

    @property
    def stages(self) -> int:
        return max(0, len(self.records) - 1)

    def to_dict(self) -> dict:
        return {
            "total_iterations": self.total_iterations,
            "records": [{
                "gamma": r.gamma,
                "iterations": r.iterations,
                "residual_norm": r.residual_norm,
            } for r in self.records],
        }


def extract_residual(target: EquationSystem, x_prev: SolverState) -> np.ndarray:
    """Residual of the current network's equations at the prior solution.

    For a removed branch these entries are exactly the currents it carried
    at x_prev (with opposite signs at its two terminals); for a load change
    they are the change in drawn current, and so on for any discrete edit.
    """
    if x_prev.layout != target.layout:
        raise LayoutError(
            "prior state does not match the target layout; reconcile first")
    return target.evaluate(x_prev).residual.copy()


def trace(target: EquationSystem, x_prev: SolverState,
          schedule: GammaSchedule | None = None,
          opts: NewtonOptions | None = None,
          *, record_states: bool = False,
          max_rescues: int = 3) -> tuple[SolverState, HomotopyPath, SolveReport]:
    """Follow H(X, gamma) = 0 from the prior solution down to gamma = 0.

    Every accepted stage must converge on a nonsingular factorization; a
    singular sub-problem or a step-size underflow raises HomotopyStalled
    carrying the last accepted (gamma, state). Systems exposing ``reseed``
    (the feasibility family) get a slack-reseeding rescue before the trace
    gives up.
    """
    sched = schedule or GammaSchedule()
    opts = opts or NewtonOptions()

    r = extract_residual(target, x_prev)
    path = HomotopyPath()
    start_norm = float(np.max(np.abs(
        target.evaluate(x_prev).residual - r))) if len(r) else 0.0
    if start_norm > opts.tol_residual:
        raise HomotopyStalled(
            f"prior solution is not a root at gamma=1 (|H| = {start_norm:.3e})",
            gamma=1.0, state=x_prev)
    path.records.append(PathRecord(1.0, 0, start_norm,
                                   state=x_prev if record_states else None))

    # Nothing changed: polish once on the bare target and return.
    r_norm = float(np.max(np.abs(r))) if len(r) else 0.0
    if r_norm <= opts.tol_residual:
        sol, rep = newton_solve(target, x_prev, opts)
        path.records.append(PathRecord(0.0, rep.iterations,
                                       rep.residual_history[-1], rep,
                                       state=sol if record_states else None))
        return sol, path, rep

    gamma = 1.0
    step = sched.initial_step
    x = x_prev
    rescues = 0
    last_report: SolveReport | None = None
    stage_opts = replace(opts, tol_residual=max(opts.tol_residual,
                                                sched.stage_tol))

    while gamma > 0.0:
        gamma_next = gamma - step
        if gamma_next <= sched.min_step:
            gamma_next = 0.0
        here_opts = opts if gamma_next == 0.0 else stage_opts
        problem = HomotopyProblem(target, r, gamma_next)
        sol, rep = newton_solve(problem, x, here_opts)
        if rep.status is SolveStatus.SINGULAR:
            raise HomotopyStalled(
                f"Jacobian lost full rank at gamma={gamma_next:.6g}; the "
                "continuation cannot certify a smooth solution path",
                gamma=gamma, state=x, report=rep)
        if rep.converged:
            gamma = gamma_next
            x = sol
            last_report = rep
            path.records.append(PathRecord(gamma, rep.iterations,
                                           rep.residual_history[-1], rep,
                                           state=x if record_states else None))
            step = min(step * sched.grow, sched.max_step)
            continue
        step *= sched.shrink
        if step >= sched.min_step:
            continue
        if rescues < max_rescues and hasattr(target, "reseed"):
            rescues += 1
            reseeded = target.reseed(x, gamma_next * r)
            sol, rep = newton_solve(problem, reseeded, here_opts)
            if rep.converged:
                gamma = gamma_next
                x = sol
                last_report = rep
                iters = rep.iterations
                path.records.append(PathRecord(gamma, iters,
                                               rep.residual_history[-1], rep,
                                               state=x if record_states else None))
                step = sched.initial_step
                continue
        hint = ""
        if not hasattr(target, "reseed"):
            hint = ("; plain power flow carries no feasibility slacks, so a "
                    "path need not exist - retry with the feasibility family")
        raise HomotopyStalled(
            f"step size underflow at gamma={gamma:.6g}{hint}",
            gamma=gamma, state=x, report=rep)

    assert last_report is not None
    return x, path, last_report


def reconcile_state(system: EquationSystem,
                    prev_values: Mapping[tuple[str, Any], float],
                    *, anchor_voltages: Mapping[int, complex] | None = None
                    ) -> SolverState:
    """Place a prior solution onto a (possibly different) layout.

    Carried-over unknowns copy their previous values; new voltages start
    from the bus's prior phasor (or 1+0j), new multipliers and slacks at
    zero. Systems with inequalities then repair fresh dual entries to
    strictly feasible values.
    """
    anchors = anchor_voltages or {}
    vals = np.zeros(len(system.layout))
    fresh = np.zeros(len(system.layout), dtype=bool)
    for i, (kind, key) in enumerate(system.layout.entries):
        prev = prev_values.get((kind, key))
        if prev is not None:
            vals[i] = prev
            continue
        fresh[i] = True
        if kind == "vr":
            vals[i] = anchors.get(key, 1.0 + 0.0j).real
        elif kind == "vi":
            vals[i] = anchors.get(key, 1.0 + 0.0j).imag
        elif kind == "pg":
            gen = system.net.gen_map()[key]
            vals[i] = min(max(gen.p_set, gen.p_min), gen.p_max)
        # qg / isr / isi / lam / mu default to zero
    state = SolverState(system.layout, vals)
    repair = getattr(system, "repair_start", None)
    if repair is not None:
        repair(state, fresh)
    return state


def _voltage_anchors(prev_values: Mapping[tuple[str, Any], float]) -> dict[int, complex]:
    anchors: dict[int, complex] = {}
    for (kind, key), val in prev_values.items():
        if kind == "vr":
            anchors[key] = complex(val, anchors.get(key, 0j).imag)
        elif kind == "vi":
            anchors[key] = complex(anchors.get(key, 0j).real, val)
    return anchors


def warm_start_solve(prev_net: Network,
                     prev_solution: SolverState | Mapping[tuple[str, Any], float],
                     delta: NetworkDelta,
                     family: Family = "pf",
                     *,
                     schedule: GammaSchedule | None = None,
                     opts: NewtonOptions | None = None,
                     opf_options=None,
                     record_states: bool = False
                     ) -> tuple[SolverState, HomotopyPath, SolveReport]:
    """Solve apply_delta(prev_net, delta) starting from prev_net's solution.

    ``prev_solution`` must be the converged state of the same family on
    ``prev_net`` (as a SolverState or as label->value pairs). The target
    layout is reconciled against it before the continuation runs.
    """
    if isinstance(prev_solution, SolverState):
        prev_map = {lbl: float(v) for lbl, v in
                    zip(prev_solution.layout.entries, prev_solution.values)}
    else:
        prev_map = dict(prev_solution)

    target_net = apply_delta(prev_net, delta)
    anchors = _voltage_anchors(prev_map)

    if family == "pf":
        system: EquationSystem = build_pf_system(target_net,
                                                 anchor_voltages=anchors)
    elif family == "ipf":
        system = build_infeasibility_system(target_net,
                                            anchor_voltages=anchors)
    elif family == "opf":
        from .opf import OpfProblem, build_opf_system

        if opf_options is None:
            problem = OpfProblem(target_net)
        elif isinstance(opf_options, OpfProblem):
            problem = replace(opf_options, net=target_net)
        else:
            problem = OpfProblem(target_net, **opf_options)
        system = build_opf_system(problem, anchor_voltages=anchors)
    else:
        raise ValueError(f"unknown family {family!r}")

    x_prev = reconcile_state(system, prev_map, anchor_voltages=anchors)
    return trace(system, x_prev, schedule, opts, record_states=record_states)
