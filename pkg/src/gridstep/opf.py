"""Optimal dispatch as a perturbed first-order optimality system.

The dispatch problem minimizes quadratic generation cost subject to the
current-balance equalities (with generator P and Q as unknowns), generator
box limits, and bus voltage-magnitude bounds. Stationarity, the equalities,
and complementarity relaxed by a positive epsilon form one square nonlinear
system solved by Newton; epsilon is then driven down geometrically, each
stage warm-starting the next.

The contingency variant folds per-bus slack currents into the equalities
with a quadratic penalty in the objective, anchors dispatch to a base case,
and adds ramp limits around it.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
import scipy.sparse as sp

from .equations import (AngleStamp, BranchStamp, EquationSystem, Label,
                        LoadStamp, ResidualJacobian, ShuntStamp, SolverState,
                        StampAccumulator, StateLayout, branch_admittance,
                        injection_current, injection_hessian,
                        injection_partials, plan_islands, stamp_angle,
                        stamp_branch, stamp_load, stamp_shunt)
from .errors import InputError, NetworkValidationError
from .netmodel import (BusKind, Network, NetworkDelta, Status, apply_delta,
                       check_structural)
from .solver import NewtonOptions, SolveReport, SolveStatus, newton_solve

#: Ramp windows are floored here so the ramp inequalities keep a strict
#: interior even when a study pins dispatch to the base case.
RAMP_FLOOR = 1e-6


@dataclass(frozen=True)
class OpfProblem:
    """Dispatch optimization instance over one network."""

    net: Network
    epsilon_final: float = 1e-8
    sigma: float = 0.2
    eps0_factor: float = 0.1
    include_branch_limits: bool = False
    use_slacks: bool = False
    # A quadratic slack penalty leaves residual slack of roughly
    # marginal_cost / (2*weight); the weight must dwarf marginal cost so
    # feasible contingencies close their slacks to solver scale, while an
    # islanded load keeps its irreducible slack.
    slack_weight: float = 3e7
    base_dispatch: Mapping[int, float] | None = None
    ramp: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.epsilon_final <= 0:
            raise ValueError("epsilon_final must be positive")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.ramp is not None:
            if self.base_dispatch is None:
                raise ValueError("ramp limits need a base dispatch")
            for gid, r in self.ramp.items():
                if r < 0:
                    raise ValueError(f"ramp for generator {gid} must be >= 0")


@dataclass(frozen=True)
class ContingencyOpfProblem:
    """Post-outage dispatch with feasibility slacks and ramp anchoring."""

    base: OpfProblem
    delta: NetworkDelta
    base_dispatch: Mapping[int, float]
    ramp: Mapping[int, float]

    def problem(self) -> OpfProblem:
        net = apply_delta(self.base.net, self.delta)
        gens_in = [g.id for g in net.generators if g.status is Status.IN]
        ramp = {gid: max(float(self.ramp.get(gid, 0.0)), RAMP_FLOOR)
                for gid in gens_in if gid in self.base_dispatch}
        dispatch = {gid: float(self.base_dispatch[gid]) for gid in ramp}
        return replace(self.base, net=net, use_slacks=True,
                       base_dispatch=dispatch, ramp=ramp)


def build_contingency_opf(base: OpfProblem,
                          base_dispatch: Mapping[int, float] | SolverState,
                          delta: NetworkDelta,
                          ramp: Mapping[int, float] | float) -> ContingencyOpfProblem:
    """Assemble the post-outage dispatch problem around a solved base case."""
    if isinstance(base_dispatch, SolverState):
        dispatch = {key: float(v) for (kind, key), v in
                    zip(base_dispatch.layout.entries, base_dispatch.values)
                    if kind == "pg"}
    else:
        dispatch = {int(k): float(v) for k, v in base_dispatch.items()}
    if not dispatch:
        raise InputError("base dispatch carries no generator setpoints")
    if isinstance(ramp, (int, float)):
        ramp_map = {gid: float(ramp) for gid in dispatch}
    else:
        ramp_map = {int(k): float(v) for k, v in ramp.items()}
    prob = ContingencyOpfProblem(base, delta, dispatch, ramp_map)
    prob.problem()  # validates the delta and ramp signs eagerly
    return prob


@dataclass(frozen=True)
class _DispatchGen:
    gen_id: int
    row_r: int
    row_i: int
    col_r: int
    col_i: int
    pg_col: int
    qg_col: int
    cost_c2: float
    cost_c1: float


@dataclass(frozen=True)
class _FlowLimit:
    branch_id: int
    row: int              # inequality index within mu
    cols: tuple[int, int, int, int]
    hess_p: np.ndarray    # 4x4 Hessians of the quadratic P, Q flow forms
    hess_q: np.ndarray
    limit2: float


class KktSystem(EquationSystem):
    """Square optimality system [stationarity; equalities; complementarity].

    Unknowns are [V, Pg, Qg, (I_slack), lambda, mu]; rows align blockwise
    with them. ``epsilon`` is the complementarity perturbation; states stay
    strictly interior (h < 0, mu > 0) via ``step_guard``.
    """

    def __init__(self, problem: OpfProblem, *,
                 anchor_voltages: Mapping[int, complex] | None = None,
                 epsilon: float | None = None):
        self.problem = problem
        net = problem.net
        self.net = net
        self.diagnostics = check_structural(net)
        anchors = dict(anchor_voltages or {})
        self.epsilon = problem.epsilon_final if epsilon is None else float(epsilon)
        base = net.base_mva

        self.buses = sorted(net.buses, key=lambda b: b.id)
        nb = len(self.buses)
        bus_map = net.bus_map()
        self.gens = [g for g in sorted(net.generators, key=lambda g: g.id)
                     if g.status is Status.IN]
        ng = len(self.gens)

        labels: list[Label] = [("vr", b.id) for b in self.buses]
        labels += [("vi", b.id) for b in self.buses]
        labels += [("pg", g.id) for g in self.gens]
        labels += [("qg", g.id) for g in self.gens]
        if problem.use_slacks:
            labels += [("isr", b.id) for b in self.buses]
            labels += [("isi", b.id) for b in self.buses]

        pv_gen_buses = {g.bus for g in self.gens
                        if bus_map[g.bus].kind is BusKind.PV}
        plans = plan_islands(net, pv_gen_buses)
        angle_refs: list[tuple[int, float]] = []
        for p in sorted(plans, key=lambda p: p.ref_bus):
            if p.has_slack:
                b = bus_map[p.ref_bus]
                angle_refs.append((p.ref_bus, b.angle_set))
            else:
                v = anchors.get(p.ref_bus)
                angle_refs.append((p.ref_bus,
                                   cmath.phase(v) if v is not None else 0.0))

        eq_labels: list[Label] = [("kcl_r", b.id) for b in self.buses]
        eq_labels += [("kcl_i", b.id) for b in self.buses]
        eq_labels += [("angle", bid) for bid, _ in angle_refs]

        ineq_labels: list[Label] = []
        for g in self.gens:
            ineq_labels += [("pg_lo", g.id), ("pg_hi", g.id),
                            ("qg_lo", g.id), ("qg_hi", g.id)]
        for b in self.buses:
            ineq_labels += [("v_lo", b.id), ("v_hi", b.id)]
        if problem.ramp is not None:
            for g in self.gens:
                if g.id in problem.ramp:
                    ineq_labels += [("ramp_lo", g.id), ("ramp_hi", g.id)]
        limited = []
        if problem.include_branch_limits:
            limited = [br for br in sorted(net.branches, key=lambda b: b.id)
                       if br.status is Status.IN and br.flow_limit is not None]
            for br in limited:
                ineq_labels += [("flow_f", br.id), ("flow_t", br.id)]

        labels += [("lam", lbl) for lbl in eq_labels]
        labels += [("mu", lbl) for lbl in ineq_labels]
        self.layout = StateLayout(labels)
        self.eq_labels = eq_labels
        self.ineq_labels = ineq_labels

        rows: list[Label] = [("gvr", b.id) for b in self.buses]
        rows += [("gvi", b.id) for b in self.buses]
        rows += [("gpg", g.id) for g in self.gens]
        rows += [("gqg", g.id) for g in self.gens]
        if problem.use_slacks:
            rows += [("gisr", b.id) for b in self.buses]
            rows += [("gisi", b.id) for b in self.buses]
        rows += [("eq", lbl) for lbl in eq_labels]
        rows += [("compl", lbl) for lbl in ineq_labels]
        self.rows = StateLayout(rows)

        self.nb, self.ng = nb, ng
        self.n_eq = len(eq_labels)
        self.n_ineq = len(ineq_labels)
        self.n_x = 2 * nb + 2 * ng + (2 * nb if problem.use_slacks else 0)
        self.lam_off = self.n_x
        self.mu_off = self.n_x + self.n_eq

        # Stamp records against (eq rows x state cols). Labels double as
        # positions: equality k sits at lam_off + k in the unknowns and at
        # row n_x + k in the residual.
        def vr(b):
            return self.layout.index_of("vr", b)

        def vi(b):
            return self.layout.index_of("vi", b)

        eq_pos = {lbl: i for i, lbl in enumerate(eq_labels)}
        self._eq_pos = eq_pos

        self.branch_stamps = []
        for br in sorted(net.branches, key=lambda b: b.id):
            if br.status is not Status.IN:
                continue
            yff, yft, ytf, ytt = branch_admittance(br)
            self.branch_stamps.append(BranchStamp(
                br.id,
                eq_pos[("kcl_r", br.from_bus)], eq_pos[("kcl_i", br.from_bus)],
                eq_pos[("kcl_r", br.to_bus)], eq_pos[("kcl_i", br.to_bus)],
                vr(br.from_bus), vi(br.from_bus), vr(br.to_bus), vi(br.to_bus),
                yff.real, yff.imag, yft.real, yft.imag,
                ytf.real, ytf.imag, ytt.real, ytt.imag))

        self.shunt_stamps = []
        for b in self.buses:
            if b.shunt_g != 0.0 or b.shunt_b != 0.0:
                self.shunt_stamps.append(ShuntStamp(
                    b.id, eq_pos[("kcl_r", b.id)], eq_pos[("kcl_i", b.id)],
                    vr(b.id), vi(b.id), b.shunt_g, b.shunt_b))

        self.load_stamps = []
        for l in sorted(net.loads, key=lambda l: l.bus):
            p, q = l.p * l.scale, l.q * l.scale
            if p == 0.0 and q == 0.0:
                continue
            self.load_stamps.append(LoadStamp(
                l.bus, eq_pos[("kcl_r", l.bus)], eq_pos[("kcl_i", l.bus)],
                vr(l.bus), vi(l.bus), p, q))

        self.gen_stamps = []
        for g in self.gens:
            self.gen_stamps.append(_DispatchGen(
                g.id, eq_pos[("kcl_r", g.bus)], eq_pos[("kcl_i", g.bus)],
                vr(g.bus), vi(g.bus),
                self.layout.index_of("pg", g.id),
                self.layout.index_of("qg", g.id),
                # objective is kept in per-unit dollars (cost / base MVA)
                g.cost.c2 * base, g.cost.c1))

        self.angle_stamps = []
        for bid, theta in angle_refs:
            self.angle_stamps.append(AngleStamp(
                bid, eq_pos[("angle", bid)], vr(bid), vi(bid),
                math.sin(theta), math.cos(theta)))

        self.flow_stamps: list[_FlowLimit] = []
        ineq_pos = {lbl: i for i, lbl in enumerate(ineq_labels)}
        self._ineq_pos = ineq_pos
        for br in limited:
            yff, yft, ytf, ytt = branch_admittance(br)
            cols = (vr(br.from_bus), vi(br.from_bus), vr(br.to_bus), vi(br.to_bus))
            lim2 = br.flow_limit ** 2
            for side, ya, yb, pick in (("flow_f", yff, yft, 0), ("flow_t", ytf, ytt, 2)):
                mr = np.zeros(4)
                mi = np.zeros(4)
                mr[0], mr[1] = ya.real, -ya.imag
                mr[2], mr[3] = yb.real, -yb.imag
                mi[0], mi[1] = ya.imag, ya.real
                mi[2], mi[3] = yb.imag, yb.real
                er = np.zeros(4)
                ei = np.zeros(4)
                er[pick] = 1.0
                ei[pick + 1] = 1.0
                bp = np.outer(er, mr) + np.outer(ei, mi)
                bq = np.outer(ei, mr) - np.outer(er, mi)
                self.flow_stamps.append(_FlowLimit(
                    br.id, ineq_pos[(side, br.id)], cols,
                    bp + bp.T, bq + bq.T, lim2))

        gmap = net.gen_map()
        self._box_rows = []
        for g in self.gens:
            self._box_rows.append((ineq_pos[("pg_lo", g.id)],
                                   self.layout.index_of("pg", g.id),
                                   -1.0, g.p_min))
            self._box_rows.append((ineq_pos[("pg_hi", g.id)],
                                   self.layout.index_of("pg", g.id),
                                   1.0, -g.p_max))
            self._box_rows.append((ineq_pos[("qg_lo", g.id)],
                                   self.layout.index_of("qg", g.id),
                                   -1.0, g.q_min))
            self._box_rows.append((ineq_pos[("qg_hi", g.id)],
                                   self.layout.index_of("qg", g.id),
                                   1.0, -g.q_max))
        if problem.ramp is not None:
            for g in self.gens:
                if g.id not in problem.ramp:
                    continue
                p0 = float(problem.base_dispatch[g.id])
                r = max(float(problem.ramp[g.id]), RAMP_FLOOR)
                self._box_rows.append((ineq_pos[("ramp_lo", g.id)],
                                       self.layout.index_of("pg", g.id),
                                       -1.0, p0 - r))
                self._box_rows.append((ineq_pos[("ramp_hi", g.id)],
                                       self.layout.index_of("pg", g.id),
                                       1.0, -(p0 + r)))
        self._vbound_rows = []
        for b in self.buses:
            self._vbound_rows.append((ineq_pos[("v_lo", b.id)], vr(b.id), vi(b.id),
                                      -1.0, b.v_min ** 2))
            self._vbound_rows.append((ineq_pos[("v_hi", b.id)], vr(b.id), vi(b.id),
                                      1.0, -b.v_max ** 2))

        # The slack-stationarity rows carry the large penalty weight; scale
        # them back to unit size so the residual norm measures per-unit
        # current, not weight-amplified roundoff. Row scaling leaves the
        # Newton iterates unchanged in exact arithmetic.
        self._row_scale: np.ndarray | None = None
        if problem.use_slacks:
            scale = np.ones(len(self.layout))
            for kind in ("isr", "isi"):
                seg = self.layout.segment(kind)
                scale[seg.start:seg.stop] = 1.0 / (2.0 * problem.slack_weight)
            self._row_scale = scale

    # -- pieces ----------------------------------------------------------------

    def with_epsilon(self, epsilon: float) -> "KktSystem":
        import copy

        clone = copy.copy(self)
        clone.epsilon = float(epsilon)
        return clone

    def _equalities(self, x: np.ndarray) -> StampAccumulator:
        acc = StampAccumulator(self.n_eq, self.n_x)
        for st in self.branch_stamps:
            stamp_branch(st, x, acc)
        for st in self.shunt_stamps:
            stamp_shunt(st, x, acc)
        for st in self.load_stamps:
            stamp_load(st, x, acc)
        for st in self.gen_stamps:
            vr, vi = x[st.col_r], x[st.col_i]
            pg, qg = x[st.pg_col], x[st.qg_col]
            ir, ii = injection_current(pg, qg, vr, vi)
            (dr_vr, dr_vi, dr_p, dr_q), (di_vr, di_vi, di_p, di_q) = \
                injection_partials(pg, qg, vr, vi)
            acc.add_f(st.row_r, -ir)
            acc.add_f(st.row_i, -ii)
            for row, d4 in ((st.row_r, (dr_vr, dr_vi, dr_p, dr_q)),
                            (st.row_i, (di_vr, di_vi, di_p, di_q))):
                acc.add_j(row, st.col_r, -d4[0])
                acc.add_j(row, st.col_i, -d4[1])
                acc.add_j(row, st.pg_col, -d4[2])
                acc.add_j(row, st.qg_col, -d4[3])
        for st in self.angle_stamps:
            stamp_angle(st, x, acc)
        if self.problem.use_slacks:
            isr = self.layout.segment("isr").start
            isi = self.layout.segment("isi").start
            for i, b in enumerate(self.buses):
                acc.add_f(self._eq_pos[("kcl_r", b.id)], x[isr + i])
                acc.add_f(self._eq_pos[("kcl_i", b.id)], x[isi + i])
                acc.add_j(self._eq_pos[("kcl_r", b.id)], isr + i, 1.0)
                acc.add_j(self._eq_pos[("kcl_i", b.id)], isi + i, 1.0)
        return acc

    def _inequalities(self, x: np.ndarray):
        """Values, gradient triplets, and per-row curvature of h(x) <= 0."""
        h = np.zeros(self.n_ineq)
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        for row, col, sign, const in self._box_rows:
            h[row] = sign * x[col] + const
            rows.append(row)
            cols.append(col)
            vals.append(sign)
        for row, cr, ci, sign, const in self._vbound_rows:
            v2 = x[cr] * x[cr] + x[ci] * x[ci]
            h[row] = sign * v2 + const
            rows.extend((row, row))
            cols.extend((cr, ci))
            vals.extend((sign * 2.0 * x[cr], sign * 2.0 * x[ci]))
        for st in self.flow_stamps:
            v = x[np.asarray(st.cols)]
            pf = 0.5 * v @ st.hess_p @ v
            qf = 0.5 * v @ st.hess_q @ v
            gp = st.hess_p @ v
            gq = st.hess_q @ v
            h[st.row] = pf * pf + qf * qf - st.limit2
            grad = 2.0 * pf * gp + 2.0 * qf * gq
            for c, gv in zip(st.cols, grad):
                rows.append(st.row)
                cols.append(c)
                vals.append(float(gv))
        return h, rows, cols, vals

    def evaluate_inequalities(self, values: np.ndarray) -> np.ndarray:
        return self._inequalities(values)[0]

    def _cost_gradient_hessian(self, x: np.ndarray):
        """Gradient entries and diagonal Hessian of the scalar objective."""
        grad_idx: list[int] = []
        grad_val: list[float] = []
        hess_idx: list[int] = []
        hess_val: list[float] = []
        for st in self.gen_stamps:
            pg = x[st.pg_col]
            grad_idx.append(st.pg_col)
            grad_val.append(2.0 * st.cost_c2 * pg + st.cost_c1)
            if st.cost_c2 != 0.0:
                hess_idx.append(st.pg_col)
                hess_val.append(2.0 * st.cost_c2)
        if self.problem.use_slacks:
            w = self.problem.slack_weight
            seg = self.layout.segment("isr")
            seg_i = self.layout.segment("isi")
            for col in list(range(seg.start, seg.stop)) + \
                    list(range(seg_i.start, seg_i.stop)):
                grad_idx.append(col)
                grad_val.append(2.0 * w * x[col])
                hess_idx.append(col)
                hess_val.append(2.0 * w)
        return grad_idx, grad_val, hess_idx, hess_val

    def evaluate(self, state: SolverState) -> ResidualJacobian:
        self.check_state(state)
        v = state.values
        x = v[:self.n_x]
        lam = v[self.lam_off:self.lam_off + self.n_eq]
        mu = v[self.mu_off:]

        eq = self._equalities(x)
        jrows = np.asarray(eq.rows, dtype=int)
        jcols = np.asarray(eq.cols, dtype=int)
        jvals = np.asarray(eq.vals, dtype=float)
        eq_jac = sp.coo_matrix((jvals, (jrows, jcols)),
                               shape=(self.n_eq, self.n_x)).tocsr()

        h, hrows_l, hcols_l, hvals_l = self._inequalities(x)
        hrows = np.asarray(hrows_l, dtype=int)
        hcols = np.asarray(hcols_l, dtype=int)
        hvals = np.asarray(hvals_l, dtype=float)
        h_jac = sp.coo_matrix((hvals, (hrows, hcols)),
                              shape=(self.n_ineq, self.n_x)).tocsr()

        gidx, gval, cidx, cval = self._cost_gradient_hessian(x)

        n = len(self.layout)
        residual = np.zeros(n)
        residual[:self.n_x] = eq_jac.T @ lam + h_jac.T @ mu
        residual[np.asarray(gidx, dtype=int)] += np.asarray(gval)
        residual[self.lam_off:self.mu_off] = eq.residual
        residual[self.mu_off:] = mu * h + self.epsilon

        rows_out: list[np.ndarray] = []
        cols_out: list[np.ndarray] = []
        vals_out: list[np.ndarray] = []

        def put(r, c, val):
            rows_out.append(np.asarray(r, dtype=int))
            cols_out.append(np.asarray(c, dtype=int))
            vals_out.append(np.asarray(val, dtype=float))

        # stationarity rows
        put(jcols, self.lam_off + jrows, jvals)          # (gx, lam)
        put(hcols, self.mu_off + hrows, hvals)           # (gx, mu)
        put(cidx, cidx, cval)                            # objective curvature
        hr, hc, hv = self._lagrangian_curvature(x, lam, mu)
        put(hr, hc, hv)
        # equality rows
        put(self.lam_off + jrows, jcols, jvals)
        # complementarity rows
        put(self.mu_off + hrows, hcols, mu[hrows] * hvals)
        put(self.mu_off + np.arange(self.n_ineq),
            self.mu_off + np.arange(self.n_ineq), h)

        all_rows = np.concatenate(rows_out)
        all_cols = np.concatenate(cols_out)
        all_vals = np.concatenate(vals_out)
        scale = self._row_scale
        if scale is not None:
            residual *= scale
            all_vals = all_vals * scale[all_rows]
        jac = sp.coo_matrix((all_vals, (all_rows, all_cols)),
                            shape=(n, n)).tocsr()
        return ResidualJacobian(residual, jac)

    def _lagrangian_curvature(self, x, lam, mu):
        """Triplets of sum lam_k d2g_k + sum mu_m d2h_m over the x block."""
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []

        def block2(cr, ci, hblk, w):
            if w == 0.0:
                return
            rr, ri, ii = hblk
            rows.extend((cr, cr, ci, ci))
            cols.extend((cr, ci, cr, ci))
            vals.extend((w * rr, w * ri, w * ri, w * ii))

        for st in self.load_stamps:
            lr, li = lam[st.row_r], lam[st.row_i]
            if lr == 0.0 and li == 0.0:
                continue
            hrb, hib, _ = injection_hessian(st.p, st.q, x[st.col_r], x[st.col_i])
            block2(st.col_r, st.col_i, hrb, lr)
            block2(st.col_r, st.col_i, hib, li)

        for st in self.gen_stamps:
            lr, li = lam[st.row_r], lam[st.row_i]
            if lr == 0.0 and li == 0.0:
                continue
            pg, qg = x[st.pg_col], x[st.qg_col]
            hrb, hib, dw = injection_hessian(pg, qg, x[st.col_r], x[st.col_i])
            block2(st.col_r, st.col_i, hrb, -lr)
            block2(st.col_r, st.col_i, hib, -li)
            dwr_r, dwr_i, dwi_r, dwi_i = dw
            # d2I/dV dP -> gradient of w_r ; d2I/dV dQ -> gradient of w_i
            for cv, ar, ai in ((st.col_r, dwr_r, dwi_r), (st.col_i, dwr_i, dwi_i)):
                wp = -(lr * ar + li * ai)              # Ir: p*wr + q*wi
                rows.extend((cv, st.pg_col))
                cols.extend((st.pg_col, cv))
                vals.extend((wp, wp))
                wq = -(lr * ai - li * ar)              # Ii: p*wi - q*wr
                rows.extend((cv, st.qg_col))
                cols.extend((st.qg_col, cv))
                vals.extend((wq, wq))

        for row, cr, ci, sign, _ in self._vbound_rows:
            w = mu[row]
            if w != 0.0:
                block2(cr, ci, (2.0 * sign, 0.0, 2.0 * sign), w)

        for st in self.flow_stamps:
            w = mu[st.row]
            if w == 0.0:
                continue
            vvec = x[np.asarray(st.cols)]
            pf = 0.5 * vvec @ st.hess_p @ vvec
            qf = 0.5 * vvec @ st.hess_q @ vvec
            gp = st.hess_p @ vvec
            gq = st.hess_q @ vvec
            hess = 2.0 * (np.outer(gp, gp) + pf * st.hess_p
                          + np.outer(gq, gq) + qf * st.hess_q)
            for a in range(4):
                for b in range(4):
                    rows.append(st.cols[a])
                    cols.append(st.cols[b])
                    vals.append(w * hess[a, b])
        return rows, cols, vals

    # -- starts, guards, reporting ----------------------------------------------

    def step_guard(self, state: SolverState, step: np.ndarray) -> float:
        """Keep iterates strictly interior: h < 0 and mu > 0.

        Multipliers get their own fraction-to-boundary scaling (written
        into the step in place, interior-point style) so a cornered dual
        does not stall primal progress; the returned alpha then backtracks
        the whole step until the inequalities stay strictly negative.
        """
        mu = state.values[self.mu_off:]
        dmu = step[self.mu_off:]
        neg = dmu < 0.0
        if np.any(neg):
            a_dual = min(1.0, float(0.9995 * np.min(mu[neg] / -dmu[neg])))
            if a_dual < 1.0:
                step[self.mu_off:] *= a_dual
        alpha = 1.0
        for _ in range(40):
            trial = state.values[:self.n_x] + alpha * step[:self.n_x]
            if np.max(self.evaluate_inequalities(trial)) < 0.0:
                return alpha
            alpha *= 0.5
        return alpha

    def interior_start(self) -> SolverState:
        """Strictly interior start with dispatch tracking total demand."""
        vals = np.zeros(len(self.layout))
        for b in self.buses:
            vm = min(max(1.0, b.v_min + 0.02), b.v_max - 0.02)
            vals[self.layout.index_of("vr", b.id)] = vm
        demand = sum(l.p * l.scale for l in self.net.loads) * 1.02
        headroom = sum(g.p_max - g.p_min for g in self.gens)
        floor_total = sum(g.p_min for g in self.gens)
        share = 0.5
        if headroom > 0.0:
            share = min(max((demand - floor_total) / headroom, 0.05), 0.95)
        for g in self.gens:
            vals[self.layout.index_of("pg", g.id)] = \
                g.p_min + share * (g.p_max - g.p_min)
            vals[self.layout.index_of("qg", g.id)] = g.q_min + 0.5 * (g.q_max - g.q_min)
        if self.problem.ramp is not None:
            for g in self.gens:
                if g.id in self.problem.ramp:
                    vals[self.layout.index_of("pg", g.id)] = \
                        float(self.problem.base_dispatch[g.id])
        vals[self.mu_off:] = 1.0
        return SolverState(self.layout, vals)

    def flat_start(self) -> SolverState:
        return self.interior_start()

    def repair_start(self, state: SolverState, fresh: np.ndarray) -> None:
        """Give fresh multiplier entries strictly feasible values in place."""
        h = self.evaluate_inequalities(state.values)
        mu = state.values[self.mu_off:]
        fresh_mu = fresh[self.mu_off:]
        for i in range(self.n_ineq):
            if fresh_mu[i] or mu[i] <= 0.0:
                mu[i] = min(max(self.epsilon / max(-h[i], 1e-12), 1e-10), 1.0) \
                    if h[i] < 0.0 else 1.0

    def check_interior(self, state: SolverState) -> None:
        h = self.evaluate_inequalities(state.values)
        if h.size and np.max(h) >= 0.0:
            bad = self.ineq_labels[int(np.argmax(h))]
            raise InputError(f"start is not strictly interior: {bad} has "
                             f"h = {np.max(h):.3e} >= 0")
        mu = state.values[self.mu_off:]
        if mu.size and np.min(mu) <= 0.0:
            bad = self.ineq_labels[int(np.argmin(mu))]
            raise InputError(f"start multiplier for {bad} is not positive")

    def objective_value(self, state: SolverState) -> float:
        """Internal objective: dollars per base MVA, plus slack penalty."""
        x = state.values[:self.n_x]
        total = 0.0
        for st in self.gen_stamps:
            pg = x[st.pg_col]
            total += st.cost_c2 * pg * pg + st.cost_c1 * pg
        for g in self.gens:
            total += g.cost.c0 / self.net.base_mva
        if self.problem.use_slacks:
            w = self.problem.slack_weight
            for kind in ("isr", "isi"):
                seg = self.layout.segment(kind)
                total += w * float(np.sum(x[seg.start:seg.stop] ** 2))
        return total

    def objective_dollars(self, state: SolverState) -> float:
        """Generation cost in currency per hour (slack penalty excluded)."""
        x = state.values[:self.n_x]
        base = self.net.base_mva
        total = 0.0
        for st, g in zip(self.gen_stamps, self.gens):
            pg_mw = x[st.pg_col] * base
            total += g.cost.c2 * pg_mw * pg_mw + g.cost.c1 * pg_mw + g.cost.c0
        return total

    def slack_norm(self, state: SolverState) -> float:
        if not self.problem.use_slacks:
            return 0.0
        seg_r = self.layout.segment("isr")
        seg_i = self.layout.segment("isi")
        sr = state.values[seg_r.start:seg_r.stop]
        si = state.values[seg_i.start:seg_i.stop]
        return float(np.max(np.hypot(sr, si))) if sr.size else 0.0

    def multiplier_extrema(self, state: SolverState) -> dict:
        lam = state.values[self.lam_off:self.mu_off]
        mu = state.values[self.mu_off:]
        return {
            "lambda_min": float(lam.min()) if lam.size else 0.0,
            "lambda_max": float(lam.max()) if lam.size else 0.0,
            "mu_min": float(mu.min()) if mu.size else 0.0,
            "mu_max": float(mu.max()) if mu.size else 0.0,
        }


def build_opf_system(problem: OpfProblem | ContingencyOpfProblem, *,
                     anchor_voltages: Mapping[int, complex] | None = None,
                     epsilon: float | None = None) -> KktSystem:
    if isinstance(problem, ContingencyOpfProblem):
        problem = problem.problem()
    return KktSystem(problem, anchor_voltages=anchor_voltages, epsilon=epsilon)


def crash_start(system: KktSystem) -> SolverState | None:
    """Interior start seeded from a plain power-flow solve of the network.

    Voltages come from the solved profile (nudged inside the bounds) and
    dispatch from the setpoints (nudged inside the boxes); multipliers stay
    at one. Returns None when the network has no usable power flow.
    """
    from .equations import build_pf_system
    from .errors import GridstepError

    try:
        pf = build_pf_system(system.net)
        st, rep = newton_solve(pf, pf.flat_start(), NewtonOptions(max_iter=40))
    except GridstepError:
        return None
    if not rep.converged:
        return None

    start = system.interior_start()
    for b in system.buses:
        v = st.bus_voltage(b.id)
        vm = abs(v)
        lo, hi = b.v_min + 1e-3, b.v_max - 1e-3
        if vm < lo or vm > hi:
            v *= min(max(vm, lo), hi) / vm
        start.values[system.layout.index_of("vr", b.id)] = v.real
        start.values[system.layout.index_of("vi", b.id)] = v.imag
    ramp = system.problem.ramp or {}
    for g in system.gens:
        if g.id in ramp:
            continue  # ramp center from interior_start is already right
        span = g.p_max - g.p_min
        margin = min(1e-3, 0.05 * span)
        pg = min(max(g.p_set, g.p_min + margin), g.p_max - margin)
        start.values[system.layout.index_of("pg", g.id)] = pg
        if st.layout.has("qg", g.id):
            qspan = g.q_max - g.q_min
            qmargin = min(1e-3, 0.05 * qspan)
            qg = min(max(st.get("qg", g.id), g.q_min + qmargin), g.q_max - qmargin)
            start.values[system.layout.index_of("qg", g.id)] = qg
    try:
        system.check_interior(start)
    except InputError:
        return None
    return start


def solve_opf(problem: OpfProblem | ContingencyOpfProblem,
              x0: SolverState | None = None,
              opts: NewtonOptions | None = None,
              *, anchor_voltages: Mapping[int, complex] | None = None
              ) -> tuple[SolverState, SolveReport]:
    """Drive the optimality system to epsilon_final by geometric reduction.

    Each stage solves the system at fixed epsilon by Newton, warm-starting
    the next. The returned report aggregates iterations over all stages;
    a failed stage ends the continuation with the partial state preserved.
    Without an explicit start the solve seeds itself from a power-flow
    profile when one exists.

    By default steps run unclamped with a high divergence threshold: the
    interior guard already bounds them, per-entry voltage clamping would
    distort primal-dual directions, and slack-carrying problems visit
    large multipliers legitimately.
    """
    opts = opts or NewtonOptions(limiting=None, diverge_norm=1e9)
    if isinstance(problem, ContingencyOpfProblem):
        problem = problem.problem()
    system = build_opf_system(problem, anchor_voltages=anchor_voltages)
    if x0 is not None:
        state = x0.copy()
    else:
        state = crash_start(system) or system.interior_start()
    system.check_interior(state)

    h0 = system.evaluate_inequalities(state.values)
    mu0 = state.values[system.mu_off:]
    if h0.size:
        eps = problem.eps0_factor * float(np.mean(mu0 * -h0))
        eps = max(eps, problem.epsilon_final)
    else:
        eps = problem.epsilon_final

    history: list[float] = []
    total_iters = 0
    converged = False
    status = SolveStatus.MAX_ITER
    cond = "ok"
    message = ""
    wall = 0.0
    while True:
        final_stage = eps <= problem.epsilon_final * (1.0 + 1e-12)
        stage_sys = system.with_epsilon(eps)
        stage_opts = opts if final_stage else replace(
            opts, tol_residual=max(opts.tol_residual, min(1e-3, 1e-2 * eps)))
        state, rep = newton_solve(stage_sys, state, stage_opts)
        total_iters += rep.iterations
        history.extend(rep.residual_history)
        wall += rep.wall_time
        cond = rep.condition_flag if rep.condition_flag != "ok" else cond
        if not rep.converged:
            status = rep.status
            message = f"stage at epsilon={eps:.3e} failed: {rep.message}"
            break
        if final_stage:
            converged = True
            status = SolveStatus.CONVERGED
            break
        eps = max(eps * problem.sigma, problem.epsilon_final)

    report = SolveReport(converged=converged, iterations=total_iters,
                         residual_history=history, status=status,
                         condition_flag=cond, wall_time=wall, message=message)
    return state, report
