"""Current-injection equation assembly for the power-flow family.

State and residual both live on labeled axes (``StateLayout``): voltages in
rectangular coordinates (one ``vr``/``vi`` pair per bus) plus one reactive
unknown per voltage-regulating generator. Each device contributes ("stamps")
its current and its partial derivatives into a shared accumulator, so the
same device math backs plain power flow, the slack-injection feasibility
system, and the optimality systems built on top of it.

Sign convention: a residual row is the net current *demanded* at the bus
(loads, shunts, branch exports) minus the current supplied by generators, so
feasible operation drives every row to zero.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import LayoutError, NetworkValidationError
from .netmodel import (Branch, Bus, BusKind, Generator, Load, Network, Status,
                       check_structural, islands)

Label = tuple[str, Any]


class StateLayout:
    """Ordered, labeled axis for state vectors and residual rows.

    Entries are ``(kind, key)`` pairs; lookup is a bijection between labels
    and positions. Unknown vectors keep each kind in one contiguous segment
    (vr, vi, qg, ...); row axes may interleave kinds (a pinned bus sits
    between current-balance rows), so ``segment`` is only defined for
    contiguous kinds while ``indices_of_kind`` always works.
    """

    __slots__ = ("entries", "_index", "_by_kind", "_segments")

    def __init__(self, entries: Sequence[Label]):
        self.entries: tuple[Label, ...] = tuple(entries)
        self._index: dict[Label, int] = {e: i for i, e in enumerate(self.entries)}
        if len(self._index) != len(self.entries):
            raise LayoutError("duplicate labels in layout")
        self._by_kind: dict[str, list[int]] = {}
        for i, (kind, _) in enumerate(self.entries):
            self._by_kind.setdefault(kind, []).append(i)
        self._segments: dict[str, slice] = {}
        for kind, idx in self._by_kind.items():
            if idx[-1] - idx[0] + 1 == len(idx):
                self._segments[kind] = slice(idx[0], idx[-1] + 1)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, StateLayout) and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def index_of(self, kind: str, key: Any) -> int:
        try:
            return self._index[(kind, key)]
        except KeyError:
            raise LayoutError(f"no entry ({kind!r}, {key!r}) in layout") from None

    def has(self, kind: str, key: Any) -> bool:
        return (kind, key) in self._index

    def segment(self, kind: str) -> slice:
        try:
            return self._segments[kind]
        except KeyError:
            if kind in self._by_kind:
                raise LayoutError(f"kind {kind!r} is not contiguous") from None
            return slice(0, 0)

    def indices_of_kind(self, kind: str) -> np.ndarray:
        return np.asarray(self._by_kind.get(kind, ()), dtype=int)

    def kinds(self) -> tuple[str, ...]:
        return tuple(self._by_kind)


@dataclass
class SolverState:
    """Flat real unknown vector tagged with its layout."""

    layout: StateLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.layout),):
            raise LayoutError(
                f"state length {self.values.shape} does not match layout "
                f"length {len(self.layout)}")

    def copy(self) -> "SolverState":
        return SolverState(self.layout, self.values.copy())

    def get(self, kind: str, key: Any) -> float:
        return float(self.values[self.layout.index_of(kind, key)])

    def to_pairs(self) -> list[tuple[str, Any, float]]:
        return [(k, key, float(v))
                for (k, key), v in zip(self.layout.entries, self.values)]

    def bus_voltage(self, bus_id: int) -> complex:
        return complex(self.get("vr", bus_id), self.get("vi", bus_id))


@dataclass
class ResidualJacobian:
    residual: np.ndarray
    jacobian: sp.csr_matrix


class EquationSystem:
    """Contract shared by all three problem families.

    ``evaluate`` is pure: the same network and state always produce the same
    residual and sparse Jacobian (triplet order is fixed at build time, so
    repeated evaluations share one sparsity structure).
    """

    layout: StateLayout   # unknown axis
    rows: StateLayout     # residual axis (same length as layout)

    def evaluate(self, state: SolverState) -> ResidualJacobian:
        raise NotImplementedError

    def flat_start(self) -> SolverState:
        raise NotImplementedError

    def step_guard(self, state: SolverState, step: np.ndarray) -> float:
        """Largest fraction of a Newton step this system will accept."""
        return 1.0

    def check_state(self, state: SolverState) -> None:
        if state.layout != self.layout:
            raise LayoutError("state layout does not match this system")


class StampAccumulator:
    """Collects residual entries and Jacobian triplets during one evaluation.

    Rows listed in ``pinned`` are definitional (voltage pins); device
    contributions aimed at them are dropped, and only the pin stamps may
    write there.
    """

    def __init__(self, n_rows: int, n_cols: int, pinned: frozenset[int] = frozenset()):
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.pinned = pinned
        self.residual = np.zeros(n_rows)
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []

    def add_f(self, row: int, val: float) -> None:
        if row not in self.pinned:
            self.residual[row] += val

    def add_j(self, row: int, col: int, val: float) -> None:
        if row not in self.pinned:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(val)

    def set_pin_f(self, row: int, val: float) -> None:
        self.residual[row] = val

    def add_pin_j(self, row: int, col: int, val: float) -> None:
        self.rows.append(row)
        self.cols.append(col)
        self.vals.append(val)

    def matrix(self) -> sp.csr_matrix:
        return sp.coo_matrix(
            (self.vals, (self.rows, self.cols)),
            shape=(self.n_rows, self.n_cols)).tocsr()


# ---------------------------------------------------------------------------
# Device math
# ---------------------------------------------------------------------------

def branch_admittance(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Two-port admittance blocks (Yff, Yft, Ytf, Ytt) of the pi model.

    ``I_from = Yff*Vf + Yft*Vt`` and ``I_to = Ytf*Vf + Ytt*Vt`` with both
    currents oriented from bus into branch. Off-nominal turns ratio and
    phase shift sit on the from side.
    """
    ys = 1.0 / complex(br.series_r, br.series_x)
    ysh = 0.5j * br.charging_b
    tap = br.tap_ratio * cmath.exp(1j * br.phase_shift)
    yff = (ys + ysh) / (br.tap_ratio * br.tap_ratio)
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    ytt = ys + ysh
    return yff, yft, ytf, ytt


def injection_current(p: float, q: float, vr: float, vi: float) -> tuple[float, float]:
    """Rectangular components of conj((p + jq) / V)."""
    v2 = vr * vr + vi * vi
    return (p * vr + q * vi) / v2, (p * vi - q * vr) / v2


def _w_derivs(vr: float, vi: float):
    """Derivatives of w = V / |V|^2, the voltage kernel of conj(S/V).

    Returns (wr, wi, first partials, second partials); the current of a
    fixed-power device is Ir = p*wr + q*wi, Ii = p*wi - q*wr.
    """
    v2 = vr * vr + vi * vi
    v4 = v2 * v2
    v6 = v4 * v2
    wr = vr / v2
    wi = vi / v2
    dwr_r = (vi * vi - vr * vr) / v4
    dwr_i = -2.0 * vr * vi / v4
    # Cauchy-Riemann-like structure: dwi_r == dwr_i, dwi_i == -dwr_r.
    d2wr_rr = 2.0 * vr * (vr * vr - 3.0 * vi * vi) / v6
    d2wr_ri = 2.0 * vi * (3.0 * vr * vr - vi * vi) / v6
    return wr, wi, dwr_r, dwr_i, d2wr_rr, d2wr_ri


def injection_partials(p: float, q: float, vr: float, vi: float):
    """First partials of the conj(S/V) current wrt (vr, vi, p, q).

    Returns ((dIr_dvr, dIr_dvi, dIr_dp, dIr_dq),
             (dIi_dvr, dIi_dvi, dIi_dp, dIi_dq)).
    """
    wr, wi, dwr_r, dwr_i, _, _ = _w_derivs(vr, vi)
    dwi_r, dwi_i = dwr_i, -dwr_r
    return ((p * dwr_r + q * dwi_r, p * dwr_i + q * dwi_i, wr, wi),
            (p * dwi_r - q * dwr_r, p * dwi_i - q * dwr_i, wi, -wr))


def injection_hessian(p: float, q: float, vr: float, vi: float):
    """Voltage Hessians of the conj(S/V) current components.

    Returns (Hr, Hi) as symmetric 2x2 tuples ((rr, ri), (ri, ii)), plus the
    voltage gradients of w needed for the p/q cross terms.
    """
    wr, wi, dwr_r, dwr_i, d2wr_rr, d2wr_ri = _w_derivs(vr, vi)
    d2wr_ii = -d2wr_rr
    d2wi_rr = d2wr_ri
    d2wi_ri = -d2wr_rr
    d2wi_ii = -d2wr_ri
    hr = (p * d2wr_rr + q * d2wi_rr, p * d2wr_ri + q * d2wi_ri,
          p * d2wr_ii + q * d2wi_ii)
    hi = (p * d2wi_rr - q * d2wr_rr, p * d2wi_ri - q * d2wr_ri,
          p * d2wi_ii - q * d2wr_ii)
    dw = (dwr_r, dwr_i, dwr_i, -dwr_r)  # (dwr_r, dwr_i, dwi_r, dwi_i)
    return hr, hi, dw


# ---------------------------------------------------------------------------
# Stamp records (built once per network) and stamp operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchStamp:
    branch_id: int
    fr_r: int
    fr_i: int
    tr_r: int
    tr_i: int
    fc_r: int
    fc_i: int
    tc_r: int
    tc_i: int
    gff: float
    bff: float
    gft: float
    bft: float
    gtf: float
    btf: float
    gtt: float
    btt: float


@dataclass(frozen=True)
class LoadStamp:
    bus_id: int
    row_r: int
    row_i: int
    col_r: int
    col_i: int
    p: float
    q: float


@dataclass(frozen=True)
class ShuntStamp:
    bus_id: int
    row_r: int
    row_i: int
    col_r: int
    col_i: int
    g: float
    b: float


@dataclass(frozen=True)
class GenStamp:
    """Voltage-regulating generator: fixed P, reactive output as unknown."""

    gen_id: int
    row_r: int
    row_i: int
    col_r: int
    col_i: int
    qg_col: int
    p_set: float
    own_row: int            # magnitude row for the first unit, Q-share row after
    own_kind: str           # "mag" | "qsplit" | "angle"
    v_set2: float = 0.0
    ref_qg_col: int = -1    # partner column for Q-share rows
    sin0: float = 0.0       # angle-anchor coefficients when own_kind == "angle"
    cos0: float = 1.0


@dataclass(frozen=True)
class PinStamp:
    bus_id: int
    row_r: int
    row_i: int
    col_r: int
    col_i: int
    vr0: float
    vi0: float


@dataclass(frozen=True)
class AngleStamp:
    bus_id: int
    row: int
    col_r: int
    col_i: int
    sin0: float
    cos0: float


def stamp_branch(st: BranchStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    vrf, vif = x[st.fc_r], x[st.fc_i]
    vrt, vit = x[st.tc_r], x[st.tc_i]
    acc.add_f(st.fr_r, st.gff * vrf - st.bff * vif + st.gft * vrt - st.bft * vit)
    acc.add_f(st.fr_i, st.bff * vrf + st.gff * vif + st.bft * vrt + st.gft * vit)
    acc.add_f(st.tr_r, st.gtf * vrf - st.btf * vif + st.gtt * vrt - st.btt * vit)
    acc.add_f(st.tr_i, st.btf * vrf + st.gtf * vif + st.btt * vrt + st.gtt * vit)
    for row, cr, ci, g, b in (
            (st.fr_r, st.fc_r, st.fc_i, st.gff, st.bff),
            (st.fr_r, st.tc_r, st.tc_i, st.gft, st.bft),
            (st.tr_r, st.fc_r, st.fc_i, st.gtf, st.btf),
            (st.tr_r, st.tc_r, st.tc_i, st.gtt, st.btt)):
        acc.add_j(row, cr, g)
        acc.add_j(row, ci, -b)
    for row, cr, ci, g, b in (
            (st.fr_i, st.fc_r, st.fc_i, st.gff, st.bff),
            (st.fr_i, st.tc_r, st.tc_i, st.gft, st.bft),
            (st.tr_i, st.fc_r, st.fc_i, st.gtf, st.btf),
            (st.tr_i, st.tc_r, st.tc_i, st.gtt, st.btt)):
        acc.add_j(row, cr, b)
        acc.add_j(row, ci, g)


def stamp_shunt(st: ShuntStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    vr, vi = x[st.col_r], x[st.col_i]
    acc.add_f(st.row_r, st.g * vr - st.b * vi)
    acc.add_f(st.row_i, st.b * vr + st.g * vi)
    acc.add_j(st.row_r, st.col_r, st.g)
    acc.add_j(st.row_r, st.col_i, -st.b)
    acc.add_j(st.row_i, st.col_r, st.b)
    acc.add_j(st.row_i, st.col_i, st.g)


def stamp_load(st: LoadStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    vr, vi = x[st.col_r], x[st.col_i]
    ir, ii = injection_current(st.p, st.q, vr, vi)
    (dr_vr, dr_vi, _, _), (di_vr, di_vi, _, _) = injection_partials(st.p, st.q, vr, vi)
    acc.add_f(st.row_r, ir)
    acc.add_f(st.row_i, ii)
    acc.add_j(st.row_r, st.col_r, dr_vr)
    acc.add_j(st.row_r, st.col_i, dr_vi)
    acc.add_j(st.row_i, st.col_r, di_vr)
    acc.add_j(st.row_i, st.col_i, di_vi)


def stamp_generator(st: GenStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    vr, vi = x[st.col_r], x[st.col_i]
    qg = x[st.qg_col]
    ir, ii = injection_current(st.p_set, qg, vr, vi)
    (dr_vr, dr_vi, _, dr_q), (di_vr, di_vi, _, di_q) = injection_partials(
        st.p_set, qg, vr, vi)
    acc.add_f(st.row_r, -ir)
    acc.add_f(st.row_i, -ii)
    acc.add_j(st.row_r, st.col_r, -dr_vr)
    acc.add_j(st.row_r, st.col_i, -dr_vi)
    acc.add_j(st.row_r, st.qg_col, -dr_q)
    acc.add_j(st.row_i, st.col_r, -di_vr)
    acc.add_j(st.row_i, st.col_i, -di_vi)
    acc.add_j(st.row_i, st.qg_col, -di_q)
    if st.own_kind == "mag":
        acc.add_f(st.own_row, vr * vr + vi * vi - st.v_set2)
        acc.add_j(st.own_row, st.col_r, 2.0 * vr)
        acc.add_j(st.own_row, st.col_i, 2.0 * vi)
    elif st.own_kind == "qsplit":
        acc.add_f(st.own_row, qg - x[st.ref_qg_col])
        acc.add_j(st.own_row, st.qg_col, 1.0)
        acc.add_j(st.own_row, st.ref_qg_col, -1.0)
    else:  # angle anchor replacing the magnitude row (islanded reference)
        acc.add_f(st.own_row, vi * st.cos0 - vr * st.sin0)
        acc.add_j(st.own_row, st.col_r, -st.sin0)
        acc.add_j(st.own_row, st.col_i, st.cos0)


def stamp_slack(st: PinStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    acc.set_pin_f(st.row_r, x[st.col_r] - st.vr0)
    acc.set_pin_f(st.row_i, x[st.col_i] - st.vi0)
    acc.add_pin_j(st.row_r, st.col_r, 1.0)
    acc.add_pin_j(st.row_i, st.col_i, 1.0)


def stamp_angle(st: AngleStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    acc.add_f(st.row, x[st.col_i] * st.cos0 - x[st.col_r] * st.sin0)
    acc.add_j(st.row, st.col_r, -st.sin0)
    acc.add_j(st.row, st.col_i, st.cos0)


def stamp_anchor(st: PinStamp, x: np.ndarray, acc: StampAccumulator) -> None:
    """Voltage anchor as live constraint rows (dead-island reference)."""
    acc.add_f(st.row_r, x[st.col_r] - st.vr0)
    acc.add_f(st.row_i, x[st.col_i] - st.vi0)
    acc.add_j(st.row_r, st.col_r, 1.0)
    acc.add_j(st.row_i, st.col_i, 1.0)


# ---------------------------------------------------------------------------
# Topology policy shared by all equation families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IslandPlan:
    """How each connected island is referenced.

    Every island needs one absolute-angle reference; islands created by
    outages lack a slack bus, so a reference is designated: a regulated
    (PV) bus keeps its magnitude anchor and only the angle is fixed, while
    a dead island (no in-service generator) gets its reference bus voltage
    pinned outright so its unknowns stay determined.
    """

    members: frozenset[int]
    has_slack: bool
    ref_bus: int
    ref_kind: str  # "slack" | "pv" | "dead"


def plan_islands(net: Network, pv_gen_buses: set[int]) -> list[IslandPlan]:
    plans = []
    bus_map = net.bus_map()
    for comp in islands(net):
        slacks = sorted(b for b in comp if bus_map[b].kind is BusKind.SLACK)
        if slacks:
            plans.append(IslandPlan(frozenset(comp), True, slacks[0], "slack"))
            continue
        pv = sorted(b for b in comp if b in pv_gen_buses)
        if pv:
            plans.append(IslandPlan(frozenset(comp), False, pv[0], "pv"))
        else:
            plans.append(IslandPlan(frozenset(comp), False, min(comp), "dead"))
    return plans


def _eff_kind(bus: Bus, pv_gen_buses: set[int]) -> BusKind:
    # A regulated bus with no in-service generator behaves as a load bus.
    if bus.kind is BusKind.PV and bus.id not in pv_gen_buses:
        return BusKind.PQ
    return bus.kind


# ---------------------------------------------------------------------------
# Power-flow system
# ---------------------------------------------------------------------------

class PowerFlowSystem(EquationSystem):
    """Square current-mismatch system F(X) = 0 for one network.

    ``anchor_voltages`` supplies reference phasors for islands without a
    slack bus (warm starts pass the prior solution so anchors do not fight
    the initial state); buses absent from the map anchor at 1+0j.
    """

    def __init__(self, net: Network, *, anchor_voltages: Mapping[int, complex] | None = None,
                 kkt_rows: bool = False):
        self.net = net
        self.diagnostics = check_structural(net)
        anchors = dict(anchor_voltages or {})

        in_gens = [g for g in sorted(net.generators, key=lambda g: g.id)
                   if g.status is Status.IN]
        bus_map = net.bus_map()
        pv_gen_buses = {g.bus for g in in_gens
                        if bus_map[g.bus].kind is BusKind.PV}
        for g in in_gens:
            if _eff_kind(bus_map[g.bus], pv_gen_buses) is BusKind.PQ:
                raise NetworkValidationError(
                    f"generator {g.id} sits on load bus {g.bus}; "
                    "power flow supports generators on regulated buses only")

        self.island_plans = plan_islands(net, pv_gen_buses)
        plan_by_bus = {b: p for p in self.island_plans for b in p.members}

        self.buses = sorted(net.buses, key=lambda b: b.id)
        self.bus_pos = {b.id: i for i, b in enumerate(self.buses)}
        nb = len(self.buses)

        pv_gens = [g for g in in_gens
                   if _eff_kind(bus_map[g.bus], pv_gen_buses) is BusKind.PV]
        self.pv_gens = pv_gens

        var_labels: list[Label] = [("vr", b.id) for b in self.buses]
        var_labels += [("vi", b.id) for b in self.buses]
        var_labels += [("qg", g.id) for g in pv_gens]
        self.layout = StateLayout(var_labels)

        # Dead islands (no in-service generator) anchor their reference bus
        # voltage. The square system can only pin it (replacing the balance
        # rows); the optimality systems instead append the anchor as extra
        # constraint rows so the balance rows stay live and their slack
        # injections quantify the stranded demand.
        pinned_buses: dict[int, complex] = {}
        dead_anchors: dict[int, complex] = {}
        pv_angle_refs: dict[int, float] = {}
        for p in self.island_plans:
            if p.ref_kind == "dead":
                v = anchors.get(p.ref_bus, 1.0 + 0.0j)
                if kkt_rows:
                    dead_anchors[p.ref_bus] = v
                else:
                    pinned_buses[p.ref_bus] = v
            elif p.ref_kind == "pv":
                v = anchors.get(p.ref_bus)
                pv_angle_refs[p.ref_bus] = cmath.phase(v) if v is not None else 0.0
        for b in self.buses:
            if b.kind is BusKind.SLACK:
                pinned_buses[b.id] = cmath.rect(b.v_set, b.angle_set)
        self.pinned_bus_voltages = pinned_buses
        self.dead_anchor_voltages = dead_anchors
        self._kkt_rows = kkt_rows

        row_labels: list[Label] = []
        for b in self.buses:
            row_labels.append(("pin_r" if b.id in pinned_buses else "kcl_r", b.id))
        for b in self.buses:
            row_labels.append(("pin_i" if b.id in pinned_buses else "kcl_i", b.id))

        # One own-row per reactive unknown: magnitude constraint for the
        # first unit on a bus, equal-Q coupling for additional units. In the
        # square system an islanded PV reference trades its magnitude row
        # for the island's angle anchor; optimality systems keep the
        # magnitude row and append the anchor as an extra constraint row.
        first_on_bus: dict[int, Generator] = {}
        gen_row_kind: dict[int, str] = {}
        for g in pv_gens:
            if g.bus not in first_on_bus:
                first_on_bus[g.bus] = g
                kind = "mag"
                if not kkt_rows and not plan_by_bus[g.bus].has_slack \
                        and plan_by_bus[g.bus].ref_bus == g.bus:
                    kind = "angle"
                gen_row_kind[g.id] = kind
            else:
                gen_row_kind[g.id] = "qsplit"
        for g in pv_gens:
            row_labels.append((gen_row_kind[g.id], g.id))

        extra_angle_buses: list[int] = []
        if kkt_rows:
            extra_angle_buses = sorted(
                p.ref_bus for p in self.island_plans if p.ref_kind == "pv")
            row_labels += [("angle", b) for b in extra_angle_buses]
            for b in sorted(dead_anchors):
                row_labels += [("anchor_r", b), ("anchor_i", b)]
        self.rows = StateLayout(row_labels)

        pinned_rows = set()
        for bid in pinned_buses:
            pinned_rows.add(self.rows.index_of("pin_r", bid))
            pinned_rows.add(self.rows.index_of("pin_i", bid))
        self.pinned_rows = frozenset(pinned_rows)
        self.slack_row_buses = tuple(b.id for b in self.buses
                                     if b.id not in pinned_buses)

        self._build_stamps(net, bus_map, pv_gens, gen_row_kind, first_on_bus,
                           pinned_buses, pv_angle_refs, extra_angle_buses)

    # -- construction helpers -------------------------------------------------

    def _vr(self, bus_id: int) -> int:
        return self.layout.index_of("vr", bus_id)

    def _vi(self, bus_id: int) -> int:
        return self.layout.index_of("vi", bus_id)

    def _row_r(self, bus_id: int) -> int:
        kind = "pin_r" if bus_id in self.pinned_bus_voltages else "kcl_r"
        return self.rows.index_of(kind, bus_id)

    def _row_i(self, bus_id: int) -> int:
        kind = "pin_i" if bus_id in self.pinned_bus_voltages else "kcl_i"
        return self.rows.index_of(kind, bus_id)

    def _build_stamps(self, net, bus_map, pv_gens, gen_row_kind, first_on_bus,
                      pinned_buses, pv_angle_refs, extra_angle_buses) -> None:
        self.branch_stamps: list[BranchStamp] = []
        for br in sorted(net.branches, key=lambda b: b.id):
            if br.status is not Status.IN:
                continue
            yff, yft, ytf, ytt = branch_admittance(br)
            self.branch_stamps.append(BranchStamp(
                br.id,
                self._row_r(br.from_bus), self._row_i(br.from_bus),
                self._row_r(br.to_bus), self._row_i(br.to_bus),
                self._vr(br.from_bus), self._vi(br.from_bus),
                self._vr(br.to_bus), self._vi(br.to_bus),
                yff.real, yff.imag, yft.real, yft.imag,
                ytf.real, ytf.imag, ytt.real, ytt.imag))

        self.shunt_stamps: list[ShuntStamp] = []
        for b in self.buses:
            if b.shunt_g != 0.0 or b.shunt_b != 0.0:
                self.shunt_stamps.append(ShuntStamp(
                    b.id, self._row_r(b.id), self._row_i(b.id),
                    self._vr(b.id), self._vi(b.id), b.shunt_g, b.shunt_b))

        self.load_stamps: list[LoadStamp] = []
        for l in sorted(net.loads, key=lambda l: l.bus):
            p, q = l.p * l.scale, l.q * l.scale
            if p == 0.0 and q == 0.0:
                continue
            self.load_stamps.append(LoadStamp(
                l.bus, self._row_r(l.bus), self._row_i(l.bus),
                self._vr(l.bus), self._vi(l.bus), p, q))

        self.gen_stamps: list[GenStamp] = []
        for g in pv_gens:
            kind = gen_row_kind[g.id]
            vset = bus_map[g.bus].v_set
            theta0 = pv_angle_refs.get(g.bus, 0.0)
            self.gen_stamps.append(GenStamp(
                g.id, self._row_r(g.bus), self._row_i(g.bus),
                self._vr(g.bus), self._vi(g.bus),
                self.layout.index_of("qg", g.id), g.p_set,
                own_row=self.rows.index_of(kind, g.id), own_kind=kind,
                v_set2=vset * vset,
                ref_qg_col=(self.layout.index_of("qg", first_on_bus[g.bus].id)
                            if kind == "qsplit" else -1),
                sin0=math.sin(theta0), cos0=math.cos(theta0)))

        self.pin_stamps: list[PinStamp] = []
        for bid in sorted(pinned_buses):
            v = pinned_buses[bid]
            self.pin_stamps.append(PinStamp(
                bid, self.rows.index_of("pin_r", bid), self.rows.index_of("pin_i", bid),
                self._vr(bid), self._vi(bid), v.real, v.imag))

        self.angle_stamps: list[AngleStamp] = []
        for bid in extra_angle_buses:
            theta0 = pv_angle_refs.get(bid, 0.0)
            self.angle_stamps.append(AngleStamp(
                bid, self.rows.index_of("angle", bid),
                self._vr(bid), self._vi(bid), math.sin(theta0), math.cos(theta0)))

        self.anchor_stamps: list[PinStamp] = []
        for bid in sorted(self.dead_anchor_voltages):
            v = self.dead_anchor_voltages[bid]
            self.anchor_stamps.append(PinStamp(
                bid, self.rows.index_of("anchor_r", bid),
                self.rows.index_of("anchor_i", bid),
                self._vr(bid), self._vi(bid), v.real, v.imag))

    # -- evaluation ------------------------------------------------------------

    def accumulate(self, x: np.ndarray, acc: StampAccumulator) -> None:
        for st in self.pin_stamps:
            stamp_slack(st, x, acc)
        for st in self.branch_stamps:
            stamp_branch(st, x, acc)
        for st in self.shunt_stamps:
            stamp_shunt(st, x, acc)
        for st in self.load_stamps:
            stamp_load(st, x, acc)
        for st in self.gen_stamps:
            stamp_generator(st, x, acc)
        for st in self.angle_stamps:
            stamp_angle(st, x, acc)
        for st in self.anchor_stamps:
            stamp_anchor(st, x, acc)

    def evaluate(self, state: SolverState) -> ResidualJacobian:
        self.check_state(state)
        acc = StampAccumulator(len(self.rows), len(self.layout), self.pinned_rows)
        self.accumulate(state.values, acc)
        return ResidualJacobian(acc.residual, acc.matrix())

    def hessian_triplets(self, x: np.ndarray, lam: np.ndarray
                         ) -> tuple[list[int], list[int], list[float]]:
        """Triplets of sum_k lam[k] * d2F_k/dX2 over this system's rows.

        Branch, shunt, pin, Q-share and angle stamps are linear in X and
        drop out; fixed-power loads, generator injections and magnitude
        rows carry curvature.
        """
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []

        def block2(cr, ci, h, w):
            if w == 0.0:
                return
            (rr, ri, ii) = h
            rows.extend((cr, cr, ci, ci))
            cols.extend((cr, ci, cr, ci))
            vals.extend((w * rr, w * ri, w * ri, w * ii))

        for st in self.load_stamps:
            lr, li = lam[st.row_r], lam[st.row_i]
            if lr == 0.0 and li == 0.0:
                continue
            hr, hi, _ = injection_hessian(st.p, st.q, x[st.col_r], x[st.col_i])
            block2(st.col_r, st.col_i, hr, lr)
            block2(st.col_r, st.col_i, hi, li)

        for st in self.gen_stamps:
            lr, li = lam[st.row_r], lam[st.row_i]
            qg = x[st.qg_col]
            if lr != 0.0 or li != 0.0:
                hr, hi, dw = injection_hessian(st.p_set, qg, x[st.col_r], x[st.col_i])
                block2(st.col_r, st.col_i, hr, -lr)
                block2(st.col_r, st.col_i, hi, -li)
                dwr_r, dwr_i, dwi_r, dwi_i = dw
                # d2Ir/dV dQ = grad_V wi ; d2Ii/dV dQ = -grad_V wr
                for cv, a, b in ((st.col_r, dwi_r, -dwr_r), (st.col_i, dwi_i, -dwr_i)):
                    w = -(lr * a + li * b)
                    rows.extend((cv, st.qg_col))
                    cols.extend((st.qg_col, cv))
                    vals.extend((w, w))
            if st.own_kind == "mag":
                lm = lam[st.own_row]
                if lm != 0.0:
                    block2(st.col_r, st.col_i, (2.0, 0.0, 2.0), lm)
        return rows, cols, vals

    def flat_start(self) -> SolverState:
        vals = np.zeros(len(self.layout))
        pv_buses = {g.bus for g in self.pv_gens}
        for b in self.buses:
            if b.id in self.pinned_bus_voltages:
                v = self.pinned_bus_voltages[b.id]
            elif b.id in self.dead_anchor_voltages:
                v = self.dead_anchor_voltages[b.id]
            elif _eff_kind(b, pv_buses) is BusKind.PV:
                v = complex(b.v_set, 0.0)
            else:
                v = 1.0 + 0.0j
            vals[self._vr(b.id)] = v.real
            vals[self._vi(b.id)] = v.imag
        return SolverState(self.layout, vals)


def build_pf_system(net: Network, *,
                    anchor_voltages: Mapping[int, complex] | None = None
                    ) -> PowerFlowSystem:
    """Square power-flow equation system for ``net``."""
    return PowerFlowSystem(net, anchor_voltages=anchor_voltages)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BusPower:
    bus: int
    vm: float
    va: float
    p_gen: float
    q_gen: float
    p_load: float
    q_load: float


@dataclass(frozen=True)
class PowerSummary:
    per_bus: tuple[BusPower, ...]
    total_gen: complex
    total_load: complex
    total_loss: complex
    balance_ok: bool

    @property
    def balance_residual(self) -> float:
        return abs((self.total_gen - self.total_load - self.total_loss).real)


def bus_power_summary(net: Network, state: SolverState,
                      tol: float = 1e-8) -> PowerSummary:
    """Per-bus injections and loss totals, from direct complex arithmetic.

    Independent of the stamped residual: branch flows are recomputed from
    the two-port admittances. Generation is taken from the dispatch (and
    the state's reactive/dispatch unknowns where present); only buses with
    a pinned voltage report the implied balancing injection. The balance
    flag therefore holds only at a solved state.
    """
    volts = {b.id: state.bus_voltage(b.id) for b in net.buses}
    inj: dict[int, complex] = {b.id: 0.0 + 0.0j for b in net.buses}
    loss = 0.0 + 0.0j
    for br in net.branches:
        if br.status is not Status.IN:
            continue
        yff, yft, ytf, ytt = branch_admittance(br)
        vf, vt = volts[br.from_bus], volts[br.to_bus]
        i_f = yff * vf + yft * vt
        i_t = ytf * vf + ytt * vt
        sf = vf * i_f.conjugate()
        st = vt * i_t.conjugate()
        inj[br.from_bus] += sf
        inj[br.to_bus] += st
        loss += sf + st
    for b in net.buses:
        if b.shunt_g != 0.0 or b.shunt_b != 0.0:
            v = volts[b.id]
            s = v * (complex(b.shunt_g, b.shunt_b) * v).conjugate()
            inj[b.id] += s
            loss += s

    load_by_bus: dict[int, complex] = {b.id: 0.0 + 0.0j for b in net.buses}
    for l in net.loads:
        load_by_bus[l.bus] += complex(l.p, l.q) * l.scale

    pinned = {b.id for b in net.buses if b.kind is BusKind.SLACK}
    in_gens = [g for g in net.generators if g.status is Status.IN]
    pv_gen_buses = {g.bus for g in in_gens}
    for p in plan_islands(net, {g.bus for g in in_gens
                                if net.bus_map()[g.bus].kind is BusKind.PV}):
        if p.ref_kind == "dead":
            pinned.add(p.ref_bus)

    dispatch: dict[int, complex] = {b.id: 0.0 + 0.0j for b in net.buses}
    for g in in_gens:
        pg = state.get("pg", g.id) if state.layout.has("pg", g.id) else g.p_set
        qg = state.get("qg", g.id) if state.layout.has("qg", g.id) else 0.0
        dispatch[g.bus] += complex(pg, qg)

    per_bus = []
    total_gen = 0.0 + 0.0j
    total_load = 0.0 + 0.0j
    for b in net.buses:
        if b.id in pinned:
            s_gen = inj[b.id] + load_by_bus[b.id]
        else:
            s_gen = dispatch[b.id]
        v = volts[b.id]
        per_bus.append(BusPower(
            b.id, abs(v), cmath.phase(v),
            s_gen.real, s_gen.imag,
            load_by_bus[b.id].real, load_by_bus[b.id].imag))
        total_gen += s_gen
        total_load += load_by_bus[b.id]

    gap = total_gen - total_load - loss
    return PowerSummary(tuple(per_bus), total_gen, total_load, loss,
                        balance_ok=abs(gap.real) <= tol and abs(gap.imag) <= tol)
