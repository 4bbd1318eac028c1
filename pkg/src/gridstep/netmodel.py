"""Immutable per-unit network model, case-file ingestion, and discrete deltas.

A ``Network`` is a frozen snapshot of a transmission grid: buses, branches,
generators, and loads, all stored in per-unit on a single MVA base. Discrete
changes between two snapshots (outages, load scaling, redispatch) are
expressed as a ``NetworkDelta`` — an ordered list of atomic edits that can be
applied to produce a new ``Network`` and inverted to recover the old one.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

from .errors import CaseParseError, NetworkValidationError

log = logging.getLogger(__name__)

DEG2RAD = math.pi / 180.0


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class Status(enum.Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class CostModel:
    """Quadratic generation cost c2*P^2 + c1*P + c0 with P in MW."""

    c2: float = 0.0  # $/MW^2 h
    c1: float = 0.0  # $/MWh
    c0: float = 0.0  # $/h


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    base_kv: float = 1.0
    v_set: float = 1.0          # p.u. magnitude setpoint (PV/slack)
    angle_set: float = 0.0      # radians (slack)
    shunt_g: float = 0.0        # p.u. admittance
    shunt_b: float = 0.0
    v_min: float = 0.9          # p.u. operating limits (used by OPF)
    v_max: float = 1.1


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    series_r: float
    series_x: float
    charging_b: float = 0.0
    tap_ratio: float = 1.0
    phase_shift: float = 0.0    # radians
    status: Status = Status.IN
    flow_limit: float | None = None  # p.u. MVA, None = unlimited


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_set: float                # p.u. MW
    q_min: float = -1e3
    q_max: float = 1e3
    p_min: float = 0.0
    p_max: float = 1e3
    cost: CostModel = field(default_factory=CostModel)
    status: Status = Status.IN


@dataclass(frozen=True)
class Load:
    bus: int
    p: float                    # p.u. MW drawn
    q: float                    # p.u. MVAr drawn
    scale: float = 1.0


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    name: str = ""

    def bus_map(self) -> dict[int, Bus]:
        return {b.id: b for b in self.buses}

    def branch_map(self) -> dict[int, Branch]:
        return {b.id: b for b in self.branches}

    def gen_map(self) -> dict[int, Generator]:
        return {g.id: g for g in self.generators}

    def slack_buses(self) -> tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.kind is BusKind.SLACK)


# ---------------------------------------------------------------------------
# Deltas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchStatus:
    branch_id: int
    status: Status


@dataclass(frozen=True)
class LoadScale:
    bus_id: int
    scale: float


@dataclass(frozen=True)
class GenSetpoint:
    gen_id: int
    p_set: float


@dataclass(frozen=True)
class GenStatus:
    gen_id: int
    status: Status


@dataclass(frozen=True)
class ShuntChange:
    bus_id: int
    shunt_g: float
    shunt_b: float


Change = Union[BranchStatus, LoadScale, GenSetpoint, GenStatus, ShuntChange]


@dataclass(frozen=True)
class NetworkDelta:
    """Ordered list of atomic network edits."""

    changes: tuple[Change, ...] = ()

    def __len__(self) -> int:
        return len(self.changes)

    def inverse(self, net: Network) -> "NetworkDelta":
        """Delta that undoes this one when applied after it.

        ``net`` must be the network this delta is about to be applied to;
        the inverse captures the prior values being overwritten.
        """
        inv: list[Change] = []
        state = net
        for ch in self.changes:
            if isinstance(ch, BranchStatus):
                old = _require(state.branch_map(), ch.branch_id, "branch")
                inv.append(BranchStatus(ch.branch_id, old.status))
            elif isinstance(ch, LoadScale):
                loads = [l for l in state.loads if l.bus == ch.bus_id]
                if not loads:
                    raise NetworkValidationError(
                        f"load scale references bus {ch.bus_id} with no load")
                inv.append(LoadScale(ch.bus_id, loads[0].scale))
            elif isinstance(ch, GenSetpoint):
                old_g = _require(state.gen_map(), ch.gen_id, "generator")
                inv.append(GenSetpoint(ch.gen_id, old_g.p_set))
            elif isinstance(ch, GenStatus):
                old_g = _require(state.gen_map(), ch.gen_id, "generator")
                inv.append(GenStatus(ch.gen_id, old_g.status))
            elif isinstance(ch, ShuntChange):
                old_b = _require(state.bus_map(), ch.bus_id, "bus")
                inv.append(ShuntChange(ch.bus_id, old_b.shunt_g, old_b.shunt_b))
            else:  # pragma: no cover - exhaustive
                raise TypeError(f"unknown change {ch!r}")
            state = apply_delta(state, NetworkDelta((ch,)))
        return NetworkDelta(tuple(reversed(inv)))

    def to_dict(self) -> dict:
        out = []
        for ch in self.changes:
            if isinstance(ch, BranchStatus):
                out.append({"kind": "branch_status", "branch": ch.branch_id,
                            "status": ch.status.value})
            elif isinstance(ch, LoadScale):
                out.append({"kind": "load_scale", "bus": ch.bus_id,
                            "scale": ch.scale})
            elif isinstance(ch, GenSetpoint):
                out.append({"kind": "gen_setpoint", "gen": ch.gen_id,
                            "p_set": ch.p_set})
            elif isinstance(ch, GenStatus):
                out.append({"kind": "gen_status", "gen": ch.gen_id,
                            "status": ch.status.value})
            elif isinstance(ch, ShuntChange):
                out.append({"kind": "shunt_change", "bus": ch.bus_id,
                            "g": ch.shunt_g, "b": ch.shunt_b})
        return {"changes": out}

    @staticmethod
    def from_dict(data: dict) -> "NetworkDelta":
        changes: list[Change] = []
        for item in data.get("changes", []):
            kind = item.get("kind")
            if kind == "branch_status":
                changes.append(BranchStatus(int(item["branch"]),
                                            Status(item["status"])))
            elif kind == "load_scale":
                changes.append(LoadScale(int(item["bus"]), float(item["scale"])))
            elif kind == "gen_setpoint":
                changes.append(GenSetpoint(int(item["gen"]), float(item["p_set"])))
            elif kind == "gen_status":
                changes.append(GenStatus(int(item["gen"]), Status(item["status"])))
            elif kind == "shunt_change":
                changes.append(ShuntChange(int(item["bus"]), float(item["g"]),
                                           float(item["b"])))
            else:
                raise NetworkValidationError(f"unknown delta change kind {kind!r}")
        return NetworkDelta(tuple(changes))


def _require(mapping: dict, key: int, what: str):
    try:
        return mapping[key]
    except KeyError:
        raise NetworkValidationError(f"{what} {key} does not exist") from None


def apply_delta(net: Network, delta: NetworkDelta) -> Network:
    """Return a new network with the delta applied; ``net`` is untouched."""
    buses = list(net.buses)
    branches = list(net.branches)
    gens = list(net.generators)
    loads = list(net.loads)
    bus_pos = {b.id: i for i, b in enumerate(buses)}
    br_pos = {b.id: i for i, b in enumerate(branches)}
    gen_pos = {g.id: i for i, g in enumerate(gens)}

    for ch in delta.changes:
        if isinstance(ch, BranchStatus):
            i = _require(br_pos, ch.branch_id, "branch")
            branches[i] = replace(branches[i], status=ch.status)
        elif isinstance(ch, LoadScale):
            hit = False
            for i, l in enumerate(loads):
                if l.bus == ch.bus_id:
                    loads[i] = replace(l, scale=ch.scale)
                    hit = True
            if not hit:
                raise NetworkValidationError(
                    f"load scale references bus {ch.bus_id} with no load")
        elif isinstance(ch, GenSetpoint):
            i = _require(gen_pos, ch.gen_id, "generator")
            gens[i] = replace(gens[i], p_set=ch.p_set)
        elif isinstance(ch, GenStatus):
            i = _require(gen_pos, ch.gen_id, "generator")
            gens[i] = replace(gens[i], status=ch.status)
        elif isinstance(ch, ShuntChange):
            i = _require(bus_pos, ch.bus_id, "bus")
            buses[i] = replace(buses[i], shunt_g=ch.shunt_g, shunt_b=ch.shunt_b)
        else:  # pragma: no cover - exhaustive
            raise TypeError(f"unknown change {ch!r}")

    return replace(net, buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(gens), loads=tuple(loads))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.element}: {self.message}"


#: Diagnostic codes that make a network unusable for any equation build.
STRUCTURAL_CODES = frozenset({
    "duplicate-bus-id", "bad-bus-ref", "self-loop", "zero-impedance",
    "bad-v-set", "bad-base-mva", "slack-island-no-generator",
    "multiple-slack-in-island",
})


def validate(net: Network) -> list[Diagnostic]:
    """Check every network invariant; empty list means all hold.

    Diagnostics are observations, not exceptions. Callers decide which
    codes block them: equation builders refuse ``STRUCTURAL_CODES`` but
    tolerate e.g. ``island-without-slack``, which the feasibility and
    optimization formulations handle with anchor rows.
    """
    out: list[Diagnostic] = []
    if net.base_mva <= 0:
        out.append(Diagnostic("bad-base-mva", "network",
                              f"base_mva must be positive, got {net.base_mva}"))

    seen: set[int] = set()
    for b in net.buses:
        if b.id in seen:
            out.append(Diagnostic("duplicate-bus-id", f"bus {b.id}",
                                  "bus id appears more than once"))
        seen.add(b.id)
        if b.kind in (BusKind.PV, BusKind.SLACK) and b.v_set <= 0:
            out.append(Diagnostic("bad-v-set", f"bus {b.id}",
                                  f"voltage setpoint must be positive, got {b.v_set}"))

    ids = {b.id for b in net.buses}
    for br in net.branches:
        elem = f"branch {br.id}"
        if br.from_bus not in ids or br.to_bus not in ids:
            out.append(Diagnostic("bad-bus-ref", elem,
                                  f"endpoint {br.from_bus}-{br.to_bus} not in bus set"))
        if br.from_bus == br.to_bus:
            out.append(Diagnostic("self-loop", elem, "from and to bus are equal"))
        if abs(br.series_r) + abs(br.series_x) == 0.0:
            out.append(Diagnostic("zero-impedance", elem, "zero series impedance"))

    for g in net.generators:
        elem = f"generator {g.id}"
        if g.bus not in ids:
            out.append(Diagnostic("bad-bus-ref", elem, f"bus {g.bus} not in bus set"))
        if g.q_min > g.q_max:
            out.append(Diagnostic("q-range", elem, "q_min exceeds q_max"))
        if g.p_min > g.p_max:
            out.append(Diagnostic("p-range", elem, "p_min exceeds p_max"))
        if g.cost.c2 < 0:
            out.append(Diagnostic("concave-cost", elem, "c2 must be nonnegative"))

    for l in net.loads:
        elem = f"load at bus {l.bus}"
        if l.bus not in ids:
            out.append(Diagnostic("bad-bus-ref", elem, f"bus {l.bus} not in bus set"))
        if l.scale < 0:
            out.append(Diagnostic("bad-load-scale", elem,
                                  f"scale must be nonnegative, got {l.scale}"))

    # Island structure over in-service branches.
    comps = islands(net)
    gen_buses = {g.bus for g in net.generators if g.status is Status.IN}
    for comp in comps:
        slacks = [b for b in comp if net.bus_map()[b].kind is BusKind.SLACK]
        label = f"island containing bus {min(comp)}"
        if len(slacks) == 0:
            out.append(Diagnostic("island-without-slack", label,
                                  "no slack bus in this island"))
        elif len(slacks) > 1:
            out.append(Diagnostic("multiple-slack-in-island", label,
                                  f"{len(slacks)} slack buses in one island"))
        if not (comp & gen_buses):
            code = ("slack-island-no-generator" if slacks
                    else "island-without-generator")
            out.append(Diagnostic(code, label,
                                  "no in-service generator in this island"))
    return out


def islands(net: Network) -> list[set[int]]:
    """Connected components over in-service branches (union-find)."""
    parent = {b.id: b.id for b in net.buses}

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for br in net.branches:
        if br.status is not Status.IN:
            continue
        if br.from_bus in parent and br.to_bus in parent:
            ra, rb = find(br.from_bus), find(br.to_bus)
            if ra != rb:
                parent[ra] = rb

    comps: dict[int, set[int]] = {}
    for b in net.buses:
        comps.setdefault(find(b.id), set()).add(b.id)
    return sorted(comps.values(), key=min)


def check_structural(net: Network) -> list[Diagnostic]:
    """Raise if any structural diagnostic is present; return the full list."""
    diags = validate(net)
    hard = [d for d in diags if d.code in STRUCTURAL_CODES]
    if hard:
        raise NetworkValidationError(
            "network has structural problems: " + "; ".join(map(str, hard)))
    return diags


# ---------------------------------------------------------------------------
# Case-file ingestion (MATPOWER-style subset)
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(
    r"(?:mpc\.)?(?P<name>baseMVA|bus|gen|branch|gencost)\s*=\s*(?P<body>\[[^\]]*\]|[-+0-9.eE]+)\s*;",
    re.DOTALL,
)

BUS_COLS = 13
GEN_COLS = 10
BRANCH_COLS = 11


def parse_case(text: str, name: str = "") -> Network:
    """Parse a MATPOWER-style case into a per-unit ``Network``.

    Supports the ``baseMVA``, ``bus``, ``gen``, ``branch`` and ``gencost``
    matrices; extra columns beyond the documented set are ignored with a
    warning. All MW/MVAr quantities are divided by ``baseMVA`` on ingest.
    """
    stripped = _strip_comments(text)
    found: dict[str, object] = {}
    for m in _MATRIX_RE.finditer(stripped):
        mat = m.group("name")
        body = m.group("body")
        if mat == "baseMVA":
            found[mat] = float(body.strip("[] \n"))
        else:
            found[mat] = _parse_matrix(body, text, m.start("body"))

    for required in ("baseMVA", "bus", "gen", "branch"):
        if required not in found:
            raise CaseParseError(f"missing required matrix '{required}'")

    base = float(found["baseMVA"])  # type: ignore[arg-type]
    if base <= 0:
        raise CaseParseError(f"baseMVA must be positive, got {base}")

    bus_rows: list[list[float]] = found["bus"]  # type: ignore[assignment]
    gen_rows: list[list[float]] = found["gen"]  # type: ignore[assignment]
    br_rows: list[list[float]] = found["branch"]  # type: ignore[assignment]
    cost_rows: list[list[float]] = found.get("gencost", [])  # type: ignore[assignment]

    _check_width("bus", bus_rows, BUS_COLS)
    _check_width("gen", gen_rows, GEN_COLS)
    _check_width("branch", br_rows, BRANCH_COLS)

    # Voltage setpoints come from the regulating generator when present.
    vg_by_bus: dict[int, float] = {}
    for row in gen_rows:
        if int(row[7]) > 0 and int(row[0]) not in vg_by_bus:
            vg_by_bus[int(row[0])] = float(row[5])

    buses: list[Bus] = []
    seen_ids: set[int] = set()
    loads: list[Load] = []
    for row in bus_rows:
        bid = int(row[0])
        if bid in seen_ids:
            raise NetworkValidationError(f"duplicate bus id {bid} in bus matrix")
        seen_ids.add(bid)
        btype = int(row[1])
        if btype == 1:
            kind = BusKind.PQ
        elif btype == 2:
            kind = BusKind.PV
        elif btype == 3:
            kind = BusKind.SLACK
        else:
            raise CaseParseError(f"bus {bid}: unsupported bus type {btype}")
        v_set = vg_by_bus.get(bid, float(row[7])) if kind is not BusKind.PQ else float(row[7])
        buses.append(Bus(
            id=bid, kind=kind, base_kv=float(row[9]),
            v_set=v_set if v_set > 0 else 1.0,
            angle_set=float(row[8]) * DEG2RAD,
            shunt_g=float(row[4]) / base, shunt_b=float(row[5]) / base,
            v_min=float(row[12]), v_max=float(row[11]),
        ))
        pd, qd = float(row[2]), float(row[3])
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(bus=bid, p=pd / base, q=qd / base))

    gens: list[Generator] = []
    for i, row in enumerate(gen_rows):
        cost = CostModel()
        if i < len(cost_rows):
            cost = _parse_cost(cost_rows[i], i)
        gens.append(Generator(
            id=i, bus=int(row[0]), p_set=float(row[1]) / base,
            q_min=float(row[4]) / base, q_max=float(row[3]) / base,
            p_min=float(row[9]) / base, p_max=float(row[8]) / base,
            cost=cost,
            status=Status.IN if int(row[7]) > 0 else Status.OUT,
        ))

    branches: list[Branch] = []
    for i, row in enumerate(br_rows):
        rate_a = float(row[5]) / base if float(row[5]) > 0 else None
        ratio = float(row[8])
        branches.append(Branch(
            id=i, from_bus=int(row[0]), to_bus=int(row[1]),
            series_r=float(row[2]), series_x=float(row[3]),
            charging_b=float(row[4]), flow_limit=rate_a,
            tap_ratio=ratio if ratio != 0.0 else 1.0,
            phase_shift=float(row[9]) * DEG2RAD,
            status=Status.IN if int(row[10]) > 0 else Status.OUT,
        ))

    return Network(buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(gens), loads=tuple(loads),
                   base_mva=base, name=name)


def _parse_cost(row: list[float], idx: int) -> CostModel:
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise CaseParseError(f"gencost row {idx}: only polynomial model 2 supported")
    coeffs = row[4:4 + ncost]
    if len(coeffs) != ncost:
        raise CaseParseError(f"gencost row {idx}: expected {ncost} coefficients")
    padded = [0.0] * (3 - ncost) + list(coeffs) if ncost < 3 else list(coeffs[-3:])
    if ncost > 3:
        log.warning("gencost row %d: degree above quadratic truncated", idx)
    return CostModel(c2=padded[0], c1=padded[1], c0=padded[2])


def _strip_comments(text: str) -> str:
    return re.sub(r"%[^\n]*", "", text)


def _parse_matrix(body: str, original: str, offset: int) -> list[list[float]]:
    inner = body.strip()
    if inner.startswith("["):
        inner = inner[1:-1]
    rows: list[list[float]] = []
    line_base = original[:offset].count("\n")
    for raw in re.split(r"[;\n]", inner):
        raw = raw.strip()
        if not raw:
            continue
        vals: list[float] = []
        for col, tok in enumerate(raw.replace(",", " ").split()):
            try:
                vals.append(float(tok))
            except ValueError:
                raise CaseParseError(
                    f"malformed value {tok!r} near line {line_base + 1}, column {col + 1}"
                ) from None
        rows.append(vals)
        line_base += 1
    return rows


def _check_width(name: str, rows: list[list[float]], want: int) -> None:
    for i, row in enumerate(rows):
        if len(row) < want:
            raise CaseParseError(
                f"{name} row {i + 1}: expected at least {want} columns, got {len(row)}")
        if len(row) > want:
            extra = len(row) - want
            log.warning("%s row %d: ignoring %d unsupported trailing columns",
                        name, i + 1, extra)


# ---------------------------------------------------------------------------
# Case-file writer (debug round-trip) and JSON mirror
# ---------------------------------------------------------------------------

def write_case(net: Network) -> str:
    """Emit the network in the same case-file dialect ``parse_case`` reads."""
    base = net.base_mva
    lines = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
             f"mpc.baseMVA = {base!r};", ""]
    load_by_bus: dict[int, tuple[float, float]] = {}
    for l in net.loads:
        p, q = load_by_bus.get(l.bus, (0.0, 0.0))
        load_by_bus[l.bus] = (p + l.p * l.scale, q + l.q * l.scale)

    kind_code = {BusKind.PQ: 1, BusKind.PV: 2, BusKind.SLACK: 3}
    lines.append("mpc.bus = [")
    for b in net.buses:
        pd, qd = load_by_bus.get(b.id, (0.0, 0.0))
        lines.append(
            f"\t{b.id}\t{kind_code[b.kind]}\t{pd * base!r}\t{qd * base!r}"
            f"\t{b.shunt_g * base!r}\t{b.shunt_b * base!r}\t1"
            f"\t{b.v_set!r}\t{b.angle_set / DEG2RAD!r}\t{b.base_kv!r}\t1"
            f"\t{b.v_max!r}\t{b.v_min!r};")
    lines.append("];\n")

    lines.append("mpc.gen = [")
    for g in net.generators:
        lines.append(
            f"\t{g.bus}\t{g.p_set * base!r}\t0\t{g.q_max * base!r}\t{g.q_min * base!r}"
            f"\t{_vset_of(net, g.bus)!r}\t{base!r}\t{1 if g.status is Status.IN else 0}"
            f"\t{g.p_max * base!r}\t{g.p_min * base!r};")
    lines.append("];\n")

    lines.append("mpc.branch = [")
    for br in net.branches:
        rate = (br.flow_limit or 0.0) * base
        ratio = 0.0 if br.tap_ratio == 1.0 else br.tap_ratio
        lines.append(
            f"\t{br.from_bus}\t{br.to_bus}\t{br.series_r!r}\t{br.series_x!r}"
            f"\t{br.charging_b!r}\t{rate!r}\t0\t0\t{ratio!r}"
            f"\t{br.phase_shift / DEG2RAD!r}\t{1 if br.status is Status.IN else 0};")
    lines.append("];\n")

    lines.append("mpc.gencost = [")
    for g in net.generators:
        c = g.cost
        lines.append(f"\t2\t0\t0\t3\t{c.c2!r}\t{c.c1!r}\t{c.c0!r};")
    lines.append("];")
    return "\n".join(lines) + "\n"


def _vset_of(net: Network, bus_id: int) -> float:
    return net.bus_map()[bus_id].v_set


def network_to_dict(net: Network) -> dict:
    return {
        "format": "gridstep-network-v1",
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [{
            "id": b.id, "kind": b.kind.value, "base_kv": b.base_kv,
            "v_set": b.v_set, "angle_set": b.angle_set,
            "shunt_g": b.shunt_g, "shunt_b": b.shunt_b,
            "v_min": b.v_min, "v_max": b.v_max,
        } for b in net.buses],
        "branches": [{
            "id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus,
            "series_r": br.series_r, "series_x": br.series_x,
            "charging_b": br.charging_b, "tap_ratio": br.tap_ratio,
            "phase_shift": br.phase_shift, "status": br.status.value,
            "flow_limit": br.flow_limit,
        } for br in net.branches],
        "generators": [{
            "id": g.id, "bus": g.bus, "p_set": g.p_set,
            "q_min": g.q_min, "q_max": g.q_max,
            "p_min": g.p_min, "p_max": g.p_max,
            "cost": {"c2": g.cost.c2, "c1": g.cost.c1, "c0": g.cost.c0},
            "status": g.status.value,
        } for g in net.generators],
        "loads": [{
            "bus": l.bus, "p": l.p, "q": l.q, "scale": l.scale,
        } for l in net.loads],
    }


def network_from_dict(data: dict) -> Network:
    try:
        buses = tuple(Bus(
            id=int(b["id"]), kind=BusKind(b["kind"]), base_kv=float(b["base_kv"]),
            v_set=float(b["v_set"]), angle_set=float(b["angle_set"]),
            shunt_g=float(b["shunt_g"]), shunt_b=float(b["shunt_b"]),
            v_min=float(b["v_min"]), v_max=float(b["v_max"]),
        ) for b in data["buses"])
        branches = tuple(Branch(
            id=int(b["id"]), from_bus=int(b["from_bus"]), to_bus=int(b["to_bus"]),
            series_r=float(b["series_r"]), series_x=float(b["series_x"]),
            charging_b=float(b["charging_b"]), tap_ratio=float(b["tap_ratio"]),
            phase_shift=float(b["phase_shift"]), status=Status(b["status"]),
            flow_limit=None if b.get("flow_limit") is None else float(b["flow_limit"]),
        ) for b in data["branches"])
        gens = tuple(Generator(
            id=int(g["id"]), bus=int(g["bus"]), p_set=float(g["p_set"]),
            q_min=float(g["q_min"]), q_max=float(g["q_max"]),
            p_min=float(g["p_min"]), p_max=float(g["p_max"]),
            cost=CostModel(**g["cost"]), status=Status(g["status"]),
        ) for g in data["generators"])
        loads = tuple(Load(bus=int(l["bus"]), p=float(l["p"]), q=float(l["q"]),
                           scale=float(l["scale"])) for l in data["loads"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CaseParseError(f"bad network JSON: {exc}") from exc
    return Network(buses=buses, branches=branches, generators=gens, loads=loads,
                   base_mva=float(data["base_mva"]), name=data.get("name", ""))


def network_to_json(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1)


def network_from_json(text: str) -> Network:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"bad network JSON: {exc}") from exc
    return network_from_dict(data)


def load_case(path) -> Network:
    """Read a case from disk, dispatching on extension (.m or .json)."""
    from pathlib import Path

    p = Path(path)
    text = p.read_text()
    if p.suffix.lower() == ".json":
        net = network_from_json(text)
        return net if net.name else replace(net, name=p.stem)
    return parse_case(text, name=p.stem)
