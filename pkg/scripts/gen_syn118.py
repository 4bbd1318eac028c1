"""Generate the syn118 test case (deterministic synthetic 118-bus system).

Builds a meshed three-zone transmission network with radial spurs
(generator leaves and one load-only leaf) so that single-line outages
exercise both ordinary reconfiguration and islanding. The solved voltage
profile is written into the bus matrix, as shipped case files usually are.

Run from the repository root:  python scripts/gen_syn118.py
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gridstep.equations import build_pf_system, bus_power_summary
from gridstep.netmodel import (Branch, Bus, BusKind, CostModel, Generator, Load,
                               Network, Status, validate, write_case)
from gridstep.solver import NewtonOptions, newton_solve

SEED = 118_118
SLACK_BUS = 69

GEN_BUSES = [
    1, 4, 6, 8, 10, 12, 15, 18, 19, 24, 25, 26, 27, 31, 32, 34, 36, 40, 42,
    46, 49, 54, 55, 56, 59, 61, 62, 65, 66, 69, 70, 72, 73, 74, 76, 77, 80,
    85, 87, 89, 90, 91, 92, 99, 100, 103, 104, 105, 107, 110, 111, 112, 113,
    116,
]

BIG_UNITS = {10: 450.0, 26: 310.0, 49: 300.0, 59: 255.0, 61: 260.0, 65: 490.0,
             66: 490.0, 69: 800.0, 80: 475.0, 89: 600.0, 100: 350.0}

# Leaf buses hang off the mesh through the listed spur branches.
SPUR_BRANCHES = [(8, 9), (9, 10), (12, 117), (110, 111), (110, 112),
                 (86, 87), (71, 73), (68, 116)]
LEAF_BUSES = {9, 10, 73, 87, 111, 112, 116, 117}

N_BRANCH_TARGET = 186


def build() -> Network:
    rng = np.random.default_rng(SEED)
    bus_ids = list(range(1, 119))
    core = [b for b in bus_ids if b not in LEAF_BUSES]

    edges: list[tuple[int, int]] = []
    ring = core
    for a, b in zip(ring, ring[1:]):
        edges.append((a, b))
    edges.append((ring[-1], ring[0]))
    edges.extend(SPUR_BRANCHES)

    # Chords across the ring until the branch budget is met.
    existing = {tuple(sorted(e)) for e in edges}
    n_core = len(core)
    while len(edges) < N_BRANCH_TARGET:
        i = int(rng.integers(0, n_core))
        k = int(rng.integers(3, 14))
        a, b = core[i], core[(i + k) % n_core]
        key = tuple(sorted((a, b)))
        if a == b or key in existing:
            continue
        existing.add(key)
        edges.append((a, b))

    branches = []
    transformer_slots = set(rng.choice(len(edges), size=10, replace=False).tolist())
    for i, (a, b) in enumerate(edges):
        x = float(rng.uniform(0.035, 0.17))
        r = x * float(rng.uniform(0.15, 0.35))
        chg = x * float(rng.uniform(0.4, 0.9))
        tap, shift = 1.0, 0.0
        if i in transformer_slots and (a, b) not in SPUR_BRANCHES:
            tap = float(rng.uniform(0.97, 1.03))
            chg = 0.0
        branches.append(Branch(
            id=i, from_bus=a, to_bus=b, series_r=round(r, 5),
            series_x=round(x, 5), charging_b=round(chg, 5),
            tap_ratio=round(tap, 4), phase_shift=shift))

    gen_bus_set = set(GEN_BUSES)
    loads = []
    total_load = 0.0
    for b in bus_ids:
        if b == SLACK_BUS:
            continue
        has_load = rng.random() < (0.85 if b not in gen_bus_set else 0.45)
        if b == 117:
            has_load = True   # the load-only leaf must actually carry load
        if b in (9, 10):
            has_load = False  # generator spur chain stays load-free
        if not has_load:
            continue
        p = float(rng.uniform(25.0, 115.0))
        q = p * float(rng.uniform(0.15, 0.45))
        loads.append(Load(bus=b, p=round(p, 2) / 100.0, q=round(q, 2) / 100.0))
        total_load += round(p, 2)

    caps = {}
    for b in GEN_BUSES:
        caps[b] = BIG_UNITS.get(b, float(rng.uniform(80.0, 260.0)))
    cap_others = sum(c for b, c in caps.items() if b != SLACK_BUS)
    target_gen = total_load * 0.985          # slack picks up the rest + losses
    gens = []
    for gid, b in enumerate(GEN_BUSES):
        cap = caps[b]
        if b == SLACK_BUS:
            p_set = 0.0
        else:
            p_set = cap / cap_others * target_gen
        c2 = float(rng.uniform(0.004, 0.05))
        c1 = float(rng.uniform(15.0, 45.0))
        qcap = cap * float(rng.uniform(0.45, 0.7))
        gens.append(Generator(
            id=gid, bus=b, p_set=round(p_set, 2) / 100.0,
            q_min=-round(qcap, 1) / 100.0, q_max=round(qcap, 1) / 100.0,
            p_min=0.0, p_max=round(cap, 1) / 100.0,
            cost=CostModel(c2=round(c2, 5), c1=round(c1, 3), c0=0.0)))

    shunt_buses = sorted(rng.choice([b for b in bus_ids if b not in gen_bus_set],
                                    size=6, replace=False).tolist())
    buses = []
    for b in bus_ids:
        if b == SLACK_BUS:
            kind = BusKind.SLACK
        elif b in gen_bus_set:
            kind = BusKind.PV
        else:
            kind = BusKind.PQ
        v_set = 1.035 if b == SLACK_BUS else round(float(rng.uniform(0.995, 1.045)), 4)
        shunt_b = 0.0
        if b in shunt_buses:
            shunt_b = round(float(rng.uniform(8.0, 20.0)), 1) / 100.0
        buses.append(Bus(
            id=b, kind=kind, base_kv=138.0, v_set=v_set, angle_set=0.0,
            shunt_g=0.0, shunt_b=shunt_b, v_min=0.94, v_max=1.06))

    return Network(buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(gens), loads=tuple(loads),
                   base_mva=100.0, name="syn118")


def main() -> None:
    net = build()
    diags = validate(net)
    if diags:
        raise SystemExit(f"generated case is invalid: {diags}")

    system = build_pf_system(net)
    state, report = newton_solve(system, system.flat_start(),
                                 NewtonOptions(max_iter=60))
    if not report.converged:
        raise SystemExit(f"generated case does not solve: {report.status}")

    summary = bus_power_summary(net, state)
    vms = [row.vm for row in summary.per_bus]
    print(f"solved in {report.iterations} iterations; "
          f"|V| in [{min(vms):.4f}, {max(vms):.4f}]; "
          f"loss {summary.total_loss.real * net.base_mva:.1f} MW; "
          f"gen {summary.total_gen.real * net.base_mva:.1f} MW")
    if not (0.9 < min(vms) and max(vms) < 1.1):
        raise SystemExit("voltage profile out of range; adjust parameters")

    # Ship the solved operating point in the bus matrix, like case files do.
    from dataclasses import replace
    per_bus = {row.bus: row for row in summary.per_bus}
    buses = tuple(replace(b, v_set=b.v_set if b.kind is not BusKind.PQ
                          else round(per_bus[b.id].vm, 4))
                  for b in net.buses)
    net = replace(net, buses=buses)

    out = Path(__file__).resolve().parents[1] / "src" / "gridstep" / "cases" / "syn118.m"
    out.write_text(write_case(net))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
