"""Study harnesses: single solves, contingency batches, and Monte Carlo.

Each runner works on an immutable base network, uses the continuation layer
for warm starts, and reports per-instance rows plus aggregate statistics.
Batches execute on a thread pool; instances are independent, random draws
are made up front, and rows are ordered by instance id, so results are
invariant under the parallelism degree. Wall time is recorded for context
but never part of any determinism comparison.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Sequence

import numpy as np

from .equations import (SolverState, build_pf_system, bus_power_summary)
from .errors import (GridstepError, InputError, LayoutError, SolveFailure)
from .feasibility import (build_infeasibility_system, infeasibility_report,
                          solve_infeasibility)
from .netmodel import (Network, NetworkDelta, BranchStatus, Status,
                       network_from_dict, network_to_dict)
from .netstep import (Family, GammaSchedule, warm_start_solve)
from .opf import (ContingencyOpfProblem, OpfProblem, build_contingency_opf,
                  build_opf_system, solve_opf)
from .solver import NewtonOptions, SolveReport, newton_solve

Method = Literal["cold", "netstep"]

SOLUTION_FORMAT = "gridstep-solution-v1"


def default_opts(family: Family, tol: float | None = None,
                 max_iter: int | None = None) -> NewtonOptions:
    """Family defaults: clamped steps for power flow, guarded for KKT."""
    if family == "opf":
        opts = NewtonOptions(limiting=None, diverge_norm=1e9)
    else:
        opts = NewtonOptions()
    if tol is not None:
        opts = replace(opts, tol_residual=tol)
    if max_iter is not None:
        opts = replace(opts, max_iter=max_iter)
    return opts


def solve_cold(net: Network, family: Family, opts: NewtonOptions | None = None,
               *, opf_problem: OpfProblem | None = None):
    """Cold solve of one family; returns (system, state, report)."""
    opts = opts or default_opts(family)
    if family == "pf":
        system = build_pf_system(net)
        state, report = newton_solve(system, system.flat_start(), opts)
        return system, state, report
    if family == "ipf":
        return solve_infeasibility(net, opts)
    if family == "opf":
        problem = opf_problem if opf_problem is not None else OpfProblem(net)
        if problem.net is not net:
            problem = replace(problem, net=net)
        system = build_opf_system(problem)
        state, report = solve_opf(problem, opts=opts)
        return system, state, report
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Solution files
# ---------------------------------------------------------------------------

def _encode_key(key: Any):
    if isinstance(key, tuple):
        return [_encode_key(k) for k in key]
    return key


def _decode_key(key: Any):
    if isinstance(key, list):
        return tuple(_decode_key(k) for k in key)
    return key


@dataclass(frozen=True)
class WarmStart:
    """A prior solution loaded from disk: source network plus labeled values."""

    family: Family
    net: Network
    values: dict[tuple[str, Any], float]
    summary: dict


def save_solution(path, family: Family, net: Network, state: SolverState,
                  summary: Mapping[str, Any] | None = None) -> None:
    doc = {
        "format": SOLUTION_FORMAT,
        "family": family,
        "case": net.name,
        "network": network_to_dict(net),
        "values": [[kind, _encode_key(key), float(v)]
                   for (kind, key), v in zip(state.layout.entries, state.values)],
        "summary": dict(summary or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_solution(path) -> WarmStart:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read solution file {path}: {exc}") from exc
    if doc.get("format") != SOLUTION_FORMAT:
        raise InputError(f"{path} is not a solution file (format field)")
    net = network_from_dict(doc["network"])
    values = {(kind, _decode_key(key)): float(v)
              for kind, key, v in doc["values"]}
    return WarmStart(doc["family"], net, values, doc.get("summary", {}))


def verify_solution(ws: WarmStart, tol: float = 1e-6) -> float:
    """Residual norm of a stored solution against its own network."""
    if ws.family == "pf":
        system = build_pf_system(ws.net)
    elif ws.family == "ipf":
        system = build_infeasibility_system(ws.net)
    elif ws.family == "opf":
        system = build_opf_system(OpfProblem(ws.net))
    else:
        raise InputError(f"unknown family {ws.family!r}")
    vals = np.array([ws.values[lbl] for lbl in system.layout.entries])
    state = SolverState(system.layout, vals)
    resid = system.evaluate(state).residual
    norm = float(np.max(np.abs(resid))) if resid.size else 0.0
    if norm > tol:
        raise SolveFailure(f"stored solution violates its equations "
                           f"(|F| = {norm:.3e} > {tol:g})")
    return norm


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceResult:
    id: str
    converged: bool
    iterations: int
    time_s: float
    objective: float | None = None
    slack_norm: float | None = None
    message: str = ""


@dataclass
class StudyResult:
    rows: list[InstanceResult]
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        n = len(self.rows)
        conv = sum(1 for r in self.rows if r.converged)
        iters = [r.iterations for r in self.rows]
        times = [r.time_s for r in self.rows]
        agg = {
            "instances": n,
            "converged": conv,
            "convergence_rate": conv / n if n else 1.0,
            "total_time_s": float(sum(times)),
        }
        if iters:
            agg.update({
                "iterations_min": int(min(iters)),
                "iterations_median": float(np.median(iters)),
                "iterations_mean": float(np.mean(iters)),
                "iterations_max": int(max(iters)),
            })
        return agg

    def to_csv(self, include_time: bool = True) -> str:
        cols = ["id", "converged", "iterations", "time_s", "objective",
                "slack_norm"]
        if not include_time:
            cols.remove("time_s")
        lines = [",".join(cols)]
        for r in sorted(self.rows, key=lambda r: r.id):
            cells = {
                "id": r.id,
                "converged": "true" if r.converged else "false",
                "iterations": str(r.iterations),
                "time_s": f"{r.time_s:.6f}",
                "objective": repr(r.objective) if r.objective is not None else "",
                "slack_norm": repr(r.slack_norm) if r.slack_norm is not None else "",
            }
            lines.append(",".join(cells[c] for c in cols))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Single-case runs
# ---------------------------------------------------------------------------

def _summary_for(family: Family, net: Network, state: SolverState,
                 report: SolveReport, system) -> dict:
    out = {
        "family": family,
        "converged": report.converged,
        "iterations": report.iterations,
        "status": report.status.value,
    }
    if family == "ipf":
        rep = infeasibility_report(system, state, tol=1e-5) \
            if report.converged else None
        if rep is not None:
            out["slack_total"] = rep.total
            out["slack_max"] = rep.max_magnitude
    if family == "opf":
        out["objective_dollars"] = system.objective_dollars(state)
        out["slack_max"] = system.slack_norm(state)
        out.update(system.multiplier_extrema(state))
    return out


def run_powerflow(net: Network, *,
                  family: Family = "pf",
                  method: Method = "cold",
                  warm_start: WarmStart | None = None,
                  delta: NetworkDelta | None = None,
                  opts: NewtonOptions | None = None,
                  schedule: GammaSchedule | None = None,
                  out_dir=None) -> tuple[SolverState, SolveReport, StudyResult]:
    """Solve one case (power flow or feasibility family), optionally warm.

    With ``method="netstep"`` a warm start is mandatory and the solved
    network is apply_delta(warm_start.net, delta). Writes a solution file
    plus figures when ``out_dir`` is given.
    """
    if family not in ("pf", "ipf"):
        raise InputError("run_powerflow handles the pf/ipf families")
    opts = opts or default_opts(family)
    t0 = time.perf_counter()
    if method == "netstep":
        if warm_start is None:
            raise InputError("network-stepping needs --warm-start (and its delta)")
        if warm_start.family != family:
            raise InputError(f"warm start family {warm_start.family!r} does not "
                             f"match requested family {family!r}")
        target_net = warm_start.net if delta is None else None
        state, path, report = warm_start_solve(
            warm_start.net, warm_start.values, delta or NetworkDelta(),
            family, schedule=schedule, opts=opts)
        net = target_net or _applied(warm_start.net, delta)
        iterations = path.total_iterations
        anchors = _anchors_of(warm_start.values)
        system = (build_pf_system(net, anchor_voltages=anchors) if family == "pf"
                  else build_infeasibility_system(net, anchor_voltages=anchors))
        extra = {"gamma_path": path.to_dict()}
    else:
        if delta is not None:
            net = _applied(net, delta)
        system, state, report = solve_cold(net, family, opts)
        iterations = report.iterations
        extra = {}
    wall = time.perf_counter() - t0

    summary = _summary_for(family, net, state, report, system)
    summary.update(extra)
    row = InstanceResult(net.name or "case", report.converged, iterations,
                         wall,
                         objective=summary.get("slack_total"),
                         slack_norm=summary.get("slack_max"),
                         message=report.message)
    result = StudyResult([row], meta={"family": family, "method": method})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_solution(out / "solution.json", family, net, state, summary)
        if family == "ipf" and report.converged:
            rep = infeasibility_report(system, state, tol=1e-5)
            (out / "infeasibility.json").write_text(json.dumps(rep.to_dict(), indent=1))
        (out / "results.csv").write_text(result.to_csv())
        from . import report as figs
        figs.plot_voltage_profile(bus_power_summary(net, state), net,
                                  out / "voltage_profile.png")
        figs.plot_convergence([(net.name or "case", report.residual_history)],
                              out / "convergence.png")
    return state, report, result


def _applied(net: Network, delta: NetworkDelta | None) -> Network:
    from .netmodel import apply_delta

    return apply_delta(net, delta) if delta else net


def _anchors_of(values: Mapping[tuple[str, Any], float]) -> dict[int, complex]:
    anchors: dict[int, complex] = {}
    for (kind, key), val in values.items():
        if kind == "vr":
            anchors[key] = complex(val, anchors.get(key, 0j).imag)
        elif kind == "vi":
            anchors[key] = complex(anchors.get(key, 0j).real, val)
    return anchors


def run_opf(net: Network, *,
            method: Method = "cold",
            warm_start: WarmStart | None = None,
            delta: NetworkDelta | None = None,
            opts: NewtonOptions | None = None,
            schedule: GammaSchedule | None = None,
            problem: OpfProblem | None = None,
            out_dir=None) -> tuple[SolverState, SolveReport, StudyResult]:
    """Optimal dispatch for one case, cold or warm-started."""
    opts = opts or default_opts("opf")
    t0 = time.perf_counter()
    if method == "netstep":
        if warm_start is None:
            raise InputError("network-stepping needs --warm-start (and its delta)")
        if warm_start.family != "opf":
            raise InputError("warm start must come from an opf solve")
        state, path, report = warm_start_solve(
            warm_start.net, warm_start.values, delta or NetworkDelta(),
            "opf", schedule=schedule, opts=opts, opf_options=problem)
        net = _applied(warm_start.net, delta)
        iterations = path.total_iterations
        extra = {"gamma_path": path.to_dict()}
    else:
        if delta is not None:
            net = _applied(net, delta)
        prob = problem if problem is not None else OpfProblem(net)
        if prob.net is not net:
            prob = replace(prob, net=net)
        state, report = solve_opf(prob, opts=opts)
        iterations = report.iterations
        extra = {}
    system = build_opf_system(problem if problem is not None and
                              problem.net is net else
                              (replace(problem, net=net) if problem is not None
                               else OpfProblem(net)))
    wall = time.perf_counter() - t0

    summary = _summary_for("opf", net, state, report, system)
    summary.update(extra)
    row = InstanceResult(net.name or "case", report.converged, iterations, wall,
                         objective=summary.get("objective_dollars"),
                         slack_norm=summary.get("slack_max"),
                         message=report.message)
    result = StudyResult([row], meta={"family": "opf", "method": method})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_solution(out / "dispatch.json", "opf", net, state, summary)
        (out / "results.csv").write_text(result.to_csv())
        from . import report as figs
        figs.plot_voltage_profile(bus_power_summary(net, state), net,
                                  out / "voltage_profile.png")
        figs.plot_convergence([(net.name or "case", report.residual_history)],
                              out / "convergence.png")
    return state, report, result


# ---------------------------------------------------------------------------
# Contingency batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContingencyCase:
    id: str
    delta: NetworkDelta


@dataclass(frozen=True)
class ContingencyList:
    cases: tuple[ContingencyCase, ...]

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise InputError("contingency ids must be unique")

    def __len__(self) -> int:
        return len(self.cases)

    def to_dict(self) -> dict:
        return {"contingencies": [
            {"id": c.id, **c.delta.to_dict()} for c in self.cases]}

    @staticmethod
    def from_dict(data: dict) -> "ContingencyList":
        cases = tuple(
            ContingencyCase(str(item["id"]), NetworkDelta.from_dict(item))
            for item in data.get("contingencies", []))
        return ContingencyList(cases)


def all_branch_outages(net: Network) -> ContingencyList:
    """One single-branch outage per in-service branch."""
    cases = tuple(
        ContingencyCase(f"branch-{br.id}",
                        NetworkDelta((BranchStatus(br.id, Status.OUT),)))
        for br in sorted(net.branches, key=lambda b: b.id)
        if br.status is Status.IN)
    return ContingencyList(cases)


def run_contingency_batch(net: Network,
                          contingencies: ContingencyList,
                          *,
                          family: Family = "ipf",
                          method: Method = "netstep",
                          jobs: int = 1,
                          opts: NewtonOptions | None = None,
                          schedule: GammaSchedule | None = None,
                          ramp: float | Mapping[int, float] = 1.0,
                          out_dir=None) -> StudyResult:
    """Per-outage solves against one base case, in parallel.

    With ``method="netstep"`` every instance warm-starts from the base
    solution of the same family; ``family="opf"`` solves the contingency
    dispatch problem (slacks, ramp limits around the base dispatch).
    Per-instance failures become rows, never batch aborts.
    """
    opts = opts or default_opts(family)
    for case in contingencies.cases:
        case.delta.inverse(net)  # validates references against the base

    base_problem = OpfProblem(net) if family == "opf" else None
    base_system, base_state, base_report = solve_cold(
        net, family, opts, opf_problem=base_problem)
    if not base_report.converged:
        raise SolveFailure("base case did not converge; cannot run the batch",
                           report=base_report)

    def one(case: ContingencyCase) -> InstanceResult:
        t0 = time.perf_counter()
        try:
            if family == "opf":
                cprob = build_contingency_opf(base_problem, base_state,
                                              case.delta, ramp)
                prob = cprob.problem()
                if method == "netstep":
                    state, path, rep = warm_start_solve(
                        net, base_state, case.delta, "opf",
                        schedule=schedule, opts=opts, opf_options=prob)
                    iters = path.total_iterations
                else:
                    state, rep = solve_opf(prob, opts=opts)
                    iters = rep.iterations
                system = build_opf_system(prob)
                objective = system.objective_dollars(state)
                slack = system.slack_norm(state)
            else:
                if method == "netstep":
                    state, path, rep = warm_start_solve(
                        net, base_state, case.delta, family,
                        schedule=schedule, opts=opts)
                    iters = path.total_iterations
                else:
                    target = _applied(net, case.delta)
                    _, state, rep = solve_cold(target, family, opts)
                    iters = rep.iterations
                objective = None
                slack = None
                if family == "ipf":
                    target = _applied(net, case.delta)
                    sys_t = build_infeasibility_system(
                        target, anchor_voltages=_state_anchors(base_state))
                    if method != "netstep":
                        sys_t = build_infeasibility_system(target)
                    if rep.converged:
                        irep = infeasibility_report(sys_t, state, tol=1e-5)
                        objective = irep.total
                        slack = irep.max_magnitude
            return InstanceResult(case.id, rep.converged, iters,
                                  time.perf_counter() - t0,
                                  objective=objective, slack_norm=slack,
                                  message=rep.message)
        except GridstepError as exc:
            return InstanceResult(case.id, False, 0,
                                  time.perf_counter() - t0,
                                  message=f"{type(exc).__name__}: {exc}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, contingencies.cases))
    else:
        rows = [one(c) for c in contingencies.cases]
    rows.sort(key=lambda r: r.id)

    result = StudyResult(rows, meta={
        "family": family, "method": method, "jobs": jobs,
        "base_iterations": base_report.iterations,
    })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(result.to_csv())
        (out / "aggregate.json").write_text(
            json.dumps({**result.aggregate(), **result.meta}, indent=1))
        from . import report as figs
        figs.plot_contingency_summary(result, out / "contingency_summary.png")
    return result


def _state_anchors(state: SolverState) -> dict[int, complex]:
    anchors: dict[int, complex] = {}
    for (kind, key), val in zip(state.layout.entries, state.values):
        if kind == "vr":
            anchors[key] = complex(val, anchors.get(key, 0j).imag)
        elif kind == "vi":
            anchors[key] = complex(anchors.get(key, 0j).real, val)
    return anchors


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloSpec:
    """Gaussian perturbation study around the ideal case.

    Per-element multipliers are drawn independently from N(1, sigma) and
    clipped at zero; loads are always scaled, generators only when listed
    in ``gen_targets`` (setpoint scaling). ``buses=None`` histograms every
    bus.
    """

    samples: int
    sigma: float = 0.2
    seed: int = 0
    scale_loads: bool = True
    gen_targets: tuple[int, ...] = ()
    buses: tuple[int, ...] | None = None
    bins: int = 20

    def __post_init__(self):
        if self.samples < 1:
            raise InputError("samples must be >= 1")
        if self.sigma < 0:
            raise InputError("sigma must be >= 0")


def sample_deltas(net: Network, spec: MonteCarloSpec) -> list[NetworkDelta]:
    """The deterministic draw sequence for a spec (независимо of jobs)."""
    from .netmodel import GenSetpoint, LoadScale

    rng = np.random.default_rng(spec.seed)
    load_buses = sorted({l.bus for l in net.loads}) if spec.scale_loads else []
    gen_map = net.gen_map()
    targets = sorted(spec.gen_targets)
    for gid in targets:
        if gid not in gen_map:
            raise InputError(f"gen target {gid} does not exist")
    deltas = []
    for _ in range(spec.samples):
        changes: list = []
        for bus in load_buses:
            changes.append(LoadScale(bus, max(float(rng.normal(1.0, spec.sigma)), 0.0)))
        for gid in targets:
            m = max(float(rng.normal(1.0, spec.sigma)), 0.0)
            changes.append(GenSetpoint(gid, gen_map[gid].p_set * m))
        deltas.append(NetworkDelta(tuple(changes)))
    return deltas


def run_montecarlo(net: Network, spec: MonteCarloSpec, *,
                   family: Family = "pf",
                   method: Method = "netstep",
                   jobs: int = 1,
                   opts: NewtonOptions | None = None,
                   schedule: GammaSchedule | None = None,
                   out_dir=None) -> tuple[StudyResult, dict[str, list[tuple]]]:
    """Sampled perturbations of the ideal case, warm-started from it.

    Returns the per-sample table and histogram rows
    ``{"vm": [(bus, lo, hi, count), ...], "va": [...]}`` over converged
    samples at the selected buses.
    """
    opts = opts or default_opts(family)
    deltas = sample_deltas(net, spec)
    base_system, base_state, base_report = solve_cold(net, family, opts)
    if not base_report.converged:
        raise SolveFailure("ideal case did not converge", report=base_report)

    sel_buses = (sorted(spec.buses) if spec.buses is not None
                 else [b.id for b in sorted(net.buses, key=lambda b: b.id)])
    for b in sel_buses:
        if b not in net.bus_map():
            raise InputError(f"histogram bus {b} does not exist")

    def one(k: int) -> tuple[InstanceResult, dict[int, complex] | None]:
        t0 = time.perf_counter()
        try:
            if method == "netstep":
                state, path, rep = warm_start_solve(
                    net, base_state, deltas[k], family,
                    schedule=schedule, opts=opts)
                iters = path.total_iterations
            else:
                target = _applied(net, deltas[k])
                _, state, rep = solve_cold(target, family, opts)
                iters = rep.iterations
            volts = {b: state.bus_voltage(b) for b in sel_buses} \
                if rep.converged else None
            slack = None
            if family == "ipf" and rep.converged:
                target = _applied(net, deltas[k])
                sys_t = build_infeasibility_system(
                    target, anchor_voltages=_state_anchors(base_state)) \
                    if method == "netstep" else build_infeasibility_system(target)
                slack = infeasibility_report(sys_t, state, tol=1e-5).max_magnitude
            return (InstanceResult(f"s{k:04d}", rep.converged, iters,
                                   time.perf_counter() - t0,
                                   slack_norm=slack, message=rep.message),
                    volts)
        except GridstepError as exc:
            return (InstanceResult(f"s{k:04d}", False, 0,
                                   time.perf_counter() - t0,
                                   message=f"{type(exc).__name__}: {exc}"),
                    None)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, range(spec.samples)))
    else:
        outcomes = [one(k) for k in range(spec.samples)]

    rows = [r for r, _ in outcomes]
    volt_rows = [v for _, v in outcomes if v is not None]

    hists: dict[str, list[tuple]] = {"vm": [], "va": []}
    for bus in sel_buses:
        vms = np.array([abs(v[bus]) for v in volt_rows])
        vas = np.array([np.angle(v[bus]) for v in volt_rows])
        for quantity, data in (("vm", vms), ("va", vas)):
            if data.size == 0:
                continue
            counts, edges = np.histogram(data, bins=spec.bins)
            hists[quantity].extend(
                (bus, float(edges[i]), float(edges[i + 1]), int(counts[i]))
                for i in range(len(counts)))

    result = StudyResult(rows, meta={
        "family": family, "method": method, "jobs": jobs,
        "samples": spec.samples, "sigma": spec.sigma, "seed": spec.seed,
        "base_iterations": base_report.iterations,
    })

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(result.to_csv())
        for quantity in ("vm", "va"):
            (out / f"histogram_{quantity}.csv").write_text(
                histogram_csv(hists[quantity]))
        (out / "aggregate.json").write_text(
            json.dumps({**result.aggregate(), **result.meta}, indent=1))
        from . import report as figs
        figs.plot_mc_histograms(hists, sel_buses[0], out)
    return result, hists


def histogram_csv(rows: Sequence[tuple]) -> str:
    lines = ["bus,bin_low,bin_high,count"]
    lines += [f"{bus},{repr(lo)},{repr(hi)},{count}"
              for bus, lo, hi, count in rows]
    return "\n".join(lines) + "\n"
