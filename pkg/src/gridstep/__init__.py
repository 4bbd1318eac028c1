"""Steady-state AC grid solver with warm-start continuation.

Solves power flow, feasibility-quantifying power flow, and optimal dispatch
on one current-injection equation stack, and accelerates re-solves after
discrete network changes by ramping out the residual the prior solution
leaves in the new network's equations.
"""

from .equations import (EquationSystem, ResidualJacobian, SolverState,
                        StateLayout, build_pf_system, bus_power_summary)
from .errors import (CaseParseError, GridstepError, HomotopyStalled,
                     InputError, LayoutError, NetworkValidationError,
                     SingularJacobianError, SolveFailure)
from .feasibility import (InfeasibilitySystem, build_infeasibility_system,
                          infeasibility_report, solve_infeasibility)
from .netmodel import (Branch, BranchStatus, Bus, BusKind, CostModel,
                       Generator, GenSetpoint, GenStatus, Load, LoadScale,
                       Network, NetworkDelta, ShuntChange, Status,
                       apply_delta, islands, load_case, network_from_json,
                       network_to_json, parse_case, validate, write_case)
from .netstep import (GammaSchedule, HomotopyPath, HomotopyProblem,
                      extract_residual, trace, warm_start_solve)
from .opf import (ContingencyOpfProblem, KktSystem, OpfProblem,
                  build_contingency_opf, build_opf_system, solve_opf)
from .solver import (NewtonOptions, ReusableLu, SolveReport, SolveStatus,
                     VoltageClamp, fd_jacobian_check, newton_solve,
                     sparse_lu_solve)
from .studies import (ContingencyCase, ContingencyList, MonteCarloSpec,
                      StudyResult, all_branch_outages, load_solution,
                      run_contingency_batch, run_montecarlo, run_opf,
                      run_powerflow, save_solution, verify_solution)

__version__ = "0.1.0"


def case_path(name: str):
    """Path of a bundled test case ('case14' or 'syn118')."""
    from importlib.resources import files

    return files(__package__) / "cases" / f"{name}.m"


def load_bundled_case(name: str) -> Network:
    return parse_case(case_path(name).read_text(), name=name)
