"""Command-line interface: pf, opf, contingency, montecarlo.

Exit codes: 0 success, 1 usage error, 2 parse/validation error,
3 solve failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import (CaseParseError, GridstepError, InputError, LayoutError,
                     NetworkValidationError, SolveFailure)
from .netmodel import NetworkDelta, load_case
from .netstep import GammaSchedule
from .studies import (ContingencyList, MonteCarloSpec, all_branch_outages,
                      default_opts, load_solution, run_contingency_batch,
                      run_montecarlo, run_opf, run_powerflow)

EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_SOLVE = 3


def _load_delta(path: str | None) -> NetworkDelta | None:
    if path is None:
        return None
    try:
        return NetworkDelta.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseParseError(f"cannot read delta file {path}: {exc}") from exc


def _common(case, tol, max_iter, family):
    net = load_case(case)
    opts = default_opts(family, tol=tol, max_iter=max_iter)
    return net, opts


@click.group()
def cli() -> None:
    """Steady-state grid solver with warm-start continuation."""


case_opt = click.option("--case", required=True, type=click.Path(exists=True),
                        help="case file (.m matrix dialect or .json mirror)")
warm_opt = click.option("--warm-start", type=click.Path(exists=True),
                        help="solution file of a previously solved network")
delta_opt = click.option("--delta", type=click.Path(exists=True),
                         help="JSON delta describing the change to apply")
method_opt = click.option("--method", type=click.Choice(["cold", "netstep"]),
                          default="cold", show_default=True)
out_opt = click.option("--out", type=click.Path(), default=None,
                       help="directory for solution/CSV/figure outputs")
tol_opt = click.option("--tol", type=float, default=None,
                       help="residual tolerance (default 1e-8)")
maxiter_opt = click.option("--max-iter", type=int, default=None,
                           help="iteration limit per solve (default 50)")
jobs_opt = click.option("--jobs", type=int, default=1, show_default=True,
                        help="parallel worker threads")


@cli.command()
@case_opt
@warm_opt
@delta_opt
@method_opt
@click.option("--family", type=click.Choice(["pf", "ipf"]), default="pf",
              show_default=True, help="plain or feasibility-quantifying flow")
@tol_opt
@maxiter_opt
@out_opt
def pf(case, warm_start, delta, method, family, tol, max_iter, out):
    """Solve steady state (power flow or infeasibility power flow)."""
    net, opts = _common(case, tol, max_iter, family)
    warm = load_solution(warm_start) if warm_start else None
    if method == "netstep" and warm is None:
        raise click.UsageError("--method netstep requires --warm-start")
    state, report, result = run_powerflow(
        net, family=family, method=method, warm_start=warm,
        delta=_load_delta(delta), opts=opts, out_dir=out)
    click.echo(result.to_csv(), nl=False)
    if not report.converged:
        raise SolveFailure(f"solve did not converge: {report.status.value}",
                           report=report)


@cli.command()
@case_opt
@warm_opt
@delta_opt
@method_opt
@tol_opt
@maxiter_opt
@out_opt
def opf(case, warm_start, delta, method, tol, max_iter, out):
    """Solve the optimal dispatch problem."""
    net, opts = _common(case, tol, max_iter, "opf")
    warm = load_solution(warm_start) if warm_start else None
    if method == "netstep" and warm is None:
        raise click.UsageError("--method netstep requires --warm-start")
    state, report, result = run_opf(
        net, method=method, warm_start=warm, delta=_load_delta(delta),
        opts=opts, out_dir=out)
    click.echo(result.to_csv(), nl=False)
    if not report.converged:
        raise SolveFailure(f"solve did not converge: {report.status.value}",
                           report=report)


@cli.command()
@case_opt
@click.option("--list", "list_path", type=click.Path(exists=True),
              help="JSON contingency list")
@click.option("--all-branches", is_flag=True,
              help="generate one outage per in-service branch")
@click.option("--family", type=click.Choice(["pf", "ipf", "opf"]),
              default="ipf", show_default=True)
@click.option("--method", type=click.Choice(["cold", "netstep"]),
              default="netstep", show_default=True)
@jobs_opt
@tol_opt
@maxiter_opt
@out_opt
def contingency(case, list_path, all_branches, family, method, jobs, tol,
                max_iter, out):
    """Batch outage analysis against one base case."""
    net, opts = _common(case, tol, max_iter, family)
    if list_path is None and not all_branches:
        raise click.UsageError("provide --list or --all-branches")
    if list_path is not None:
        try:
            clist = ContingencyList.from_dict(
                json.loads(Path(list_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CaseParseError(f"cannot read {list_path}: {exc}") from exc
    else:
        clist = all_branch_outages(net)
    result = run_contingency_batch(
        net, clist, family=family, method=method, jobs=jobs, opts=opts,
        out_dir=out)
    agg = result.aggregate()
    click.echo(json.dumps({**agg, **result.meta}, indent=1))


@cli.command()
@case_opt
@click.option("--samples", type=int, required=True)
@click.option("--sigma", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--family", type=click.Choice(["pf", "ipf"]), default="pf",
              show_default=True)
@method_opt
@click.option("--scale-gens", default="",
              help="comma-separated generator ids whose setpoints also vary")
@click.option("--buses", default="",
              help="comma-separated bus ids to histogram (default: all)")
@jobs_opt
@tol_opt
@maxiter_opt
@out_opt
def montecarlo(case, samples, sigma, seed, family, method, scale_gens, buses,
               jobs, tol, max_iter, out):
    """Sampled load/generation perturbations around the ideal case."""
    net, opts = _common(case, tol, max_iter, family)

    def _ids(text):
        return tuple(int(t) for t in text.split(",") if t.strip())

    spec = MonteCarloSpec(samples=samples, sigma=sigma, seed=seed,
                          gen_targets=_ids(scale_gens),
                          buses=_ids(buses) or None)
    result, _ = run_montecarlo(net, spec, family=family, method=method,
                               jobs=jobs, opts=opts, out_dir=out)
    agg = result.aggregate()
    click.echo(json.dumps({**agg, **result.meta}, indent=1))


def main(argv=None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (CaseParseError, NetworkValidationError, InputError,
            LayoutError) as exc:
        click.echo(f"invalid input: {exc}", err=True)
        return EXIT_INVALID
    except SolveFailure as exc:
        click.echo(f"solve failure: {exc}", err=True)
        return EXIT_SOLVE
    except GridstepError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_SOLVE
    except click.exceptions.Abort:
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
