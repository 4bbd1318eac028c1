"""Figure rendering for study outputs.

Every runner that writes delimited output can also drop matplotlib figures
next to it; these helpers keep the styling in one place. The Agg backend is
forced so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (after backend selection)
import numpy as np  # noqa: E402

from .equations import PowerSummary  # noqa: E402
from .netmodel import Network  # noqa: E402


def plot_voltage_profile(summary: PowerSummary, net: Network, path) -> Path:
    """Bus voltage magnitudes in bus order, with the operating band."""
    buses = [row.bus for row in summary.per_bus]
    vm = [row.vm for row in summary.per_bus]
    bus_map = net.bus_map()
    lo = [bus_map[b].v_min for b in buses]
    hi = [bus_map[b].v_max for b in buses]

    fig, ax = plt.subplots(figsize=(8, 3.2))
    x = np.arange(len(buses))
    ax.plot(x, vm, ".-", lw=0.8, ms=3.5, label="|V|")
    ax.plot(x, lo, color="0.6", lw=0.8, ls="--", label="limits")
    ax.plot(x, hi, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("bus (ordered by id)")
    ax.set_ylabel("voltage magnitude [p.u.]")
    ax.set_title(f"{net.name or 'case'}: voltage profile")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def plot_convergence(histories: Sequence[tuple[str, Sequence[float]]],
                     path) -> Path:
    """Residual infinity-norm per iteration, log scale."""
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for label, hist in histories:
        hist = [max(h, 1e-17) for h in hist]
        ax.semilogy(range(len(hist)), hist, ".-", lw=0.9, ms=4, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual norm")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def plot_contingency_summary(result, path) -> Path:
    """Iteration histogram and convergence share for one batch."""
    iters = [r.iterations for r in result.rows]
    conv = [r.converged for r in result.rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2),
                                   gridspec_kw={"width_ratios": [3, 1]})
    if iters:
        bins = np.arange(min(iters), max(iters) + 2) - 0.5
        ax1.hist(iters, bins=bins, color="tab:blue", alpha=0.8)
    ax1.set_xlabel("iterations per instance")
    ax1.set_ylabel("instances")
    n_ok = sum(conv)
    ax2.bar(["converged", "failed"], [n_ok, len(conv) - n_ok],
            color=["tab:green", "tab:red"])
    ax2.set_ylabel("instances")
    fig.suptitle(f"contingency batch ({result.meta.get('method', '?')}, "
                 f"{result.meta.get('family', '?')})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def plot_mc_histograms(hists: dict[str, list[tuple]], focus_bus: int,
                       out_dir) -> list[Path]:
    """Voltage magnitude and angle histograms for the focus bus."""
    out = []
    titles = {"vm": "voltage magnitude [p.u.]", "va": "voltage angle [rad]"}
    for quantity, rows in hists.items():
        rows_b = [r for r in rows if r[0] == focus_bus]
        if not rows_b:
            continue
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        widths = [hi - lo for _, lo, hi, _ in rows_b]
        ax.bar([lo for _, lo, _, _ in rows_b],
               [c for _, _, _, c in rows_b],
               width=widths, align="edge", color="tab:blue", alpha=0.85)
        ax.set_xlabel(titles[quantity])
        ax.set_ylabel("samples")
        ax.set_title(f"bus {focus_bus}")
        fig.tight_layout()
        p = Path(out_dir) / f"histogram_{quantity}.png"
        fig.savefig(p, dpi=130)
        plt.close(fig)
        out.append(p)
    return out
