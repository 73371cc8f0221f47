"""SVG figures for runs: bench scatter, mean-shift check curves, EV paths.

SVGs are written with a fixed hash salt and no date so reruns are stable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .risk_bench import BenchMethod  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ccmpc"

_LABELS = {
    BenchMethod.CC_MTA: "CC-MTA",
    BenchMethod.CVAR_CUT: "CVaR-cut",
    BenchMethod.CC_MRA: "CC-MRA",
    BenchMethod.CC_SCENARIO: "scenario",
    BenchMethod.CVAR_SAA: "CVaR-SAA",
    BenchMethod.CVAR_DR: "CVaR-DR",
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_bench(results, path, epsilon: float = 0.05):
    """Per-repetition optimal values (left) and test violation rates (right)."""
    fig, (ax_x, ax_v) = plt.subplots(1, 2, figsize=(9, 3.5))
    for n, method in enumerate(BenchMethod):
        rs = [r for r in results if r.method is method]
        if not rs:
            continue
        xs = np.full(len(rs), n, dtype=float)
        ax_x.scatter(xs, [r.x_star for r in rs], s=6, alpha=0.5)
        ax_v.scatter(xs, [r.violation_rate for r in rs], s=6, alpha=0.5)
    for ax in (ax_x, ax_v):
        ax.set_xticks(range(len(BenchMethod)))
        ax.set_xticklabels([_LABELS[m] for m in BenchMethod], rotation=30, fontsize=8)
    ax_v.axhline(epsilon, color="k", lw=0.8, ls="--")
    ax_x.set_ylabel("x*")
    ax_v.set_ylabel("violation rate")
    fig.tight_layout()
    _save(fig, path)


def plot_assumption(table, path):
    """Gamma * g against h for every checked index, one colour per planning step."""
    fig, ax = plt.subplots(figsize=(5, 4))
    taus = sorted({r["tau"] for r in table})
    for tau in taus:
        rows = [r for r in table if r["tau"] == tau]
        ax.scatter([r["gamma_g"] for r in rows], [r["h"] for r in rows], s=8, label=f"tau={tau}")
    hi = max([max(r["gamma_g"], r["h"]) for r in table], default=1.0)
    ax.plot([0, hi], [0, hi], color="k", lw=0.8)
    ax.set_xlabel("gamma * g")
    ax.set_ylabel("h")
    if taus:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_paths(traces: dict, path, goal=None):
    """Executed EV positions, one line per planner label."""
    fig, ax = plt.subplots(figsize=(7, 3))
    for label, states in traces.items():
        xy = np.asarray(states)[:, :2]
        ax.plot(xy[:, 0], xy[:, 1], marker=".", label=label)
    if goal is not None:
        ax.plot(*goal, marker="*", color="k", ls="none")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
