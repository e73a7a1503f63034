"""Figures written next to benchmark and inspection reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.2),
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def latency_figure(report, path) -> Path:
    """Per-query cold latency against mean warm latency, plus per-run wall clock."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_run) = plt.subplots(1, 2, gridspec_kw={"width_ratios": [3, 2]})
        x = np.arange(report.n_queries)
        warm = [np.mean(w) if w else np.nan for w in report.warm]
        ax.bar(x - 0.2, report.cold, width=0.4, label="cold (first run)", color="tab:red")
        ax.bar(x + 0.2, warm, width=0.4, label="warm (mean of later runs)", color="tab:blue")
        ax.set_yscale("log")
        ax.set_xlabel("query")
        ax.set_ylabel("latency (s)")
        ax.set_title(f"{report.mode} workload, k={report.k}")
        ax.legend()

        runs = np.arange(1, len(report.workload) + 1)
        ax_run.plot(runs, report.workload, marker="o", color="k")
        ax_run.set_xlabel("run")
        ax_run.set_ylabel("workload time (s)")
        ax_run.set_xticks(runs)
        return _save(fig, path)


def rounds_figure(reports, path) -> Path:
    """Mean latency of each follow-up round, one line per report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in reports:
            per_query = np.array([f for f in r.followup if f], dtype=float)
            if per_query.size == 0:
                continue
            per_round = per_query.reshape(len(per_query), r.runs, r.rounds).mean(axis=(0, 1))
            ax.plot(np.arange(1, r.rounds + 1), per_round, marker="o", label=r.mode)
        ax.set_yscale("log")
        ax.set_xlabel("follow-up round")
        ax.set_ylabel("mean latency (s)")
        ax.legend()
        return _save(fig, path)


def cluster_size_figure(sizes, path, bins: int = 30) -> Path:
    sizes = np.asarray(sizes)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(sizes, bins=max(1, min(bins, len(np.unique(sizes)))), color="tab:gray", edgecolor="k")
        ax.set_xlabel("items per cluster")
        ax.set_ylabel("clusters")
        ax.set_title(f"{len(sizes)} clusters, {int(sizes.sum())} items")
        return _save(fig, path)
