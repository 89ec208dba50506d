"""Report figures rendered next to the delimited outputs.

Everything here draws from the same artifacts the CLI already writes (the
summary dict and the per-slot trace rows), so figures can be regenerated
from disk. Uses the Agg backend; every function returns the paths it wrote.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

FIG_DPI = 120

_SWEEP_METRICS = (
    ("utility", "system utility"),
    ("response_mean_ms", "mean response time (ms)"),
    ("block_rate", "block rate"),
    ("satisfaction_ratio", "satisfaction ratio"),
)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def render_run_figures(summary: dict, trace_rows, outdir) -> list[Path]:
    """Per-run report: outcome counts, plus queue/energy traces when available."""
    outdir = Path(outdir)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = ["served", "blocked", "dropped", "late", "pending"]
    ax.bar(labels, [summary[k] for k in labels], color="steelblue")
    ax.set_ylabel("tasks")
    ax.set_title(f"{summary['algorithm']} outcomes (seed {summary['seed']})")
    written.append(_save(fig, outdir / "fig_outcomes.png"))

    if trace_rows:
        arr = np.asarray([(r[0], r[3], r[4], r[5], r[6], r[10]) for r in trace_rows], dtype=float)
        slots = np.unique(arr[:, 0])
        per_slot_max = {}
        for col, name in ((1, "Q"), (2, "H"), (3, "Z"), (4, "W")):
            series = np.full(len(slots), np.nan)
            order = arr[:, 0].argsort(kind="stable")
            sorted_rows = arr[order]
            bounds_idx = np.searchsorted(sorted_rows[:, 0], slots)
            bounds_idx = np.append(bounds_idx, len(sorted_rows))
            for i in range(len(slots)):
                series[i] = sorted_rows[bounds_idx[i]:bounds_idx[i + 1], col].max()
            per_slot_max[name] = series

        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 4.6), sharex=True)
        ax1.plot(slots, per_slot_max["Q"], label="max Q", lw=0.8)
        ax1.plot(slots, per_slot_max["H"], label="max H", lw=0.8)
        ax1.legend(loc="upper right", fontsize=8)
        ax1.set_ylabel("backlog / age")
        ax2.plot(slots, per_slot_max["Z"], label="max Z", lw=0.8)
        ax2.plot(slots, per_slot_max["W"], label="max W", lw=0.8)
        ax2.legend(loc="upper right", fontsize=8)
        ax2.set_ylabel("virtual queues")
        ax2.set_xlabel("slot")
        written.append(_save(fig, outdir / "fig_queues.png"))

        fig, ax = plt.subplots(figsize=(6, 3.0))
        order = arr[:, 0].argsort(kind="stable")
        sorted_rows = arr[order]
        bounds_idx = np.append(np.searchsorted(sorted_rows[:, 0], slots), len(sorted_rows))
        energy = np.array(
            [sorted_rows[bounds_idx[i]:bounds_idx[i + 1], 5].sum() for i in range(len(slots))]
        )
        running = np.cumsum(energy) / np.arange(1, len(slots) + 1)
        ax.plot(slots, running, lw=0.9, label="running mean energy (all BSs)")
        total_budget = float(np.sum(summary["energy_budget_j"]))
        ax.axhline(total_budget, color="crimson", ls="--", lw=0.9, label="total budget")
        ax.set_xlabel("slot")
        ax.set_ylabel("J per slot")
        ax.legend(fontsize=8)
        written.append(_save(fig, outdir / "fig_energy.png"))
    return written


def render_sweep_figures(rows: list[dict], param: str, outdir) -> list[Path]:
    """Metric-versus-parameter curves from the combined sweep table."""
    outdir = Path(outdir)
    written = []
    values = sorted({row["value"] for row in rows})
    for metric, label in _SWEEP_METRICS:
        means, errs = [], []
        for v in values:
            pts = [row[metric] for row in rows if row["value"] == v]
            means.append(float(np.mean(pts)))
            errs.append(float(np.std(pts) / np.sqrt(len(pts))) if len(pts) > 1 else 0.0)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.errorbar(values, means, yerr=errs, marker="o", capsize=3)
        ax.set_xlabel(param)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        written.append(_save(fig, outdir / f"fig_sweep_{metric}.png"))
    return written
