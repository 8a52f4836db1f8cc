"""Matplotlib rendering for sweep reports, training curves, and t-tests.

Figures are written straight to files with the Agg backend, so rendering
works in headless environments. These are companions to the CSV and JSON
reports, not a replacement: every number in a figure is also present in a
delimited artifact.
"""

from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ConfigError
from .retrieval import SweepReport
from .training import HistoryRow

FIGURE_DPI = 150
PANEL_METRICS = ("mrr", "hit1", "hit10")
POOL_BAR_COLOR = "0.85"


def render_sweep_figure(sweeps: Sequence[SweepReport], path) -> None:
    """Line panels for mrr/hit1/hit10 across masking ratios, one line per system.

    The leftmost panel carries grey pool-size bars on a secondary axis so
    the growing candidate pool is visible next to the metric it dilutes.
    """
    if not sweeps:
        raise ConfigError("nothing to plot")
    grid = sweeps[0].ratios
    for sweep in sweeps[1:]:
        if sweep.ratios != grid:
            raise ConfigError("all sweeps in one figure must share the ratio grid")
    fig, axes = plt.subplots(1, len(PANEL_METRICS), figsize=(12.0, 3.6), sharex=True)
    bar_axis = axes[0].twinx()
    bar_axis.bar(
        grid,
        [r.pool_size for r in sweeps[0].reports],
        width=min(0.08, 0.8 / max(len(grid), 1)),
        color=POOL_BAR_COLOR,
        zorder=1,
        label="pool size",
    )
    bar_axis.set_ylabel("pool size", color="0.45")
    bar_axis.tick_params(axis="y", colors="0.45")
    for axis, metric in zip(axes, PANEL_METRICS):
        axis.set_zorder(bar_axis.get_zorder() + 1 if axis is axes[0] else 2)
        axis.patch.set_visible(False)
        for sweep in sweeps:
            axis.plot(
                grid,
                sweep.metric_values(metric),
                marker="o",
                linewidth=1.5,
                zorder=3,
                label=sweep.system,
            )
        axis.set_xlabel("masking ratio")
        axis.set_ylabel(metric)
        axis.set_ylim(-0.02, 1.02)
        axis.grid(True, alpha=0.3)
    axes[0].legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_history_figure(history: Sequence[HistoryRow], path) -> None:
    """Training and validation loss per epoch, with the stop point marked."""
    if not history:
        raise ConfigError("nothing to plot")
    epochs = [row.epoch for row in history]
    fig, axis = plt.subplots(figsize=(6.0, 3.6))
    axis.plot(epochs, [row.train_loss for row in history], label="train", linewidth=1.5)
    axis.plot(epochs, [row.val_loss for row in history], label="validation", linewidth=1.5)
    stops = [row.epoch for row in history if row.stopped]
    if stops:
        axis.axvline(stops[0], color="0.5", linestyle="--", linewidth=1.0, label="stopped")
    axis.set_xlabel("epoch")
    axis.set_ylabel("loss")
    axis.grid(True, alpha=0.3)
    axis.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_significance_figure(rows: Sequence[dict], path, alpha: float = 0.05) -> None:
    """Bar chart of paired t statistics per metric; significant bars darker."""
    if not rows:
        raise ConfigError("nothing to plot")
    metrics = [row["metric"] for row in rows]
    t_values = [
        float(row["t"]) if math.isfinite(row["t"]) else math.copysign(50.0, row["t"])
        for row in rows
    ]
    colors = ["0.25" if row["significant"] else "0.7" for row in rows]
    fig, axis = plt.subplots(figsize=(6.0, 3.6))
    bars = axis.bar(metrics, t_values, color=colors)
    for bar, row in zip(bars, rows):
        axis.annotate(
            f"p={row['p']:.3g}",
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center",
            va="bottom",
            fontsize="x-small",
        )
    axis.axhline(0.0, color="black", linewidth=0.8)
    axis.set_ylabel("paired t statistic")
    axis.set_title(f"dark bars: p < {alpha}")
    axis.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
