"""Matplotlib figures for the report paths (written next to the CSVs)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .stats import TrendFit, trend_band  # noqa: E402


def save_group_comparison(
    groups: Sequence[tuple[str, float, float]],
    out_path,
    *,
    title: str = "Run accuracy by group",
    ylabel: str = "accuracy (%)",
) -> Path:
    """Bar chart with error bars from (label, mean, spread) rows."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    labels = [g[0] for g in groups]
    means = [g[1] for g in groups]
    spreads = [g[2] for g in groups]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups)), 3.6))
    xs = np.arange(len(groups))
    ax.bar(xs, means, yerr=spreads, capsize=4, color="#4878a8", edgecolor="#2b4a68")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def save_trend_figure(
    xs: Sequence[float],
    ys: Sequence[float],
    fit: TrendFit,
    out_path,
    *,
    xlabel: str = "reasoning fraction",
    ylabel: str = "accuracy (%)",
    title: str = "Accuracy vs reasoning fraction",
    errors: Sequence[float] | None = None,
    band_level: float = 0.95,
) -> Path:
    """Scatter plus fitted line and mean-response confidence band."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(min(xs), max(xs), 100)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if fit.df >= 1:  # a two-point fit has no residual df, hence no band
        yhat, lo, hi = trend_band(fit, grid, level=band_level)
        ax.fill_between(grid, lo, hi, color="#8fb8d8", alpha=0.4,
                        label=f"{band_level:.0%} mean CI")
    else:
        yhat = [fit.predict(x) for x in grid]
    ax.plot(grid, yhat, color="#2b4a68",
            label=f"fit: slope={fit.slope:.2f} (p={fit.p_value:.3g})")
    if errors is not None:
        ax.errorbar(xs, ys, yerr=errors, fmt="o", color="#b0413e", capsize=3,
                    label="runs")
    else:
        ax.plot(xs, ys, "o", color="#b0413e", label="runs")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


__all__ = ["save_group_comparison", "save_trend_figure"]
