"""Figures for attribution reports: per-level medians with bootstrap CIs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .stats import AttributionReport, FactorAnalysis  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

KIND_COLORS = {"voice": "#7b3294", "structure": "#4d9221"}


def _panel(ax, analysis: FactorAnalysis, metric: str) -> None:
    rows = analysis.table.rows
    levels = list(rows)
    med = [rows[lv].median for lv in levels]
    lo = [rows[lv].median - rows[lv].ci_low for lv in levels]
    hi = [rows[lv].ci_high - rows[lv].median for lv in levels]
    color = KIND_COLORS.get(analysis.kind, "k")
    ax.errorbar(range(len(levels)), med, yerr=[lo, hi], fmt="o", color=color, capsize=3)
    ax.set_xticks(range(len(levels)))
    ax.set_xticklabels(levels)
    ax.set_xlim(-0.5, len(levels) - 0.5)
    ax.set_title(f"{analysis.kind}: {analysis.factor} (by {analysis.table.unit})")
    ax.set_ylabel(f"median {metric.upper()}")


def plot_report(report: AttributionReport, path: str | Path) -> Path:
    """One panel per analysed factor, voice panels above structure panels."""
    path = Path(path)
    analyses = sorted(report.analyses, key=lambda a: (a.kind != "voice", a.factor))
    n = max(1, len(analyses))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 1, figsize=(3.4, 1.9 * n), squeeze=False)
        for ax, analysis in zip(axes[:, 0], analyses):
            _panel(ax, analysis, report.metric)
        fig.tight_layout()
        # fixed metadata keeps re-runs byte-identical
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_factor(analysis: FactorAnalysis, metric: str, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.2))
        _panel(ax, analysis, metric)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
