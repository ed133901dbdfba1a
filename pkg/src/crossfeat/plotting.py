"""Curve and bar-chart emission from benchmark report tables."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first


def report_curves(rows: list[dict]) -> dict:
    """Aggregate report rows into per-threshold mean RR / mean MS / SRR."""
    by_t: dict[int, list[dict]] = defaultdict(list)
    for row in rows:
        by_t[row["threshold"]].append(row)
    thresholds = sorted(by_t)
    out = {"threshold": thresholds, "rr": [], "ms": [], "srr": []}
    for t in thresholds:
        group = by_t[t]
        out["rr"].append(sum(r["rr"] for r in group) / len(group))
        out["ms"].append(sum(r["ms"] for r in group) / len(group))
        out["srr"].append(sum(r["success"] for r in group) / len(group))
    return out


def plot_curves(
    reports: dict[str, list[dict]], out_dir, metrics=("rr", "ms", "srr")
) -> list[Path]:
    """One PNG per metric, a curve per labeled report, thresholds on x."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    titles = {
        "rr": "Repeatable rate",
        "ms": "Matching score",
        "srr": "Successful registration rate",
    }
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, rows in reports.items():
            curves = report_curves(rows)
            ax.plot(curves["threshold"], curves[metric], marker="o", label=label)
        ax.set_xlabel("threshold (px)")
        ax.set_ylabel(titles[metric])
        ax.set_ylim(bottom=0)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{metric}_vs_threshold.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_comparison_bars(
    reports: dict[str, list[dict]], out_dir, at_threshold: int = 3
) -> Path:
    """Bar chart comparing labeled runs (e.g. a lambda sweep): correct
    matches at the given threshold and registration successes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = list(reports)
    matches = []
    successes = []
    for rows in reports.values():
        at_t = [r for r in rows if r["threshold"] == at_threshold]
        per_pair = len(at_t) or 1
        matches.append(sum(r["n_correct"] for r in at_t) / per_pair)
        top_t = max(r["threshold"] for r in rows)
        successes.append(sum(r["success"] for r in rows if r["threshold"] == top_t))

    x = range(len(labels))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    ax1.bar(x, matches, color="tab:blue")
    ax1.set_xticks(list(x), labels, rotation=45, ha="right")
    ax1.set_ylabel(f"mean correct matches @{at_threshold}px")
    ax2.bar(x, successes, color="tab:orange")
    ax2.set_xticks(list(x), labels, rotation=45, ha="right")
    ax2.set_ylabel("successful registrations")
    fig.tight_layout()
    path = out_dir / "comparison_bars.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
