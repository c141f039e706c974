"""Report charts. Uses the object-oriented matplotlib API on the Agg canvas so
nothing depends on a display or on pyplot's global state."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import ScoreSummary

# fixed metadata keeps PNG bytes stable between runs
_PNG_META = {"Software": None}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def plot_category_scores(summary: ScoreSummary, path: str | Path, title: str = "Judge score by category") -> Path:
    cats = list(summary.category_means)
    values = [float(summary.category_means[c]) for c in cats]
    fig = Figure(figsize=(max(4.0, 0.8 * len(cats) + 2), 3.6))
    ax = fig.add_subplot()
    bars = ax.bar(range(len(cats)), values, color="#4C72B0")
    overall = float(summary.overall)
    ax.axhline(overall, color="#C44E52", linestyle="--", linewidth=1, label=f"overall {summary.overall_rounded}")
    for bar, c in zip(bars, cats):
        ax.annotate(
            str(summary.rounded[c]),
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_xticks(range(len(cats)))
    ax.set_xticklabels(cats, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 5.4)
    ax.set_ylabel("mean score (0-5)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_rejections(
    accepted: Mapping[str, int],
    rejected: Mapping[str, Mapping[str, int]],
    path: str | Path,
    title: str = "Prompt filtering by ability",
) -> Path:
    """Stacked horizontal bars: accepted prompts plus one segment per reject reason."""
    abilities = sorted(set(accepted) | set(rejected))
    reasons = sorted({r for counts in rejected.values() for r in counts})
    fig = Figure(figsize=(7.0, max(2.5, 0.45 * len(abilities) + 1.2)))
    ax = fig.add_subplot()
    left = [0] * len(abilities)
    series = [("accepted", [accepted.get(a, 0) for a in abilities])]
    series += [(r, [rejected.get(a, {}).get(r, 0) for a in abilities]) for r in reasons]
    for label, counts in series:
        ax.barh(range(len(abilities)), counts, left=left, label=label)
        left = [x + y for x, y in zip(left, counts)]
    ax.set_yticks(range(len(abilities)))
    ax.set_yticklabels(abilities, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("prompts")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
