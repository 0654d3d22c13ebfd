"""SVG figures (matplotlib, headless). Output bytes are stable across runs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "lonesense"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def bar_with_ci(path: Path, labels: Sequence[str], means: Sequence[float],
                cis: Sequence[tuple[float, float]], counts: Sequence[int], title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    lower = [m - lo for m, (lo, _) in zip(means, cis)]
    upper = [hi - m for m, (_, hi) in zip(means, cis)]
    ax.bar(range(len(means)), means, yerr=[lower, upper], capsize=4, color="#8aa1c1")
    ax.set_xticks(range(len(means)))
    ax.set_xticklabels([f"{lab}\n(n={c})" for lab, c in zip(labels, counts)], fontsize=8)
    ax.set_ylabel("mean loneliness")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def auc_lines(path: Path, series: Mapping[str, tuple[Sequence[str], Sequence[float]]], title: str = "") -> None:
    """One line per series plus a dotted line at its mean."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    all_dates = sorted({d for dates, _ in series.values() for d in dates})
    pos = {d: i for i, d in enumerate(all_dates)}
    for k, (name, (dates, values)) in enumerate(series.items()):
        color = f"C{k}"
        ax.plot([pos[d] for d in dates], values, marker="o", ms=3, color=color, label=name)
        if values:
            ax.axhline(sum(values) / len(values), color=color, linestyle=":", linewidth=1)
    ax.set_xticks(range(len(all_dates)))
    ax.set_xticklabels([d[5:] for d in all_dates], rotation=90, fontsize=7)
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
