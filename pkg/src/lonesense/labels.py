"""Response variables from self-reports and the descriptive loneliness analysis.

Loneliness is binarized under one of four class separations; companionship is
binned into alone / close / non-close. The descriptive helpers reproduce the
lonely-by-alone cross-tab, per-group mean loneliness with bootstrap intervals
and the participant-level (trait) comparisons.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .traces import Companion, EmaRecord

CLOSE = frozenset({Companion.FRIENDS, Companion.FAMILY, Companion.SIGNIFICANT_OTHER})
NON_CLOSE = frozenset({Companion.CLASSMATES, Companion.COWORKERS, Companion.ROOMMATES, Companion.STRANGERS})


class CompanionBin(str, enum.Enum):
    ALONE = "Alone"
    CLOSE = "Close"
    NON_CLOSE = "NonClose"
    UNBINNABLE = "Unbinnable"


@dataclass(frozen=True)
class ClassSeparation:
    name: str
    negative: frozenset[int]
    positive: frozenset[int]

    def __post_init__(self):
        if not self.negative or not self.positive or self.negative & self.positive:
            raise ValueError("class sets must be non-empty and disjoint")


SEPARATIONS = {
    "0vs123": ClassSeparation("0vs123", frozenset({0}), frozenset({1, 2, 3})),
    "0vs23": ClassSeparation("0vs23", frozenset({0}), frozenset({2, 3})),
    "0vs1": ClassSeparation("0vs1", frozenset({0}), frozenset({1})),
    "1vs23": ClassSeparation("1vs23", frozenset({1}), frozenset({2, 3})),
}
S0v123, S0v23, S0v1, S1v23 = (SEPARATIONS[k] for k in ("0vs123", "0vs23", "0vs1", "1vs23"))


def separation(name: str | ClassSeparation) -> ClassSeparation:
    if isinstance(name, ClassSeparation):
        return name
    try:
        return SEPARATIONS[name]
    except KeyError:
        raise ValueError(f"unknown class separation {name!r}; choose from {sorted(SEPARATIONS)}") from None


def binarize_loneliness(ema: EmaRecord | int, sep: ClassSeparation | str = S0v123) -> int | None:
    """1 / 0 per the separation, or None when the level is in neither class."""
    sep = separation(sep)
    level = ema.loneliness if isinstance(ema, EmaRecord) else int(ema)
    if level in sep.positive:
        return 1
    if level in sep.negative:
        return 0
    return None


def bin_companionship(ema: EmaRecord | Iterable[Companion]) -> CompanionBin:
    companions = set(ema.companions if isinstance(ema, EmaRecord) else ema)
    if companions & CLOSE:
        return CompanionBin.CLOSE
    if companions & NON_CLOSE:
        # Alone alongside a companion token is read as "with others"
        return CompanionBin.NON_CLOSE
    if Companion.ALONE in companions:
        return CompanionBin.ALONE
    return CompanionBin.UNBINNABLE


def is_contradictory(ema: EmaRecord) -> bool:
    return Companion.ALONE in ema.companions and bool(ema.companions & (CLOSE | NON_CLOSE))


@dataclass(frozen=True)
class CrossTab:
    lonely_alone: int
    lonely_not_alone: int
    not_lonely_alone: int
    not_lonely_not_alone: int

    @property
    def total(self) -> int:
        return self.lonely_alone + self.lonely_not_alone + self.not_lonely_alone + self.not_lonely_not_alone

    def percent(self) -> dict[str, float]:
        n = self.total
        cells = {
            "lonely_alone": self.lonely_alone,
            "lonely_not_alone": self.lonely_not_alone,
            "not_lonely_alone": self.not_lonely_alone,
            "not_lonely_not_alone": self.not_lonely_not_alone,
        }
        return {k: (100.0 * v / n if n else 0.0) for k, v in cells.items()}


def cross_tab(records: Iterable[EmaRecord]) -> CrossTab:
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    for r in records:
        lonely = binarize_loneliness(r, S0v123) == 1
        alone = bin_companionship(r) is CompanionBin.ALONE
        counts[(lonely, alone)] += 1
    return CrossTab(counts[(True, True)], counts[(True, False)], counts[(False, True)], counts[(False, False)])


@dataclass(frozen=True)
class GroupMean:
    group: str
    mean: float
    ci_low: float
    ci_high: float
    count: int


def bootstrap_ci(values: Sequence[float], n_boot: int = 1000, level: float = 0.95,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("empty group")
    rng = rng or np.random.default_rng(0)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    m = float(x.mean())
    # the percentile interval brackets the sample mean up to float noise
    return min(float(lo), m), max(float(hi), m)


def group_means(records: Iterable[EmaRecord], grouping: str = "bin", n_boot: int = 1000,
                seed: int = 0) -> list[GroupMean]:
    """Mean loneliness per companionship group with 95% bootstrap CIs.

    ``grouping="category"`` lets a multi-token response count toward each of
    its categories; ``grouping="bin"`` uses :func:`bin_companionship`.
    Groups are returned from highest to lowest mean.
    """
    groups: dict[str, list[int]] = defaultdict(list)
    for r in records:
        if grouping == "category":
            for c in r.companions:
                groups[c.value].append(r.loneliness)
        elif grouping == "bin":
            b = bin_companionship(r)
            if b is not CompanionBin.UNBINNABLE:
                groups[b.value].append(r.loneliness)
        else:
            raise ValueError(f"unknown grouping {grouping!r}")
    rng = np.random.default_rng(seed)
    out = []
    for name in sorted(groups):
        vals = groups[name]
        lo, hi = bootstrap_ci(vals, n_boot=n_boot, rng=rng)
        out.append(GroupMean(name, float(np.mean(vals)), lo, hi, len(vals)))
    out.sort(key=lambda g: (-g.mean, g.group))
    return out


@dataclass(frozen=True)
class TraitTest:
    category: str
    n_reporters: int
    n_never: int
    t_stat: float
    t_pvalue: float
    r: float
    r_pvalue: float
    note: str = ""


def trait_level_tests(by_participant: Mapping[str, Sequence[EmaRecord]],
                      categories: Sequence[Companion] = (Companion.FAMILY, Companion.FRIENDS,
                                                         Companion.SIGNIFICANT_OTHER)) -> list[TraitTest]:
    """Ever-vs-never Welch t-tests and frequency/loneliness correlations per category.

    Values that cannot be computed (fewer than two participants per group,
    zero variance) come back as NaN with a note.
    """
    mean_lonely = {p: float(np.mean([r.loneliness for r in recs])) for p, recs in by_participant.items() if recs}
    out = []
    for cat in categories:
        freq = {p: sum(cat in r.companions for r in recs) / len(recs)
                for p, recs in by_participant.items() if recs}
        ever = [mean_lonely[p] for p in freq if freq[p] > 0]
        never = [mean_lonely[p] for p in freq if freq[p] == 0]
        notes = []
        t = pt = math.nan
        if len(ever) >= 2 and len(never) >= 2:
            if np.var(ever) + np.var(never) > 0:
                res = stats.ttest_ind(ever, never, equal_var=False)
                t, pt = float(res.statistic), float(res.pvalue)
            elif np.mean(ever) == np.mean(never):
                t, pt = 0.0, 1.0
            else:
                notes.append("t-test not computable: zero variance")
        else:
            notes.append("t-test not computable: fewer than two participants in a group")
        r = pr = math.nan
        reporters = [p for p in freq if freq[p] > 0]
        xs = [freq[p] for p in reporters]
        ys = [mean_lonely[p] for p in reporters]
        if len(reporters) >= 3 and np.ptp(xs) > 0 and np.ptp(ys) > 0:
            res = stats.pearsonr(xs, ys)
            r, pr = float(res.statistic), float(res.pvalue)
        else:
            notes.append("correlation not computable")
        out.append(TraitTest(cat.value, len(ever), len(never), t, pt, r, pr, "; ".join(notes)))
    return out


# ---- report files


def write_group_means(path: Path, rows: Iterable[GroupMean]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "mean_loneliness", "ci_low", "ci_high", "count"])
        for g in rows:
            w.writerow([g.group, f"{g.mean:.6f}", f"{g.ci_low:.6f}", f"{g.ci_high:.6f}", g.count])


def write_cross_tab(path: Path, tab: CrossTab) -> None:
    pct = tab.percent()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "alone", "alone_pct", "not_alone", "not_alone_pct"])
        w.writerow(["lonely", tab.lonely_alone, f"{pct['lonely_alone']:.1f}",
                    tab.lonely_not_alone, f"{pct['lonely_not_alone']:.1f}"])
        w.writerow(["not_lonely", tab.not_lonely_alone, f"{pct['not_lonely_alone']:.1f}",
                    tab.not_lonely_not_alone, f"{pct['not_lonely_not_alone']:.1f}"])


def write_trait_tests(path: Path, rows: Iterable[TraitTest]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "n_reporters", "n_never", "welch_t", "welch_p", "pearson_r", "pearson_p", "note"])
        for t in rows:
            w.writerow([t.category, t.n_reporters, t.n_never, f"{t.t_stat:.6g}", f"{t.t_pvalue:.6g}",
                        f"{t.r:.6g}", f"{t.r_pvalue:.6g}", t.note])


def plot_group_means(path: Path, rows: Sequence[GroupMean], title: str = "") -> None:
    """Bar chart of group means with CI whiskers, saved as SVG."""
    from ._plots import bar_with_ci

    bar_with_ci(path, [g.group for g in rows], [g.mean for g in rows],
                [(g.ci_low, g.ci_high) for g in rows], [g.count for g in rows], title)
