"""Walk-forward daily evaluation of random-forest classifiers.

For each evaluation date ``d`` a fresh forest is trained on every observation
dated before ``d`` and scored on the observations of ``d``. Missing feature
entries are filled from training-fold column means, so nothing from ``d`` or
later leaks into the model used on ``d``. Per-day AUC is pooled across
participants.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from . import forest as rf
from .geosocial import FEATURE_NAMES, FeatureRow
from .labels import CompanionBin, ClassSeparation, SEPARATIONS, bin_companionship, binarize_loneliness, separation
from .traces import EmaRecord

log = logging.getLogger(__name__)

TARGETS = ("loneliness", "solitude", "close")

_BLUETOOTH = ("socio_fam_mean", "socio_fam_sd", "socio_fam_max", "socio_fam_min",
              "socio_temReg_mean", "socio_temReg_sd", "socio_temReg_max", "socio_temReg_min")
_GPS = ("geo_fam", "geo_temReg")
BASELINE = ("num_uniq", "socio_count", "socio_ent")
FEATURE_GROUPS: dict[str, tuple[str, ...]] = {
    "baseline": BASELINE,
    "plusBluetooth": BASELINE + _BLUETOOTH,
    "plusGPS": BASELINE + _GPS,
    "plusGeosocial": tuple(FEATURE_NAMES),
}


class ProtocolError(RuntimeError):
    """No date satisfies the evaluation protocol."""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# ---- observations


@dataclass(frozen=True)
class Observation:
    participant: str
    ema_t: int
    date: str
    features: tuple[float, ...]
    loneliness: int
    companions: CompanionBin

    def label(self, target: str, sep: ClassSeparation | str = "0vs123") -> int | None:
        if target == "loneliness":
            return binarize_loneliness(self.loneliness, sep)
        if self.companions is CompanionBin.UNBINNABLE:
            return None
        if target == "solitude":
            return int(self.companions is CompanionBin.ALONE)
        if target == "close":
            return int(self.companions is CompanionBin.CLOSE)
        raise ValueError(f"unknown target {target!r}; choose from {TARGETS}")


def join_observations(rows: Iterable[FeatureRow], ema: Mapping[str, Iterable[EmaRecord]]) -> list[Observation]:
    """Attach self-report labels to feature rows by (participant, timestamp)."""
    index = {(p, r.t): r for p, recs in ema.items() for r in recs}
    out = []
    for row in rows:
        rec = index.get((row.participant, row.ema_t))
        if rec is None:
            raise KeyError(f"no self-report for {row.participant} at {row.ema_t}")
        out.append(Observation(row.participant, row.ema_t, row.date, tuple(float(v) for v in row.features),
                               rec.loneliness, bin_companionship(rec)))
    out.sort(key=lambda o: (o.date, o.participant, o.ema_t))
    return out


def regression_design(obs: Sequence[Observation], sep: str = "0vs123"):
    """Normalized design for the association analysis of all observations.

    Missing feature values take the column mean over every observation; this
    is a descriptive analysis, so there is no causality constraint.
    """
    from .inference import Design

    kept = [(o, o.label("loneliness", sep)) for o in obs]
    kept = [(o, y) for o, y in kept if y is not None]
    X = np.array([o.features for o, _ in kept], dtype=float).reshape(len(kept), len(FEATURE_NAMES))
    col_mean = np.nanmean(np.where(np.isnan(X).all(axis=0), 0.0, X), axis=0)
    X = np.where(np.isnan(X), col_mean, X)
    y = np.array([lab for _, lab in kept], dtype=float)
    return Design.from_raw(X, y, [o.participant for o, _ in kept], FEATURE_NAMES)


# ---- protocol


@dataclass(frozen=True)
class EvalConfig:
    min_train: int = 100
    min_test: int = 5
    separation: str = "0vs123"
    seed: int = 0
    forest: rf.ForestConfig = field(default_factory=rf.ForestConfig)


@dataclass
class DayResult:
    target: str
    group: str
    date: str
    auc: float
    n_test: int
    n_train: int
    participants: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SeriesSummary:
    target: str
    group: str
    n_days: int
    mean_auc: float
    slope: float
    pvalue: float


@dataclass
class EvaluationReport:
    days: list[DayResult] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    separation: str = "0vs123"

    def series(self, target: str, group: str) -> list[DayResult]:
        return [d for d in self.days if d.target == target and d.group == group]

    def keys(self) -> list[tuple[str, str]]:
        seen: dict[tuple[str, str], None] = {}
        for d in self.days:
            seen.setdefault((d.target, d.group), None)
        return list(seen)

    def mean_auc(self, target: str, group: str) -> float:
        s = self.series(target, group)
        return float(np.mean([d.auc for d in s])) if s else math.nan

    def summaries(self) -> list[SeriesSummary]:
        out = []
        for target, group in self.keys():
            s = self.series(target, group)
            values = [d.auc for d in s]
            if len(s) >= 3:
                slope, p = trend_test(list(enumerate(values)))
            else:
                slope, p = math.nan, math.nan
            out.append(SeriesSummary(target, group, len(s), float(np.mean(values)), slope, p))
        return out

    def merge(self, other: "EvaluationReport") -> "EvaluationReport":
        return EvaluationReport(self.days + other.days, self.skipped + other.skipped, self.separation)


def _date_ordinal(date: str) -> int:
    return dt.date.fromisoformat(date).toordinal()


def _fit_day(X_tr, y_tr, X_te, names, fcfg: rf.ForestConfig) -> np.ndarray:
    # training-fold means; a column missing throughout training falls back to 0
    fill = np.nanmean(np.where(np.isnan(X_tr).all(axis=0), 0.0, X_tr), axis=0)
    X_tr = np.where(np.isnan(X_tr), fill, X_tr)
    X_te = np.where(np.isnan(X_te), fill, X_te)
    model = rf.train(X_tr, y_tr, fcfg, names)
    return model.predict_proba(X_te)


def sliding_window_eval(obs: Sequence[Observation], target: str = "loneliness",
                        groups: Sequence[str] | None = None, cfg: EvalConfig | None = None) -> EvaluationReport:
    """Train on every date before ``d``, test on ``d``, for each eligible ``d``."""
    cfg = cfg or EvalConfig()
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {TARGETS}")
    groups = list(groups or FEATURE_GROUPS)
    for g in groups:
        if g not in FEATURE_GROUPS:
            raise ValueError(f"unknown feature group {g!r}")
    sep = separation(cfg.separation)

    kept = [(o, o.label(target, sep)) for o in obs]
    kept = [(o, y) for o, y in kept if y is not None]
    dates = np.array([o.date for o, _ in kept])
    y = np.array([lab for _, lab in kept], dtype=float)
    X = np.array([o.features for o, _ in kept], dtype=float).reshape(len(kept), len(FEATURE_NAMES))
    who = np.array([o.participant for o, _ in kept])
    unique_dates = sorted(set(dates.tolist()))
    if len(unique_dates) < 2:
        raise ProtocolError("need observations on at least two dates")

    report = EvaluationReport(separation=sep.name)
    col = {n: i for i, n in enumerate(FEATURE_NAMES)}
    for d in unique_dates:
        train = dates < d
        test = dates == d
        n_tr, n_te = int(train.sum()), int(test.sum())
        if n_tr < cfg.min_train:
            report.skipped.append((d, f"training size {n_tr} < {cfg.min_train}"))
            continue
        if n_te < cfg.min_test:
            report.skipped.append((d, f"test size {n_te} < {cfg.min_test}"))
            continue
        if y[train].min() == y[train].max():
            report.skipped.append((d, "single-class training data"))
            continue
        if y[test].min() == y[test].max():
            report.skipped.append((d, "single-class test day"))
            continue
        for gi, g in enumerate(groups):
            cols = [col[n] for n in FEATURE_GROUPS[g]]
            state = np.random.SeedSequence([cfg.seed, _date_ordinal(d), gi, TARGETS.index(target)])
            fcfg = replace(cfg.forest, seed=int(state.generate_state(1, np.uint64)[0]))
            scores = _fit_day(X[train][:, cols], y[train], X[test][:, cols], FEATURE_GROUPS[g], fcfg)
            report.days.append(DayResult(target, g, d, auc(scores, y[test]), n_te, n_tr,
                                         who[test], scores, y[test]))
        log.debug("evaluated %s %s: train=%d test=%d", target, d, n_tr, n_te)
    if not report.days:
        raise ProtocolError(f"no evaluation date is eligible for target {target!r}")
    return report


def trend_test(series: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """OLS slope of AUC on day index with a two-sided t-test on the slope."""
    if len(series) < 3:
        raise ValueError("trend test needs at least three points")
    x = np.array([s[0] for s in series], dtype=float)
    y = np.array([s[1] for s in series], dtype=float)
    n = x.size
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0:
        raise ValueError("day indices must vary")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    resid = y - y.mean() - slope * (x - x.mean())
    sse = float(np.sum(resid ** 2))
    if sse <= 1e-30 * max(1.0, float(np.sum(y ** 2))):
        # exact fit: flat line carries no evidence of a trend, any other line is certain
        return (0.0, 1.0) if abs(slope) < 1e-15 else (slope, 0.0)
    se = math.sqrt(sse / (n - 2) / sxx)
    t = slope / se
    return slope, float(2 * stats.t.sf(abs(t), n - 2))


# ---- subgroups and class separations


@dataclass(frozen=True)
class SubgroupResult:
    subgroup: str
    auc: float
    n: int
    n_participants: int
    note: str = ""


def subgroup_eval(report: EvaluationReport, metadata: Mapping[str, Mapping[str, str]], key: str,
                  target: str = "loneliness", group: str = "plusGeosocial") -> list[SubgroupResult]:
    """Pool test-day predictions within each metadata subgroup, then score."""
    days = report.series(target, group)
    if not days:
        raise ValueError(f"report has no series for {target}/{group}")
    who = np.concatenate([d.participants for d in days])
    scores = np.concatenate([d.scores for d in days])
    labels = np.concatenate([d.labels for d in days])
    value = np.array([str(metadata.get(p, {}).get(key, "")) for p in who])
    out = []
    for sub in sorted(set(value.tolist())):
        if sub == "":
            continue
        m = value == sub
        n_part = len(set(who[m].tolist()))
        if labels[m].min() == labels[m].max():
            log.info("subgroup %s=%s skipped: single class", key, sub)
            out.append(SubgroupResult(sub, math.nan, int(m.sum()), n_part, "skipped: single class"))
            continue
        out.append(SubgroupResult(sub, auc(scores[m], labels[m]), int(m.sum()), n_part))
    if (value == "").any():
        log.info("%d predictions lack metadata key %r", int((value == "").sum()), key)
    return out


@dataclass
class SweepResult:
    reports: dict[str, EvaluationReport] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    def mean_auc(self, name: str) -> float:
        r = self.reports.get(name)
        return r.mean_auc("loneliness", "plusGeosocial") if r else math.nan


def class_separation_sweep(obs: Sequence[Observation], separations: Sequence[str] = tuple(SEPARATIONS),
                           cfg: EvalConfig | None = None, group: str = "plusGeosocial") -> SweepResult:
    cfg = cfg or EvalConfig()
    out = SweepResult()
    for name in separations:
        sep = separation(name)
        labels = [binarize_loneliness(o.loneliness, sep) for o in obs]
        n_pos = sum(1 for v in labels if v == 1)
        n_neg = sum(1 for v in labels if v == 0)
        if min(n_pos, n_neg) < cfg.min_train:
            out.skipped[sep.name] = f"class sizes {n_neg}/{n_pos} below {cfg.min_train}"
            continue
        try:
            out.reports[sep.name] = sliding_window_eval(obs, "loneliness", [group],
                                                        replace(cfg, separation=sep.name))
        except ProtocolError as exc:
            out.skipped[sep.name] = str(exc)
    return out


# ---- report files


def write_auc_by_day(path: Path, report: EvaluationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "group", "date", "auc", "n_test"])
        for d in report.days:
            w.writerow([d.target, d.group, d.date, repr(d.auc), d.n_test])


def write_summary(path: Path, report: EvaluationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "group", "separation", "n_days", "mean_auc", "trend_slope", "trend_p"])
        for s in report.summaries():
            w.writerow([s.target, s.group, report.separation, s.n_days, repr(s.mean_auc),
                        repr(s.slope), repr(s.pvalue)])


def write_sweep(path: Path, sweep: SweepResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["separation", "n_days", "mean_auc", "note"])
        for name in SEPARATIONS:
            if name in sweep.reports:
                r = sweep.reports[name]
                w.writerow([name, len(r.days), repr(sweep.mean_auc(name)), ""])
            elif name in sweep.skipped:
                w.writerow([name, 0, "", "skipped: " + sweep.skipped[name]])


def plot_report(path: Path, report: EvaluationReport, target: str, title: str = "") -> None:
    """Per-day AUC lines for each feature group, dotted lines at the means."""
    from ._plots import auc_lines

    series = {}
    for t, g in report.keys():
        if t == target:
            s = report.series(t, g)
            series[g] = ([d.date for d in s], [d.auc for d in s])
    auc_lines(path, series, title)


def plot_sweep(path: Path, sweep: SweepResult, title: str = "") -> None:
    from ._plots import auc_lines

    series = {}
    for name, r in sweep.reports.items():
        s = r.days
        series[name] = ([d.date for d in s], [d.auc for d in s])
    auc_lines(path, series, title)
