"""Geosocial features for the 15-minute window preceding each self-report.

A :class:`ParticipantHistory` indexes a participant's whole trace once; each
EMA anchor is then scored against it. Counting conventions:

* a *detection* is a (device, scan slot) pair, so repeated sightings of one
  device inside one duty period count once; its time is the first of those
  sightings and its coordinate the mean of the GPS fixes in the same period
  (absent when the period has no fix);
* ``socio_count`` counts raw sightings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .traces import (
    BtSighting,
    EmaRecord,
    GpsFix,
    ParticipantData,
    StudyClock,
    daily_slot_index,
    haversine_m,
    local_date,
    local_ms,
    slot_anchor_ms,
    slot_ids,
)

PLACE_RADIUS_M = 30.0
GAP_CREDIT_MS = 1_800_000


class FeatureIneligible(ValueError):
    """A feature is undefined for the given input."""


class UnknownDevice(KeyError):
    pass


class FeatureVector(NamedTuple):
    num_uniq: float
    socio_count: float
    socio_ent: float
    socio_fam_mean: float
    socio_fam_sd: float
    socio_fam_max: float
    socio_fam_min: float
    socio_temReg_mean: float
    socio_temReg_sd: float
    socio_temReg_max: float
    socio_temReg_min: float
    geo_fam: float
    geo_temReg: float
    socio_geoReg_mean: float
    socio_geoReg_sd: float
    socio_geoReg_max: float
    socio_geoReg_min: float


FEATURE_NAMES: tuple[str, ...] = FeatureVector._fields
GEO_REG_COLUMNS = FEATURE_NAMES[13:17]


@dataclass(frozen=True)
class Place:
    center: tuple[float, float]
    radius_m: float = PLACE_RADIUS_M


@dataclass(frozen=True)
class Window:
    start: int
    end: int
    bt_t: np.ndarray
    bt_dev: np.ndarray
    bt_slot: np.ndarray
    fix_t: np.ndarray
    fix_ll: np.ndarray

    @property
    def eligible(self) -> bool:
        return self.bt_t.size > 0 and self.fix_t.size > 0

    def place(self) -> Place:
        if self.fix_t.size == 0:
            raise FeatureIneligible("window has no GPS fixes")
        lat, lon = self.fix_ll.mean(axis=0)
        return Place((float(lat), float(lon)))


class ParticipantHistory:
    """Read-only index over one participant's full trace."""

    def __init__(self, sightings: Sequence[BtSighting], fixes: Sequence[GpsFix],
                 clock: StudyClock | None = None):
        self.clock = clock or StudyClock()
        clock = self.clock
        bt_t = np.array([s.t for s in sightings], dtype=np.int64)
        order = np.argsort(bt_t, kind="stable")
        self.bt_t = bt_t[order]
        names, codes = np.unique(np.array([s.device for s in sightings], dtype=str)[order],
                                 return_inverse=True)
        self.devices: list[str] = [str(n) for n in names]
        self.device_code = {d: i for i, d in enumerate(self.devices)}
        self.bt_dev = np.asarray(codes, dtype=np.int64).ravel()

        fix_t = np.array([f.t for f in fixes], dtype=np.int64)
        forder = np.argsort(fix_t, kind="stable")
        self.fix_t = fix_t[forder]
        self.fix_ll = np.array([(f.lat, f.lon) for f in fixes], dtype=float).reshape(-1, 2)[forder]

        starts = [a[0] for a in (self.bt_t, self.fix_t) if a.size]
        ends = [a[-1] for a in (self.bt_t, self.fix_t) if a.size]
        self.span_ms = int(max(ends) - min(starts)) if starts else 0

        if self.bt_t.size:
            self.anchor = slot_anchor_ms(int(self.bt_t[0]), clock)
        elif self.fix_t.size:
            self.anchor = slot_anchor_ms(int(self.fix_t[0]), clock)
        else:
            self.anchor = 0
        self.bt_slot = slot_ids(self.bt_t, self.anchor, clock)
        self.fix_slot = slot_ids(self.fix_t, self.anchor, clock)
        self.n_observed_slots = int(np.unique(self.bt_slot).size)

        self._index_detections()

    def _index_detections(self):
        clock = self.clock
        n_dev = len(self.devices)
        # first sighting per (device, slot); bt arrays are time-sorted so lexsort keeps that order
        order = np.lexsort((self.bt_t, self.bt_slot, self.bt_dev))
        dev, slot, t = self.bt_dev[order], self.bt_slot[order], self.bt_t[order]
        first = np.ones(dev.size, dtype=bool)
        first[1:] = (dev[1:] != dev[:-1]) | (slot[1:] != slot[:-1])
        self.det_dev, self.det_slot, self.det_t = dev[first], slot[first], t[first]
        self.dev_detections = np.bincount(self.det_dev, minlength=n_dev)
        self.dev_offsets = np.concatenate([[0], np.cumsum(self.dev_detections)])

        n_daily = 86_400 // clock.social_slot_s
        self.det_daily = daily_slot_index(self.det_t, clock.social_slot_s, clock)
        self.dev_daily = np.zeros((n_dev, n_daily), dtype=np.int64)
        np.add.at(self.dev_daily, (self.det_dev, self.det_daily), 1)

        # mean coordinate of each GPS-bearing scan slot
        self.det_ll = np.full((self.det_dev.size, 2), np.nan)
        if self.fix_t.size and self.det_dev.size:
            gslots, ginv = np.unique(self.fix_slot, return_inverse=True)
            ginv = ginv.ravel()
            counts = np.bincount(ginv)
            mean_lat = np.bincount(ginv, weights=self.fix_ll[:, 0]) / counts
            mean_lon = np.bincount(ginv, weights=self.fix_ll[:, 1]) / counts
            pos = np.searchsorted(gslots, self.det_slot)
            pos_c = np.minimum(pos, gslots.size - 1)
            hit = gslots[pos_c] == self.det_slot
            self.det_ll[hit, 0] = mean_lat[pos_c[hit]]
            self.det_ll[hit, 1] = mean_lon[pos_c[hit]]
            self.slot_coord = {int(s): (la, lo) for s, la, lo in zip(gslots, mean_lat, mean_lon)}
        else:
            self.slot_coord = {}

    # ---- lookups

    def code(self, device: str | int) -> int:
        if isinstance(device, (int, np.integer)):
            if not 0 <= device < len(self.devices):
                raise UnknownDevice(device)
            return int(device)
        try:
            return self.device_code[device]
        except KeyError:
            raise UnknownDevice(device) from None

    def detections_of(self, device) -> slice:
        c = self.code(device)
        return slice(self.dev_offsets[c], self.dev_offsets[c + 1])

    def window(self, ema_t: int) -> Window:
        start = ema_t - self.clock.window_s * 1000
        b0, b1 = np.searchsorted(self.bt_t, [start, ema_t], side="left")
        f0, f1 = np.searchsorted(self.fix_t, [start, ema_t], side="left")
        return Window(start, ema_t, self.bt_t[b0:b1], self.bt_dev[b0:b1], self.bt_slot[b0:b1],
                      self.fix_t[f0:f1], self.fix_ll[f0:f1])


# ---- per-feature operations


def baseline_features(w: Window) -> tuple[int, int, float]:
    if w.bt_t.size == 0:
        raise FeatureIneligible("window has no Bluetooth sightings")
    counts = np.unique(w.bt_dev, return_counts=True)[1]
    return int(counts.size), int(counts.sum()), entropy(counts)


def entropy(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    if counts.size <= 1:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def social_familiarity(device, h: ParticipantHistory) -> float:
    c = h.code(device)
    return h.dev_detections[c] / h.n_observed_slots


def social_temporal_regularity(device, t: int, h: ParticipantHistory) -> float:
    c = h.code(device)
    slot = daily_slot_index(t, h.clock.social_slot_s, h.clock)
    return h.dev_daily[c, slot] / h.dev_detections[c]


def _in_place(fix_ll: np.ndarray, p: Place) -> np.ndarray:
    if fix_ll.size == 0:
        return np.zeros(0, dtype=bool)
    return haversine_m(fix_ll, np.asarray(p.center)) <= p.radius_m


def geographic_familiarity(p: Place, h: ParticipantHistory) -> float:
    if h.fix_t.size < 2:
        raise FeatureIneligible("fewer than two GPS fixes")
    if h.span_ms <= 0:
        return 0.0
    inside = _in_place(h.fix_ll, p)
    gaps = np.diff(h.fix_t)
    credited = inside[:-1] & inside[1:] & (gaps <= GAP_CREDIT_MS)
    return float(gaps[credited].sum() / h.span_ms)


def place_episodes(p: Place, h: ParticipantHistory) -> list[tuple[int, int]]:
    """(begin, end) times of maximal within-radius runs; gaps over 30 min split a run."""
    inside = _in_place(h.fix_ll, p)
    if not inside.any():
        return []
    idx = np.flatnonzero(inside)
    breaks = (np.diff(idx) != 1) | (np.diff(h.fix_t[idx]) > GAP_CREDIT_MS)
    cuts = np.flatnonzero(breaks)
    begins = np.concatenate([[0], cuts + 1])
    ends = np.concatenate([cuts, [idx.size - 1]])
    return [(int(h.fix_t[idx[b]]), int(h.fix_t[idx[e]])) for b, e in zip(begins, ends)]


def mark_histogram(episodes: Iterable[tuple[int, int]], clock: StudyClock) -> np.ndarray:
    """Per daily mark, the number of episodes covering it (each episode counts a mark once)."""
    mark_ms = clock.geo_mark_s * 1000
    n_marks = 86_400 // clock.geo_mark_s
    hist = np.zeros(n_marks, dtype=np.int64)
    for begin, end in episodes:
        m0 = (local_ms(begin, clock) + mark_ms // 2) // mark_ms
        m1 = (local_ms(end, clock) + mark_ms // 2) // mark_ms
        if m1 - m0 + 1 >= n_marks:
            hist += 1
        else:
            hist[np.arange(m0, m1 + 1) % n_marks] += 1
    return hist


def geographic_temporal_regularity(p: Place, t: int, h: ParticipantHistory) -> float:
    episodes = place_episodes(p, h)
    if not episodes:
        raise FeatureIneligible("place never visited")
    hist = mark_histogram(episodes, h.clock)
    mark = daily_slot_index(t, h.clock.geo_mark_s, h.clock, nearest=True)
    return float(hist[mark] / hist.sum())


def social_geographic_regularity(device, w: Window, h: ParticipantHistory) -> float:
    """Share of the device's location-tagged detections within 30 m of where it was met in ``w``."""
    c = h.code(device)
    slots = np.unique(w.bt_slot[w.bt_dev == c])
    coords = [h.slot_coord[s] for s in slots.tolist() if s in h.slot_coord]
    if not coords:
        raise FeatureIneligible("device has no location-tagged detection in the window")
    anchor = np.mean(np.array(coords), axis=0)
    ll = h.det_ll[h.detections_of(c)]
    ll = ll[~np.isnan(ll[:, 0])]
    near = haversine_m(ll, anchor) <= PLACE_RADIUS_M
    return float(near.sum() / ll.shape[0])


def aggregate_stats(scores: Sequence[float]) -> tuple[float, float, float, float]:
    """(mean, sample sd, max, min); sd is 0 for a single score."""
    x = np.asarray(scores, dtype=float)
    if x.size == 0:
        raise FeatureIneligible("no scores to aggregate")
    lo, hi = float(x.min()), float(x.max())
    mean = min(max(float(x.mean()), lo), hi)
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return mean, sd, hi, lo


def extract_features(ema: EmaRecord | int, h: ParticipantHistory,
                     clock: StudyClock | None = None) -> FeatureVector | None:
    """All 17 features for the window ending at the report time, or None.

    The social-geographic family is NaN when none of the window's devices has
    a location-tagged detection there; see :func:`impute_running_mean`.
    """
    if clock is not None and clock != h.clock:
        raise ValueError("history was built with a different clock")
    t = ema.t if isinstance(ema, EmaRecord) else int(ema)
    w = h.window(t)
    if not w.eligible:
        return None
    num_uniq, socio_count, socio_ent = baseline_features(w)
    devices = np.unique(w.bt_dev)
    fam = h.dev_detections[devices] / h.n_observed_slots
    slot = daily_slot_index(t, h.clock.social_slot_s, h.clock)
    tem = h.dev_daily[devices, slot] / h.dev_detections[devices]
    place = w.place()
    geo_fam = geographic_familiarity(place, h) if h.fix_t.size >= 2 else 0.0
    try:
        geo_tem = geographic_temporal_regularity(place, t, h)
    except FeatureIneligible:
        geo_tem = 0.0
    geo_reg = []
    for d in devices.tolist():
        try:
            geo_reg.append(social_geographic_regularity(d, w, h))
        except FeatureIneligible:
            continue
    reg_stats = aggregate_stats(geo_reg) if geo_reg else (math.nan,) * 4
    return FeatureVector(float(num_uniq), float(socio_count), socio_ent,
                         *aggregate_stats(fam), *aggregate_stats(tem),
                         geo_fam, geo_tem, *reg_stats)


# ---- participant / study level


@dataclass
class FeatureRow:
    participant: str
    ema_t: int
    date: str
    features: FeatureVector


@dataclass
class ExtractionReport:
    participant: str
    n_ema: int = 0
    eligible: int = 0
    no_bluetooth: int = 0
    no_gps: int = 0
    geo_reg_imputed: int = 0


def extract_participant(data: ParticipantData, clock: StudyClock | None = None,
                        impute: bool = True) -> tuple[list[FeatureRow], ExtractionReport]:
    clock = clock or StudyClock()
    h = ParticipantHistory(data.sightings, data.fixes, clock)
    report = ExtractionReport(data.participant, n_ema=len(data.ema))
    rows = []
    for ema in sorted(data.ema, key=lambda e: e.t):
        w = h.window(ema.t)
        if w.bt_t.size == 0:
            report.no_bluetooth += 1
        if w.fix_t.size == 0:
            report.no_gps += 1
        vec = extract_features(ema, h)
        if vec is None:
            continue
        rows.append(FeatureRow(data.participant, ema.t, local_date(ema.t, clock).isoformat(), vec))
    report.eligible = len(rows)
    if impute:
        report.geo_reg_imputed = impute_running_mean(rows)
    return rows, report


def impute_running_mean(rows: list[FeatureRow]) -> int:
    """Fill missing social-geographic stats with the participant's running mean.

    Only earlier rows of the same participant contribute. Rows with no earlier
    complete row stay NaN and are resolved downstream from training data.
    Returns the number of rows filled.
    """
    filled = 0
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    idx = [FEATURE_NAMES.index(c) for c in GEO_REG_COLUMNS]
    for row in sorted(rows, key=lambda r: (r.participant, r.ema_t)):
        vals = np.array([row.features[i] for i in idx])
        if np.isnan(vals).any():
            n = counts.get(row.participant, 0)
            if n:
                patch = sums[row.participant] / n
                row.features = row.features._replace(**dict(zip(GEO_REG_COLUMNS, patch.tolist())))
                filled += 1
            continue
        sums[row.participant] = sums.get(row.participant, 0) + vals
        counts[row.participant] = counts.get(row.participant, 0) + 1
    return filled


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_feature_csv(path: Path, rows: Iterable[FeatureRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["participant", "ema_timestamp", "date", *FEATURE_NAMES])
        for r in rows:
            writer.writerow([r.participant, r.ema_t, r.date, *(_fmt(v) for v in r.features)])


def read_feature_csv(path: Path) -> list[FeatureRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("participant", "ema_timestamp", "date", *FEATURE_NAMES)
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {missing}")
        for rec in reader:
            vec = FeatureVector(*(float(rec[c]) if rec[c] != "" else math.nan for c in FEATURE_NAMES))
            rows.append(FeatureRow(rec["participant"], int(rec["ema_timestamp"]), rec["date"], vec))
    return rows
