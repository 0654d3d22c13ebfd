"""Slow, literal reference implementations used to check the fast pipeline.

Nothing here touches the indexing in :mod:`lonesense.geosocial`: slots, local
times and counts are recomputed with plain loops and ``datetime``. Inputs are
size-guarded so the loops stay obviously correct and fast enough for tests.
"""

from __future__ import annotations

import datetime as dt
import math
from zoneinfo import ZoneInfo

from ..geosocial import FeatureVector
from ..traces import BtSighting, GpsFix, StudyClock

MAX_DEVICES = 10
MAX_DAYS = 5
RADIUS_M = 30.0
GAP_MS = 30 * 60 * 1000


class OracleGuardError(ValueError):
    """Input too large for a brute-force reference."""


def _offset_ms(t_ms: int, zone: ZoneInfo) -> int:
    when = dt.datetime.fromtimestamp(t_ms // 1000, tz=dt.timezone.utc).astimezone(zone)
    return int(when.utcoffset().total_seconds()) * 1000


def _seconds_of_day(t_ms: int, zone: ZoneInfo) -> float:
    when = dt.datetime.fromtimestamp(t_ms // 1000, tz=dt.timezone.utc).astimezone(zone)
    return when.hour * 3600 + when.minute * 60 + when.second + (t_ms % 1000) / 1000


def _distance(a, b) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * 6_371_000.0 * math.asin(math.sqrt(min(max(h, 0.0), 1.0)))


def _stats(xs):
    n = len(xs)
    mean = sum(xs) / n
    mean = min(max(mean, min(xs)), max(xs))
    sd = math.sqrt(sum((x - mean) ** 2 for x in xs) / (n - 1)) if n > 1 else 0.0
    return mean, sd, max(xs), min(xs)


def oracle_features(sightings: list[BtSighting], fixes: list[GpsFix], ema_t: int,
                    clock: StudyClock | None = None) -> FeatureVector | None:
    """Literal transcription of every feature definition for one report time."""
    clock = clock or StudyClock()
    zone = ZoneInfo(clock.timezone)
    devices = sorted({s.device for s in sightings})
    times = [s.t for s in sightings] + [f.t for f in fixes]
    if len(devices) > MAX_DEVICES:
        raise OracleGuardError(f"{len(devices)} devices > {MAX_DEVICES}")
    if times and max(times) - min(times) > MAX_DAYS * 86_400_000:
        raise OracleGuardError(f"trace longer than {MAX_DAYS} days")

    start = ema_t - clock.window_s * 1000
    win_bt = [s for s in sightings if start <= s.t < ema_t]
    win_gps = [f for f in fixes if start <= f.t < ema_t]
    if not win_bt or not win_gps:
        return None

    # duty grid anchored at the first sighting, floored on local time
    period = clock.duty_period_s * 1000
    first = min(s.t for s in sightings)
    anchor = first - ((first + _offset_ms(first, zone)) % period)

    def slot(t):
        return (t - anchor) // period

    observed = {slot(s.t) for s in sightings}

    # detections: (device, slot) -> earliest sighting time
    detections = {}
    for s in sightings:
        key = (s.device, slot(s.t))
        if key not in detections or s.t < detections[key]:
            detections[key] = s.t

    # slot -> mean coordinate of fixes sharing the duty period
    slot_fixes = {}
    for f in fixes:
        slot_fixes.setdefault(slot(f.t), []).append((f.lat, f.lon))
    slot_coord = {k: (sum(p[0] for p in v) / len(v), sum(p[1] for p in v) / len(v))
                  for k, v in slot_fixes.items()}

    def daily(t, length_s):
        return int(_seconds_of_day(t, zone) // length_s)

    def nearest_mark(t):
        n = 86_400 // clock.geo_mark_s
        return int((_seconds_of_day(t, zone) + clock.geo_mark_s / 2) // clock.geo_mark_s) % n

    # baseline
    per_device = {}
    for s in win_bt:
        per_device[s.device] = per_device.get(s.device, 0) + 1
    total = len(win_bt)
    ent = 0.0
    if len(per_device) > 1:
        ent = -sum((c / total) * math.log(c / total) for c in per_device.values())

    fam, tem, geo_reg = [], [], []
    query_slot = daily(ema_t, clock.social_slot_s)
    for d in sorted(per_device):
        mine = [(k[1], t) for k, t in detections.items() if k[0] == d]
        fam.append(len(mine) / len(observed))
        same = sum(1 for _, t in mine if daily(t, clock.social_slot_s) == query_slot)
        tem.append(same / len(mine))

        met_slots = {slot(s.t) for s in win_bt if s.device == d}
        met_coords = [slot_coord[k] for k in sorted(met_slots) if k in slot_coord]
        tagged = [slot_coord[k] for k, _ in mine if k in slot_coord]
        if met_coords and tagged:
            anchor_ll = (sum(c[0] for c in met_coords) / len(met_coords),
                         sum(c[1] for c in met_coords) / len(met_coords))
            near = sum(1 for c in tagged if _distance(c, anchor_ll) <= RADIUS_M)
            geo_reg.append(near / len(tagged))

    # place of the window
    center = (sum(f.lat for f in win_gps) / len(win_gps), sum(f.lon for f in win_gps) / len(win_gps))
    ordered = sorted(fixes, key=lambda f: f.t)
    inside = [_distance((f.lat, f.lon), center) <= RADIUS_M for f in ordered]
    span = max(times) - min(times)
    credited = 0
    for i in range(len(ordered) - 1):
        gap = ordered[i + 1].t - ordered[i].t
        if inside[i] and inside[i + 1] and gap <= GAP_MS:
            credited += gap
    geo_fam = credited / span if len(ordered) >= 2 and span > 0 else 0.0

    episodes, run = [], []
    for i, f in enumerate(ordered):
        if inside[i] and run and f.t - run[-1].t <= GAP_MS:
            run.append(f)
            continue
        if run:
            episodes.append(run)
        run = [f] if inside[i] else []
    if run:
        episodes.append(run)

    n_marks = 86_400 // clock.geo_mark_s
    tally = [0] * n_marks
    for ep in episodes:
        covered = set()
        b = ep[0].t + _offset_ms(ep[0].t, zone)
        e = ep[-1].t + _offset_ms(ep[-1].t, zone)
        mark_ms = clock.geo_mark_s * 1000
        m = (b + mark_ms // 2) // mark_ms
        last = (e + mark_ms // 2) // mark_ms
        while m <= last and len(covered) < n_marks:
            covered.add(m % n_marks)
            m += 1
        for c in covered:
            tally[c] += 1
    geo_tem = tally[nearest_mark(ema_t)] / sum(tally) if sum(tally) else 0.0

    reg = _stats(geo_reg) if geo_reg else (math.nan,) * 4
    return FeatureVector(float(len(per_device)), float(total), ent, *_stats(fam), *_stats(tem),
                         geo_fam, geo_tem, *reg)


def oracle_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting half."""
    if len(scores) > 1000:
        raise OracleGuardError("oracle_auc is limited to 1000 points")
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("both classes are required")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def random_guarded_trace(seed: int, clock: StudyClock | None = None, n_devices: int = 5,
                         days: int = 3, start_ms: int = 1_539_320_400_000):
    """Small random trace (sightings, fixes, report times) within the oracle guards.

    Wake-ups recur at a handful of times of day so regularity scores are not
    all trivially small, and devices prefer one of three nearby places.
    """
    import numpy as np

    clock = clock or StudyClock()
    rng = np.random.default_rng(seed)
    period = clock.duty_period_s * 1000
    zone = ZoneInfo(clock.timezone)
    base = start_ms - ((start_ms + _offset_ms(start_ms, zone)) % period)
    per_day = 86_400_000 // period
    times_of_day = np.sort(rng.choice(per_day, size=int(rng.integers(12, 30)), replace=False))
    places = [(30.2849 + rng.normal(0, 3e-4), -97.7341 + rng.normal(0, 3e-4)) for _ in range(3)]
    home = rng.integers(0, 3, size=n_devices)
    devices = [f"d{seed:03d}{k}" for k in range(n_devices)]
    sightings, fixes = [], []
    for day in range(days):
        for k in times_of_day:
            if rng.random() < 0.35:
                continue
            wake = base + (day * per_day + int(k)) * period
            place = int(rng.integers(0, 3))
            for d, dev in enumerate(devices):
                p = 0.7 if home[d] == place else 0.15
                for _ in range(int(rng.random() < p) + int(rng.random() < 0.1)):
                    sightings.append(BtSighting(wake + int(rng.integers(0, clock.active_s * 1000)), dev))
            for _ in range(int(rng.integers(0, 3))):
                lat = places[place][0] + rng.normal(0, 1.2e-4)
                lon = places[place][1] + rng.normal(0, 1.2e-4)
                fixes.append(GpsFix(wake + int(rng.integers(0, clock.active_s * 1000)), float(lat), float(lon)))
    sightings.sort(key=lambda s: s.t)
    fixes.sort(key=lambda f: f.t)
    anchors = rng.choice(len(sightings), size=min(12, len(sightings)), replace=False)
    ema_ts = sorted(int(sightings[i].t + rng.integers(1, 900_000)) for i in anchors)
    return sightings, fixes, ema_ts


def oracle_logistic(X, y, max_iter: int = 200):
    """Unpenalized logistic regression by plain full-step Newton.

    Returns ``[intercept, *coefficients]``. No step control and no separation
    handling: callers pass instances with overlapping classes.
    """
    import numpy as np

    Z = np.column_stack([np.ones(len(y)), np.asarray(X, dtype=float)])
    y = np.asarray(y, dtype=float)
    b = np.zeros(Z.shape[1])
    for _ in range(max_iter):
        p = 1 / (1 + np.exp(-(Z @ b)))
        step = np.linalg.solve(Z.T @ (Z * (p * (1 - p))[:, None]), Z.T @ (y - p))
        b = b + step
        if np.abs(step).max() < 1e-14:
            break
    return b
