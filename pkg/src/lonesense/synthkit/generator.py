"""Seeded agent-based cohort generator with planted context -> loneliness links.

Each participant lives on a daily schedule of blocks (home at night, fixed
weekday classes, then leisure blocks drawn from the participant's habits). A
block has a *context* that decides where the phone is and which devices are
around:

============== =========================== ===============================
context        place                       devices
============== =========================== ===============================
home_alone     home                        occasional transient passers-by
home_roommates home                        roommates
class          class room (fixed per class) the class roster
public         one of a few public places  a fresh crowd per visit
friends        a friend's place            two to four friends
partner        home or partner's place     the partner
============== =========================== ===============================

Loneliness at a self-report is Bernoulli on the log-odds::

    intercept + w_devices * z(devices seen) + w_regularity * z(regularity)
              + w_alone * alone + w_close * close + u_participant

where *devices seen* counts distinct devices sighted in the hour before the
report, and *regularity* averages, over those devices, the share of a
device's sighting wake-ups that fall in the report's quarter hour of the day.
Both are computed here from the generated wake-ups, not by the feature code.

Among lonely reports, severity (1 vs 2-3) follows a separate, weaker logit so
that telling levels apart is harder than telling presence from absence.
"""

from __future__ import annotations

import bisect
import configparser
import csv
import dataclasses
import datetime as dt
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..labels import CompanionBin, bin_companionship
from ..traces import (
    BtSighting,
    Companion,
    EmaRecord,
    GpsFix,
    ParticipantData,
    StudyClock,
    utc_offset_ms,
    write_bluetooth,
    write_ema,
    write_gps,
)

CONTEXTS = ("home_alone", "home_roommates", "class", "public", "friends", "partner")
COMPANIONS_OF = {
    "home_alone": frozenset({Companion.ALONE}),
    "home_roommates": frozenset({Companion.ROOMMATES}),
    "class": frozenset({Companion.CLASSMATES}),
    "public": frozenset({Companion.STRANGERS}),
    "friends": frozenset({Companion.FRIENDS}),
    "partner": frozenset({Companion.SIGNIFICANT_OTHER}),
}
M_PER_DEG = 111_195.0
# centering of the observed drivers (typical cohort mean and spread)
DEVICE_CENTER, DEVICE_SCALE = 4.0, 4.0
REGULARITY_CENTER, REGULARITY_SCALE = 0.15, 0.25
QUARTER_MS = 15 * 60_000


class CohortConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CohortConfig:
    n_participants: int = 40
    study_days: int = 21
    start_date: str = "2018-10-08"
    timezone: str = "America/Chicago"
    duty_period_s: int = 660
    active_s: int = 60
    ema_min: int = 1
    ema_max: int = 4
    ema_first_hour: float = 9.0
    ema_last_hour: float = 22.0
    # world
    campus_lat: float = 30.2849
    campus_lon: float = -97.7341
    home_spread_m: float = 2500.0
    gps_jitter_m: float = 6.0
    class_hours: tuple[float, ...] = (9.0, 11.0, 13.0, 15.0)
    class_minutes: int = 75
    classes_per_participant: int = 2
    class_size_min: int = 8
    class_size_max: int = 25
    n_public_places: int = 3
    crowd_density: float = 10.0
    ambient_rate: float = 0.7
    friends_min: int = 3
    friends_max: int = 8
    roommates_max: int = 3
    partner_rate: float = 0.5
    detect_prob: float = 0.85
    crowd_detect_prob: float = 0.6
    gps_rate: float = 0.9
    bt_dropout: float = 0.05
    phone_off_rate: float = 0.15
    # planted effects
    intercept: float = -1.0
    w_devices: float = 0.6
    w_regularity: float = 0.8
    w_alone: float = 2.5
    w_close: float = -2.2
    person_sd: float = 0.3
    severity_intercept: float = 0.0
    severity_signal: float = 0.5
    severity_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_participants < 1:
            raise CohortConfigError("n_participants must be >= 1")
        if self.study_days < 2:
            raise CohortConfigError("study_days must be >= 2")
        if not 1 <= self.ema_min <= self.ema_max:
            raise CohortConfigError("need 1 <= ema_min <= ema_max")
        if not 0 <= self.ema_first_hour < self.ema_last_hour <= 24:
            raise CohortConfigError("EMA hours must satisfy 0 <= first < last <= 24")
        for name in ("crowd_density", "ambient_rate", "home_spread_m", "gps_jitter_m", "person_sd",
                     "severity_noise"):
            if not getattr(self, name) >= 0:
                raise CohortConfigError(f"{name} must be >= 0")
        for name in ("partner_rate", "detect_prob", "crowd_detect_prob", "gps_rate", "bt_dropout",
                     "phone_off_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise CohortConfigError(f"{name} must lie in [0, 1]")
        for name in ("intercept", "w_devices", "w_regularity", "w_alone", "w_close", "severity_intercept",
                     "severity_signal"):
            if not math.isfinite(getattr(self, name)):
                raise CohortConfigError(f"{name} must be finite")
        if not 0 < self.active_s <= self.duty_period_s:
            raise CohortConfigError("active_s must lie in (0, duty_period_s]")
        if not 1 <= self.class_size_min <= self.class_size_max:
            raise CohortConfigError("need 1 <= class_size_min <= class_size_max")
        if not 1 <= self.friends_min <= self.friends_max:
            raise CohortConfigError("need 1 <= friends_min <= friends_max")
        if self.classes_per_participant > len(self.class_hours):
            raise CohortConfigError("classes_per_participant exceeds the number of class times")
        hours = sorted(self.class_hours)
        for a, b in zip(hours, hours[1:]):
            if (b - a) * 60 < self.class_minutes:
                raise CohortConfigError(f"class blocks at {a:g}h and {b:g}h overlap")
        if hours and (hours[0] < 8 or hours[-1] * 60 + self.class_minutes > 23 * 60):
            raise CohortConfigError("class blocks must fall between 08:00 and 23:00")
        dt.date.fromisoformat(self.start_date)

    @property
    def clock(self) -> StudyClock:
        return StudyClock(timezone=self.timezone, duty_period_s=self.duty_period_s, active_s=self.active_s)


def strong_effect(**overrides) -> CohortConfig:
    """Documented strong-effect cohort: 40 participants, 21 days."""
    return dataclasses.replace(CohortConfig(), **overrides)


def null_effect(**overrides) -> CohortConfig:
    """Same world, loneliness independent of everything."""
    base = CohortConfig(w_devices=0.0, w_regularity=0.0, w_alone=0.0, w_close=0.0, person_sd=0.0,
                        severity_signal=0.0, intercept=-0.4)
    return dataclasses.replace(base, **overrides)


def severity_noise(**overrides) -> CohortConfig:
    """Strong presence signal, severity nearly pure noise."""
    base = CohortConfig(severity_signal=0.1, severity_noise=1.5)
    return dataclasses.replace(base, **overrides)


PRESETS = {"strong_effect": strong_effect, "null_effect": null_effect, "severity_noise": severity_noise}


# ---- config files


def _coerce(field_type, raw: str):
    raw = raw.strip().strip('"').strip("'")
    if field_type in ("int", int):
        return int(raw)
    if field_type in ("float", float):
        return float(raw)
    if field_type in ("str", str):
        return raw
    if "tuple" in str(field_type):
        raw = raw.strip("[]()")
        return tuple(float(v) for v in raw.split(",") if v.strip())
    raise CohortConfigError(f"unsupported field type {field_type!r}")


def parse_config(text: str) -> CohortConfig:
    """Flat ``key = value`` text; ``preset = name`` picks the base configuration.

    Lines starting with ``#`` are comments. Lists are comma separated, with or
    without square brackets.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[cohort]\n" + text)
    except configparser.Error as exc:
        raise CohortConfigError(f"malformed config: {exc}") from None
    items = dict(parser["cohort"])
    preset = items.pop("preset", "strong_effect").strip().strip('"')
    if preset not in PRESETS:
        raise CohortConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    types = {f.name: f.type for f in dataclasses.fields(CohortConfig)}
    overrides = {}
    for key, raw in items.items():
        if key not in types:
            raise CohortConfigError(f"unknown config key {key!r}")
        try:
            overrides[key] = _coerce(types[key], raw)
        except ValueError:
            raise CohortConfigError(f"bad value for {key}: {raw!r}") from None
    return PRESETS[preset](**overrides)


def load_config(path: Path) -> CohortConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: CohortConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---- generated cohort


@dataclass(frozen=True)
class TruthRecord:
    participant: str
    ema_t: int
    log_odds: float
    bin: CompanionBin
    context: str
    roster: tuple[str, ...]


@dataclass
class GroundTruth:
    records: list[TruthRecord] = field(default_factory=list)
    person_effect: dict[str, float] = field(default_factory=dict)

    def by_key(self) -> dict[tuple[str, int], TruthRecord]:
        return {(r.participant, r.ema_t): r for r in self.records}


@dataclass
class Cohort:
    config: CohortConfig
    participants: list[ParticipantData]
    metadata: dict[str, dict[str, str]]
    truth: GroundTruth


def _token(*parts) -> str:
    return hashlib.blake2s(":".join(map(str, parts)).encode(), digest_size=6).hexdigest()


def _offset_point(rng, lat, lon, spread_m):
    r = spread_m * math.sqrt(rng.random())
    a = 2 * math.pi * rng.random()
    return (lat + r * math.cos(a) / M_PER_DEG,
            lon + r * math.sin(a) / (M_PER_DEG * math.cos(math.radians(lat))))


@dataclass
class _Block:
    start: int  # local ms
    end: int
    context: str
    place: tuple[float, float]
    devices: tuple[str, ...]  # devices present for the whole block
    detect: float


class _Person:
    """Static world of one participant: places, rosters and habits."""

    def __init__(self, cfg: CohortConfig, index: int, rng: np.random.Generator):
        self.cfg = cfg
        self.pid = f"p{index:03d}"
        self.home = _offset_point(rng, cfg.campus_lat, cfg.campus_lon, cfg.home_spread_m)
        self.publics = [_offset_point(rng, cfg.campus_lat, cfg.campus_lon, cfg.home_spread_m)
                        for _ in range(cfg.n_public_places)]
        self.friend_places = [_offset_point(rng, cfg.campus_lat, cfg.campus_lon, cfg.home_spread_m)
                              for _ in range(2)]
        n_friends = int(rng.integers(cfg.friends_min, cfg.friends_max + 1))
        self.friends = [_token(self.pid, "friend", k) for k in range(n_friends)]
        self.roommates = [_token(self.pid, "roommate", k)
                          for k in range(int(rng.integers(0, cfg.roommates_max + 1)))]
        self.partner = _token(self.pid, "partner") if rng.random() < cfg.partner_rate else None
        self.partner_place = _offset_point(rng, cfg.campus_lat, cfg.campus_lon, cfg.home_spread_m)
        picks = rng.choice(len(cfg.class_hours), size=cfg.classes_per_participant, replace=False)
        self.classes = []
        for k, c in enumerate(sorted(int(i) for i in picks)):
            days = (0, 2, 4) if rng.random() < 0.5 else (1, 3)
            size = int(rng.integers(cfg.class_size_min, cfg.class_size_max + 1))
            roster = tuple(_token(self.pid, "class", k, j) for j in range(size))
            place = _offset_point(rng, cfg.campus_lat, cfg.campus_lon, 400.0)
            self.classes.append((cfg.class_hours[c], days, roster, place))
        habits = np.array([0.45, 0.2, 0.25, 0.2 if self.partner else 0.0]) * rng.uniform(0.5, 1.5, 4)
        self.habits = habits / habits.sum()  # home, public, friends, partner
        self.u = float(rng.normal(0.0, cfg.person_sd)) if cfg.person_sd > 0 else 0.0
        self.gender = "m" if rng.random() < 2 / 3 else "f"
        self.age = int(rng.integers(18, 22))
        self.visit = 0

    def _leisure(self, rng, start, end) -> _Block:
        kind = ("home", "public", "friends", "partner")[int(rng.choice(4, p=self.habits))]
        cfg = self.cfg
        if kind == "home":
            present = [r for r in self.roommates if rng.random() < 0.6]
            if present:
                return _Block(start, end, "home_roommates", self.home, tuple(present), cfg.detect_prob)
            return _Block(start, end, "home_alone", self.home, (), cfg.detect_prob)
        if kind == "public":
            self.visit += 1
            n = int(rng.poisson(cfg.crowd_density))
            crowd = tuple(_token(self.pid, "crowd", self.visit, j) for j in range(n))
            place = self.publics[int(rng.integers(len(self.publics)))]
            return _Block(start, end, "public", place, crowd, cfg.crowd_detect_prob)
        if kind == "friends":
            k = min(len(self.friends), int(rng.integers(2, 5)))
            chosen = tuple(sorted(rng.choice(self.friends, size=k, replace=False).tolist()))
            place = self.friend_places[int(rng.integers(2))] if rng.random() < 0.7 else self.home
            return _Block(start, end, "friends", place, chosen, cfg.detect_prob)
        place = self.partner_place if rng.random() < 0.5 else self.home
        return _Block(start, end, "partner", place, (self.partner,), cfg.detect_prob)

    def day_blocks(self, rng, day_start: int, weekday: int) -> list[_Block]:
        """Blocks covering one local day [day_start, day_start + 24h)."""
        cfg = self.cfg
        h = 3_600_000
        night = self._night(rng, day_start, day_start + 8 * h)
        fixed = []
        if weekday < 5:
            for hour, days, roster, place in self.classes:
                if weekday in days:
                    s = day_start + int(hour * h)
                    attending = tuple(d for d in roster if rng.random() < 0.85)
                    fixed.append(_Block(s, s + cfg.class_minutes * 60_000, "class", place, attending,
                                        cfg.detect_prob))
        fixed.sort(key=lambda b: b.start)
        blocks = [night]
        t = day_start + 8 * h
        end_of_day = day_start + 23 * h
        for fb in fixed + [None]:
            stop = fb.start if fb is not None else end_of_day
            while t < stop:
                length = int(rng.integers(30, 151)) * 60_000
                e = min(stop, t + length)
                blocks.append(self._leisure(rng, t, e))
                t = e
            if fb is not None:
                blocks.append(fb)
                t = fb.end
        blocks.append(self._night(rng, end_of_day, day_start + 24 * h))
        return blocks

    def _night(self, rng, start, end) -> _Block:
        present = tuple(r for r in self.roommates if rng.random() < 0.8)
        if present:
            return _Block(start, end, "home_roommates", self.home, present, self.cfg.detect_prob)
        return _Block(start, end, "home_alone", self.home, (), self.cfg.detect_prob)


def _to_utc(local: int, clock: StudyClock) -> int:
    # local wall clock -> UTC; the second pass settles offsets near transitions
    t = local - utc_offset_ms(local, clock)
    return local - utc_offset_ms(t, clock)


def _jitter(rng, place, sd_m):
    lat = place[0] + rng.normal(0.0, sd_m) / M_PER_DEG
    lon = place[1] + rng.normal(0.0, sd_m) / (M_PER_DEG * math.cos(math.radians(place[0])))
    return round(float(lat), 7), round(float(lon), 7)


def _simulate_person(cfg: CohortConfig, index: int) -> tuple[ParticipantData, list[TruthRecord], _Person]:
    rng = np.random.default_rng([cfg.seed, index])
    clock = cfg.clock
    person = _Person(cfg, index, rng)
    period = cfg.duty_period_s * 1000
    active = cfg.active_s * 1000
    day_ms = 86_400_000
    start = dt.date.fromisoformat(cfg.start_date)
    epoch_local = (start - dt.date(1970, 1, 1)).days * day_ms

    sightings: list[BtSighting] = []
    fixes: list[GpsFix] = []
    blocks: list[_Block] = []
    for day in range(cfg.study_days):
        blocks.extend(person.day_blocks(rng, epoch_local + day * day_ms, (start.weekday() + day) % 7))

    # phone-off stretches, one chance per day
    off = []
    for day in range(cfg.study_days):
        if rng.random() < cfg.phone_off_rate:
            s = epoch_local + day * day_ms + int(rng.integers(0, 24 * 60)) * 60_000
            off.append((s, s + int(rng.integers(60, 241)) * 60_000))

    first_wake = -(-epoch_local // period) * period
    last = epoch_local + cfg.study_days * day_ms
    bi = 0
    oi = 0
    # per device: sighting wake-ups by quarter hour of the local day
    quarters: dict[str, np.ndarray] = {}
    for wake_local in range(first_wake, last, period):
        while blocks[bi].end <= wake_local:
            bi += 1
        while oi < len(off) and off[oi][1] <= wake_local:
            oi += 1
        if oi < len(off) and off[oi][0] <= wake_local:
            continue
        b = blocks[bi]
        wake = _to_utc(wake_local, clock)
        if rng.random() >= cfg.bt_dropout:
            seen = [d for d in b.devices if rng.random() < b.detect]
            if b.context in ("home_alone", "home_roommates", "partner"):
                seen += [_token(person.pid, "ambient", wake, j)
                         for j in range(int(rng.poisson(cfg.ambient_rate)))]
            q = (wake_local % day_ms) // QUARTER_MS
            for d in seen:
                quarters.setdefault(d, np.zeros(96, dtype=np.int64))[q] += 1
                for _ in range(1 + int(rng.random() < 0.3)):
                    sightings.append(BtSighting(wake + int(rng.integers(0, active)), d))
        if rng.random() < cfg.gps_rate:
            lat, lon = _jitter(rng, b.place, cfg.gps_jitter_m)
            fixes.append(GpsFix(wake + int(rng.integers(0, active)), lat, lon))
    sightings.sort()
    fixes.sort()

    # self-reports
    ema: list[EmaRecord] = []
    truth: list[TruthRecord] = []
    bt_times = [s.t for s in sightings]
    window = clock.window_s * 1000
    block_starts = [b.start for b in blocks]
    companion_devices = set(person.friends) | set(person.roommates) | {person.partner} \
        | {d for _, _, r, _ in person.classes for d in r}
    for day in range(cfg.study_days):
        n = int(rng.integers(cfg.ema_min, cfg.ema_max + 1))
        lo = epoch_local + day * day_ms + int(cfg.ema_first_hour * 3_600_000)
        hi = epoch_local + day * day_ms + int(cfg.ema_last_hour * 3_600_000)
        for local in sorted(int(v) for v in rng.integers(lo, hi, size=n)):
            b = blocks[bisect.bisect_right(block_starts, local) - 1]
            t = _to_utc(local, clock)
            lo_i = bisect.bisect_left(bt_times, t - window)
            hi_i = bisect.bisect_left(bt_times, t)
            in_window = {s.device for s in sightings[lo_i:hi_i]}
            q = (local % day_ms) // QUARTER_MS
            regularity = (sum(quarters[d][q] / quarters[d].sum() for d in in_window) / len(in_window)
                          if in_window else 0.0)
            context_part = (cfg.w_devices * (len(in_window) - DEVICE_CENTER) / DEVICE_SCALE
                            + cfg.w_regularity * (regularity - REGULARITY_CENTER) / REGULARITY_SCALE
                            + cfg.w_alone * (b.context == "home_alone")
                            + cfg.w_close * (b.context in ("friends", "partner")))
            log_odds = cfg.intercept + context_part + person.u
            lonely = rng.random() < 1 / (1 + math.exp(-log_odds))
            sev_logit = cfg.severity_intercept + cfg.severity_signal * context_part \
                + cfg.severity_noise * float(rng.normal())
            severe = rng.random() < 1 / (1 + math.exp(-sev_logit))
            level = 0 if not lonely else (1 if not severe else (2 if rng.random() < 0.65 else 3))
            companions = COMPANIONS_OF[b.context]
            rec = EmaRecord(t, level, companions)
            roster = tuple(sorted(in_window & companion_devices))
            ema.append(rec)
            truth.append(TruthRecord(person.pid, t, log_odds, bin_companionship(rec), b.context, roster))
    data = ParticipantData(person.pid, fixes, sightings, ema)
    return data, truth, person


def generate_cohort(cfg: CohortConfig) -> Cohort:
    participants, metadata = [], {}
    truth = GroundTruth()
    for i in range(cfg.n_participants):
        data, recs, person = _simulate_person(cfg, i)
        participants.append(data)
        truth.records.extend(recs)
        truth.person_effect[person.pid] = person.u
        metadata[person.pid] = {"gender": person.gender, "age": str(person.age)}
    return Cohort(cfg, participants, metadata, truth)


def write_cohort(cohort: Cohort, out: Path) -> list[Path]:
    """Write the study directory layout plus metadata, ground truth and config."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in cohort.participants:
        d = out / p.participant
        d.mkdir(exist_ok=True)
        write_gps(d / "gps.csv", p.fixes)
        write_bluetooth(d / "bluetooth.csv", p.sightings)
        write_ema(d / "ema.csv", p.ema)
        written += [d / "gps.csv", d / "bluetooth.csv", d / "ema.csv"]
    with open(out / "metadata.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant", "gender", "age"])
        for pid in sorted(cohort.metadata):
            w.writerow([pid, cohort.metadata[pid]["gender"], cohort.metadata[pid]["age"]])
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant", "ema_timestamp", "log_odds", "bin", "context", "roster"])
        for r in cohort.truth.records:
            w.writerow([r.participant, r.ema_t, repr(r.log_odds), r.bin.value, r.context, ";".join(r.roster)])
    (out / "cohort.cfg").write_text(dump_config(cohort.config), encoding="utf-8")
    written += [out / "metadata.csv", out / "ground_truth.csv", out / "cohort.cfg"]
    return written


def cohort_observations(cohort: Cohort) -> list:
    """Extract features for every participant and join them with the reports."""
    from ..evaluation import join_observations
    from ..geosocial import extract_participant

    rows = []
    for p in cohort.participants:
        rows += extract_participant(p, cohort.config.clock)[0]
    return join_observations(rows, {p.participant: p.ema for p in cohort.participants})
