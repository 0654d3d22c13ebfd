"""Sensor and survey log ingestion plus the time/geodesy primitives.

Raw files are small delimiter-separated logs, one directory per participant::

    <root>/<participant>/gps.csv        timestamp,latitude,longitude
    <root>/<participant>/bluetooth.csv  timestamp,hashed_mac
    <root>/<participant>/ema.csv        timestamp,loneliness,companions

All timestamps are integer milliseconds since the Unix epoch (UTC). Malformed
rows are skipped and counted rather than aborting the load.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import io
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence
from zoneinfo import ZoneInfo

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
DAY_S = 86_400


class TraceError(ValueError):
    """Base class for ingest failures."""


class IngestError(TraceError):
    """The stream could not be read or decoded."""


class SchemaError(TraceError):
    """The header lacks a required column."""


class GpsFix(NamedTuple):
    t: int
    lat: float
    lon: float


class BtSighting(NamedTuple):
    t: int
    device: str


class Companion(str, enum.Enum):
    ALONE = "Alone"
    CLASSMATES = "Classmates"
    COWORKERS = "Coworkers"
    FAMILY = "Family"
    FRIENDS = "Friends"
    ROOMMATES = "Roommates"
    SIGNIFICANT_OTHER = "SignificantOther"
    STRANGERS = "Strangers"
    OTHER = "Other"


# file token -> enum; tokens are matched after lower-casing and whitespace folding
COMPANION_TOKENS = {
    "no one alone": Companion.ALONE,
    "alone": Companion.ALONE,
    "classmates": Companion.CLASSMATES,
    "classmate": Companion.CLASSMATES,
    "co-workers": Companion.COWORKERS,
    "coworkers": Companion.COWORKERS,
    "co-worker": Companion.COWORKERS,
    "family": Companion.FAMILY,
    "friends": Companion.FRIENDS,
    "friend": Companion.FRIENDS,
    "roommates": Companion.ROOMMATES,
    "roommate": Companion.ROOMMATES,
    "significant other": Companion.SIGNIFICANT_OTHER,
    "strangers": Companion.STRANGERS,
    "stranger": Companion.STRANGERS,
    "other": Companion.OTHER,
}

# canonical token written back to files
COMPANION_FILE_TOKEN = {
    Companion.ALONE: "no one alone",
    Companion.CLASSMATES: "classmates",
    Companion.COWORKERS: "co-workers",
    Companion.FAMILY: "family",
    Companion.FRIENDS: "friends",
    Companion.ROOMMATES: "roommates",
    Companion.SIGNIFICANT_OTHER: "significant other",
    Companion.STRANGERS: "strangers",
    Companion.OTHER: "other",
}


@dataclass(frozen=True)
class EmaRecord:
    t: int
    loneliness: int
    companions: frozenset[Companion]


@dataclass(frozen=True)
class ScanSlot:
    index: int
    start: int
    sightings: tuple[BtSighting, ...]


@dataclass(frozen=True)
class StudyClock:
    """Timezone and the fixed periods used to bucket time.

    ``social_slot_s`` is the daily bucket for Bluetooth temporal regularity and
    ``geo_mark_s`` the spacing of the daily marks used for places.
    """

    timezone: str = "America/Chicago"
    duty_period_s: int = 660
    active_s: int = 60
    window_s: int = 900
    social_slot_s: int = 900
    geo_mark_s: int = 1800

    def __post_init__(self):
        for name in ("window_s", "social_slot_s", "geo_mark_s"):
            value = getattr(self, name)
            if value <= 0 or DAY_S % value:
                raise ValueError(f"{name}={value} must divide 86400")
        if not 0 < self.active_s <= self.duty_period_s:
            raise ValueError("active_s must lie in (0, duty_period_s]")
        _zone(self.timezone)

    @property
    def zone(self) -> ZoneInfo:
        return _zone(self.timezone)


@lru_cache(maxsize=None)
def _zone(name: str) -> ZoneInfo:
    return ZoneInfo(name)


@dataclass
class ParseResult:
    """Records accepted from one file plus row-level diagnostics."""

    records: list
    n_rows: int = 0
    skipped: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return len(self.records)


# ---- time primitives


@lru_cache(maxsize=1 << 16)
def _offset_s(zone_name: str, quarter: int) -> int:
    # Every real-world offset transition lands on a UTC quarter hour, so the
    # offset is constant inside each 15-minute UTC bucket.
    when = dt.datetime.fromtimestamp(quarter * 900, tz=dt.timezone.utc)
    return int(when.astimezone(_zone(zone_name)).utcoffset().total_seconds())


def utc_offset_ms(t_ms, clock: StudyClock):
    """UTC offset (ms) of the study zone at each timestamp; scalar or array."""
    if np.ndim(t_ms) == 0:
        return 1000 * _offset_s(clock.timezone, int(t_ms) // 900_000)
    t_ms = np.asarray(t_ms, dtype=np.int64)
    if t_ms.size == 0:
        return np.zeros(0, dtype=np.int64)
    quarters, inverse = np.unique(t_ms // 900_000, return_inverse=True)
    offsets = np.array([_offset_s(clock.timezone, int(q)) for q in quarters], dtype=np.int64)
    return 1000 * offsets[inverse].reshape(t_ms.shape)


def local_ms(t_ms, clock: StudyClock):
    """Milliseconds since the local-time epoch (wall clock read as if UTC)."""
    if np.ndim(t_ms) == 0:
        return int(t_ms) + utc_offset_ms(t_ms, clock)
    t_ms = np.asarray(t_ms, dtype=np.int64)
    return t_ms + utc_offset_ms(t_ms, clock)


def daily_slot_index(t, slot_s: int, clock: StudyClock, nearest: bool = False):
    """Index of the time-of-day bucket of length ``slot_s`` for timestamp(s) ``t``.

    With ``nearest=False`` the containing bucket is returned; with
    ``nearest=True`` the nearest mark, rounding half up, wrapping at midnight.
    """
    if slot_s <= 0 or DAY_S % slot_s:
        raise ValueError(f"slot_s={slot_s} must divide 86400")
    slot_ms = slot_s * 1000
    n_slots = DAY_S // slot_s
    local = local_ms(t, clock)
    if nearest:
        local = local + slot_ms // 2
    return (local // slot_ms) % n_slots


def local_date(t_ms: int, clock: StudyClock) -> dt.date:
    return dt.datetime.fromtimestamp(t_ms / 1000, tz=clock.zone).date()


# ---- geodesy


def haversine_m(a, b):
    """Great-circle distance in meters between (lat, lon) pairs in degrees.

    Either argument may be an ``(..., 2)`` array; broadcasting applies.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


# ---- duty-cycle slots


def slot_anchor_ms(t_first: int, clock: StudyClock) -> int:
    """Start of the duty period containing ``t_first`` on the local-time grid."""
    period_ms = clock.duty_period_s * 1000
    return t_first - local_ms(t_first, clock) % period_ms


def slot_ids(t_ms, anchor_ms: int, clock: StudyClock):
    return (np.asarray(t_ms, dtype=np.int64) - anchor_ms) // (clock.duty_period_s * 1000)


def group_scan_slots(sightings: Sequence[BtSighting], clock: StudyClock) -> list[ScanSlot]:
    """Bucket time-sorted sightings into duty-cycle periods; empty periods are dropped."""
    if not sightings:
        return []
    period_ms = clock.duty_period_s * 1000
    anchor = slot_anchor_ms(sightings[0].t, clock)
    slots: list[ScanSlot] = []
    current: list[BtSighting] = []
    current_idx = None
    for s in sightings:
        idx = (s.t - anchor) // period_ms
        if idx != current_idx:
            if current:
                slots.append(ScanSlot(current_idx, anchor + current_idx * period_ms, tuple(current)))
            current, current_idx = [], idx
        current.append(s)
    slots.append(ScanSlot(current_idx, anchor + current_idx * period_ms, tuple(current)))
    return slots


# ---- parsers


def _open_rows(stream, required: Iterable[str]):
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    try:
        raw = stream.read()
    except OSError as exc:
        raise IngestError(f"unreadable stream: {exc}") from exc
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise IngestError(f"stream is not UTF-8: {exc}") from exc
    reader = csv.reader(io.StringIO(raw))
    header = next(reader, None)
    if header is None:
        raise SchemaError("empty file: header row missing")
    header = [h.strip().lower() for h in header]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"header {header} lacks column(s) {missing}")
    cols = {name: header.index(name) for name in required}
    rows = (r for r in reader if r and any(cell.strip() for cell in r))
    return cols, rows


def _cell(row: list[str], idx: int) -> str:
    return row[idx].strip() if idx < len(row) else ""


def parse_gps(stream: IO[bytes] | bytes, participant: str = "") -> ParseResult:
    cols, rows = _open_rows(stream, ("timestamp", "latitude", "longitude"))
    out = ParseResult([])
    for lineno, row in enumerate(rows, start=2):
        out.n_rows += 1
        try:
            fix = GpsFix(int(_cell(row, cols["timestamp"])),
                         float(_cell(row, cols["latitude"])),
                         float(_cell(row, cols["longitude"])))
        except ValueError:
            out.skipped += 1
            out.notes.append(f"{participant} gps line {lineno}: unparsable row")
            continue
        if not (-90.0 <= fix.lat <= 90.0 and -180.0 <= fix.lon <= 180.0):
            out.skipped += 1
            out.notes.append(f"{participant} gps line {lineno}: coordinate out of range")
            continue
        out.records.append(fix)
    out.records.sort(key=lambda f: f.t)
    return out


def parse_bluetooth(stream: IO[bytes] | bytes, participant: str = "") -> ParseResult:
    cols, rows = _open_rows(stream, ("timestamp", "hashed_mac"))
    out = ParseResult([])
    for lineno, row in enumerate(rows, start=2):
        out.n_rows += 1
        device = _cell(row, cols["hashed_mac"])
        try:
            t = int(_cell(row, cols["timestamp"]))
        except ValueError:
            out.skipped += 1
            out.notes.append(f"{participant} bluetooth line {lineno}: unparsable timestamp")
            continue
        if not device:
            out.skipped += 1
            out.notes.append(f"{participant} bluetooth line {lineno}: empty device token")
            continue
        out.records.append(BtSighting(t, device))
    out.records.sort(key=lambda s: s.t)
    return out


def parse_companions(cell: str) -> tuple[frozenset[Companion], list[str]]:
    found, unknown = set(), []
    for token in cell.split(";"):
        token = " ".join(token.strip().lower().split())
        if not token:
            continue
        comp = COMPANION_TOKENS.get(token)
        if comp is None:
            unknown.append(token)
            comp = Companion.OTHER
        found.add(comp)
    return frozenset(found), unknown


def parse_ema(stream: IO[bytes] | bytes, participant: str = "") -> ParseResult:
    cols, rows = _open_rows(stream, ("timestamp", "loneliness", "companions"))
    out = ParseResult([])
    for lineno, row in enumerate(rows, start=2):
        out.n_rows += 1
        try:
            t = int(_cell(row, cols["timestamp"]))
            level = int(_cell(row, cols["loneliness"]))
        except ValueError:
            out.skipped += 1
            out.notes.append(f"{participant} ema line {lineno}: unparsable row")
            continue
        if level not in (0, 1, 2, 3):
            out.skipped += 1
            out.notes.append(f"{participant} ema line {lineno}: loneliness {level} outside 0..3")
            continue
        companions, unknown = parse_companions(_cell(row, cols["companions"]))
        if not companions:
            out.skipped += 1
            out.notes.append(f"{participant} ema line {lineno}: no companionship answer")
            continue
        if unknown:
            out.notes.append(f"{participant} ema line {lineno}: unknown token(s) {unknown} mapped to Other")
        out.records.append(EmaRecord(t, level, companions))
    out.records.sort(key=lambda e: e.t)
    return out


def parse_metadata(stream: IO[bytes] | bytes) -> dict[str, dict[str, str]]:
    """Participant metadata (``participant,gender,age``) keyed by participant id."""
    cols, rows = _open_rows(stream, ("participant", "gender", "age"))
    meta = {}
    for row in rows:
        pid = _cell(row, cols["participant"])
        if pid:
            meta[pid] = {"gender": _cell(row, cols["gender"]).lower(), "age": _cell(row, cols["age"])}
    return meta


# ---- writers (inverse of the parsers; used by the generator and tests)


def write_gps(path: Path, fixes: Iterable[GpsFix]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,latitude,longitude\n")
        for f in fixes:
            fh.write(f"{f.t},{f.lat:.7f},{f.lon:.7f}\n")


def write_bluetooth(path: Path, sightings: Iterable[BtSighting]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,hashed_mac\n")
        for s in sightings:
            fh.write(f"{s.t},{s.device}\n")


def write_ema(path: Path, records: Iterable[EmaRecord]) -> None:
    order = list(Companion)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,loneliness,companions\n")
        for r in records:
            tokens = ";".join(COMPANION_FILE_TOKEN[c] for c in sorted(r.companions, key=order.index))
            fh.write(f"{r.t},{r.loneliness},{tokens}\n")


# ---- directory loading


@dataclass
class ParticipantData:
    participant: str
    fixes: list[GpsFix]
    sightings: list[BtSighting]
    ema: list[EmaRecord]
    diagnostics: dict[str, ParseResult] = field(default_factory=dict)


def _parse_file(path: Path, parser, participant: str) -> ParseResult:
    if not path.exists():
        return ParseResult([], notes=[f"{participant}: {path.name} missing"])
    try:
        with open(path, "rb") as fh:
            return parser(fh, participant)
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


def load_participant(directory: Path) -> ParticipantData:
    directory = Path(directory)
    pid = directory.name
    gps = _parse_file(directory / "gps.csv", parse_gps, pid)
    bt = _parse_file(directory / "bluetooth.csv", parse_bluetooth, pid)
    ema = _parse_file(directory / "ema.csv", parse_ema, pid)
    return ParticipantData(pid, gps.records, bt.records, ema.records,
                           {"gps": gps, "bluetooth": bt, "ema": ema})


def participant_dirs(root: Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir())


def load_study(root: Path) -> list[ParticipantData]:
    return [load_participant(p) for p in participant_dirs(root)]


def load_metadata(root: Path) -> dict[str, dict[str, str]]:
    path = Path(root) / "metadata.csv"
    if not path.exists():
        return {}
    with open(path, "rb") as fh:
        return parse_metadata(fh)
