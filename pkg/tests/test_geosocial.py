import datetime as dt
import math
from zoneinfo import ZoneInfo

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lonesense.geosocial import (
    FEATURE_NAMES,
    FeatureIneligible,
    FeatureRow,
    FeatureVector,
    ParticipantHistory,
    Place,
    UnknownDevice,
    aggregate_stats,
    baseline_features,
    entropy,
    extract_features,
    extract_participant,
    geographic_familiarity,
    geographic_temporal_regularity,
    impute_running_mean,
    mark_histogram,
    place_episodes,
    read_feature_csv,
    social_familiarity,
    social_geographic_regularity,
    social_temporal_regularity,
    write_feature_csv,
)
from lonesense.synthkit.oracles import oracle_features, random_guarded_trace
from lonesense.traces import BtSighting, GpsFix, ParticipantData, StudyClock, slot_anchor_ms

CLOCK = StudyClock()
ZONE = ZoneInfo("America/Chicago")
HOME = (30.2849, -97.7341)
PERIOD = 660_000


def at(day, h, m=0, s=0):
    return int(dt.datetime(2018, 10, 15 + day, h, m, s, tzinfo=ZONE).timestamp() * 1000)


def north(meters, origin=HOME):
    return (origin[0] + meters / 111_195.0, origin[1])


# ---- baseline


def _window_with_counts(counts):
    t0 = at(0, 12)
    sightings = [BtSighting(t0 + 1000 * k, dev) for dev, n in counts.items() for k in range(n)]
    h = ParticipantHistory(sorted(sightings), [GpsFix(t0, *HOME)])
    return h.window(t0 + 60_000)


def test_baseline_single_device():
    assert baseline_features(_window_with_counts({"A": 4})) == (1, 4, 0.0)


def test_baseline_uniform_two_devices():
    n, c, e = baseline_features(_window_with_counts({"A": 2, "B": 2}))
    assert (n, c) == (2, 4) and e == pytest.approx(math.log(2), abs=1e-12)


def test_baseline_skewed_entropy():
    # -(0.75 ln 0.75 + 0.25 ln 0.25)
    n, c, e = baseline_features(_window_with_counts({"A": 3, "B": 1}))
    assert (n, c) == (2, 4)
    assert e == pytest.approx(0.5623351446188083, abs=1e-12)
    assert round(e, 4) == 0.5623


def test_baseline_needs_bluetooth():
    h = ParticipantHistory([], [GpsFix(at(0, 12), *HOME)])
    with pytest.raises(FeatureIneligible):
        baseline_features(h.window(at(0, 13)))


@given(st.lists(st.integers(1, 50), min_size=1, max_size=20))
def test_entropy_bounds(counts):
    e = entropy(counts)
    assert -1e-12 <= e <= math.log(len(counts)) + 1e-12


# ---- social familiarity and temporal regularity


def _grid(day=0, h=0):
    return slot_anchor_ms(at(day, h), CLOCK)


def test_familiarity_ten_of_hundred():
    base = _grid()
    sightings = [BtSighting(base + k * PERIOD + 1000, "a") for k in range(100)]
    sightings += [BtSighting(base + k * PERIOD + 2000, "b") for k in range(0, 100, 10)]
    h = ParticipantHistory(sorted(sightings), [])
    assert h.n_observed_slots == 100
    assert social_familiarity("b", h) == pytest.approx(0.10)
    assert social_familiarity("a", h) == 1.0


def test_familiarity_three_of_two_thousand():
    base = _grid()
    sightings = [BtSighting(base + k * PERIOD + 1000, "bg") for k in range(2000)]
    sightings += [BtSighting(base + k * PERIOD + 5000, "x") for k in (3, 900, 1500)]
    h = ParticipantHistory(sorted(sightings), [])
    assert social_familiarity("x", h) == pytest.approx(0.0015)


def test_repeat_sightings_in_one_slot_count_once():
    base = _grid()
    sightings = [BtSighting(base + 1000, "a"), BtSighting(base + 20_000, "a"), BtSighting(base + PERIOD + 1, "b")]
    h = ParticipantHistory(sightings, [])
    assert social_familiarity("a", h) == 0.5


def test_unknown_device():
    h = ParticipantHistory([BtSighting(_grid(), "a")], [])
    with pytest.raises(UnknownDevice):
        social_familiarity("zz", h)


def test_temporal_regularity_three_of_four():
    sightings = [BtSighting(at(d, 10, 3), "a") for d in range(3)] + [BtSighting(at(3, 15, 0), "a")]
    h = ParticipantHistory(sightings, [])
    assert social_temporal_regularity("a", at(4, 10, 7), h) == 0.75


def test_temporal_regularity_singleton():
    h = ParticipantHistory([BtSighting(at(0, 8, 1), "a")], [])
    assert social_temporal_regularity("a", at(0, 8, 5), h) == 1.0


def test_temporal_regularity_spread_over_ten_slots():
    sightings = [BtSighting(at(0, 8 + k, 0), "a") for k in range(10)]
    h = ParticipantHistory(sightings, [])
    for k in range(10):
        assert social_temporal_regularity("a", at(1, 8 + k, 5), h) == pytest.approx(0.10)


def test_single_device_single_slot_trace():
    t = at(0, 9, 0)
    h = ParticipantHistory([BtSighting(t, "a")], [GpsFix(t, *HOME)])
    v = extract_features(t + 60_000, h)
    assert v.socio_fam_mean == v.socio_fam_max == 1.0
    assert v.socio_temReg_mean == 1.0


# ---- geographic features


def test_geo_familiarity_tenth_of_study():
    # 721 fixes every 30 min: the first 73 inside (36 credited hours) of a 360-hour span
    t0 = at(0, 0)
    fixes = [GpsFix(t0 + k * 1_800_000, *(HOME if k <= 72 else north(500))) for k in range(721)]
    h = ParticipantHistory([], fixes)
    assert h.span_ms == 360 * 3_600_000
    assert geographic_familiarity(Place(HOME), h) == pytest.approx(0.10)


def test_geo_familiarity_all_inside():
    fixes = [GpsFix(at(0, 0) + k * 600_000, *north(k % 3)) for k in range(50)]
    assert geographic_familiarity(Place(HOME), ParticipantHistory([], fixes)) == pytest.approx(1.0)


def test_geo_familiarity_gaps_not_credited():
    fixes = [GpsFix(at(0, 0), *HOME), GpsFix(at(0, 1), *HOME), GpsFix(at(0, 2), *HOME)]
    assert geographic_familiarity(Place(HOME), ParticipantHistory([], fixes)) == 0.0


def test_geo_familiarity_ineligible_with_one_fix():
    with pytest.raises(FeatureIneligible):
        geographic_familiarity(Place(HOME), ParticipantHistory([], [GpsFix(at(0, 0), *HOME)]))


def test_mark_multiset_three_of_four():
    fixes = [GpsFix(at(d, 9, 0), *HOME) for d in range(3)] + [GpsFix(at(3, 14, 30), *HOME)]
    h = ParticipantHistory([], fixes)
    assert len(place_episodes(Place(HOME), h)) == 4
    hist = mark_histogram(place_episodes(Place(HOME), h), CLOCK)
    assert hist[18] == 3 and hist[29] == 1 and hist.sum() == 4
    assert geographic_temporal_regularity(Place(HOME), at(4, 9, 5), h) == 0.75


def test_place_visited_at_one_mark_only():
    fixes = [GpsFix(at(d, 17, 2), *HOME) for d in range(4)]
    h = ParticipantHistory([], fixes)
    assert geographic_temporal_regularity(Place(HOME), at(5, 16, 50), h) == 1.0


def test_all_day_place_is_uniform():
    fixes = [GpsFix(at(0, 0) + k * 600_000, *HOME) for k in range(144 * 3)]
    h = ParticipantHistory([], fixes)
    for hour in (0, 7, 13, 22):
        assert geographic_temporal_regularity(Place(HOME), at(3, hour, 1), h) == pytest.approx(1 / 48)


def test_episode_covers_each_mark_once():
    # one 10:00-11:00 visit covers marks 10:00, 10:30, 11:00 once each
    fixes = [GpsFix(at(0, 10) + k * 300_000, *HOME) for k in range(13)]
    hist = mark_histogram(place_episodes(Place(HOME), ParticipantHistory([], fixes)), CLOCK)
    assert hist.nonzero()[0].tolist() == [20, 21, 22] and hist.sum() == 3


def test_unvisited_place_ineligible():
    h = ParticipantHistory([], [GpsFix(at(0, 1), *HOME), GpsFix(at(0, 2), *HOME)])
    with pytest.raises(FeatureIneligible):
        geographic_temporal_regularity(Place(north(1000)), at(0, 3), h)


# ---- social-geographic regularity


def test_geo_regularity_six_of_eight():
    base = _grid()
    sightings, fixes = [], []
    for k in range(8):
        t = base + k * 10 * PERIOD + 1000
        sightings.append(BtSighting(t, "a"))
        fixes.append(GpsFix(t + 500, *(HOME if k < 6 else north(200))))
    # an untagged detection (no fix in its slot) is left out of both counts
    sightings.append(BtSighting(base + 3 * PERIOD + 1000, "a"))
    h = ParticipantHistory(sorted(sightings), fixes)
    w = h.window(base + PERIOD)  # holds only the first detection, made at HOME
    assert social_geographic_regularity("a", w, h) == 0.75


def test_geo_regularity_one_spot():
    base = _grid()
    sightings = [BtSighting(base + k * PERIOD + 1000, "a") for k in range(5)]
    fixes = [GpsFix(base + k * PERIOD + 2000, *north(k)) for k in range(5)]
    h = ParticipantHistory(sightings, fixes)
    assert social_geographic_regularity("a", h.window(base + PERIOD), h) == 1.0


def test_geo_regularity_missing_without_tagged_detection():
    base = _grid()
    sightings = [BtSighting(base + 1000, "a")]
    fixes = [GpsFix(base + PERIOD + 1000, *HOME)]  # fix in a different slot
    h = ParticipantHistory(sightings, fixes)
    w = h.window(base + PERIOD + 60_000)
    with pytest.raises(FeatureIneligible):
        social_geographic_regularity("a", w, h)
    v = extract_features(base + PERIOD + 60_000, h)
    assert all(math.isnan(getattr(v, c)) for c in FEATURE_NAMES[13:])


# ---- aggregation and assembly


def test_aggregate_pair():
    mean, sd, hi, lo = aggregate_stats([0.2, 0.4])
    assert (mean, hi, lo) == pytest.approx((0.3, 0.4, 0.2))
    assert sd == pytest.approx(math.sqrt(0.02), abs=1e-12)
    assert round(sd, 4) == 0.1414


def test_aggregate_singleton():
    assert aggregate_stats([0.5]) == (0.5, 0.0, 0.5, 0.5)


def test_aggregate_constant():
    mean, sd, hi, lo = aggregate_stats([0.1, 0.1, 0.1])
    assert (mean, hi, lo) == (0.1, 0.1, 0.1) and sd == pytest.approx(0.0, abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_aggregate_ordering(xs):
    mean, sd, hi, lo = aggregate_stats(xs)
    assert lo <= mean <= hi and sd >= 0


def test_no_gps_means_missing():
    t = at(0, 9)
    h = ParticipantHistory([BtSighting(t, "a")], [])
    assert extract_features(t + 60_000, h) is None


def test_no_bluetooth_means_missing():
    t = at(0, 9)
    h = ParticipantHistory([BtSighting(t - 86_400_000, "a")], [GpsFix(t, *HOME)])
    assert extract_features(t + 60_000, h) is None


def test_window_is_half_open():
    t = at(0, 9)
    h = ParticipantHistory([BtSighting(t, "a")], [GpsFix(t, *HOME)])
    assert extract_features(t, h) is None  # sighting at the report time is excluded
    assert extract_features(t + 900_000, h) is not None
    assert extract_features(t + 900_001, h) is None


def test_clock_mismatch_rejected():
    h = ParticipantHistory([BtSighting(at(0, 9), "a")], [GpsFix(at(0, 9), *HOME)])
    with pytest.raises(ValueError):
        extract_features(at(0, 9, 5), h, StudyClock(timezone="UTC"))


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_on_random_traces(seed):
    sightings, fixes, ema_ts = random_guarded_trace(seed)
    h = ParticipantHistory(sightings, fixes)
    for t in ema_ts:
        fast = extract_features(t, h)
        slow = oracle_features(sightings, fixes, t)
        assert (fast is None) == (slow is None)
        if fast is not None:
            np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)


@given(st.integers(0, 10_000))
def test_feature_ranges_on_random_traces(seed):
    sightings, fixes, ema_ts = random_guarded_trace(seed, n_devices=4, days=2)
    h = ParticipantHistory(sightings, fixes)
    for t in ema_ts:
        v = extract_features(t, h)
        if v is None:
            continue
        assert v.num_uniq >= 1 and v.socio_count >= v.num_uniq
        assert 0 <= v.socio_ent <= math.log(v.num_uniq) + 1e-12
        for name in FEATURE_NAMES[3:]:
            x = getattr(v, name)
            assert math.isnan(x) or 0 <= x <= 1, name
        for fam in ("socio_fam", "socio_temReg", "socio_geoReg"):
            mean, sd, hi, lo = (getattr(v, f"{fam}_{s}") for s in ("mean", "sd", "max", "min"))
            if not math.isnan(mean):
                assert lo <= mean <= hi


# ---- participant level


def test_running_mean_imputation_uses_earlier_rows_only():
    nan = math.nan
    def row(t, geo):
        vals = [0.0] * 13 + list(geo)
        return FeatureRow("p", t, "2018-10-15", FeatureVector(*vals))
    rows = [row(1, [nan] * 4), row(2, [0.2, 0.1, 0.3, 0.1]), row(3, [nan] * 4), row(4, [0.6, 0.0, 0.6, 0.6]),
            row(5, [nan] * 4)]
    assert impute_running_mean(rows) == 2
    assert math.isnan(rows[0].features.socio_geoReg_mean)
    assert rows[2].features.socio_geoReg_mean == pytest.approx(0.2)
    assert rows[4].features.socio_geoReg_mean == pytest.approx(0.4)
    assert rows[4].features.socio_geoReg_max == pytest.approx(0.45)


def test_extract_participant_report_and_csv_round_trip(tmp_path, small_cohort):
    data = small_cohort.participants[0]
    rows, rep = extract_participant(data, small_cohort.config.clock)
    assert rep.n_ema == len(data.ema) and rep.eligible == len(rows) > 0
    assert rep.no_bluetooth + rep.no_gps >= rep.n_ema - rep.eligible
    path = tmp_path / "f.csv"
    write_feature_csv(path, rows)
    back = read_feature_csv(path)
    assert [(r.participant, r.ema_t, r.date) for r in back] == [(r.participant, r.ema_t, r.date) for r in rows]
    np.testing.assert_array_equal(np.array([r.features for r in back]), np.array([r.features for r in rows]))
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["participant", "ema_timestamp", "date", *FEATURE_NAMES]


def test_bluetooth_without_gps_yields_no_rows():
    data = ParticipantData("x", [], [BtSighting(at(0, 9), "a")], [])
    from lonesense.traces import EmaRecord, Companion
    data.ema.append(EmaRecord(at(0, 9, 5), 1, frozenset({Companion.ALONE})))
    rows, rep = extract_participant(data)
    assert rows == [] and rep.no_gps == 1 and rep.eligible == 0
