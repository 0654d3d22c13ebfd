import bisect
import dataclasses
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lonesense.evaluation import auc
from lonesense.labels import bin_companionship
from lonesense.synthkit import (
    PRESETS,
    CohortConfig,
    CohortConfigError,
    OracleGuardError,
    cohort_observations,
    generate_cohort,
    null_effect,
    oracle_auc,
    oracle_features,
    parse_config,
    strong_effect,
    write_cohort,
)
from lonesense.synthkit.generator import COMPANIONS_OF, dump_config
from lonesense.traces import BtSighting, GpsFix, StudyClock, load_metadata, load_study, local_date

TINY = dict(n_participants=4, study_days=4)


def test_same_seed_writes_identical_files(tmp_path):
    a = write_cohort(generate_cohort(strong_effect(seed=3, **TINY)), tmp_path / "a")
    b = write_cohort(generate_cohort(strong_effect(seed=3, **TINY)), tmp_path / "b")
    assert [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes(), x.name


def test_different_seed_differs():
    a = generate_cohort(strong_effect(seed=1, **TINY))
    b = generate_cohort(strong_effect(seed=2, **TINY))
    assert a.participants[0].sightings != b.participants[0].sightings


def test_reports_per_day_within_bounds(small_cohort):
    clock = small_cohort.config.clock
    for p in small_cohort.participants:
        per_day = Counter(local_date(r.t, clock) for r in p.ema)
        assert len(per_day) == small_cohort.config.study_days
        assert all(1 <= n <= 4 for n in per_day.values())


def test_written_cohort_parses_back_losslessly(small_cohort, tmp_path):
    write_cohort(small_cohort, tmp_path)
    loaded = load_study(tmp_path)
    assert [p.participant for p in loaded] == [p.participant for p in small_cohort.participants]
    for got, want in zip(loaded, small_cohort.participants):
        assert got.fixes == want.fixes
        assert got.sightings == want.sightings
        assert got.ema == want.ema
    assert load_metadata(tmp_path) == small_cohort.metadata
    assert parse_config((tmp_path / "cohort.cfg").read_text()) == small_cohort.config


def test_truth_roster_matches_emitted_trace(small_cohort):
    clock = small_cohort.config.clock
    truth = small_cohort.truth.by_key()
    for p in small_cohort.participants:
        times = [s.t for s in p.sightings]
        recs = [truth[(p.participant, r.t)] for r in p.ema]
        companions = set().union(*(r.roster for r in recs))
        for r, rec in zip(p.ema, recs):
            lo = bisect.bisect_left(times, r.t - clock.window_s * 1000)
            hi = bisect.bisect_left(times, r.t)
            seen = {s.device for s in p.sightings[lo:hi]}
            # a companion device is in the roster exactly when it was sighted in the window
            assert set(rec.roster) == seen & companions
            assert rec.roster == tuple(sorted(rec.roster))
            assert rec.bin is bin_companionship(r)
            assert r.companions == COMPANIONS_OF[rec.context]


def test_loneliness_follows_planted_log_odds():
    cohort = generate_cohort(strong_effect(seed=5, n_participants=20, study_days=10))
    truth = cohort.truth.by_key()
    lo, y = [], []
    for p in cohort.participants:
        for r in p.ema:
            lo.append(truth[(p.participant, r.t)].log_odds)
            y.append(r.loneliness > 0)
    lo, y = np.array(lo), np.array(y, dtype=float)
    prob = 1 / (1 + np.exp(-lo))
    assert abs(y.mean() - prob.mean()) < 0.03
    assert auc(lo, y) > 0.75
    for part in np.array_split(np.argsort(lo), 4):
        assert abs(y[part].mean() - prob[part].mean()) < 0.06


def test_null_cohort_has_flat_log_odds():
    cohort = generate_cohort(null_effect(seed=2, **TINY))
    assert {r.log_odds for r in cohort.truth.records} == {cohort.config.intercept}


def test_observations_join_features_and_reports(small_cohort):
    obs = cohort_observations(small_cohort)
    n_ema = sum(len(p.ema) for p in small_cohort.participants)
    assert 0 < len(obs) <= n_ema
    assert [o.date for o in obs] == sorted(o.date for o in obs)


# ---- configuration


@pytest.mark.parametrize("overrides", [
    dict(study_days=1),
    dict(n_participants=0),
    dict(crowd_density=-1.0),
    dict(detect_prob=1.5),
    dict(w_devices=float("inf")),
    dict(ema_min=3, ema_max=2),
    dict(class_hours=(9.0, 10.0)),
    dict(class_hours=(6.0,), classes_per_participant=1),
    dict(classes_per_participant=5),
])
def test_invalid_configs_rejected(overrides):
    with pytest.raises(CohortConfigError):
        CohortConfig(**overrides)


def test_overlapping_classes_named_in_error():
    with pytest.raises(CohortConfigError, match="overlap"):
        CohortConfig(class_hours=(9.0, 10.0), class_minutes=75)


def test_parse_config_presets_and_comments():
    cfg = parse_config("# severity test\npreset = severity_noise\nseed = 4\nclass_hours = [9, 12]\n"
                       "classes_per_participant = 2  # both\n")
    assert cfg == PRESETS["severity_noise"](seed=4, class_hours=(9.0, 12.0))
    assert parse_config("") == strong_effect()


@pytest.mark.parametrize("text", ["colour = red", "preset = loud", "seed = many", "study_days = 1", "no equals"])
def test_parse_config_errors(text):
    with pytest.raises(CohortConfigError):
        parse_config(text)


@settings(max_examples=40)
@given(st.integers(0, 2**32), st.integers(2, 30), st.floats(-3, 3), st.floats(0, 40),
       st.sampled_from(sorted(PRESETS)))
def test_config_text_round_trip(seed, days, weight, density, preset):
    cfg = PRESETS[preset](seed=seed, study_days=days, w_alone=weight, crowd_density=density)
    assert parse_config(dump_config(cfg)) == cfg


def test_presets_differ_only_in_effects():
    base = dataclasses.asdict(strong_effect())
    for name in ("null_effect", "severity_noise"):
        other = dataclasses.asdict(PRESETS[name]())
        changed = {k for k in base if base[k] != other[k]}
        assert changed <= {"intercept", "w_devices", "w_regularity", "w_alone", "w_close", "person_sd",
                           "severity_signal", "severity_noise"}


# ---- oracles


def test_oracle_auc_agrees_with_rank_auc():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 60))
        s = rng.integers(0, 6, n).astype(float)
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        assert oracle_auc(s.tolist(), y.tolist()) == pytest.approx(auc(s, y), abs=1e-12)


def test_oracle_auc_guards():
    with pytest.raises(OracleGuardError):
        oracle_auc([0.0] * 1001, [0, 1] * 500 + [0])
    with pytest.raises(ValueError):
        oracle_auc([0.1, 0.2], [1, 1])


def test_oracle_single_device_single_slot():
    t0 = 1_539_320_400_000
    sightings = [BtSighting(t0 + 1_000, "aa")]
    fixes = [GpsFix(t0 + 2_000, 30.28, -97.73)]
    v = oracle_features(sightings, fixes, t0 + 600_000, StudyClock())
    assert v.socio_fam_mean == 1.0 and v.socio_temReg_mean == 1.0 and v.num_uniq == 1.0


def test_oracle_without_gps_is_missing():
    t0 = 1_539_320_400_000
    assert oracle_features([BtSighting(t0, "aa")], [], t0 + 60_000) is None


def test_oracle_refuses_large_traces():
    t0 = 1_539_320_400_000
    many = [BtSighting(t0 + k, f"d{k}") for k in range(11)]
    with pytest.raises(OracleGuardError):
        oracle_features(many, [GpsFix(t0, 30.0, -97.0)], t0 + 1000)
    long = [BtSighting(t0, "a"), BtSighting(t0 + 6 * 86_400_000, "a")]
    with pytest.raises(OracleGuardError):
        oracle_features(long, [GpsFix(t0, 30.0, -97.0)], t0 + 1000)
