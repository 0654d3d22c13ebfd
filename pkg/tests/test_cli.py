import csv
import json
import shutil
import subprocess
import sys

import pytest

from lonesense.cli import main
from lonesense.geosocial import FEATURE_NAMES

FAST = ["--trees", "40", "--min-train", "20", "--min-test", "3"]


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text("preset = strong_effect\nn_participants = 8\nstudy_days = 6\n")
    assert run("simulate", "--config", cfg, "--seed", 4, "--out", root / "cohort") == 0
    assert run("features", "--data", root / "cohort", "--out", root / "features.csv") == 0
    return root


def test_simulate_writes_layout_and_manifest(study):
    cohort = study / "cohort"
    assert len([p for p in cohort.iterdir() if p.is_dir()]) == 8
    manifest = json.loads((cohort / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["status"] == "ok"
    assert manifest["seeds"] == [4]
    assert len(manifest["config_hash"]) == 64
    assert str(study / "tiny.cfg") in manifest["inputs"]
    assert any(o.endswith("ground_truth.csv") for o in manifest["outputs"])
    assert "seed = 4" in (cohort / "cohort.cfg").read_text().splitlines()


def test_feature_csv_schema(study):
    with open(study / "features.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header[-17:] == list(FEATURE_NAMES) and len(header) == 20
    elig = rows(study / "features_eligibility.csv")
    assert len(elig) == 8
    assert sum(int(r["eligible"]) for r in elig) == len(rows(study / "features.csv"))
    assert json.loads((study / "features.csv.manifest.json").read_text())["status"] == "ok"


def test_reruns_are_byte_identical(study, tmp_path):
    assert run("simulate", "--config", study / "tiny.cfg", "--seed", 4, "--out", tmp_path / "c") == 0
    for f in (study / "cohort").rglob("*.csv"):
        assert f.read_bytes() == (tmp_path / "c" / f.relative_to(study / "cohort")).read_bytes()
    assert run("features", "--data", tmp_path / "c", "--out", tmp_path / "f.csv") == 0
    assert (tmp_path / "f.csv").read_bytes() == (study / "features.csv").read_bytes()
    for k in (1, 2):
        assert run("predict", "--features", study / "features.csv", "--ema", study / "cohort",
                   "--groups", "baseline,plusGeosocial", "--seed", 9, *FAST, "--out", tmp_path / f"p{k}") == 0
    for name in ("auc_by_day.csv", "summary.csv"):
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()


def test_participant_without_gps(study, tmp_path, capsys):
    data = tmp_path / "nogps"
    shutil.copytree(study / "cohort", data)
    victim = sorted(p for p in data.iterdir() if p.is_dir())[0]
    (victim / "gps.csv").write_text("timestamp,latitude,longitude\n")
    assert run("features", "--data", data, "--out", tmp_path / "f.csv") == 0
    assert f"{victim.name}: 0 of" in capsys.readouterr().out
    elig = {r["participant"]: r for r in rows(tmp_path / "f_eligibility.csv")}
    assert elig[victim.name]["eligible"] == "0"
    assert elig[victim.name]["no_gps"] == elig[victim.name]["n_ema"]
    assert not any(r["participant"] == victim.name for r in rows(tmp_path / "f.csv"))


def test_ingest_report(study, tmp_path):
    assert run("ingest", "--data", study / "cohort", "--out", tmp_path / "ingest.csv") == 0
    report = rows(tmp_path / "ingest.csv")
    assert len(report) == 8 and all(r["ema_skipped"] == "0" for r in report)


def test_correlate_both_modes(study, tmp_path):
    assert run("correlate", "--ema", study / "cohort", "--mode", "descriptive", "--plots",
               "--out", tmp_path / "d") == 0
    for name in ("cross_tab.csv", "group_means_bin.csv", "group_means_category.csv", "trait_tests.csv",
                 "fig4a.svg", "fig4b.svg"):
        assert (tmp_path / "d" / name).exists(), name
    assert run("correlate", "--features", study / "features.csv", "--ema", study / "cohort",
               "--mode", "regression", "--out", tmp_path / "r") == 0
    table = rows(tmp_path / "r" / "regression.csv")
    assert [r["feature"] for r in table] == list(FEATURE_NAMES)


def test_regression_needs_features(study, tmp_path):
    assert run("correlate", "--ema", study / "cohort", "--mode", "regression", "--out", tmp_path / "r") == 1
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "features" in manifest["error"]


def test_predict_all_targets_with_extras(study, tmp_path):
    out = tmp_path / "p"
    assert run("predict", "--features", study / "features.csv", "--ema", study / "cohort", "--target", "all",
               "--subgroup", "gender", "--sweep", "--plots", *FAST, "--out", out) == 0
    assert {r["target"] for r in rows(out / "summary.csv")} == {"loneliness", "solitude", "close"}
    for name in ("fig5_loneliness.svg", "fig5_solitude.svg", "fig5_close.svg", "subgroups.csv", "separations.csv"):
        assert (out / name).exists(), name
    assert len(rows(out / "separations.csv")) == 4
    assert run("report", "--run", out) == 0
    text = (out / "report.md").read_text()
    assert "| loneliness | plusGeosocial |" in text and "# Class separations" in text


def test_infeasible_protocol_fails_with_manifest(study, tmp_path):
    out = tmp_path / "p"
    assert run("predict", "--features", study / "features.csv", "--ema", study / "cohort",
               "--min-train", "100000", "--out", out) == 1
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


def test_empty_dataset_fails(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("features", "--data", tmp_path / "empty", "--out", tmp_path / "f.csv") == 1
    assert run("report", "--run", tmp_path / "empty") == 1


def test_usage_errors_exit_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("predict", "--features", "f.csv", "--ema", ".", "--target", "mood", "--out", tmp_path)
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "lonesense.cli", "frobnicate"], capture_output=True)
    assert proc.returncode == 2
