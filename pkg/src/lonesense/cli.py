"""Command-line entry point: simulate, ingest, features, correlate, predict, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``LONESENSE_LOG``
sets the log level (default WARNING). Every command that gets past argument
parsing leaves a JSON run manifest next to its outputs, also on failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import forest as rf
from . import geosocial, inference, labels, traces

log = logging.getLogger("lonesense")


class CommandError(RuntimeError):
    pass


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace, path: Path):
        self.path = path
        self.started = time.monotonic()
        settings = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                    if k not in ("func", "manifest")}
        self.data = {
            "command": command,
            "arguments": settings,
            "config_hash": "",
            "seeds": [args.seed] if getattr(args, "seed", None) is not None else [],
            "inputs": [],
            "outputs": [],
            "tool_version": __version__,
            "status": "running",
        }
        self.hash_text(json.dumps(settings, sort_keys=True))

    def hash_text(self, text: str) -> None:
        h = hashlib.sha256((self.data["config_hash"] + text).encode()).hexdigest()
        self.data["config_hash"] = h

    def add_input(self, path: Path) -> None:
        self.data["inputs"].append(str(path))

    def add_output(self, path: Path) -> None:
        self.data["outputs"].append(str(path))

    def write(self, status: str, error: str = "") -> None:
        self.data["status"] = status
        if error:
            self.data["error"] = error
        self.data["wall_time_s"] = round(time.monotonic() - self.started, 3)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=self.path.parent)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.path)


def _clock(args) -> traces.StudyClock:
    return traces.StudyClock(timezone=args.tz)


def _ema_by_participant(root: Path) -> dict[str, list[traces.EmaRecord]]:
    out = {}
    for d in traces.participant_dirs(root):
        path = d / "ema.csv"
        if path.exists():
            with open(path, "rb") as fh:
                out[d.name] = traces.parse_ema(fh, d.name).records
    return out


# ---- commands


def cmd_simulate(args, manifest: RunManifest) -> None:
    from .synthkit import generator as gen

    if args.config:
        manifest.add_input(args.config)
        text = Path(args.config).read_text(encoding="utf-8")
        manifest.hash_text(text)
        cfg = gen.parse_config(text)
    else:
        cfg = gen.PRESETS[args.preset]()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest.data["seeds"] = [cfg.seed]
    cohort = gen.generate_cohort(cfg)
    for p in gen.write_cohort(cohort, args.out):
        manifest.add_output(p)
    n_ema = sum(len(p.ema) for p in cohort.participants)
    print(f"wrote {len(cohort.participants)} participants, {n_ema} self-reports to {args.out}")


def cmd_ingest(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    study = traces.load_study(args.data)
    if not study:
        raise CommandError(f"no participant directories under {args.data}")
    rows = []
    for p in study:
        diag = p.diagnostics
        rows.append([p.participant] + [x for k in ("gps", "bluetooth", "ema")
                                       for x in (diag[k].accepted, diag[k].skipped)])
        for k in ("gps", "bluetooth", "ema"):
            for note in diag[k].notes:
                log.info("%s", note)
    header = ["participant", "gps_accepted", "gps_skipped", "bluetooth_accepted", "bluetooth_skipped",
              "ema_accepted", "ema_skipped"]
    _write_rows(args.out, header, rows)
    manifest.add_output(args.out)
    totals = np.array([r[1:] for r in rows]).sum(axis=0)
    print(f"{len(rows)} participants; gps {totals[0]} ok / {totals[1]} skipped; bluetooth {totals[2]} ok / "
          f"{totals[3]} skipped; ema {totals[4]} ok / {totals[5]} skipped")


def cmd_features(args, manifest: RunManifest) -> None:
    manifest.add_input(args.data)
    clock = _clock(args)
    dirs = traces.participant_dirs(args.data)
    if not dirs:
        raise CommandError(f"no participant directories under {args.data}")
    rows, reports = [], []
    for d in dirs:
        data = traces.load_participant(d)
        r, rep = geosocial.extract_participant(data, clock)
        rows += r
        reports.append(rep)
    n_ema = sum(r.n_ema for r in reports)
    if n_ema == 0:
        raise CommandError("dataset has no self-reports")
    rows.sort(key=lambda r: (r.participant, r.ema_t))
    geosocial.write_feature_csv(args.out, rows)
    manifest.add_output(args.out)
    report_path = args.report or args.out.with_name(args.out.stem + "_eligibility.csv")
    _write_rows(report_path, ["participant", "n_ema", "eligible", "no_bluetooth", "no_gps", "geo_reg_imputed"],
                [[r.participant, r.n_ema, r.eligible, r.no_bluetooth, r.no_gps, r.geo_reg_imputed]
                 for r in reports])
    manifest.add_output(report_path)
    for r in reports:
        if r.n_ema and not r.eligible:
            print(f"{r.participant}: 0 of {r.n_ema} self-reports eligible")
    print(f"{len(rows)} out of {n_ema} self-reports have both Bluetooth and GPS data in their window")


def _observations(args, manifest) -> list[ev.Observation]:
    manifest.add_input(args.features)
    manifest.add_input(args.ema)
    rows = geosocial.read_feature_csv(args.features)
    if not rows:
        raise CommandError(f"{args.features} has no rows")
    return ev.join_observations(rows, _ema_by_participant(args.ema))


def cmd_correlate(args, manifest: RunManifest) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.mode == "descriptive":
        manifest.add_input(args.ema)
        ema = _ema_by_participant(args.ema)
        records = [r for recs in ema.values() for r in recs]
        if not records:
            raise CommandError("no self-reports found")
        tab = labels.cross_tab(records)
        labels.write_cross_tab(args.out / "cross_tab.csv", tab)
        by_bin = labels.group_means(records, "bin", seed=args.seed)
        by_cat = labels.group_means(records, "category", seed=args.seed)
        labels.write_group_means(args.out / "group_means_bin.csv", by_bin)
        labels.write_group_means(args.out / "group_means_category.csv", by_cat)
        labels.write_trait_tests(args.out / "trait_tests.csv", labels.trait_level_tests(ema))
        outputs = ["cross_tab.csv", "group_means_bin.csv", "group_means_category.csv", "trait_tests.csv"]
        if args.plots:
            labels.plot_group_means(args.out / "fig4a.svg", by_cat)
            labels.plot_group_means(args.out / "fig4b.svg", by_bin)
            outputs += ["fig4a.svg", "fig4b.svg"]
        contradictory = sum(labels.is_contradictory(r) for r in records)
        print(f"{len(records)} self-reports; {contradictory} select alone together with companions")
    else:
        if args.features is None:
            raise CommandError("--features is required for regression mode")
        obs = _observations(args, manifest)
        d = ev.regression_design(obs)
        if d.y.min() == d.y.max():
            raise CommandError("regression needs both lonely and not-lonely observations")
        table = inference.regression_table(d, seed=args.seed)
        table.write_csv(args.out / "regression.csv")
        outputs = ["regression.csv"]
        print(f"{d.n} observations; participant-offset precision {table.ridge:.4g}; "
              f"pooled LASSO keeps {len(table.pooled_lasso.support)} features")
    for name in outputs:
        manifest.add_output(args.out / name)


def cmd_predict(args, manifest: RunManifest) -> None:
    obs = _observations(args, manifest)
    targets = list(ev.TARGETS) if args.target == "all" else [args.target]
    groups = list(ev.FEATURE_GROUPS) if args.groups == "all" else args.groups.split(",")
    for g in groups:
        if g not in ev.FEATURE_GROUPS:
            raise CommandError(f"unknown feature group {g!r}")
    fcfg = rf.ForestConfig(n_trees=args.trees, max_leaf_nodes=args.leaves)
    cfg = ev.EvalConfig(min_train=args.min_train, min_test=args.min_test, separation=args.separation,
                        seed=args.seed, forest=fcfg)
    args.out.mkdir(parents=True, exist_ok=True)
    report = ev.EvaluationReport(separation=args.separation)
    for t in targets:
        report = report.merge(ev.sliding_window_eval(obs, t, groups, cfg))
    ev.write_auc_by_day(args.out / "auc_by_day.csv", report)
    ev.write_summary(args.out / "summary.csv", report)
    outputs = ["auc_by_day.csv", "summary.csv"]
    if args.plots:
        for t in targets:
            ev.plot_report(args.out / f"fig5_{t}.svg", report, t, title=t)
            outputs.append(f"fig5_{t}.svg")
    if args.subgroup:
        metadata = traces.load_metadata(args.ema)
        group = "plusGeosocial" if "plusGeosocial" in groups else groups[-1]
        rows = []
        for t in targets:
            for s in ev.subgroup_eval(report, metadata, args.subgroup, t, group):
                rows.append([t, group, args.subgroup, s.subgroup, "" if math.isnan(s.auc) else repr(s.auc),
                             s.n, s.n_participants, s.note])
        _write_rows(args.out / "subgroups.csv", ["target", "group", "key", "subgroup", "auc", "n",
                                                 "n_participants", "note"], rows)
        outputs.append("subgroups.csv")
    if args.sweep:
        sweep = ev.class_separation_sweep(obs, cfg=cfg)
        ev.write_sweep(args.out / "separations.csv", sweep)
        outputs.append("separations.csv")
        if args.plots and sweep.reports:
            ev.plot_sweep(args.out / "fig6.svg", sweep, title="class separations")
            outputs.append("fig6.svg")
    for name in outputs:
        manifest.add_output(args.out / name)
    for s in report.summaries():
        print(f"{s.target:10s} {s.group:14s} days={s.n_days:3d} mean AUC={s.mean_auc:.3f} "
              f"trend slope={s.slope:+.4f} p={s.pvalue:.3g}")


def cmd_report(args, manifest: RunManifest) -> None:
    run = args.run
    summary = run / "summary.csv"
    if not summary.exists():
        raise CommandError(f"{summary} not found; run predict first")
    manifest.add_input(summary)
    lines = ["# Prediction summary", "", "| target | group | days | mean AUC | trend slope | trend p |",
             "|---|---|---|---|---|---|"]
    with open(summary, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            lines.append(f"| {r['target']} | {r['group']} | {r['n_days']} | {float(r['mean_auc']):.3f} | "
                         f"{float(r['trend_slope']):+.4f} | {float(r['trend_p']):.3g} |")
    seps = run / "separations.csv"
    if seps.exists():
        manifest.add_input(seps)
        lines += ["", "# Class separations", "", "| separation | days | mean AUC | note |", "|---|---|---|---|"]
        with open(seps, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                value = f"{float(r['mean_auc']):.3f}" if r["mean_auc"] else ""
                lines.append(f"| {r['separation']} | {r['n_days']} | {value} | {r['note']} |")
    text = "\n".join(lines) + "\n"
    out = args.out or run / "report.md"
    out.write_text(text, encoding="utf-8")
    manifest.add_output(out)
    print(text, end="")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lonesense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic cohort")
    s.add_argument("--config", type=Path, help="flat key = value cohort config")
    s.add_argument("--preset", default="strong_effect",
                   choices=["strong_effect", "null_effect", "severity_noise"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate, manifest=lambda a: a.out / "manifest.json")

    s = sub.add_parser("ingest", help="parse and validate a study directory")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="per-participant parse report CSV")
    s.set_defaults(func=cmd_ingest, manifest=lambda a: a.out.with_name(a.out.name + ".manifest.json"))

    s = sub.add_parser("features", help="extract the feature matrix")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--tz", default="America/Chicago")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--report", type=Path, help="eligibility report CSV")
    s.set_defaults(func=cmd_features, manifest=lambda a: a.out.with_name(a.out.name + ".manifest.json"))

    s = sub.add_parser("correlate", help="descriptive statistics or regression table")
    s.add_argument("--features", type=Path)
    s.add_argument("--ema", type=Path, required=True, help="study directory holding ema.csv files")
    s.add_argument("--mode", choices=["descriptive", "regression"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plots", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_correlate, manifest=lambda a: a.out / "manifest.json")

    s = sub.add_parser("predict", help="sliding-window prediction")
    s.add_argument("--features", type=Path, required=True)
    s.add_argument("--ema", type=Path, required=True, help="study directory holding ema.csv files")
    s.add_argument("--target", choices=[*ev.TARGETS, "all"], default="loneliness")
    s.add_argument("--groups", default="all", help="'all' or comma-separated feature groups")
    s.add_argument("--separation", choices=sorted(labels.SEPARATIONS), default="0vs123")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trees", type=int, default=1000)
    s.add_argument("--leaves", type=int, default=5)
    s.add_argument("--min-train", type=int, default=100)
    s.add_argument("--min-test", type=int, default=5)
    s.add_argument("--subgroup", help="metadata column for subgroup AUCs, e.g. gender")
    s.add_argument("--sweep", action="store_true", help="also run the class-separation sweep")
    s.add_argument("--plots", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_predict, manifest=lambda a: a.out / "manifest.json")

    s = sub.add_parser("report", help="render a markdown summary of a predict run")
    s.add_argument("--run", type=Path, required=True)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_report, manifest=lambda a: a.run / "report.manifest.json")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LONESENSE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    manifest = RunManifest(args.command, args, args.manifest(args))
    status, error = "ok", ""
    try:
        args.func(args, manifest)
        return 0
    except (CommandError, ev.ProtocolError, traces.TraceError, ValueError, KeyError, OSError) as exc:
        status, error = "failed", f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        try:
            manifest.write(status, error)
        except OSError as exc:
            print(f"warning: could not write manifest: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
