"""Operator-facing command surface.

Subcommands: synth, preprocess, train, loo, evaluate, report. Every run
writes a ``run_config.json`` echo (resolved flags, package version, seed)
beside its outputs and is byte-reproducible for a fixed seed; wall-clock
timings appear only in training logs. Exit codes: 0 success, 2 partial
fold failure, 64 usage error, 1 anything else (JSON diagnostics on
stderr).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, models, plots, protocol, synth
from .records import load_manifest
from .staging import StageTask

log = logging.getLogger("ppgsleep")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64


class UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(EXIT_USAGE)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
    (out_dir / "run_config.json").write_text(
        json.dumps(
            {"command": command, "version": __version__, **resolved}, indent=2, sort_keys=True
        )
        + "\n"
    )


def _out_dir(args) -> Path:
    out = getattr(args, "out", None) or args.out_dir
    if out is None:
        raise ValueError("no output directory: pass --out or --out-dir")
    return Path(out)


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args) -> int:
    out = _out_dir(args)
    _echo_config(out, "synth", args)
    if args.spec:
        doc = json.loads(Path(args.spec).read_text())
        specs = [synth.SynthDomainSpec.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]
    else:
        specs = synth.default_domain_specs(args.domains)
    for spec in specs:
        _, manifest_path = synth.generate_synthetic_domain(spec, args.seed, out / spec.name)
        log.info("wrote %s (%d patients)", manifest_path, spec.n_patients)
        print(manifest_path)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    out = _out_dir(args)
    _echo_config(out, "preprocess", args)
    manifest = load_manifest(args.manifest)
    kind = "ipr" if args.dts else "raw"
    cache = protocol.build_cache(manifest, out, kind=kind, threads=args.threads)
    log.info("cached %d records into %s", len(manifest), cache)
    print(cache)
    return EXIT_OK


def cmd_train(args) -> int:
    plan = protocol.TrainPlan.from_json(args.plan)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    out = Path(getattr(args, "out", None) or args.out_dir or plan.out_dir or Path(args.plan).parent)
    _echo_config(out, "train", args)
    result = protocol.train(plan, out_dir=out, resume=args.resume)
    log.info("best validation kappa %.3f -> %s", result.best_val_kappa, result.best_path)
    print(result.best_path)
    return EXIT_OK


def _write_summary_csv(path: Path, rows: list[dict]):
    """Pivot: one row per model, dataset-grouped kappa/accuracy columns."""
    datasets = sorted({r["dataset"] for r in rows})
    model_names = sorted({r["model"] for r in rows})
    header = ["model"]
    for ds in datasets:
        header += [f"{ds}_kappa_median", f"{ds}_kappa_overall", f"{ds}_accuracy"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for mn in model_names:
            row = [mn]
            for ds in datasets:
                match = [r for r in rows if r["model"] == mn and r["dataset"] == ds]
                if match:
                    r = match[0]
                    row += [repr(r["kappa_median"]), repr(r["kappa_overall"]), repr(r["accuracy"])]
                else:
                    row += ["", "", ""]
            writer.writerow(row)


def _save_report_files(out: Path, stem: str, report: metrics.MetricsReport, dataset: str, model: str):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"dataset": dataset, "model": model, **report.to_dict()}
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    metrics.save_patient_kappa_csv(out / f"{stem}_kappa.csv", report)
    metrics.save_confusion_csv(out / f"{stem}_confusion.csv", report)
    plots.write_confusion_svg(out / f"{stem}_confusion.svg", report)
    for name, stats in report.sleep_measure_errors.items():
        pairs = report.measure_pairs.get(name)
        if pairs:
            plots.write_bland_altman_svg(
                out / f"{stem}_ba_{name}.svg",
                pairs["pred"],
                pairs["ref"],
                stats,
                f"{dataset}: {name}",
            )


def cmd_loo(args) -> int:
    out = _out_dir(args)
    _echo_config(out, "loo", args)
    plan = protocol.TrainPlan.from_json(args.plan)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    caches = [
        protocol.ensure_cache(d, out / "cache", kind="raw", threads=args.threads)
        for d in args.domains
    ]
    results = protocol.leave_one_out(caches, plan, out)
    rows_by_task: dict[str, list[dict]] = {}
    failed = []
    for name, fold in results.items():
        if fold.error is not None:
            failed.append({"fold": name, "error": fold.error})
            continue
        for task_name, report in fold.reports.items():
            _save_report_files(out / f"fold_{name}", f"report_{task_name}", report, name, plan.model)
            rows_by_task.setdefault(task_name, []).append(
                {
                    "model": plan.model,
                    "dataset": name,
                    "kappa_median": report.kappa_median,
                    "kappa_overall": report.kappa_overall,
                    "accuracy": report.accuracy,
                }
            )
    for task_name, rows in rows_by_task.items():
        _write_summary_csv(out / f"summary_{task_name}.csv", rows)
    (out / "summary.json").write_text(
        json.dumps(
            {
                "model": plan.model,
                "folds": {
                    name: (
                        {"error": fold.error}
                        if fold.error is not None
                        else {
                            "best_val_kappa": fold.best_val_kappa,
                            "target_kappa_median": fold.reports["four"].kappa_median,
                        }
                    )
                    for name, fold in results.items()
                },
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    if failed:
        sys.stderr.write(json.dumps({"error": "FoldFailure", "folds": failed}) + "\n")
        return EXIT_PARTIAL if len(failed) < len(results) else EXIT_ERROR
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    _echo_config(out, "evaluate", args)
    model = models.load_model(args.checkpoint)
    kind = "ipr" if model.kind == "ipr" else "raw"
    cache_dir = protocol.ensure_cache(args.manifest, out / "cache", kind=kind, threads=args.threads)
    cache = protocol.load_cache(cache_dir)
    task = StageTask(args.task)
    report = protocol.evaluate_model_on_cache(model, cache, (task,))[task.value]
    _save_report_files(out, f"report_{task.value}", report, cache.name, Path(args.checkpoint).stem)
    print(out / f"report_{task.value}.json")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    _echo_config(out, "report", args)
    rows_by_task: dict[str, list[dict]] = {}
    combined = []
    for i, rp in enumerate(args.reports):
        doc = json.loads(Path(rp).read_text())
        report = metrics.MetricsReport.from_dict(doc)
        dataset = doc.get("dataset", Path(rp).stem)
        model_name = doc.get("model", f"model{i}")
        combined.append({"dataset": dataset, "model": model_name, **report.to_dict()})
        rows_by_task.setdefault(report.task, []).append(
            {
                "model": model_name,
                "dataset": dataset,
                "kappa_median": report.kappa_median,
                "kappa_overall": report.kappa_overall,
                "accuracy": report.accuracy,
            }
        )
        _save_report_files(out / "figures", f"{dataset}_{model_name}_{report.task}", report, dataset, model_name)
    for task_name, rows in rows_by_task.items():
        _write_summary_csv(out / f"summary_{task_name}.csv", rows)
    (out / "combined.json").write_text(json.dumps(combined, indent=2, sort_keys=True) + "\n")

    if args.meta:
        kappas, metas, tags = [], [], []
        per_dataset_meta = {}
        for mpath in args.meta:
            manifest = load_manifest(mpath)
            per_dataset_meta[manifest.name] = {e.record_id: e.meta for e in manifest.records}
        for doc in combined:
            lookup = per_dataset_meta.get(doc["dataset"])
            if lookup is None:
                continue
            for rid, k in zip(doc["record_ids"], doc["kappa_per_patient"]):
                if rid in lookup:
                    kappas.append(k)
                    metas.append(lookup[rid])
                    tags.append(doc["dataset"])
        if kappas:
            try:
                regression = metrics.error_regression(kappas, metas, tags)
            except ValueError as e:
                log.warning("error regression skipped: %s", e)
            else:
                (out / "error_regression.json").write_text(
                    json.dumps(regression.to_dict(), indent=2, sort_keys=True) + "\n"
                )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> _Parser:
    parser = _Parser(prog="ppgsleep", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ppgsleep {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-record stages")
    common.add_argument("--out-dir", type=Path, default=None, help="default output directory")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic domains")
    p.add_argument("--spec", type=Path, default=None, help="domain spec JSON (object or list)")
    p.add_argument("--domains", type=int, default=3, help="default domain count when no spec given")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("preprocess", parents=[common], help="build a preprocessing cache")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--dts", action="store_true", help="pulse-rate (IPR) features instead of raw PPG")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one plan")
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loo", parents=[common], help="leave-one-domain-out experiment")
    p.add_argument("--domains", type=Path, nargs="+", required=True, help="manifests or cache dirs")
    p.add_argument("--plan", type=Path, required=True, help="base plan (sources/target ignored)")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True, help="manifest or cache dir")
    p.add_argument("--task", choices=[t.value for t in StageTask], default="four")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="combine reports into tables and plots")
    p.add_argument("--reports", type=Path, nargs="+", required=True)
    p.add_argument("--meta", type=Path, nargs="*", default=[], help="manifests with patient metadata")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return int(e.code)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single choke point for exit codes
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        log.debug("command failed", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
