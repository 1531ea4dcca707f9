"""Command-line experiment runner.

    dqm train     --config C [--models lda,lr,svm,mlp]
    dqm simulate  --config C [--train-first] [--devices 400]
    dqm sweep     --config C [--train-first] [--models lda,lr] [--devices 50-400]
    dqm report    --out DIR
    dqm dataset inspect [PATH]

Exit codes: 0 success, 1 usage/config/input error, 2 invariant violation.
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

from . import classify, dataset, synthetic
from .classify import ConfusionMatrix, ModelError, accuracy
from .config import ConfigError, ExperimentConfig, load_config, parse_devices
from .dataset import DatasetError, EncodingSchema
from .sim import (
    SimError,
    SimReport,
    collect_metrics,
    make_streams,
    read_trace,
    run,
    trace_invariant_errors,
    write_trace,
)

log = logging.getLogger("dqm")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2
TRAIN_CSV_COLUMNS = ["kind", "train_time_s", "train_accuracy"]
SWEEP_CSV_COLUMNS = ["n_devices", "model", "devices_quarantined", "packets_quarantined",
                     "quarantine_accuracy", "tp", "fp", "tn", "fn"]


class InvariantViolation(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- data and models -----------------------------------------------------


def load_raw(cfg: ExperimentConfig):
    """Return ``(train_raw, pool_raw)``; the pool feeds the simulated devices."""
    if cfg.synthetic is not None:
        n = int(cfg.synthetic.get("n", 40000))
        seed = int(cfg.synthetic.get("seed", 0))
        train = synthetic.generate_records(n, seed=seed)
        return train, train
    train = dataset.load_nslkdd(cfg.train_path)
    pool = dataset.load_nslkdd(cfg.test_path) if cfg.test_path else train
    return train, pool


def _schema_path(cfg):
    return cfg.out / "schema.json"


def _model_path(cfg, kind):
    return cfg.out / "models" / f"{kind}.json"


def cmd_train(cfg: ExperimentConfig, models=None) -> list[classify.TrainingReport]:
    train_raw, _ = load_raw(cfg)
    schema = dataset.build_schema(train_raw)
    X, y = dataset.encode_many(train_raw, schema)
    _dump(schema.to_dict(), _schema_path(cfg))
    reports = []
    for kind in models or cfg.models:
        log.info("training %s on %d records x %d features", kind, *X.shape)
        rep = classify.train(kind, X, y, **cfg.classifier_params(kind))
        _model_path(cfg, kind).parent.mkdir(parents=True, exist_ok=True)
        classify.save_model(rep.model, _model_path(cfg, kind))
        _dump(rep.to_dict(), cfg.out / "train" / f"{kind}.json")
        reports.append(rep)
        log.info("%s: accuracy %.4f in %.2fs", kind, rep.train_accuracy, rep.train_time_s)
    with (cfg.out / "train" / "training.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_CSV_COLUMNS)
        for rep in reports:
            w.writerow([rep.model.kind, rep.train_time_s, rep.train_accuracy])
    return reports


def _load_trained(cfg, kinds, train_first):
    missing = [k for k in kinds if not _model_path(cfg, k).exists()]
    if not _schema_path(cfg).exists():
        missing = list(kinds)
    if missing:
        if not train_first:
            raise ConfigError(
                f"no trained model for {', '.join(missing)} under {cfg.out / 'models'}; "
                "run `dqm train` first or pass --train-first"
            )
        cmd_train(cfg, models=missing if _schema_path(cfg).exists() else list(kinds))
    schema = EncodingSchema.from_dict(json.loads(_schema_path(cfg).read_text()))
    models = {k: classify.load_model(_model_path(cfg, k), expected_dim=schema.output_dim) for k in kinds}
    return schema, models


def _pool(cfg, schema):
    _, pool_raw = load_raw(cfg)
    return dataset.encode_records(pool_raw, schema)


# --- simulate / sweep -----------------------------------------------------


def simulate_invariant_errors(report: SimReport, trace: list[dict]) -> list[str]:
    errs = list(report.conservation_errors())
    if report.quarantine_accuracy != accuracy(report.quarantine_confusion):
        errs.append("quarantine_accuracy != accuracy(quarantine_confusion)")
    recount = collect_metrics(trace, report.model)
    if recount != report:
        errs.append("trace recount differs from the report")
    errs += trace_invariant_errors(trace)
    return errs


def cmd_simulate(cfg: ExperimentConfig, train_first=False) -> SimReport:
    kind = cfg.models[0]
    schema, models = _load_trained(cfg, [kind], train_first)
    pool = _pool(cfg, schema)
    streams = make_streams(cfg.sim, pool)
    report, trace, episodes = run(cfg.sim, models[kind], streams, schema)
    out = cfg.out / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    write_trace(trace, out / "trace.ndjson")
    _dump(report.to_dict(), out / "report.json")
    with (out / "episodes.ndjson").open("w") as fh:
        for line in episodes:
            fh.write(json.dumps(line) + "\n")
    errs = simulate_invariant_errors(report, trace)
    if errs:
        raise InvariantViolation("; ".join(errs))
    return report


def cmd_sweep(cfg: ExperimentConfig, train_first=False) -> list[SimReport]:
    kinds = cfg.sweep_models
    schema, models = _load_trained(cfg, kinds, train_first)
    pool = _pool(cfg, schema)
    from .sim import derive_seed

    reports = []
    for n in cfg.sweep_devices:
        point = replace(cfg.sim, n_devices=n, seed=derive_seed(cfg.sim.seed, "sweep", n))
        try:
            streams = make_streams(point, pool)
        except DatasetError as exc:
            raise SimError(f"sweep point n_devices={n}: {exc}") from exc
        for kind in kinds:
            rep, trace, _ = run(point, models[kind], streams, schema)
            errs = simulate_invariant_errors(rep, trace)
            if errs:
                raise InvariantViolation(f"sweep point n_devices={n} model={kind}: {'; '.join(errs)}")
            reports.append(rep)
            log.info("n=%d %s: quarantined %d devices / %d packets, accuracy %.4f",
                     n, kind, rep.devices_quarantined, rep.packets_quarantined, rep.quarantine_accuracy)
    out = cfg.out / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_CSV_COLUMNS)
        for r in reports:
            c = r.quarantine_confusion
            w.writerow([r.n_devices, r.model, r.devices_quarantined, r.packets_quarantined,
                        r.quarantine_accuracy, c.tp, c.fp, c.tn, c.fn])
    _dump(sweep_summary(reports), out / "summary.json")
    return reports


def sweep_summary(reports: list[SimReport]) -> dict:
    summary = {}
    for kind in dict.fromkeys(r.model for r in reports):
        acc = np.array([r.quarantine_accuracy for r in reports if r.model == kind])
        summary[kind] = {
            "points": int(acc.size),
            "mean_quarantine_accuracy": float(acc.mean()),
            "spread_quarantine_accuracy": float(acc.max() - acc.min()),
            "std_quarantine_accuracy": float(acc.std()),
        }
    return summary


# --- report -----------------------------------------------------------------


def _table(title, header, rows) -> str:
    cells = [list(map(str, header))] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = [title, "-" * len(title)]
    for j, r in enumerate(cells):
        lines.append("  ".join(c.rjust(widths[i]) for i, c in enumerate(r)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(out: Path) -> tuple[str, list[tuple[str, bool, str]]]:
    """Render comparison tables from earlier outputs and re-verify them.

    Returns ``(text, checks)`` where each check is ``(name, passed, detail)``.
    """
    out = Path(out)
    train_csv = out / "train" / "training.csv"
    sweep_csv = out / "sweep" / "sweep.csv"
    sim_json = out / "simulate" / "report.json"
    if not any(p.exists() for p in (train_csv, sweep_csv, sim_json)):
        raise FileNotFoundError(f"nothing to report: none of {train_csv}, {sweep_csv}, {sim_json} exist")
    text, checks = [], []
    rep_dir = out / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)

    if train_csv.exists():
        rows = _read_csv(train_csv)
        text.append(_table("Training time (s)", ["model", "train_time_s"],
                           [[r["kind"], float(r["train_time_s"])] for r in rows]))
        text.append(_table("Training accuracy", ["model", "train_accuracy"],
                           [[r["kind"], float(r["train_accuracy"])] for r in rows]))
        for r in rows:
            detail_path = out / "train" / f"{r['kind']}.json"
            if not detail_path.exists():
                checks.append((f"train/{r['kind']} report present", False, f"missing {detail_path}"))
                continue
            d = json.loads(detail_path.read_text())
            ok = d["train_accuracy"] == accuracy(ConfusionMatrix(**d["confusion"]))
            checks.append((f"train/{r['kind']} accuracy identity", ok, ""))

    if sweep_csv.exists():
        rows = _read_csv(sweep_csv)
        kinds = list(dict.fromkeys(r["model"] for r in rows))
        ns = sorted({int(r["n_devices"]) for r in rows})
        cell = {(int(r["n_devices"]), r["model"]): r for r in rows}
        for title, key, fname, cast in (
            ("Devices quarantined", "devices_quarantined", "devices_quarantined.csv", int),
            ("Packets quarantined", "packets_quarantined", "packets_quarantined.csv", int),
            ("Quarantine accuracy", "quarantine_accuracy", "quarantine_accuracy.csv", float),
        ):
            table_rows = [[n] + [cast(cell[(n, k)][key]) if (n, k) in cell else "" for k in kinds] for n in ns]
            text.append(_table(f"{title} vs number of devices", ["n_devices", *kinds], table_rows))
            with (rep_dir / fname).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["n_devices", *kinds])
                w.writerows(table_rows)
        means = [[k, float(np.mean([float(cell[(n, k)]["quarantine_accuracy"]) for n in ns if (n, k) in cell]))]
                 for k in kinds]
        text.append(_table("Mean quarantine accuracy over the sweep", ["model", "accuracy"], means))
        for r in rows:
            cm = ConfusionMatrix(int(r["tp"]), int(r["fp"]), int(r["tn"]), int(r["fn"]))
            ok = cm.total == int(r["n_devices"]) and float(r["quarantine_accuracy"]) == accuracy(cm) \
                and int(r["devices_quarantined"]) == cm.tp + cm.fp
            checks.append((f"sweep n={r['n_devices']} {r['model']} accuracy identity", ok, ""))

    if sim_json.exists():
        report = SimReport.from_dict(json.loads(sim_json.read_text()))
        c = report.quarantine_confusion
        text.append(_table("Single run", ["n_devices", "model", "devices_q", "packets_q", "accuracy"],
                           [[report.n_devices, report.model, report.devices_quarantined,
                             report.packets_quarantined, report.quarantine_accuracy]]))
        checks.append(("simulate accuracy identity", report.quarantine_accuracy == accuracy(c), ""))
        errs = report.conservation_errors()
        checks.append(("simulate conservation", not errs, "; ".join(errs)))
        trace_path = out / "simulate" / "trace.ndjson"
        if trace_path.exists():
            trace = read_trace(trace_path)
            checks.append(("simulate trace recount", collect_metrics(trace, report.model) == report, ""))
            errs = trace_invariant_errors(trace)
            checks.append(("simulate trace invariants", not errs, "; ".join(errs[:3])))

    body = "\n".join(text)
    (rep_dir / "tables.txt").write_text(body)
    return body, checks


def cmd_inspect(path=None, cfg: ExperimentConfig | None = None) -> dict:
    if path is not None:
        raw = dataset.load_nslkdd(path)
    else:
        raw, _ = load_raw(cfg)
    schema = dataset.build_schema(raw)
    labels = {}
    for r in raw:
        labels[r.label] = labels.get(r.label, 0) + 1
    return {
        "records": len(raw),
        "attack_records": sum(r.is_attack for r in raw),
        "normal_records": sum(not r.is_attack for r in raw),
        "cardinalities": schema.cardinalities,
        "output_dim": schema.output_dim,
        "labels": dict(sorted(labels.items())),
    }


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--models", help="comma-separated model kinds: lda,lr,svm,mlp")
    common.add_argument("--devices", help="device count or range: 400 | 50-400 | 50:400:50 | 50,100")
    common.add_argument("--out", help="output directory")
    common.add_argument("--train-file", help="NSL-KDD training file (overrides the config)")
    common.add_argument("--test-file", help="NSL-KDD file used for device streams")
    common.add_argument("--synthetic", type=int, metavar="N",
                        help="use N generated NSL-KDD-format records instead of data files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dqm", description="Edge data-quarantine experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train classifiers and write training reports")
    for name, helptext in (("simulate", "run one simulation"), ("sweep", "simulate across device counts")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--train-first", action="store_true", help="train missing models before running")
    rp = sub.add_parser("report", help="render tables and re-verify outputs")
    rp.add_argument("--out", required=True)
    dp = sub.add_parser("dataset", help="dataset utilities")
    dsub = dp.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    ip = dsub.add_parser("inspect", parents=[common], help="print schema cardinalities as JSON")
    ip.add_argument("path", nargs="?")
    return p


def _config_from_args(args) -> ExperimentConfig:
    return load_config(
        args.config,
        seed=args.seed,
        models=args.models.split(",") if args.models else None,
        devices=parse_devices(args.devices) if args.devices else None,
        out=args.out,
        train_path=args.train_file,
        test_path=args.test_file,
        synthetic=args.synthetic,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            text, checks = cmd_report(Path(args.out))
            print(text)
            for name, ok, detail in checks:
                print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail and not ok else ""))
            return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_INVARIANT
        if args.command == "dataset":
            if args.path:
                info = cmd_inspect(path=args.path)
            else:
                info = cmd_inspect(cfg=_config_from_args(args))
            print(json.dumps(info, indent=2))
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "train":
            for rep in cmd_train(cfg):
                print(json.dumps(rep.to_dict()))
        elif args.command == "simulate":
            if args.devices:
                cfg.sim = replace(cfg.sim, n_devices=parse_devices(args.devices)[-1])
            print(json.dumps(cmd_simulate(cfg, args.train_first).to_dict(), indent=2))
        elif args.command == "sweep":
            reports = cmd_sweep(cfg, args.train_first)
            print(json.dumps(sweep_summary(reports), indent=2))
        return EXIT_OK
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, DatasetError, ModelError, SimError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
