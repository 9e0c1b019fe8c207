"""Command-line entry point: ``zsqlab {dataset,pretrain,run,sweep,report,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .data import nearest_centroid_accuracy
from .experiment import (
    TeacherTrainingError,
    load_teacher,
    prepare_data,
    pretrain_teacher,
    run_experiment,
    save_teacher,
    sweep,
    sweep_summary,
)
from .report import export_report, write_csv, load_records, save_record, write_sweep_csv
from .selftest import run_selftest

log = logging.getLogger("zsqlab")

U64_MAX = 2**64 - 1


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=_seed, help="run seed (dataset seed for the dataset verb)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--arm", help="experiment arm")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="zsqlab", description="Desk-scale zero-shot quantization lab.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("dataset", parents=[common], help="materialize the configured dataset as CSV")
    sub.add_parser("pretrain", parents=[common], help="pretrain and checkpoint the teacher")
    sub.add_parser("run", parents=[common], help="run one experiment arm")
    sp = sub.add_parser("sweep", parents=[common], help="grid sweep over config keys")
    sp.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...", required=True)
    sp.add_argument("--repeat", type=int, default=1, help="seeds per grid point")
    sub.add_parser("report", parents=[common], help="re-export reports from saved run records")
    sub.add_parser("selftest", parents=[common], help="run the oracle suites")
    return p


def _config(args) -> ExperimentConfig:
    values = {}
    if args.config is not None:
        values.update(parse_config_text(args.config.read_text(encoding="utf-8")))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.arm is not None:
        values["arm"] = args.arm
    if args.seed is not None:
        values["dataset.seed" if args.verb == "dataset" else "seed"] = args.seed
    return load_config(overrides=values)


def _teacher_path(out: Path, cfg: ExperimentConfig) -> Path:
    return out / "checkpoints" / f"teacher-{cfg.teacher_key()}.zsq"


def _teacher(cfg, out: Path, train, val):
    path = _teacher_path(out, cfg)
    if path.exists():
        log.info("loading teacher %s", path)
        return load_teacher(cfg, path, train, val)
    t = pretrain_teacher(cfg, train, val)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_teacher(t, path)
    return t


def cmd_dataset(cfg, args):
    train, val = prepare_data(cfg)
    rep = args.out / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    d = train.X.shape[1]
    header = [f"x{i}" for i in range(d)] + ["y"]
    for name, ds in (("train", train), ("val", val)):
        write_csv(rep / f"dataset_{name}.csv", header, [list(map(float, x)) + [int(y)] for x, y in zip(ds.X, ds.y)])
    print(f"train {len(train)} val {len(val)} nearest-centroid val acc {nearest_centroid_accuracy(train, val):.4f}")
    return 0


def cmd_pretrain(cfg, args):
    train, val = prepare_data(cfg)
    t = pretrain_teacher(cfg, train, val)
    path = _teacher_path(args.out, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_teacher(t, path)
    print(f"teacher train acc {t.train_acc:.4f} val acc {t.val_acc:.4f} -> {path}")
    return 0


def _progress(rec, row):
    log.info("%s seed %d epoch %d val_acc %.4f kl %.4g crossings %d", rec.arm, rec.seed, row["epoch"],
             row["val_acc"], row["kl"], row["crossings_total"])


def cmd_run(cfg, args):
    train, val = prepare_data(cfg)
    t = _teacher(cfg, args.out, train, val)
    rec = run_experiment(cfg, teacher=t, data=(train, val), progress=_progress)
    save_record(rec, args.out / "reports" / "runs" / f"{rec.arm}_seed{rec.seed}.json")
    export_report(load_records(args.out / "reports" / "runs"), args.out, cfg["arms"])
    status = "DIVERGED" if rec.diverged else "ok"
    print(f"{rec.arm} seed {rec.seed}: val acc {rec.initial_val_acc:.4f} -> {rec.final_val_acc}, "
          f"final kl {rec.final_kl}, {status}")
    return 1 if rec.diverged else 0


def _parse_grid(items, cfg) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        key, vals = item.split("=", 1)
        key = key.strip()
        vals = [v.strip() for v in vals.split(";" if key in ("model.widths", "diag.snapshots", "arms") else ",")]
        for v in vals:
            cfg.with_values({key: v})  # validate early
        grid[key] = vals
    return grid


def cmd_sweep(cfg, args):
    grid = _parse_grid(args.grid, cfg)
    results = sweep(cfg, grid, repeat=args.repeat)
    runs = args.out / "reports" / "sweep_runs"
    for point, rec in results:
        tag = "_".join(f"{k}={v}" for k, v in point.items()).replace("/", "-")
        save_record(rec, runs / f"{tag}_{rec.arm}_seed{rec.seed}.json")
    rows = sweep_summary(results)
    write_sweep_csv(results, rows, args.out)
    for row in rows:
        print(row)
    return 1 if any(r.error for _, r in results) else 0


def cmd_report(cfg, args):
    recs = load_records(args.out / "reports" / "runs")
    if not recs:
        print(f"no run records under {args.out / 'reports' / 'runs'}", file=sys.stderr)
        return 2
    for p in export_report(recs, args.out, cfg["arms"]):
        print(p)
    return 0


def cmd_selftest(cfg, args):
    return 0 if run_selftest() else 1


VERBS = {
    "dataset": cmd_dataset,
    "pretrain": cmd_pretrain,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return VERBS[args.verb](cfg, args)
    except (ConfigError, TeacherTrainingError, OSError) as exc:
        print(f"zsqlab {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
