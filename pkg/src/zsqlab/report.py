"""CSV/JSON export of run records.

Every writer formats floats with ``repr`` and sorts nothing it was not told
to, so identical records always give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .experiment import RunRecord

METRIC_COLUMNS = ("epoch", "loss_g", "loss_q", "ce", "kl", "acc", "crossings_total", "crossings_gini")
GI_COLUMNS = ("epoch", "step", "layer", "kappa", "target_T", "crossings", "search_steps", "capped")


class ReportError(OSError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def order_records(records, arm_order=()) -> list[RunRecord]:
    """Arms listed in ``arm_order`` first (in that order), then others by first appearance; seeds ascending."""
    seen = list(arm_order)
    for r in records:
        if r.arm not in seen:
            seen.append(r.arm)
    return sorted(records, key=lambda r: (seen.index(r.arm), r.seed))


def ablation_rows(records, arm_order=()) -> list[dict]:
    rows = []
    recs = order_records(records, arm_order)
    arms = []
    for r in recs:
        if r.arm not in arms:
            arms.append(r.arm)
    for arm in arms:
        group = [r for r in recs if r.arm == arm]
        ok = [r for r in group if not r.diverged and not r.error]
        acc_m, acc_s = _stats([r.final_val_acc for r in ok])
        kl_m, kl_s = _stats([r.final_kl for r in ok])
        init_m, _ = _stats([r.initial_val_acc for r in ok])
        cross_m, _ = _stats([np.mean([e["crossings_total"] for e in r.epochs]) if r.epochs else None for r in ok])
        rows.append({
            "arm": arm,
            "runs": len(group),
            "diverged": len(group) - len(ok),
            "initial_val_acc": init_m,
            "final_val_acc_mean": acc_m,
            "final_val_acc_std": acc_s,
            "final_kl_mean": kl_m,
            "final_kl_std": kl_s,
            "crossings_per_epoch": cross_m,
        })
    return rows


def summary(records, arm_order=()) -> dict:
    recs = order_records(records, arm_order)
    return {
        "runs": [
            {
                "arm": r.arm,
                "seed": r.seed,
                "config_hash": r.config_hash,
                "initial_val_acc": r.initial_val_acc,
                "final_train_acc": r.final_train_acc,
                "final_val_acc": r.final_val_acc,
                "final_kl": r.final_kl,
                "teacher_train_acc": r.teacher_train_acc,
                "teacher_val_acc": r.teacher_val_acc,
                "epochs": len(r.epochs),
                "diverged": r.diverged,
                "error": r.error,
            }
            for r in recs
        ],
        "ablation": ablation_rows(records, arm_order),
        "series": {
            f"{r.arm}/seed{r.seed}": {
                key: r.series(key)
                for key in ("val_acc", "kl", "ce", "cosine", "inter_cos_ce", "inter_cos_kl", "trace_ce", "trace_kl")
            }
            for r in recs
        },
    }


def export_report(records, out_dir, arm_order=()) -> list[Path]:
    """Write the ablation table, summary and every diagnostics CSV under ``out_dir``.

    Tables go to ``out_dir/reports``; figure CSVs go to ``out_dir/diag``.
    Returns the written paths.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one record to report")
    out = Path(out_dir)
    rep, diag = out / "reports", out / "diag"
    try:
        rep.mkdir(parents=True, exist_ok=True)
        diag.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directories under {out}: {exc}") from exc
    recs = order_records(records, arm_order)
    written = []

    rows = ablation_rows(recs, arm_order)
    cols = list(rows[0])
    p = rep / "ablation.csv"
    write_csv(p, cols, [[row[c] for c in cols] for row in rows])
    written.append(p)

    p = rep / "summary.json"
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(summary(recs, arm_order), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    written.append(p)

    for r in recs:
        tag = f"{r.arm}_seed{r.seed}"
        p = rep / f"metrics_{tag}.csv"
        write_csv(p, METRIC_COLUMNS + ("val_acc",),
                   [[e[c] for c in METRIC_COLUMNS] + [e["val_acc"]] for e in r.epochs])
        written.append(p)
        if r.gi_reports:
            p = rep / f"gi_{tag}.csv"
            write_csv(p, GI_COLUMNS, [row[:8] for row in r.gi_reports])
            written.append(p)

    p = diag / "cosine.csv"
    write_csv(p, ("arm", "seed", "epoch", "cosine", "inter_epoch_ce", "inter_epoch_kl"),
               [[r.arm, r.seed, e["epoch"], e["cosine"], e["inter_cos_ce"], e["inter_cos_kl"]]
                for r in recs for e in r.epochs])
    written.append(p)

    p = diag / "hessian_trace.csv"
    write_csv(p, ("arm", "seed", "epoch", "trace_ce", "stderr_ce", "trace_kl", "stderr_kl"),
               [[r.arm, r.seed, e["epoch"], e["trace_ce"], e["trace_ce_se"], e["trace_kl"], e["trace_kl_se"]]
                for r in recs for e in r.epochs if e.get("trace_ce") is not None])
    written.append(p)

    p = diag / "spectrum.csv"
    write_csv(p, ("arm", "seed", "epoch", "loss", "index", "ritz_value"),
               [[r.arm, r.seed, s["epoch"], s["loss"], i, v]
                for r in recs for s in r.spectra for i, v in enumerate(s["ritz"])])
    written.append(p)

    slice_epochs = sorted({s["epoch"] for r in recs for s in r.slices})
    for ep in slice_epochs:
        p = diag / f"slice_epoch{ep}.csv"
        write_csv(p, ("arm", "seed", "loss", "g_hat", "k", "value"),
                   [[r.arm, r.seed, s["loss"], s["g_hat"], k, v]
                    for r in recs for s in r.slices if s["epoch"] == ep for k, v in s["curve"]])
        written.append(p)

    cross_epochs = sorted({c["epoch"] for r in recs for c in r.crossings})
    for ep in cross_epochs:
        p = diag / f"crossings_epoch{ep}.csv"
        write_csv(p, ("arm", "seed", "layer", "size", "mean_crossings", "top3_share"),
                   [[r.arm, r.seed, name, size, mean, c["top3_share"]]
                    for r in recs for c in r.crossings if c["epoch"] == ep
                    for name, size, mean in zip(c["layers"], c["sizes"], c["mean"])])
        written.append(p)
    return written


def save_record(record: RunRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record.to_json(), fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def load_record(path) -> RunRecord:
    with open(path, encoding="utf-8") as fh:
        return RunRecord.from_json(json.load(fh))


def load_records(directory) -> list[RunRecord]:
    return [load_record(p) for p in sorted(Path(directory).glob("*.json"))]


def write_sweep_csv(results, summary_rows, out_dir) -> list[Path]:
    rep = Path(out_dir) / "reports"
    rep.mkdir(parents=True, exist_ok=True)
    keys = list(results[0][0]) if results else []
    p1 = rep / "sweep.csv"
    write_csv(p1, keys + ["seed", "arm", "final_val_acc", "final_kl", "diverged", "error"],
               [[point[k] for k in keys] + [r.seed, r.arm, r.final_val_acc, r.final_kl, r.diverged, r.error or ""]
                for point, r in results])
    p2 = rep / "sweep_summary.csv"
    cols = list(summary_rows[0]) if summary_rows else keys
    write_csv(p2, cols, [[row[c] for c in cols] for row in summary_rows])
    return [p1, p2]
