"""Teacher pretraining, experiment arms, diagnostics wiring and sweeps."""

from __future__ import annotations

import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, make_dataset
from .diagnostics import (
    GraphObjective,
    crossing_histogram,
    hutchinson_trace,
    inter_epoch_cosine,
    lanczos_spectrum,
    loss_slice,
)
from .models import add_loss_heads, build_classifier, build_generator, onehot, surrogate_graph
from .optim import make_optimizer
from .tensor import EVAL, TRAIN, Graph, NonFiniteError, forward, load_checkpoint, save_checkpoint
from .train import (
    DivergenceError,
    KDSetup,
    ZQSetup,
    evaluate,
    generate_samples,
    kd_epoch,
    logits_of,
    train_classifier,
    zsq_epoch,
)

log = logging.getLogger(__name__)

GI_ARMS = ("ait", "baseline_gi", "ce_only_gi")
HIGH_LR_FACTOR = 100.0
TEACHER_MIN_ACC = 0.80
TEACHER_TARGET_ACC = 0.95


class TeacherTrainingError(RuntimeError):
    pass


def arm_delta(arm: str, cfg: ExperimentConfig) -> float:
    if arm in ("kl_only", "kl_only_high_lr", "ait"):
        return 1.0
    if arm == "ce_only_gi":
        return 0.0
    return cfg["loss.delta"]


# ---------------------------------------------------------------------------
# teacher


@dataclass
class Teacher:
    graph: Graph
    train_acc: float
    val_acc: float
    key: str


def _teacher_graph(cfg: ExperimentConfig, rng) -> Graph:
    g = build_classifier(cfg["model.widths"], rng, bn_momentum=cfg["model.bn_momentum"])
    return add_loss_heads(g, cfg["dataset.n_classes"], temperature=cfg["loss.temperature"], alpha=cfg["loss.alpha"])


def finalize_bn(graph: Graph, X) -> None:
    """Set every running mean/variance to the full-training-set batch statistics."""
    acts = forward(graph, {"x": X}, mode=TRAIN, outputs=["logits"], update_stats=False)
    for nid, st in graph.bn.items():
        x = acts[graph.nodes[nid].inputs[0]]
        st.running_mean = x.mean(axis=0)
        st.running_var = x.var(axis=0)
    graph.version += 1


def pretrain_teacher(cfg: ExperimentConfig, train: Dataset, val: Dataset) -> Teacher:
    rng = np.random.default_rng(cfg["teacher.seed"])
    g = _teacher_graph(cfg, rng)
    opt = make_optimizer(cfg["teacher.optimizer"], cfg["teacher.lr"])
    train_classifier(g, train.X, train.y, cfg["dataset.n_classes"], opt, cfg["teacher.epochs"], cfg["train.batch_size"], rng)
    finalize_bn(g, train.X)
    tr = evaluate(g, train.X, train.y)["acc"]
    va = evaluate(g, val.X, val.y)["acc"]
    if tr < TEACHER_MIN_ACC:
        raise TeacherTrainingError(f"teacher reached only {tr:.3f} train accuracy; dataset and model do not match")
    if tr < TEACHER_TARGET_ACC:
        log.warning("teacher train accuracy %.3f is below %.2f", tr, TEACHER_TARGET_ACC)
    return Teacher(g, tr, va, cfg.teacher_key())


def save_teacher(teacher: Teacher, path) -> None:
    save_checkpoint(path, teacher.graph.state_dict())


def load_teacher(cfg: ExperimentConfig, path, train: Dataset, val: Dataset) -> Teacher:
    g = _teacher_graph(cfg, np.random.default_rng(0))
    g.load_state_dict(load_checkpoint(path))
    return Teacher(g, evaluate(g, train.X, train.y)["acc"], evaluate(g, val.X, val.y)["acc"], cfg.teacher_key())


# ---------------------------------------------------------------------------
# run record


@dataclass
class RunRecord:
    arm: str
    seed: int
    config: dict
    config_hash: str
    epochs: list = field(default_factory=list)
    initial_val_acc: float | None = None
    final_train_acc: float | None = None
    final_val_acc: float | None = None
    final_kl: float | None = None
    teacher_train_acc: float | None = None
    teacher_val_acc: float | None = None
    gi_reports: list = field(default_factory=list)
    spectra: list = field(default_factory=list)
    slices: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    diverged: bool = False
    error: str | None = None
    wall_clock: float = 0.0

    def series(self, key) -> list:
        return [row.get(key) for row in self.epochs]

    def to_json(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        return cls(**data)


# ---------------------------------------------------------------------------
# diagnostics


def _plain(obj):
    """numpy scalars and tuples -> plain JSON-compatible Python values."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _opt_float(x):
    return None if x is None else float(x)


class Probe:
    """Fixed probe batch on which an arm's curvature is measured each time."""

    def __init__(self, feeds: dict, quantized: bool):
        self.feeds = feeds
        self.quantized = quantized

    def objectives(self, student: Graph):
        g = surrogate_graph(student) if self.quantized else student
        return GraphObjective(g, self.feeds, "ce"), GraphObjective(g, self.feeds, "kl")


def _synthetic_probe(setup: ZQSetup, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 7919])
    return rng.standard_normal((n, setup.noise_dim)), rng.integers(0, setup.n_classes, n)


def _traces(probe: Probe, student: Graph, probes: int, seed: int) -> dict:
    ce, kl = probe.objectives(student)
    out = {}
    for name, obj in (("ce", ce), ("kl", kl)):
        est = hutchinson_trace(obj.hvp, obj.layout.size, probes, seed=seed)
        out[f"trace_{name}"] = est.trace
        out[f"trace_{name}_se"] = est.stderr
    return out


def _snapshot(probe: Probe, student: Graph, metrics, m: int, points: int, seed: int, epoch: int) -> tuple[list, list]:
    spectra, slices = [], []
    ks = np.linspace(-0.5, 0.5, points)
    for name, obj, mean_grad in zip(("ce", "kl"), probe.objectives(student), (metrics.mean_grad_ce, metrics.mean_grad_kl)):
        steps = min(m, obj.layout.size)
        if steps < 1:
            continue
        spec = lanczos_spectrum(obj.hvp, obj.layout.size, steps, seed=seed)
        spectra.append({"epoch": epoch, "loss": name, "ritz": [float(v) for v in spec.ritz_values],
                        "breakdown": spec.breakdown})
        g_hat = float(mean_grad @ spec.top_vector)
        curve = loss_slice(obj.value, obj.theta0, spec.top_vector, g_hat, ks)
        slices.append({"epoch": epoch, "loss": name, "g_hat": g_hat, "curve": curve})
    return spectra, slices


# ---------------------------------------------------------------------------
# arms


def prepare_data(cfg: ExperimentConfig):
    return make_dataset(cfg.dataset_spec())


def make_zq_setup(cfg: ExperimentConfig, arm: str, teacher: Graph, rng) -> ZQSetup:
    delta = arm_delta(arm, cfg)
    widths = cfg["model.widths"]
    k = cfg["dataset.n_classes"]
    student = build_classifier(widths, rng, w_bits=cfg["quant.w_bits"], a_bits=cfg["quant.a_bits"],
                               bn_momentum=cfg["model.bn_momentum"], quantize_input=cfg["quant.input"])
    add_loss_heads(student, k, temperature=cfg["loss.temperature"], delta=delta)
    student.load_state_dict(teacher.state_dict(), strict=False)
    gen = build_generator(cfg["gen.noise_dim"], k, widths[0], rng, hidden=cfg["gen.hidden"],
                          output_scale=cfg["gen.output_scale"])
    lr = cfg["optim.lr"] * (HIGH_LR_FACTOR if arm == "kl_only_high_lr" else 1.0)
    return ZQSetup(
        teacher=teacher,
        student=student,
        generator=gen,
        gen_opt=make_optimizer("adam", cfg["gen.lr"]),
        student_opt=make_optimizer(cfg["optim.kind"], lr, cfg["optim.momentum"]),
        weights=cfg.loss_weights(delta),
        n_classes=k,
        rng=rng,
        noise_dim=cfg["gen.noise_dim"],
        batch_size=cfg["train.batch_size"],
        steps_per_epoch=cfg["train.steps_per_epoch"],
        gen_warmup=cfg["gen.warmup"],
        gi=cfg.gi_config() if arm in GI_ARMS else None,
    )


def _target(cfg, labels):
    k = cfg["dataset.n_classes"]
    c = cfg["loss.label_smoothing"]
    y = onehot(labels, k)
    return (1.0 - c) * y + c / k if c else y


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, arm: str | None = None,
                   teacher: Teacher | None = None, data=None, progress=None) -> RunRecord:
    """Run one arm end to end and return its record.

    A divergence stops the run early; the partial record is returned with
    ``diverged`` set.
    """
    arm = arm or cfg["arm"]
    seed = cfg["seed"] if seed is None else int(seed)
    cfg = cfg.with_values({"arm": arm, "seed": seed})
    t0 = time.perf_counter()
    train, val = data if data is not None else prepare_data(cfg)
    teacher = teacher or pretrain_teacher(cfg, train, val)
    rec = RunRecord(arm, seed, cfg.to_json(), cfg.hash(),
                    teacher_train_acc=teacher.train_acc, teacher_val_acc=teacher.val_acc)
    try:
        if arm == "kd":
            _run_kd(cfg, seed, teacher.graph, train, val, rec, progress)
        else:
            _run_zq(cfg, seed, arm, teacher.graph, train, val, rec, progress)
    except (DivergenceError, NonFiniteError) as exc:
        rec.diverged = True
        rec.error = str(exc)
        log.warning("%s seed %d diverged: %s", arm, seed, exc)
    if rec.epochs:
        rec.final_kl = rec.epochs[-1]["kl"]
    rec.wall_clock = time.perf_counter() - t0
    return rec


def _epoch_row(m, val_acc, prev_ce, prev_kl) -> dict:
    row = m.row()
    row.update(
        val_acc=val_acc,
        cosine=_opt_float(m.cosine),
        inter_cos_ce=_opt_float(inter_epoch_cosine(m.mean_grad_ce, prev_ce)),
        inter_cos_kl=_opt_float(inter_epoch_cosine(m.mean_grad_kl, prev_kl)),
        trained=m.trained,
        trace_ce=None, trace_ce_se=None, trace_kl=None, trace_kl_se=None,
    )
    return row


def _diag_epoch(cfg, epoch) -> bool:
    every = cfg["diag.hessian_every"]
    last = epoch == cfg["train.epochs"] - 1
    return cfg["diag.enabled"] and every > 0 and ((epoch + 1) % every == 0 or last)


def _run_zq(cfg, seed, arm, teacher: Graph, train: Dataset, val: Dataset, rec: RunRecord, progress):
    rng = np.random.default_rng(seed)
    s = make_zq_setup(cfg, arm, teacher, rng)
    # calibrate activation ranges on one synthetic batch so the untrained
    # student can be evaluated; real data never reaches an observer
    forward(s.student, {"x": s.draw(EVAL).samples}, mode=EVAL, outputs=["logits"])
    rec.initial_val_acc = evaluate(s.student, val.X, val.y)["acc"]
    noise, labels = _synthetic_probe(s, cfg["diag.probe_batch"], seed)
    snaps = set(cfg.snapshot_epochs())
    prev_ce = prev_kl = None
    for epoch in range(cfg["train.epochs"]):
        m = zsq_epoch(s, epoch)
        row = _epoch_row(m, evaluate(s.student, val.X, val.y)["acc"], prev_ce, prev_kl)
        prev_ce, prev_kl = m.mean_grad_ce, m.mean_grad_kl
        if cfg["diag.gi_reports"]:
            for step, reports in enumerate(m.reports):
                for r in reports:
                    rec.gi_reports.append([epoch, step, r.layer, r.kappa, r.target, r.crossings,
                                           r.search_steps, r.capped, r.zero_grad])
        want_trace = _diag_epoch(cfg, epoch)
        if want_trace or (cfg["diag.enabled"] and epoch in snaps):
            x = generate_samples(s.generator, noise, labels, s.n_classes, mode=EVAL).samples
            probe = Probe({"x": x, "target": _target(cfg, labels), "teacher_logits": logits_of(teacher, x)}, True)
            if want_trace:
                row.update(_traces(probe, s.student, cfg["diag.hessian_probes"], seed))
            if epoch in snaps:
                _record_snapshot(cfg, rec, probe, s.student, m, seed, epoch)
        rec.epochs.append(row)
        if progress:
            progress(rec, row)
    rec.final_val_acc = rec.epochs[-1]["val_acc"]
    rec.final_train_acc = evaluate(s.student, train.X, train.y)["acc"]


def _record_snapshot(cfg, rec, probe, student, m, seed, epoch):
    spectra, slices = _snapshot(probe, student, m, cfg["diag.lanczos_steps"], cfg["diag.slice_points"], seed, epoch)
    rec.spectra.extend(spectra)
    rec.slices.extend(slices)
    if m.reports:
        h = crossing_histogram(m.reports)
        rec.crossings.append({"epoch": epoch, "layers": h.layers, "mean": [float(x) for x in h.mean_crossings],
                              "sizes": [int(x) for x in h.layer_sizes], "top3_share": h.top3_share})


def _run_kd(cfg, seed, teacher: Graph, train: Dataset, val: Dataset, rec: RunRecord, progress):
    rng = np.random.default_rng(seed)
    k = cfg["dataset.n_classes"]
    student = build_classifier(cfg["model.widths"], rng, bn_momentum=cfg["model.bn_momentum"])
    add_loss_heads(student, k, temperature=cfg["loss.temperature"], delta=arm_delta("kd", cfg))
    s = KDSetup(teacher, student, make_optimizer(cfg["kd.optimizer"], cfg["kd.lr"], cfg["optim.momentum"]),
                cfg.loss_weights(arm_delta("kd", cfg)), k, rng, batch_size=cfg["train.batch_size"])
    rec.initial_val_acc = evaluate(student, val.X, val.y)["acc"]
    prng = np.random.default_rng([seed, 7919])
    idx = prng.choice(len(train.y), size=min(cfg["diag.probe_batch"], len(train.y)), replace=False)
    xp = train.X[idx]
    probe = Probe({"x": xp, "target": _target(cfg, train.y[idx]), "teacher_logits": logits_of(teacher, xp)}, False)
    snaps = set(cfg.snapshot_epochs())
    prev_ce = prev_kl = None
    for epoch in range(cfg["train.epochs"]):
        m = kd_epoch(s, train.X, train.y, epoch)
        row = _epoch_row(m, evaluate(student, val.X, val.y)["acc"], prev_ce, prev_kl)
        prev_ce, prev_kl = m.mean_grad_ce, m.mean_grad_kl
        if _diag_epoch(cfg, epoch):
            row.update(_traces(probe, student, cfg["diag.hessian_probes"], seed))
        if cfg["diag.enabled"] and epoch in snaps:
            _record_snapshot(cfg, rec, probe, student, m, seed, epoch)
        rec.epochs.append(row)
        if progress:
            progress(rec, row)
    rec.final_val_acc = rec.epochs[-1]["val_acc"]
    rec.final_train_acc = evaluate(student, train.X, train.y)["acc"]


# ---------------------------------------------------------------------------
# sweeps


def grid_points(grid: dict) -> list[dict]:
    if not grid:
        raise ValueError("sweep grid is empty")
    keys = list(grid)
    for k in keys:
        if len(grid[k]) == 0:
            raise ValueError(f"grid axis {k!r} has no values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_job(job):
    cfg_values, point, seed, teacher_state, teacher_acc = job
    cfg = ExperimentConfig.from_dict(cfg_values)
    data = prepare_data(cfg)
    g = _teacher_graph(cfg, np.random.default_rng(0))
    g.load_state_dict(teacher_state)
    teacher = Teacher(g, teacher_acc[0], teacher_acc[1], cfg.teacher_key())
    try:
        rec = run_experiment(cfg, seed=seed, teacher=teacher, data=data)
    except Exception as exc:  # recorded, the sweep goes on
        rec = RunRecord(cfg["arm"], seed, cfg.to_json(), cfg.hash(), error=f"{type(exc).__name__}: {exc}")
    return point, rec


def sweep_threads() -> int:
    try:
        return max(1, int(os.environ.get("ZSQ_THREADS", "1")))
    except ValueError:
        return 1


def sweep(cfg: ExperimentConfig, grid: dict, repeat: int = 1, threads: int | None = None) -> list[tuple[dict, RunRecord]]:
    """One run per (grid point, seed); seeds are ``cfg.seed + i`` for i < repeat.

    Teachers are pretrained once per distinct dataset/model/teacher setting
    and shared by every run that uses them.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    jobs = []
    teachers = {}
    for point in grid_points(grid):
        pcfg = cfg.with_values(point)
        key = pcfg.teacher_key()
        if key not in teachers:
            train, val = prepare_data(pcfg)
            t = pretrain_teacher(pcfg, train, val)
            teachers[key] = (t.graph.state_dict(), (t.train_acc, t.val_acc))
        state, acc = teachers[key]
        for i in range(repeat):
            jobs.append((dict(pcfg.values), point, cfg["seed"] + i, state, acc))
    threads = threads or sweep_threads()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def sweep_summary(results) -> list[dict]:
    """Per grid point mean/std of final validation accuracy and KL."""
    groups: dict[str, list] = {}
    points = {}
    for point, rec in results:
        key = repr(sorted(point.items()))
        groups.setdefault(key, []).append(rec)
        points[key] = point
    out = []
    for key, recs in groups.items():
        accs = np.array([r.final_val_acc for r in recs if r.final_val_acc is not None and not r.diverged])
        kls = np.array([r.final_kl for r in recs if r.final_kl is not None and not r.diverged])
        out.append({
            **points[key],
            "runs": len(recs),
            "failed": sum(1 for r in recs if r.error),
            "val_acc_mean": float(accs.mean()) if accs.size else None,
            "val_acc_std": float(accs.std()) if accs.size else None,
            "kl_mean": float(kls.mean()) if kls.size else None,
            "kl_std": float(kls.std()) if kls.size else None,
        })
    return out
