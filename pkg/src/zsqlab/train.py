"""Generator-driven zero-shot quantization and real-data distillation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ParamLayout, epoch_mean_grad, grad_cosine
from .losses import LossWeights
from .models import onehot
from .optim import GIConfig, Optimizer, gi_step, plain_step, rho_schedule
from .tensor import EVAL, TRAIN, Graph, NonFiniteError, backward, forward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class SyntheticBatch:
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels disagree on batch size")


def generate_samples(gen: Graph, noise, labels, n_classes: int, mode: str = TRAIN, update_stats=None) -> SyntheticBatch:
    noise = np.asarray(noise, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if noise.shape[0] != labels.shape[0]:
        raise ValueError(f"{noise.shape[0]} noise rows for {labels.shape[0]} labels")
    z = np.concatenate([noise, onehot(labels, n_classes)], axis=1)
    acts = forward(gen, {"z": z}, mode=mode, outputs=["out"], update_stats=update_stats)
    return SyntheticBatch(acts[gen.id("out")], labels)


def logits_of(graph: Graph, x, mode: str = EVAL) -> np.ndarray:
    acts = forward(graph, {"x": x}, mode=mode, outputs=["logits"], update_stats=False)
    return acts[graph.id("logits")]


def evaluate(graph: Graph, X, y) -> dict:
    z = logits_of(graph, X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return {
        "acc": float((z.argmax(axis=1) == y).mean()),
        "ce": float(-logp[np.arange(len(y)), y].mean()),
    }


def gini(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    total = x.sum()
    if x.size == 0 or total <= 0:
        return 0.0
    diffs = np.abs(x[:, None] - x[None, :]).sum()
    return float(diffs / (2.0 * x.size * total))


@dataclass
class EpochMetrics:
    epoch: int
    loss_g: float = float("nan")
    loss_q: float = 0.0
    ce: float = 0.0
    kl: float = 0.0
    acc: float = 0.0
    crossings: dict = field(default_factory=dict)
    cosine: float | None = None
    mean_grad_ce: np.ndarray | None = None
    mean_grad_kl: np.ndarray | None = None
    reports: list = field(default_factory=list)
    trained: bool = True

    @property
    def crossings_total(self) -> int:
        return int(sum(self.crossings.values()))

    @property
    def crossings_gini(self) -> float:
        return gini(list(self.crossings.values()))

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_g": self.loss_g,
            "loss_q": self.loss_q,
            "ce": self.ce,
            "kl": self.kl,
            "acc": self.acc,
            "crossings_total": self.crossings_total,
            "crossings_gini": self.crossings_gini,
        }


@dataclass
class ZQSetup:
    """Everything one zero-shot quantization run mutates."""

    teacher: Graph
    student: Graph
    generator: Graph
    gen_opt: Optimizer
    student_opt: Optimizer
    weights: LossWeights
    n_classes: int
    rng: np.random.Generator
    noise_dim: int = 16
    batch_size: int = 64
    steps_per_epoch: int = 20
    gen_warmup: int = 4
    gi: GIConfig | None = None

    def __post_init__(self):
        self.layout = ParamLayout.of(self.student)

    def draw(self, mode=TRAIN) -> SyntheticBatch:
        noise = self.rng.standard_normal((self.batch_size, self.noise_dim))
        labels = self.rng.integers(0, self.n_classes, self.batch_size)
        return generate_samples(self.generator, noise, labels, self.n_classes, mode=mode)

    def target(self, labels) -> np.ndarray:
        c = self.weights.label_smoothing
        y = onehot(labels, self.n_classes)
        return (1.0 - c) * y + c / self.n_classes if c else y


def generator_step(s: ZQSetup) -> float:
    """One Adam step of the generator on the teacher's CE + BN-statistics loss."""
    noise = s.rng.standard_normal((s.batch_size, s.noise_dim))
    labels = s.rng.integers(0, s.n_classes, s.batch_size)
    z = np.concatenate([noise, onehot(labels, s.n_classes)], axis=1)
    gacts = forward(s.generator, {"z": z}, mode=TRAIN, outputs=["out"])
    samples = gacts[s.generator.id("out")]
    feeds = {"x": samples, "target": onehot(labels, s.n_classes)}
    tacts = forward(s.teacher, feeds, mode=EVAL, outputs=["gen_loss"])
    loss = float(tacts[s.teacher.id("gen_loss")])
    if s.gen_opt.lr > 0:
        _, igrads = backward(s.teacher, "gen_loss", tacts, wrt_inputs=True)
        ggrads = backward(s.generator, "out", gacts, upstream=igrads["x"])
        s.gen_opt.step(s.generator, ggrads)
    return loss


def _student_pass(student: Graph, feeds, mode, update_stats):
    try:
        acts = forward(student, feeds, mode=mode, outputs=["ce", "kl"], update_stats=update_stats)
    except NonFiniteError as exc:
        raise DivergenceError(str(exc)) from exc
    g_ce = backward(student, "ce", acts)
    g_kl = backward(student, "kl", acts)
    return acts, g_ce, g_kl


def zsq_epoch(s: ZQSetup, epoch: int) -> EpochMetrics:
    """One epoch of joint generator/quantized-student training.

    Per step: a generator update, then a fresh synthetic batch on which the
    student takes a fake-quantized forward pass and a straight-through
    backward pass. During the generator warm-up the student is not updated.
    """
    delta = s.weights.delta
    train_student = epoch >= s.gen_warmup
    use_gi = s.gi is not None and train_student
    in_gi_warmup = s.gi is not None and epoch < s.gen_warmup + s.gi.warmup_epochs
    rho = rho_schedule(epoch, s.gi) if s.gi is not None else 0.0

    m = EpochMetrics(epoch, trained=train_student)
    sums = dict(loss_g=0.0, loss_q=0.0, ce=0.0, kl=0.0, acc=0.0)
    cosines, ce_grads, kl_grads = [], [], []
    crossings = {s.student.nodes[i].params[0]: 0 for i in s.student.quantized_layers()}

    for _ in range(s.steps_per_epoch):
        sums["loss_g"] += generator_step(s)
        batch = s.draw()
        tlogits = logits_of(s.teacher, batch.samples)
        feeds = {"x": batch.samples, "target": s.target(batch.labels), "teacher_logits": tlogits}
        acts, g_ce, g_kl = _student_pass(s.student, feeds, TRAIN, update_stats=True)
        ce = float(acts[s.student.id("ce")])
        kl = float(acts[s.student.id("kl")])
        loss = (1.0 - delta) * ce + delta * kl
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite student loss at epoch {epoch}")
        sums["loss_q"] += loss
        sums["ce"] += ce
        sums["kl"] += kl
        pred = acts[s.student.id("logits")].argmax(axis=1)
        sums["acc"] += float((pred == batch.labels).mean())

        flat_ce = s.layout.flatten(g_ce)
        flat_kl = s.layout.flatten(g_kl)
        ce_grads.append(flat_ce)
        kl_grads.append(flat_kl)
        cos = grad_cosine(flat_ce, flat_kl)
        if cos is not None:
            cosines.append(cos)

        if not train_student:
            continue
        grads = {k: (1.0 - delta) * g_ce[k] + delta * g_kl[k] for k in g_ce}
        try:
            if use_gi:
                reports = gi_step(s.student, grads, s.student_opt, rho, s.gi, in_gi_warmup)
            else:
                reports = plain_step(s.student, grads, s.student_opt)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc)) from exc
        m.reports.append(reports)
        for r in reports:
            crossings[r.layer] += r.crossings

    n = s.steps_per_epoch
    for k, v in sums.items():
        setattr(m, k, v / n)
    m.crossings = crossings
    m.cosine = float(np.mean(cosines)) if cosines else None
    m.mean_grad_ce = epoch_mean_grad(ce_grads)
    m.mean_grad_kl = epoch_mean_grad(kl_grads)
    return m


@dataclass
class KDSetup:
    teacher: Graph
    student: Graph
    opt: Optimizer
    weights: LossWeights
    n_classes: int
    rng: np.random.Generator
    batch_size: int = 64
    steps_per_epoch: int | None = None

    def __post_init__(self):
        self.layout = ParamLayout.of(self.student)


def kd_epoch(s: KDSetup, X, y, epoch: int = 0) -> EpochMetrics:
    """One epoch of CE+KL distillation on real samples into a full-precision student."""
    delta = s.weights.delta
    order = s.rng.permutation(len(X))
    batches = [order[i : i + s.batch_size] for i in range(0, len(X), s.batch_size)]
    if s.steps_per_epoch is not None:
        batches = batches[: s.steps_per_epoch]
    m = EpochMetrics(epoch)
    sums = dict(loss_q=0.0, ce=0.0, kl=0.0, acc=0.0)
    cosines, ce_grads, kl_grads = [], [], []
    for idx in batches:
        xb, yb = X[idx], y[idx]
        tlogits = logits_of(s.teacher, xb)
        c = s.weights.label_smoothing
        target = onehot(yb, s.n_classes)
        if c:
            target = (1.0 - c) * target + c / s.n_classes
        acts, g_ce, g_kl = _student_pass(s.student, {"x": xb, "target": target, "teacher_logits": tlogits}, TRAIN, True)
        ce = float(acts[s.student.id("ce")])
        kl = float(acts[s.student.id("kl")])
        sums["loss_q"] += (1.0 - delta) * ce + delta * kl
        sums["ce"] += ce
        sums["kl"] += kl
        sums["acc"] += float((acts[s.student.id("logits")].argmax(axis=1) == yb).mean())
        flat_ce = s.layout.flatten(g_ce)
        flat_kl = s.layout.flatten(g_kl)
        ce_grads.append(flat_ce)
        kl_grads.append(flat_kl)
        cos = grad_cosine(flat_ce, flat_kl)
        if cos is not None:
            cosines.append(cos)
        grads = {k: (1.0 - delta) * g_ce[k] + delta * g_kl[k] for k in g_ce}
        try:
            s.opt.step(s.student, grads)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc)) from exc
    for k, v in sums.items():
        setattr(m, k, v / len(batches))
    m.cosine = float(np.mean(cosines)) if cosines else None
    m.mean_grad_ce = epoch_mean_grad(ce_grads)
    m.mean_grad_kl = epoch_mean_grad(kl_grads)
    return m


def train_classifier(graph: Graph, X, y, n_classes, opt: Optimizer, epochs: int, batch_size: int, rng) -> list[float]:
    """Plain cross-entropy training on real data (teacher pretraining)."""
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        nb = 0
        for i in range(0, len(X), batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            feeds = {"x": X[idx], "target": onehot(y[idx], n_classes)}
            acts = forward(graph, feeds, mode=TRAIN, outputs=["ce"])
            total += float(acts[graph.id("ce")])
            nb += 1
            opt.step(graph, backward(graph, "ce", acts))
        history.append(total / max(nb, 1))
    return history
