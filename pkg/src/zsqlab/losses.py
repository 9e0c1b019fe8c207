"""Loss functions for generator and student training (numpy, value only).

The graph heads built by :func:`zsqlab.models.add_loss_heads` compute the
same quantities with gradients; these functions are the reference values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import onehot
from .tensor import EVAL, _log_softmax, _softmax, forward


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    delta: float = 0.5
    label_smoothing: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "delta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _as_distribution(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return onehot(labels, n_classes)
    return labels.astype(np.float64)


def cross_entropy(logits, labels) -> float:
    """Batch mean of ``-sum(y * log_softmax(logits))``; hard or soft labels."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    y = _as_distribution(labels, logits.shape[1])
    if y.shape != logits.shape:
        raise ValueError(f"labels {y.shape} do not match logits {logits.shape}")
    return float(-(y * _log_softmax(logits)).sum(axis=1).mean())


def kl_divergence(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    """Batch mean of KL(teacher || student) on temperature-softened outputs, times T**2."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lt = _log_softmax(t / temperature)
    ls = _log_softmax(s / temperature)
    kl = (np.exp(lt) * (lt - ls)).sum(axis=1).mean()
    return float(kl * temperature**2)


def bns_loss(batch_stats, teacher_bn) -> float:
    """Batch-norm statistics matching.

    ``batch_stats`` is a list of (mean, var) pairs, ``teacher_bn`` the
    matching list of :class:`BatchNormState`. Each layer contributes the
    squared distance of means plus that of variances, divided by its width.
    """
    if len(batch_stats) != len(teacher_bn):
        raise ValueError(f"{len(batch_stats)} batch stats for {len(teacher_bn)} BN layers")
    total = 0.0
    for (mu, var), ref in zip(batch_stats, teacher_bn):
        mu = np.asarray(mu, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if mu.shape != ref.running_mean.shape:
            raise ValueError("misaligned batch-norm layer")
        dm = mu - ref.running_mean
        dv = var - ref.running_var
        total += float(dm @ dm + dv @ dv) / mu.size
    return total


def teacher_batch_stats(teacher, samples) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-BN-layer (mean, var) of the pre-normalization activations."""
    acts = forward(teacher, {"x": samples}, mode=EVAL, outputs=["logits"])
    stats = []
    for nid in sorted(teacher.bn):
        x = acts[teacher.nodes[nid].inputs[0]]
        stats.append((x.mean(axis=0), x.var(axis=0)))
    return stats


def generator_loss(teacher, batch, alpha: float) -> float:
    """Value of ``(1 - alpha) * CE(teacher(x), y) + alpha * BNS``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    acts = forward(teacher, {"x": batch.samples}, mode=EVAL, outputs=["logits"])
    ce = cross_entropy(acts[teacher.id("logits")], batch.labels)
    bns = bns_loss(teacher_batch_stats(teacher, batch.samples), [teacher.bn[i] for i in sorted(teacher.bn)])
    return (1.0 - alpha) * ce + alpha * bns


def student_loss(student_logits, teacher_logits, labels, delta: float, weights: LossWeights | None = None) -> float:
    """``(1 - delta) * CE + delta * KL``; delta = 1 is the KL-only setting."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    weights = weights or LossWeights()
    k = np.asarray(student_logits).shape[1]
    y = _as_distribution(labels, k)
    if weights.label_smoothing:
        y = (1.0 - weights.label_smoothing) * y + weights.label_smoothing / k
    ce = cross_entropy(student_logits, y)
    kl = kl_divergence(student_logits, teacher_logits, weights.temperature)
    return (1.0 - delta) * ce + delta * kl


def smooth_labels(labels, c: float, n_classes: int) -> np.ndarray:
    """``(1 - c) * onehot + c / K``."""
    if not 0.0 <= c < 1.0:
        raise ValueError("c must lie in [0, 1)")
    return (1.0 - c) * onehot(labels, n_classes) + c / n_classes


def softmax(z) -> np.ndarray:
    return _softmax(np.asarray(z, dtype=np.float64))
