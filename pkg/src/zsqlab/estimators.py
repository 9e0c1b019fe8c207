"""scikit-learn style wrappers around the training loops.

These follow the usual estimator contract (hyperparameters in ``__init__``,
learned state in trailing-underscore attributes, ``fit`` returns ``self``)
so the lab's models drop into ``cross_val_score``, ``clone`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ExperimentConfig
from .experiment import finalize_bn, make_zq_setup
from .losses import LossWeights, softmax
from .models import add_loss_heads, build_classifier
from .optim import make_optimizer
from .quant import QuantConfig, dequantize, safe_quant_params, quantize
from .tensor import EVAL, forward
from .train import KDSetup, evaluate, kd_epoch, logits_of, train_classifier, zsq_epoch


class _GraphPredictor(ClassifierMixin):
    """predict / predict_proba on top of a graph stored in ``graph_``."""

    def _graph(self):
        check_is_fitted(self, "graph_")
        return self.graph_

    def decision_function(self, X):
        graph = self._graph()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return logits_of(graph, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class TeacherClassifier(_GraphPredictor, BaseEstimator):
    """Full-precision dense+BN+ReLU classifier trained with cross-entropy."""

    def __init__(self, hidden=(64, 64), epochs=40, learning_rate=1e-2, batch_size=64, bn_momentum=0.1,
                 random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.bn_momentum = bn_momentum
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        yi = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        widths = (X.shape[1], *self.hidden, len(self.classes_))
        rng = np.random.default_rng(self.random_state)
        g = build_classifier(widths, rng, bn_momentum=self.bn_momentum)
        add_loss_heads(g, len(self.classes_), alpha=0.5)
        opt = make_optimizer("adam", self.learning_rate)
        self.loss_curve_ = train_classifier(g, X, yi, len(self.classes_), opt, self.epochs, self.batch_size, rng)
        finalize_bn(g, X)
        self.graph_ = g
        self.widths_ = widths
        return self


class FakeQuantizer(TransformerMixin, BaseEstimator):
    """Quantize-then-dequantize onto a single per-tensor grid learned in ``fit``."""

    def __init__(self, n_bits=4):
        self.n_bits = n_bits

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        QuantConfig(self.n_bits)
        self.params_ = safe_quant_params(float(X.min()), float(X.max()), self.n_bits)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return dequantize(quantize(X, self.params_, self.n_bits), self.params_)

    def codes(self, X):
        """Integer codes in ``[-2**(n-1), 2**(n-1) - 1]``."""
        check_is_fitted(self, "params_")
        return quantize(check_array(X, dtype=np.float64), self.params_, self.n_bits)


def _check_teacher(teacher):
    if not isinstance(teacher, TeacherClassifier):
        raise TypeError("teacher must be a TeacherClassifier")
    check_is_fitted(teacher, "graph_")


class ZeroShotQuantizer(_GraphPredictor, BaseEstimator):
    """Data-free quantization of a fitted teacher with generator-driven distillation.

    ``fit`` never looks at real data; ``X`` and ``y`` are accepted only for
    API compatibility and ignored. ``arm`` selects the recipe: ``baseline``
    (CE+KL), ``kl_only``, ``ait`` (KL-only with gradient inundation), and the
    other ablation arms of the lab.
    """

    def __init__(self, teacher=None, w_bits=4, a_bits=4, arm="ait", epochs=120, steps_per_epoch=20,
                 batch_size=64, learning_rate=1e-4, rho0=0.01, generator_lr=1e-3, generator_warmup=4,
                 gi_warmup=20, random_state=0):
        self.teacher = teacher
        self.w_bits = w_bits
        self.a_bits = a_bits
        self.arm = arm
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rho0 = rho0
        self.generator_lr = generator_lr
        self.generator_warmup = generator_warmup
        self.gi_warmup = gi_warmup
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        t = self.teacher
        return ExperimentConfig.from_dict({
            "arm": self.arm,
            "dataset.input_dim": t.widths_[0],
            "dataset.n_classes": t.widths_[-1],
            "model.widths": t.widths_,
            "model.bn_momentum": t.bn_momentum,
            "quant.w_bits": self.w_bits,
            "quant.a_bits": self.a_bits,
            "optim.lr": self.learning_rate,
            "gi.rho0": self.rho0,
            "gi.warmup_epochs": self.gi_warmup,
            "gen.lr": self.generator_lr,
            "gen.warmup": self.generator_warmup,
            "train.epochs": self.epochs,
            "train.steps_per_epoch": self.steps_per_epoch,
            "train.batch_size": self.batch_size,
        })

    def fit(self, X=None, y=None):
        _check_teacher(self.teacher)
        if self.arm == "kd":
            raise ValueError("the kd arm needs real data; use DistilledClassifier")
        cfg = self._config()
        rng = np.random.default_rng(self.random_state)
        s = make_zq_setup(cfg, self.arm, self.teacher.graph_, rng)
        forward(s.student, {"x": s.draw(EVAL).samples}, mode=EVAL, outputs=["logits"])
        self.history_ = []
        for epoch in range(self.epochs):
            self.history_.append(zsq_epoch(s, epoch).row())
        self.graph_ = s.student
        self.generator_ = s.generator
        self.classes_ = self.teacher.classes_
        self.n_features_in_ = self.teacher.n_features_in_
        return self


class DistilledClassifier(_GraphPredictor, BaseEstimator):
    """Full-precision student distilled from a teacher on real samples."""

    def __init__(self, teacher=None, epochs=40, learning_rate=1e-2, delta=0.5, batch_size=64, random_state=0):
        self.teacher = teacher
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.delta = delta
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        _check_teacher(self.teacher)
        X, y = check_X_y(X, y, dtype=np.float64)
        t = self.teacher
        if X.shape[1] != t.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, teacher expects {t.n_features_in_}")
        yi = np.searchsorted(t.classes_, y)
        if np.any(yi >= len(t.classes_)) or np.any(t.classes_[np.minimum(yi, len(t.classes_) - 1)] != y):
            raise ValueError("y contains labels the teacher was not trained on")
        rng = np.random.default_rng(self.random_state)
        k = len(t.classes_)
        g = build_classifier(t.widths_, rng, bn_momentum=t.bn_momentum)
        add_loss_heads(g, k, delta=self.delta)
        s = KDSetup(t.graph_, g, make_optimizer("sgd_nesterov", self.learning_rate), LossWeights(delta=self.delta),
                    k, rng, batch_size=self.batch_size)
        self.history_ = [kd_epoch(s, X, yi, e).row() for e in range(self.epochs)]
        self.graph_ = g
        self.classes_ = t.classes_
        self.n_features_in_ = X.shape[1]
        self.train_score_ = evaluate(g, X, yi)["acc"]
        return self
