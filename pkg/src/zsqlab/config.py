"""Experiment configuration: flat ``key=value`` files with dotted sections.

Example::

    # 3-bit weights, stronger inundation
    quant.w_bits=3
    gi.rho0=0.02
    arm=ait

Unknown keys are rejected. Values are parsed according to the type of the
default they replace, so every loaded config is fully typed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .data import KINDS, DatasetSpec
from .losses import LossWeights
from .optim import OPTIMIZERS, GIConfig

ARMS = ("baseline", "kl_only", "ait", "baseline_gi", "ce_only_gi", "kl_only_high_lr", "kd")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "arm": "baseline",
    "arms": ("baseline", "kl_only", "ait"),
    "dataset.kind": "gaussian-blobs",
    "dataset.n_classes": 10,
    "dataset.input_dim": 16,
    "dataset.samples_per_class": 200,
    "dataset.val_per_class": 100,
    "dataset.seed": 0,
    "dataset.cluster_std": 1.0,
    "dataset.separation": 5.0,
    "dataset.blobs_per_class": 1,
    "model.widths": (16, 64, 64, 10),
    "model.bn_momentum": 0.1,
    "quant.w_bits": 4,
    "quant.a_bits": 4,
    "quant.input": False,
    "loss.alpha": 0.5,
    "loss.delta": 0.5,
    "loss.label_smoothing": 0.0,
    "loss.temperature": 1.0,
    "optim.kind": "sgd_nesterov",
    "optim.lr": 1e-4,
    "optim.momentum": 0.9,
    "gen.lr": 1e-3,
    "gen.noise_dim": 16,
    "gen.hidden": 64,
    "gen.output_scale": 3.0,
    "gen.warmup": 4,
    "gi.rho0": 0.01,
    "gi.decay_factor": 0.1,
    "gi.decay_interval": 100,
    "gi.warmup_epochs": 20,
    "gi.kappa_cap_warmup": 128.0,
    "gi.search_budget": 5,
    "gi.doubling_cap": 40,
    "gi.constrained": True,
    "train.epochs": 120,
    "train.batch_size": 64,
    "train.steps_per_epoch": 20,
    "teacher.seed": 0,
    "teacher.epochs": 40,
    "teacher.lr": 1e-2,
    "teacher.optimizer": "adam",
    "kd.lr": 1e-2,
    "kd.optimizer": "sgd_nesterov",
    "diag.enabled": True,
    "diag.hessian_every": 10,
    "diag.hessian_probes": 30,
    "diag.probe_batch": 256,
    "diag.lanczos_steps": 64,
    "diag.slice_points": 21,
    "diag.snapshots": (),
    "diag.gi_reports": True,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_TUPLE_ITEMS = {"arms": str, "model.widths": int, "diag.snapshots": int}


def _parse_tuple(key: str, text: str) -> tuple:
    kind = _TUPLE_ITEMS[key]
    return tuple(kind(p.strip()) for p in text.split(",") if p.strip())


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if not isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(_TUPLE_ITEMS[key](x) for x in value)
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{key} must be an integer")
            return int(value)
        return str(value)
    text = value.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return _parse_tuple(key, text)
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated, immutable set of experiment settings."""

    values: dict

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "ExperimentConfig":
        vals = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                vals[key] = _coerce(key, value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def with_values(self, mapping: dict) -> "ExperimentConfig":
        merged = {k: v for k, v in self.values.items() if v != DEFAULTS[k]}
        merged.update(mapping)
        return ExperimentConfig.from_dict(merged)

    def validate(self) -> None:
        v = self.values
        if v["arm"] not in ARMS:
            raise ConfigError(f"unknown arm {v['arm']!r}; expected one of {ARMS}")
        for a in v["arms"]:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r} in arms")
        if v["dataset.kind"] not in KINDS:
            raise ConfigError(f"unknown dataset kind {v['dataset.kind']!r}")
        widths = v["model.widths"]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError("model.widths needs at least two positive widths")
        if widths[0] != v["dataset.input_dim"] or widths[-1] != v["dataset.n_classes"]:
            raise ConfigError("model.widths must start at dataset.input_dim and end at dataset.n_classes")
        for key in ("quant.w_bits", "quant.a_bits"):
            if not 2 <= v[key] <= 16:
                raise ConfigError(f"{key} must lie in [2, 16]")
        for key in ("optim.kind", "kd.optimizer", "teacher.optimizer"):
            if v[key] not in OPTIMIZERS:
                raise ConfigError(f"{key} must be one of {OPTIMIZERS}")
        for key in ("optim.lr", "gen.lr", "teacher.lr", "kd.lr"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        positive = ("train.epochs", "train.batch_size", "train.steps_per_epoch", "teacher.epochs",
                    "gen.noise_dim", "gen.hidden", "diag.probe_batch", "diag.hessian_probes", "diag.slice_points")
        for key in positive:
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["train.batch_size"] < 2:
            raise ConfigError("train.batch_size must be >= 2 (batch-norm needs a batch)")
        if v["gen.warmup"] < 0 or v["diag.hessian_every"] < 0 or v["diag.lanczos_steps"] < 0:
            raise ConfigError("gen.warmup, diag.hessian_every and diag.lanczos_steps must be >= 0")
        if not 0.0 < v["model.bn_momentum"] < 1.0:
            raise ConfigError("model.bn_momentum must lie in (0, 1)")
        if any(e < 0 or e >= v["train.epochs"] for e in v["diag.snapshots"]):
            raise ConfigError("diag.snapshots must be epochs in [0, train.epochs)")
        try:
            self.dataset_spec()
            self.loss_weights(v["loss.delta"])
            self.gi_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views ---------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        v = self.values
        return DatasetSpec(
            kind=v["dataset.kind"],
            n_classes=v["dataset.n_classes"],
            input_dim=v["dataset.input_dim"],
            samples_per_class=v["dataset.samples_per_class"],
            val_per_class=v["dataset.val_per_class"],
            seed=v["dataset.seed"],
            cluster_std=v["dataset.cluster_std"],
            separation=v["dataset.separation"],
            blobs_per_class=v["dataset.blobs_per_class"],
        )

    def loss_weights(self, delta=None) -> LossWeights:
        v = self.values
        return LossWeights(
            alpha=v["loss.alpha"],
            delta=v["loss.delta"] if delta is None else delta,
            label_smoothing=v["loss.label_smoothing"],
            temperature=v["loss.temperature"],
        )

    def gi_config(self) -> GIConfig:
        v = self.values
        return GIConfig(
            rho0=v["gi.rho0"],
            decay_factor=v["gi.decay_factor"],
            decay_interval=v["gi.decay_interval"],
            warmup_epochs=v["gi.warmup_epochs"],
            kappa_cap_warmup=v["gi.kappa_cap_warmup"],
            search_budget=v["gi.search_budget"],
            doubling_cap=v["gi.doubling_cap"],
            constrained=v["gi.constrained"],
        )

    def snapshot_epochs(self) -> tuple[int, ...]:
        """Epochs with spectrum, slice and crossing-histogram exports."""
        if self.values["diag.snapshots"]:
            return tuple(sorted(set(self.values["diag.snapshots"])))
        last = self.values["train.epochs"] - 1
        first = min(self.values["gen.warmup"], last)
        return tuple(sorted({first, last}))

    # -- serialization -------------------------------------------------------

    def canonical(self) -> str:
        lines = []
        for key in sorted(self.values):
            lines.append(f"{key}={format_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def teacher_key(self) -> str:
        """Hash over just the settings that determine the pretrained teacher."""
        keys = [k for k in self.values if k.split(".")[0] in ("dataset", "model", "teacher")]
        text = "\n".join(f"{k}={format_value(self.values[k])}" for k in sorted(keys))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(x) for x in value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Raw ``key -> string`` pairs from config text; duplicate keys are an error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    values.update(overrides or {})
    return ExperimentConfig.from_dict(values)

