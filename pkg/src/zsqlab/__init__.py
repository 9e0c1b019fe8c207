"""Desk-scale laboratory for zero-shot quantization with gradient inundation."""

from .config import ExperimentConfig, load_config
from .estimators import DistilledClassifier, FakeQuantizer, TeacherClassifier, ZeroShotQuantizer
from .experiment import RunRecord, pretrain_teacher, run_experiment, sweep
from .report import export_report

__version__ = "0.1.0"

__all__ = [
    "DistilledClassifier",
    "ExperimentConfig",
    "FakeQuantizer",
    "RunRecord",
    "TeacherClassifier",
    "ZeroShotQuantizer",
    "export_report",
    "load_config",
    "pretrain_teacher",
    "run_experiment",
    "sweep",
]
