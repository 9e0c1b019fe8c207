import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from zsqlab.config import ExperimentConfig  # noqa: E402
from zsqlab.experiment import prepare_data, pretrain_teacher  # noqa: E402

SMALL = {
    "dataset.n_classes": 3,
    "dataset.input_dim": 4,
    "dataset.samples_per_class": 60,
    "dataset.val_per_class": 20,
    "model.widths": "4,16,3",
    "teacher.epochs": 15,
    "train.epochs": 3,
    "train.steps_per_epoch": 3,
    "train.batch_size": 16,
    "gen.warmup": 1,
    "gi.warmup_epochs": 1,
    "diag.hessian_every": 2,
    "diag.hessian_probes": 4,
    "diag.probe_batch": 32,
    "diag.lanczos_steps": 8,
    "diag.slice_points": 5,
}


@pytest.fixture(scope="session")
def small_cfg():
    return ExperimentConfig.from_dict(SMALL)


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return prepare_data(small_cfg)


@pytest.fixture(scope="session")
def small_teacher(small_cfg, small_data):
    return pretrain_teacher(small_cfg, *small_data)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
