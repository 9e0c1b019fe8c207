import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zsqlab.config import DEFAULTS, ConfigError, ExperimentConfig, load_config, parse_config_text
from zsqlab.data import KINDS, DatasetSpec, make_dataset, nearest_centroid_accuracy


@pytest.mark.parametrize("kind", KINDS)
def test_dataset_is_deterministic_and_balanced(kind):
    spec = DatasetSpec(kind=kind, n_classes=4, input_dim=6, samples_per_class=30, val_per_class=10, seed=5)
    (tr, va), (tr2, va2) = make_dataset(spec), make_dataset(spec)
    np.testing.assert_array_equal(tr.X, tr2.X)
    np.testing.assert_array_equal(va.y, va2.y)
    assert np.all(np.bincount(tr.y) == 30) and np.all(np.bincount(va.y) == 10)
    np.testing.assert_allclose(tr.X.mean(axis=0), 0.0, atol=1e-12)
    assert not np.array_equal(tr.X, make_dataset(DatasetSpec(kind=kind, n_classes=4, input_dim=6,
                                                             samples_per_class=30, val_per_class=10, seed=6))[0].X)


def test_well_separated_blobs_are_nearly_linearly_separable():
    tr, va = make_dataset(DatasetSpec(n_classes=10, separation=8.0, seed=1))
    assert nearest_centroid_accuracy(tr, va) >= 0.99


def test_multi_blob_classes():
    tr, _ = make_dataset(DatasetSpec(n_classes=3, blobs_per_class=3, samples_per_class=60, seed=0))
    assert tr.X.shape == (180, 16)


def test_dataset_spec_validation():
    for bad in (dict(kind="spiral"), dict(n_classes=1), dict(cluster_std=0.0), dict(blobs_per_class=0)):
        with pytest.raises(ValueError):
            DatasetSpec(**bad)
    with pytest.raises(ValueError):
        make_dataset(DatasetSpec(kind="grid-patterns", n_classes=5, input_dim=2))


def test_defaults_and_typed_views():
    cfg = ExperimentConfig.from_dict()
    assert cfg["quant.w_bits"] == 4 and cfg["model.widths"] == (16, 64, 64, 10)
    assert cfg.dataset_spec().n_classes == 10
    assert cfg.gi_config().rho0 == 0.01
    assert cfg.loss_weights(1.0).delta == 1.0
    assert cfg.snapshot_epochs() == (4, 119)
    assert set(cfg.to_json()) == set(DEFAULTS)


def test_parse_config_text():
    vals = parse_config_text("# header\nquant.w_bits = 3  # inline\n\narms=baseline,ait\n")
    cfg = ExperimentConfig.from_dict(vals)
    assert cfg["quant.w_bits"] == 3 and cfg["arms"] == ("baseline", "ait")
    for bad in ("a=1\na=2\n", "novalue\n", "=3\n"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)


@pytest.mark.parametrize("overrides", [
    {"nope": 1},
    {"arm": "magic"},
    {"quant.w_bits": 1},
    {"model.widths": "16,10,3"},
    {"train.batch_size": 1},
    {"optim.kind": "lion"},
    {"diag.snapshots": "500"},
    {"quant.input": "maybe"},
    {"train.epochs": "many"},
])
def test_invalid_configs_raise(overrides):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(overrides)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("gi.rho0=0.02\ntrain.epochs=3\n")
    cfg = load_config(p, {"train.epochs": 5})
    assert cfg["gi.rho0"] == 0.02 and cfg["train.epochs"] == 5


def test_teacher_key_ignores_student_settings():
    a = ExperimentConfig.from_dict()
    assert a.teacher_key() == a.with_values({"gi.rho0": 0.5, "arm": "kl_only"}).teacher_key()
    assert a.teacher_key() != a.with_values({"dataset.seed": 3}).teacher_key()
    assert a.hash() != a.with_values({"gi.rho0": 0.5}).hash()


@settings(max_examples=50, deadline=None)
@given(
    rho=st.floats(0, 1),
    bits=st.integers(2, 16),
    epochs=st.integers(1, 500),
    perm=st.permutations(["gi.rho0", "quant.w_bits", "train.epochs"]),
)
def test_canonical_text_round_trips(rho, bits, epochs, perm):
    vals = {"gi.rho0": rho, "quant.w_bits": bits, "train.epochs": epochs}
    text = "".join(f"{k}={vals[k]!r}\n" for k in perm)
    cfg = ExperimentConfig.from_dict(parse_config_text(text))
    assert ExperimentConfig.from_dict(parse_config_text(cfg.canonical())) == cfg
    assert cfg.hash() == ExperimentConfig.from_dict(vals).hash()
