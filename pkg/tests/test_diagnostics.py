import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import flat_objective
from oracles import explicit_hessian
from zsqlab.diagnostics import (
    GraphObjective,
    ParamLayout,
    crossing_histogram,
    epoch_mean_grad,
    grad_cosine,
    hutchinson_trace,
    hvp,
    inter_epoch_cosine,
    lanczos_spectrum,
    loss_slice,
    power_iteration,
)
from zsqlab.models import add_loss_heads, build_classifier, surrogate_graph
from zsqlab.optim import LayerUpdateReport
from zsqlab.tensor import TRAIN, forward

vec = arrays(np.float64, 6, elements=st.floats(-10, 10))


def _quadratic(eigs, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(len(eigs), len(eigs))))
    return Q @ np.diag(eigs) @ Q.T


@given(vec, vec)
def test_cosine_bounds_and_symmetry(a, b):
    c = grad_cosine(a, b)
    if not a.any() or not b.any():
        assert c is None
    else:
        assert -1.0 <= c <= 1.0
        assert c == pytest.approx(grad_cosine(b, a))


def test_cosine_edge_cases():
    assert grad_cosine([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert grad_cosine([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)
    assert inter_epoch_cosine(np.ones(2), None) is None
    with pytest.raises(ValueError):
        grad_cosine([1.0], [1.0, 2.0])
    assert grad_cosine(np.ones(3), np.full(3, 1e-300)) == pytest.approx(1.0)
    assert grad_cosine(np.full(3, 1e300), -np.ones(3)) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        epoch_mean_grad([])
    np.testing.assert_allclose(epoch_mean_grad([np.ones(2), 3 * np.ones(2)]), [2.0, 2.0])


def test_layout_round_trip():
    g = build_classifier((3, 4, 2), np.random.default_rng(0))
    lay = ParamLayout.of(g)
    flat = lay.flatten(g.params)
    assert flat.size == lay.size
    back = lay.unflatten(flat)
    for k in g.params:
        np.testing.assert_array_equal(back[k], g.params[k])
    assert flat[lay.segment("fc1.bias")].size == 4
    with pytest.raises(ValueError):
        lay.unflatten(flat[:-1])


def test_hvp_exact_on_quadratic():
    A = _quadratic(np.arange(1.0, 9.0))
    v = np.random.default_rng(1).normal(size=8)
    np.testing.assert_allclose(hvp(lambda t: A @ t, np.ones(8), v), A @ v, rtol=1e-8, atol=1e-9)
    with pytest.raises(ValueError):
        hvp(lambda t: A @ t, np.ones(8), np.zeros(8))


@pytest.mark.parametrize("seed", range(3))
def test_hutchinson_within_three_stderr(seed):
    eigs = np.random.default_rng(seed).uniform(-2, 5, 40)
    A = _quadratic(eigs, seed)
    est = hutchinson_trace(lambda v: A @ v, 40, 1000, seed=seed)
    assert abs(est.trace - eigs.sum()) <= 3 * est.stderr


def test_hutchinson_resamples_rejected_probes():
    seen = []
    est = hutchinson_trace(lambda v: v, 4, 5, seed=0, probe_ok=lambda v: v[0] > 0 or seen.append(1))
    assert est.trace == pytest.approx(4.0)
    assert est.flagged <= 5
    with pytest.raises(ValueError):
        hutchinson_trace(lambda v: v, 4, 0)


def test_lanczos_recovers_full_spectrum():
    eigs = np.linspace(-3, 7, 30) + np.random.default_rng(2).uniform(0, 0.1, 30)
    A = _quadratic(eigs, 2)
    spec = lanczos_spectrum(lambda v: A @ v, 30, 30, seed=0)
    np.testing.assert_allclose(np.sort(spec.ritz_values), np.sort(eigs), rtol=1e-6)
    lam, _ = power_iteration(lambda v: A @ v, 30, iters=2000)
    assert abs(lam) == pytest.approx(np.max(np.abs(eigs)), rel=1e-3)
    with pytest.raises(ValueError):
        lanczos_spectrum(lambda v: A @ v, 30, 31)


def test_lanczos_breakdown_on_low_rank():
    A = np.diag([3.0, 1.0, 0.0, 0.0, 0.0])
    spec = lanczos_spectrum(lambda v: A @ v, 5, 5, seed=0)
    assert spec.breakdown and spec.steps < 5
    assert spec.ritz_values[0] == pytest.approx(3.0)


def test_loss_slice():
    A = np.diag([1.0, 4.0])
    theta = np.zeros(2)
    curve = loss_slice(lambda t: 0.5 * t @ A @ t, theta, np.array([0.0, 1.0]), 2.0, [-0.5, 0.0, 0.5])
    assert curve == [(-0.5, pytest.approx(2.0)), (0.0, 0.0), (0.5, pytest.approx(2.0))]
    assert not theta.any()
    with pytest.raises(ValueError):
        loss_slice(lambda t: 0.0, theta, np.array([0.0, 2.0]), 1.0, [0.0])
    with pytest.raises(ValueError):
        loss_slice(lambda t: 0.0, theta, np.array([0.0, 1.0]), 1.0, [0.6])
    bad = loss_slice(lambda t: float("inf"), theta, np.array([1.0, 0.0]), 1.0, [0.1])
    assert bad == [(0.1, None)]


def test_crossing_histogram():
    step = [LayerUpdateReport("a", 1, 4, 0, 0, False, size=10), LayerUpdateReport("b", 1, 0, 0, 0, False, size=5)]
    h = crossing_histogram([step, step])
    assert h.layers == ["a", "b"]
    np.testing.assert_array_equal(h.mean_crossings, [4.0, 0.0])
    assert h.top3_share == 1.0
    with pytest.raises(ValueError):
        crossing_histogram([])


def test_graph_objective_hvp_matches_explicit_hessian():
    rng = np.random.default_rng(0)
    g = build_classifier((3, 4, 3), rng)
    add_loss_heads(g, 3)
    feeds = {"x": rng.normal(size=(12, 3)), "target": np.eye(3)[rng.integers(0, 3, 12)],
             "teacher_logits": rng.normal(size=(12, 3))}
    obj = GraphObjective(g, feeds, "kl")
    _, theta, _, grad = flat_objective(g, feeds, "kl", TRAIN)
    H = explicit_hessian(grad, theta, 1e-5)
    v = rng.normal(size=theta.size)
    np.testing.assert_allclose(obj.hvp(v), H @ v, rtol=1e-4, atol=1e-6)
    assert obj.value(theta) == pytest.approx(float(forward(g, feeds, mode=TRAIN, update_stats=False)[g.id("kl")]))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_surrogate_graph_is_smooth_and_on_grid(seed):
    rng = np.random.default_rng(seed)
    g = build_classifier((3, 6, 3), rng, w_bits=3, a_bits=3)
    forward(g, {"x": rng.normal(size=(8, 3))}, mode=TRAIN, outputs=["logits"])
    s = surrogate_graph(g)
    assert not any(n.op == "act_quant" for n in s.nodes)
    assert not s.quantized_layers()
    for name in ("fc1.weight", "logits.weight"):
        assert len(np.unique(s.params[name])) <= 8
    np.testing.assert_array_equal(g.params["fc1.bias"], s.params["fc1.bias"])
