import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import KINK_MARGIN, flat_objective, grad_rel_error, random_tiny_graph, relu_margin
from oracles import log_sum_exp, matmul
from zsqlab.models import add_loss_heads, build_classifier
from zsqlab.tensor import (
    EVAL,
    TRAIN,
    Graph,
    NonFiniteError,
    ShapeError,
    StaleActivationsError,
    backward,
    finite_diff_grad,
    forward,
    load_checkpoint,
    save_checkpoint,
)


def _tiny(rng, a_bits=None, w_bits=None):
    g = build_classifier((3, 5, 4), rng, w_bits=w_bits, a_bits=a_bits)
    add_loss_heads(g, 4)
    return g


def test_dense_matches_hand_matmul():
    rng = np.random.default_rng(1)
    g = Graph()
    x = g.input("x", (3,))
    g.dense(x, 3, 2, "logits", rng)
    X = rng.normal(size=(4, 3))
    out = forward(g, X)[g.id("logits")]
    W, b = g.params["logits.weight"], g.params["logits.bias"]
    ref = np.array(matmul(X.tolist(), W.tolist())) + b
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-13)


def test_log_softmax_is_stable_for_huge_logits():
    g = Graph()
    x = g.input("x", (3,))
    g.add("log_softmax", [x], name="out")
    z = np.array([[1000.0, 0.0, -1000.0]])
    out = forward(g, z)[g.id("out")]
    np.testing.assert_allclose(out[0], [v - log_sum_exp(z[0]) for v in z[0]], atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    while True:
        g, feeds, loss, mode = random_tiny_graph(rng)
        if relu_margin(g, feeds, mode) > KINK_MARGIN:
            break
    _, theta, f, grad = flat_objective(g, feeds, loss, mode)
    assert grad_rel_error(grad(theta), finite_diff_grad(f, theta, 1e-5)) <= 1e-5


def test_input_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    g = _tiny(rng)
    x = rng.normal(size=(5, 3))
    feeds = {"x": x, "target": np.eye(4)[[0, 1, 2, 3, 0]], "teacher_logits": rng.normal(size=(5, 4))}
    acts = forward(g, feeds, mode=TRAIN, update_stats=False)
    _, ig = backward(g, "student_loss", acts, wrt_inputs=True)

    def f(xv):
        return float(forward(g, {**feeds, "x": xv}, mode=TRAIN, update_stats=False)[g.id("student_loss")])

    assert grad_rel_error(ig["x"], finite_diff_grad(f, x, 1e-6)) <= 1e-5


def test_ste_passes_gradient_inside_range_only():
    g = Graph()
    x = g.input("x", (4,))
    h = g.act_quant(x, 2, "aq")
    g.add("sum", [g.add("mean0", [h])], name="out")
    forward(g, np.array([[-1.0, 0.0, 0.5, 1.0]]), mode=TRAIN)
    obs = g.observers[h]
    obs.running_min, obs.running_max = -0.5, 0.5
    acts = forward(g, np.array([[-1.0, 0.0, 0.5, 1.0]]), mode=EVAL)
    _, ig = backward(g, "out", acts, wrt_inputs=True)
    np.testing.assert_array_equal(ig["x"], [[0.0, 1.0, 1.0, 0.0]])


def test_quantized_weights_have_at_most_2n_levels():
    rng = np.random.default_rng(0)
    g = _tiny(rng, w_bits=3, a_bits=3)
    acts = forward(g, {"x": rng.normal(size=(8, 3))}, mode=TRAIN, outputs=["logits"])
    assert acts is not None
    for state in g.wquant.values():
        assert len(np.unique(state.q)) <= 8


def test_errors():
    rng = np.random.default_rng(0)
    g = _tiny(rng)
    with pytest.raises(ShapeError):
        forward(g, {"x": np.zeros((2, 4))}, outputs=["logits"])
    with pytest.raises(KeyError):
        forward(g, {"y": np.zeros((2, 3))}, outputs=["logits"])
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        forward(g, {"x": np.full((2, 3), np.inf)}, outputs=["logits"])
    acts = forward(g, {"x": np.zeros((2, 3))}, outputs=["logits"])
    with pytest.raises(ShapeError):
        backward(g, "logits", acts)
    g.set_param("fc1.bias", np.ones(5))
    with pytest.raises(StaleActivationsError):
        backward(g, "logits", acts, upstream=np.ones((2, 4)))
    with pytest.raises(ShapeError):
        g.set_param("fc1.bias", np.ones(6))
    with pytest.raises(ValueError):
        g.add_param("fc1.bias", np.ones(5))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, np.zeros(2), eps=0.0)


def test_train_mode_updates_running_stats_only_when_asked():
    rng = np.random.default_rng(0)
    g = _tiny(rng)
    bn = next(iter(g.bn.values()))
    before = bn.running_mean.copy()
    forward(g, {"x": rng.normal(size=(6, 3))}, mode=TRAIN, outputs=["logits"], update_stats=False)
    np.testing.assert_array_equal(bn.running_mean, before)
    forward(g, {"x": rng.normal(size=(6, 3))}, mode=TRAIN, outputs=["logits"])
    assert not np.array_equal(bn.running_mean, before)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = _tiny(rng)
    forward(g, {"x": rng.normal(size=(6, 3))}, mode=TRAIN, outputs=["logits"])
    p = tmp_path / "m.zsq"
    save_checkpoint(p, g.state_dict())
    assert p.read_bytes()[:4] == b"ZSQ1"
    h = _tiny(np.random.default_rng(9))
    h.load_state_dict(load_checkpoint(p))
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(forward(g, x, outputs=["logits"])[g.id("logits")],
                                  forward(h, x, outputs=["logits"])[h.id("logits")])


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.zsq"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_load_state_dict_strict():
    rng = np.random.default_rng(0)
    g = _tiny(rng)
    state = g.state_dict()
    del state["fc1.bias"]
    with pytest.raises(KeyError):
        _tiny(rng).load_state_dict(state)
    state = g.state_dict()
    state["surprise"] = np.zeros(1)
    with pytest.raises(KeyError):
        _tiny(rng).load_state_dict(state)
    _tiny(rng).load_state_dict(state, strict=False)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sum_of_losses_gradient_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    g = _tiny(rng)
    feeds = {"x": rng.normal(size=(5, 3)), "target": np.eye(4)[rng.integers(0, 4, 5)],
             "teacher_logits": rng.normal(size=(5, 4))}
    acts = forward(g, feeds, mode=TRAIN, update_stats=False)
    gc, gk, gs = (backward(g, n, acts) for n in ("ce", "kl", "student_loss"))
    for k in gs:
        np.testing.assert_allclose(gs[k], 0.5 * gc[k] + 0.5 * gk[k], atol=1e-12)
