"""Oracle checks for every module, runnable without pytest (``zsqlab selftest``)."""

from __future__ import annotations

import math
import time

import numpy as np

from .config import ExperimentConfig, parse_config_text
from .data import DatasetSpec, make_dataset, nearest_centroid_accuracy
from .diagnostics import hutchinson_trace, hvp, lanczos_spectrum, loss_slice
from .losses import cross_entropy, kl_divergence, smooth_labels
from .models import add_loss_heads, build_classifier
from .optim import SGD, GIConfig, preview_update, rho_schedule, search_kappa
from .quant import (
    ActivationObserver,
    QuantConfig,
    count_threshold_crossings,
    dequantize,
    fake_quant_forward,
    observe_activation,
    quant_params,
    quantize,
)
from .tensor import TRAIN, backward, finite_diff_grad, forward

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _close(a, b, tol):
    return bool(np.all(np.abs(np.asarray(a, float) - np.asarray(b, float)) <= tol))


@check
def tensor_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        g = build_classifier((3, 5, 4), rng)
        add_loss_heads(g, 4)
        x = rng.standard_normal((6, 3))
        feeds = {"x": x, "target": np.eye(4)[rng.integers(0, 4, 6)], "teacher_logits": rng.standard_normal((6, 4))}
        acts = forward(g, feeds, mode=TRAIN, outputs=["student_loss"], update_stats=False)
        grads = backward(g, "student_loss", acts)
        name = "fc1.weight"
        base = g.params[name].copy()

        def f(theta):
            g.params[name] = theta.reshape(base.shape)
            g.version += 1
            return float(forward(g, feeds, mode=TRAIN, outputs=["student_loss"], update_stats=False)[g.id("student_loss")])

        fd = finite_diff_grad(f, base.ravel(), 1e-5)
        g.params[name] = base
        err = np.abs(fd - grads[name].ravel()) / np.maximum(np.abs(fd), 1e-8)
        worst = max(worst, float(np.max(np.where(np.abs(fd) < 1e-8, 0.0, err))))
    return worst <= 1e-5, f"max rel err {worst:.2e}"


@check
def quantizer_examples():
    p = quant_params(-1.0, 1.0, 4)
    ok = p.scale == 7.5 and p.zero == 0.5
    q = quantize(np.array([-1.0, -0.2, 0.0, 0.31, 1.0]), p, 4)
    # -0.2*7.5-0.5 = -2.0; 0*7.5-0.5 = -0.5 -> -0 (half to even); 0.31*7.5-0.5 = 1.825
    ok &= q.tolist() == [-8, -2, 0, 2, 7]
    ok &= _close(dequantize(np.array([-8, 7]), p), [-1.0, 1.0], 1e-15)
    theta = np.random.default_rng(1).uniform(-1, 1, 1000)
    tq, _ = fake_quant_forward(theta, QuantConfig(4))
    ok &= len(np.unique(tq)) <= 16
    return bool(ok), f"S={p.scale}, z={p.zero}, q={q.tolist()}"


@check
def observer_ema():
    obs = observe_activation(ActivationObserver(), np.array([0.0, 1.0]))
    obs = observe_activation(obs, np.array([-1.0, 2.0]))
    ok = _close([obs.running_min, obs.running_max], [-0.1, 1.1], 1e-12)
    return ok, f"range ({obs.running_min}, {obs.running_max})"


@check
def crossing_count():
    n = count_threshold_crossings(np.array([1, 2, 3, 4]), np.array([1, 3, 3, 5]))
    return n == 2, f"count {n}"


@check
def loss_values():
    ce = cross_entropy(np.array([[10.0, 0.0]]), np.array([0]))
    ref = math.log1p(math.exp(-10.0))
    p = np.array([math.exp(2) / (math.exp(2) + 1), 1 / (math.exp(2) + 1)])
    kl_ref = float(p @ (np.log(p) - np.log(p[::-1])))
    kl = kl_divergence(np.array([[0.0, 2.0]]), np.array([[2.0, 0.0]]))
    y = smooth_labels(np.array([3]), 0.1, 10)
    ok = abs(ce - ref) < 1e-12 and abs(kl - kl_ref) < 1e-12 and abs(y[0, 3] - 0.91) < 1e-12
    return ok, f"ce {ce:.3e}, kl {kl:.6f}"


@check
def rho_decay():
    cfg = GIConfig(rho0=0.001)
    vals = [rho_schedule(e, cfg) for e in (0, 100, 250)]
    return _close(vals, [1e-3, 1e-4, 1e-5], 1e-18), f"{vals}"


@check
def nesterov_preview():
    opt = SGD(0.1, momentum=0.9, nesterov=True)
    theta = np.array([1.0, -1.0])
    buf = None
    for g in (np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([-0.25, 0.5])):
        before = opt.snapshot()
        cand = preview_update(opt, theta, g, 1.0, key="w")
        same = all(np.array_equal(before[k]["buf"], opt.state[k]["buf"]) for k in before)
        buf = g.copy() if buf is None else 0.9 * buf + g
        ref = theta - 0.1 * (g + 0.9 * buf)
        if not (same and _close(cand, ref, 1e-15)):
            return False, "preview disagrees with the hand recurrence"
        theta = opt.update("w", theta, g)
    return True, "3 steps match"


@check
def kappa_search_smoke():
    from .quant import QuantizedLayerState

    theta = np.array([-1.0, -0.3, 0.05, 0.4, 1.0])
    p = quant_params(-1.0, 1.0, 4)
    layer = QuantizedLayerState("w", QuantConfig(4), theta, quantize(theta, p, 4), p)
    g = np.array([1e-3, -2e-3, 5e-4, 1e-3, 0.0])
    kappa, rep = search_kappa(layer, g, SGD(0.1, momentum=0.0, nesterov=False), 2.0, GIConfig())
    return rep.crossings > 2 and kappa >= 1, f"kappa={kappa}, crossings={rep.crossings}"


@check
def curvature_on_quadratic():
    A = np.diag([1.0, 2.0, 3.0, 4.0])

    def hv(v):
        return hvp(lambda t: A @ t, np.zeros(4), v)

    tr = hutchinson_trace(hv, 4, 200, seed=0)
    spec = lanczos_spectrum(hv, 4, 4, seed=0)
    curve = loss_slice(lambda t: 0.5 * t @ A @ t, np.zeros(4), np.array([0, 0, 0, 1.0]), 1.0, [0.0, 0.5])
    ok = abs(tr.trace - 10.0) <= 3 * tr.stderr + 1e-9 and _close(np.sort(spec.ritz_values), [1, 2, 3, 4], 1e-6)
    ok &= abs(curve[1][1] - 0.5 * 4 * 0.25) < 1e-9
    return bool(ok), f"trace {tr.trace:.3f}±{tr.stderr:.3f}"


@check
def dataset_oracle():
    spec = DatasetSpec(n_classes=4, samples_per_class=250, separation=8.0, seed=3)
    (tr, va), (tr2, _) = make_dataset(spec), make_dataset(spec)
    acc = nearest_centroid_accuracy(tr, va)
    ok = np.array_equal(tr.X, tr2.X) and len(tr) == 1000 and np.all(np.bincount(tr.y) == 250) and acc >= 0.99
    return bool(ok), f"nearest-centroid {acc:.3f}"


@check
def config_hash():
    a = ExperimentConfig.from_dict(parse_config_text("gi.rho0=0.02\nquant.w_bits=3\n"))
    b = ExperimentConfig.from_dict(parse_config_text("quant.w_bits=3\n# comment\ngi.rho0=0.02\n"))
    return a.hash() == b.hash(), a.hash()[:12]


def run_selftest(stream=None) -> bool:
    ok_all = True
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing oracle is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        line = f"[{'PASS' if ok else 'FAIL'}] {fn.__name__:<24} {detail} ({time.perf_counter() - t0:.2f}s)"
        print(line, file=stream)
    return ok_all
