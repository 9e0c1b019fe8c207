"""Shared builders for the test-suite."""

from __future__ import annotations

import numpy as np

from zsqlab.diagnostics import ParamLayout
from zsqlab.models import add_loss_heads
from zsqlab.tensor import EVAL, TRAIN, Graph, backward, forward

KINK_MARGIN = 1e-3


def random_tiny_graph(rng, max_params=500):
    """A random dense/BN/activation stack with loss heads; returns (graph, feeds, loss, mode)."""
    while True:
        d = int(rng.integers(2, 6))
        k = int(rng.integers(2, 5))
        hidden = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))]
        widths = [d, *hidden, k]
        n_params = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        use_bn = bool(rng.random() < 0.6)
        n_params += 2 * sum(hidden) * use_bn
        if n_params <= max_params:
            break
    g = Graph()
    h = g.input("x", (d,))
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        h = g.dense(h, widths[i], widths[i + 1], "logits" if last else f"fc{i}", rng)
        if last:
            break
        if use_bn:
            h = g.batchnorm(h, widths[i + 1], f"bn{i}")
            st = g.bn[h]
            st.running_mean = rng.normal(0, 0.5, widths[i + 1])
            st.running_var = rng.uniform(0.5, 2.0, widths[i + 1])
        h = g.add(str(rng.choice(["relu", "tanh"])), [h])
        if rng.random() < 0.3:
            h = g.add("add", [h, g.add("scale", [g.add("mul", [h, h])], c=0.1)])
    for name, val in g.params.items():
        g.params[name] = rng.uniform(-1.0, 1.0, val.shape)
    add_loss_heads(g, k, temperature=float(rng.choice([1.0, 2.0])), delta=float(rng.uniform()),
                   alpha=0.5 if use_bn else None)
    losses = ["ce", "kl", "student_loss"] + (["gen_loss"] if use_bn else [])
    loss = str(rng.choice(losses))
    mode = str(rng.choice([TRAIN, EVAL]))
    n = int(rng.integers(4, 9))
    labels = rng.integers(0, k, n)
    feeds = {
        "x": rng.normal(0, 1.5, (n, d)),
        "target": np.eye(k)[labels],
        "teacher_logits": rng.normal(0, 2, (n, k)),
    }
    return g, feeds, loss, mode


def relu_margin(g, feeds, mode):
    acts = forward(g, feeds, mode=mode, update_stats=False)
    m = np.inf
    for nid, node in enumerate(g.nodes):
        if node.op == "relu" and node.inputs[0] in acts.values:
            m = min(m, float(np.min(np.abs(acts[node.inputs[0]]))))
    return m


def flat_objective(g, feeds, loss, mode):
    """(layout, theta0, f, grad) over all parameters of ``g``; ``g`` is copied."""
    g = g.copy()
    layout = ParamLayout.of(g)
    theta0 = layout.flatten(g.params)

    def load(theta):
        g.params.update(layout.unflatten(theta))
        g.version += 1

    def f(theta):
        load(theta)
        return float(forward(g, feeds, mode=mode, outputs=[loss], update_stats=False)[g.id(loss)])

    def grad(theta):
        load(theta)
        acts = forward(g, feeds, mode=mode, outputs=[loss], update_stats=False)
        return layout.flatten(backward(g, loss, acts))

    return layout, theta0, f, grad


def grad_rel_error(analytic, numeric, floor=1e-8):
    """Largest |a - b| / max(|a|, |b|) over entries whose absolute error exceeds ``floor``.

    An entry within the absolute floor passes whatever its relative error.
    """
    a = np.asarray(analytic, float).ravel()
    b = np.asarray(numeric, float).ravel()
    err = np.abs(a - b)
    rel = err / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.where(err <= floor, 0.0, rel))) if a.size else 0.0


def significant_rel_error(analytic, numeric, min_mag=1e-6):
    """Largest relative error among entries of magnitude >= ``min_mag`` (diagnostic only)."""
    a = np.asarray(analytic, float).ravel()
    b = np.asarray(numeric, float).ravel()
    mag = np.maximum(np.abs(a), np.abs(b))
    keep = mag >= min_mag
    return float(np.max(np.abs(a - b)[keep] / mag[keep])) if keep.any() else 0.0


def random_kappa_case(rng):
    """A random layer, gradient and optimizer for the kappa-search comparison."""
    from zsqlab.optim import SGD, GIConfig
    from zsqlab.quant import QuantConfig, fake_quant_forward

    size = int(rng.integers(5, 51))
    n_bits = int(rng.choice([2, 3, 4, 8]))
    theta = rng.normal(0, 1, size)
    grad = rng.normal(0, 1, size) * (rng.random(size) < 0.8)
    if rng.random() < 0.05:
        grad[:] = 0.0
    lr = float(10.0 ** rng.uniform(-6, -2))
    momentum = float(rng.choice([0.0, 0.9]))
    buf = rng.normal(0, 1, size) if momentum and rng.random() < 0.7 else None
    opt = SGD(lr, momentum=momentum, nesterov=True)
    if buf is not None:
        opt.state["w"] = {"buf": buf.copy()}
    _, layer = fake_quant_forward(theta, QuantConfig(n_bits), layer="w")
    rho = float(rng.choice([0.0, 0.01, 0.05, 0.1, 0.3, 0.9]))
    cfg = GIConfig(rho0=rho, constrained=bool(rng.random() < 0.8), search_budget=int(rng.integers(0, 7)))
    in_warmup = bool(rng.random() < 0.5)
    return dict(theta=theta, grad=grad, lr=lr, momentum=momentum, buf=buf, opt=opt, layer=layer,
                n_bits=n_bits, target=rho * size, cfg=cfg, in_warmup=in_warmup)


def replay_for(case):
    from oracles import SgdReplay, replay_kappa_search
    from zsqlab.optim import kappa_cap

    rule = SgdReplay(case["lr"], case["momentum"], None if case["buf"] is None else list(case["buf"]))
    return replay_kappa_search(list(case["theta"]), list(case["grad"]), rule, case["n_bits"], case["target"],
                               kappa_cap(case["cfg"], case["in_warmup"]), case["cfg"].search_budget,
                               case["cfg"].constrained)
