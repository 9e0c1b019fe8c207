"""Graph builders for the teacher/student classifiers and the generator."""

from __future__ import annotations

import numpy as np

from .quant import QuantConfig, fake_quant_forward
from .tensor import Graph


def build_classifier(widths, rng, w_bits=None, a_bits=None, bn=True, bn_momentum=0.1, quantize_input=False) -> Graph:
    """Dense+BN+ReLU stack ``widths[0] -> ... -> widths[-1]``.

    With ``w_bits`` every dense weight is fake-quantized; with ``a_bits`` the
    post-ReLU activations feeding the next dense layer are fake-quantized.
    ``quantize_input`` also fake-quantizes the network input. The final node
    is named ``logits``.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    g = Graph()
    h = g.input("x", (widths[0],))
    if a_bits and quantize_input:
        h = g.act_quant(h, a_bits, "aq0")
    depth = len(widths) - 1
    for i in range(depth):
        last = i == depth - 1
        name = "logits" if last else f"fc{i + 1}"
        h = g.dense(h, widths[i], widths[i + 1], name, rng, w_bits=w_bits)
        if last:
            break
        if bn:
            h = g.batchnorm(h, widths[i + 1], f"bn{i + 1}", momentum=bn_momentum)
        h = g.add("relu", [h], name=f"relu{i + 1}")
        if a_bits:
            h = g.act_quant(h, a_bits, f"aq{i + 1}")
    return g


def add_loss_heads(g: Graph, n_classes: int, temperature: float = 1.0, delta: float = 0.5, alpha=None):
    """Attach cross-entropy, KL, student-loss and (optionally) generator-loss nodes.

    Inputs added: ``target`` (label distribution, N x K) and
    ``teacher_logits`` (N x K). Nodes added: ``ce``, ``kl``, ``student_loss``
    and, when ``alpha`` is given, ``bns`` and ``gen_loss``.
    """
    logits = g.id("logits")
    target = g.input("target", (n_classes,))
    tlog = g.input("teacher_logits", (n_classes,))

    lsm = g.add("log_softmax", [logits])
    ce = g.add("mul", [target, lsm])
    ce = g.add("sum", [g.add("mean0", [ce])])
    ce = g.add("scale", [ce], name="ce", c=-1.0)

    inv_t = 1.0 / float(temperature)
    zt = g.add("scale", [tlog], c=inv_t)
    zs = g.add("scale", [logits], c=inv_t)
    pt = g.add("softmax", [zt])
    diff = g.add("add", [g.add("log_softmax", [zt]), g.add("scale", [g.add("log_softmax", [zs])], c=-1.0)])
    kl = g.add("sum", [g.add("mean0", [g.add("mul", [pt, diff])])])
    kl = g.add("scale", [kl], name="kl", c=float(temperature) ** 2)

    g.add(
        "add",
        [g.add("scale", [ce], c=1.0 - delta), g.add("scale", [kl], c=float(delta))],
        name="student_loss",
    )

    if alpha is not None:
        terms = [
            g.add("bn_stats_match", [g.nodes[nid].inputs[0]], bn=nid)
            for nid in sorted(g.bn)
        ]
        if not terms:
            raise ValueError("generator loss needs at least one batch-norm layer")
        bns = terms[0]
        for t in terms[1:]:
            bns = g.add("add", [bns, t])
        bns = g.add("identity", [bns], name="bns")
        g.add(
            "add",
            [g.add("scale", [ce], c=1.0 - alpha), g.add("scale", [bns], c=float(alpha))],
            name="gen_loss",
        )
    return g


def build_generator(noise_dim, n_classes, out_dim, rng, hidden=64, output_scale=3.0) -> Graph:
    """Conditional generator: [noise, one-hot label] -> two dense+BN+ReLU blocks -> tanh."""
    g = Graph()
    z = g.input("z", (noise_dim + n_classes,))
    h = g.dense(z, noise_dim + n_classes, hidden, "g1", rng)
    h = g.add("relu", [g.batchnorm(h, hidden, "gbn1")])
    h = g.dense(h, hidden, hidden, "g2", rng)
    h = g.add("relu", [g.batchnorm(h, hidden, "gbn2")])
    h = g.dense(h, hidden, out_dim, "g3", rng)
    h = g.add("tanh", [h])
    g.add("scale", [h], name="out", c=float(output_scale))
    return g


def surrogate_graph(student: Graph) -> Graph:
    """Smooth stand-in for a fake-quantized network, used for curvature probes.

    Weights are frozen at their dequantized values and each activation
    quantizer becomes a clip to its observed range, which is exactly the
    function whose gradient the straight-through estimator reports.
    """
    g = student.copy()
    for nid, node in enumerate(g.nodes):
        if node.op == "dense" and node.attrs.get("w_bits"):
            wname = node.params[0]
            wq, _ = fake_quant_forward(g.params[wname], QuantConfig(node.attrs["w_bits"]))
            g.params[wname] = wq
            node.attrs["w_bits"] = None
        elif node.op == "act_quant":
            obs = g.observers.pop(nid)
            node.op = "clip"
            node.attrs = {"lo": obs.running_min, "hi": obs.running_max}
    g.wquant = {}
    g.version += 1
    return g


def onehot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
