"""A small reverse-mode differentiation engine for dense networks.

Tensors are plain ``float64`` numpy arrays. A :class:`Graph` is an ordered
list of nodes; since nodes can only reference earlier nodes, insertion order
is a topological order. :func:`forward` evaluates the graph and returns an
:class:`Activations` record which :func:`backward` consumes.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import (
    ActivationObserver,
    QuantConfig,
    fake_quant_forward,
    observe_activation,
    ste_mask,
)

TRAIN = "train"
EVAL = "eval"

CHECKPOINT_MAGIC = b"ZSQ1"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class StaleActivationsError(RuntimeError):
    pass


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(features), np.ones(features), momentum, eps)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Graph:
    """Node list plus parameter table and per-node mutable state."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[int, BatchNormState] = {}
        self.observers: dict[int, ActivationObserver] = {}
        # last weight quantization of each quantized dense node
        self.wquant: dict[int, object] = {}
        self.version = 0
        self._names: dict[str, int] = {}
        self._ancestors: dict[tuple, list[int]] = {}

    # construction ---------------------------------------------------------

    def add(self, op, inputs=(), params=(), name=None, **attrs) -> int:
        if op not in _FORWARD:
            raise ValueError(f"unsupported op {op!r}")
        ids = tuple(self.id(i) for i in inputs)
        nid = len(self.nodes)
        for i in ids:
            if not 0 <= i < nid:
                raise ValueError(f"input {i} does not precede node {nid}")
        for p in params:
            if p not in self.params:
                raise KeyError(f"unknown parameter {p!r}")
        if name is not None:
            if name in self._names:
                raise ValueError(f"duplicate node name {name!r}")
            self._names[name] = nid
        self.nodes.append(Node(op, ids, tuple(params), dict(attrs), name))
        self._touch()
        return nid

    def add_param(self, name: str, value) -> str:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = np.array(value, dtype=np.float64)
        self._touch()
        return name

    def input(self, name: str, shape) -> int:
        return self.add("input", name=name, shape=tuple(int(s) for s in shape))

    def dense(self, x, in_dim, out_dim, name, rng, w_bits=None, bias=True) -> int:
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = self.add_param(f"{name}.weight", rng.uniform(-bound, bound, (in_dim, out_dim)))
        params = (w,)
        if bias:
            params += (self.add_param(f"{name}.bias", np.zeros(out_dim)),)
        return self.add("dense", [x], params, name=name, w_bits=w_bits)

    def batchnorm(self, x, features, name, momentum=0.1, eps=1e-5) -> int:
        g = self.add_param(f"{name}.gamma", np.ones(features))
        b = self.add_param(f"{name}.beta", np.zeros(features))
        nid = self.add("batchnorm", [x], (g, b), name=name)
        self.bn[nid] = BatchNormState.fresh(features, momentum, eps)
        return nid

    def act_quant(self, x, n_bits, name, momentum=0.1) -> int:
        nid = self.add("act_quant", [x], name=name, n_bits=int(n_bits))
        self.observers[nid] = ActivationObserver(momentum=momentum)
        return nid

    # lookup ---------------------------------------------------------------

    def id(self, ref) -> int:
        if isinstance(ref, (int, np.integer)):
            return int(ref)
        try:
            return self._names[ref]
        except KeyError:
            raise KeyError(f"no node named {ref!r}") from None

    def has(self, name: str) -> bool:
        return name in self._names

    def name_of(self, nid: int) -> str:
        return self.nodes[nid].name or f"n{nid}"

    @property
    def input_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "input"]

    def ancestors(self, outputs) -> list[int]:
        key = tuple(sorted(outputs))
        if key not in self._ancestors:
            seen = set()
            stack = list(key)
            while stack:
                i = stack.pop()
                if i in seen:
                    continue
                seen.add(i)
                stack.extend(self.nodes[i].inputs)
            self._ancestors[key] = sorted(seen)
        return self._ancestors[key]

    def quantized_layers(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "dense" and n.attrs.get("w_bits")]

    # mutation -------------------------------------------------------------

    def _touch(self):
        self.version += 1
        self._ancestors = {}

    def set_param(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: {value.shape} vs {self.params[name].shape}")
        self.params[name] = value
        self.version += 1

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.params.items()}
        for nid, bn in self.bn.items():
            state[f"{self.name_of(nid)}.running_mean"] = bn.running_mean.copy()
            state[f"{self.name_of(nid)}.running_var"] = bn.running_var.copy()
        for nid, obs in self.observers.items():
            state[f"{self.name_of(nid)}.observer"] = np.array(
                [obs.running_min, obs.running_max, obs.observed_batches], dtype=np.float64
            )
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        used = set()
        for name in self.params:
            if name in state:
                self.set_param(name, state[name])
                used.add(name)
            elif strict:
                raise KeyError(f"missing parameter {name!r}")
        for nid, bn in self.bn.items():
            base = self.name_of(nid)
            if f"{base}.running_mean" in state:
                bn.running_mean = np.array(state[f"{base}.running_mean"], dtype=np.float64)
                bn.running_var = np.array(state[f"{base}.running_var"], dtype=np.float64)
                used.update({f"{base}.running_mean", f"{base}.running_var"})
        for nid, obs in self.observers.items():
            key = f"{self.name_of(nid)}.observer"
            if key in state:
                lo, hi, count = state[key]
                obs.running_min, obs.running_max = float(lo), float(hi)
                obs.observed_batches = int(count)
                used.add(key)
        if strict:
            extra = set(state) - used
            # buffers of layers absent from this graph are tolerated
            extra = {k for k in extra if not k.endswith((".observer", ".running_mean", ".running_var"))}
            if extra:
                raise KeyError(f"unexpected entries {sorted(extra)}")


@dataclass
class Activations:
    values: dict[int, np.ndarray]
    cache: dict[int, tuple]
    version: int
    mode: str

    def __getitem__(self, nid: int) -> np.ndarray:
        return self.values[nid]


# ---------------------------------------------------------------------------
# op implementations: forward returns (out, cache); backward returns
# (input grads, {param name: grad})


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _f_input(g, nid, node, xs, mode, upd):
    raise AssertionError("inputs are fed, not computed")


def _f_identity(g, nid, node, xs, mode, upd):
    return xs[0], None


def _b_identity(g, nid, node, xs, out, cache, gy):
    return [gy], {}


def _f_dense(g, nid, node, xs, mode, upd):
    (x,) = xs
    w = g.params[node.params[0]]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense {g.name_of(nid)}: input {x.shape} vs weight {w.shape}")
    bits = node.attrs.get("w_bits")
    if bits:
        wq, state = fake_quant_forward(w, QuantConfig(bits), layer=node.params[0])
        g.wquant[nid] = state
        mask = ste_mask(w, state.params)
    else:
        wq, mask = w, None
    out = x @ wq
    if len(node.params) > 1:
        out = out + g.params[node.params[1]]
    return out, (wq, mask)


def _b_dense(g, nid, node, xs, out, cache, gy):
    (x,) = xs
    wq, mask = cache
    gw = x.T @ gy
    if mask is not None:
        gw = np.where(mask, gw, 0.0)
    pg = {node.params[0]: gw}
    if len(node.params) > 1:
        pg[node.params[1]] = gy.sum(axis=0)
    return [gy @ wq.T], pg


def _f_relu(g, nid, node, xs, mode, upd):
    return np.maximum(xs[0], 0.0), None


def _b_relu(g, nid, node, xs, out, cache, gy):
    return [np.where(xs[0] > 0, gy, 0.0)], {}


def _f_tanh(g, nid, node, xs, mode, upd):
    return np.tanh(xs[0]), None


def _b_tanh(g, nid, node, xs, out, cache, gy):
    return [gy * (1.0 - out * out)], {}


def _f_clip(g, nid, node, xs, mode, upd):
    lo, hi = node.attrs["lo"], node.attrs["hi"]
    return np.clip(xs[0], lo, hi), None


def _b_clip(g, nid, node, xs, out, cache, gy):
    x = xs[0]
    inside = (x >= node.attrs["lo"]) & (x <= node.attrs["hi"])
    return [np.where(inside, gy, 0.0)], {}


def _f_batchnorm(g, nid, node, xs, mode, upd):
    (x,) = xs
    st = g.bn[nid]
    gamma = g.params[node.params[0]]
    beta = g.params[node.params[1]]
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm {g.name_of(nid)}: input {x.shape}")
    if mode == TRAIN:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if upd:
            m = st.momentum
            st.running_mean = (1.0 - m) * st.running_mean + m * mu
            st.running_var = (1.0 - m) * st.running_var + m * var
    else:
        mu, var = st.running_mean, st.running_var
    inv = 1.0 / np.sqrt(var + st.eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, mode)


def _b_batchnorm(g, nid, node, xs, out, cache, gy):
    xhat, inv, mode = cache
    gamma = g.params[node.params[0]]
    pg = {node.params[0]: (gy * xhat).sum(axis=0), node.params[1]: gy.sum(axis=0)}
    gxhat = gy * gamma
    if mode == TRAIN:
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
    else:
        gx = gxhat * inv
    return [gx], pg


def _f_act_quant(g, nid, node, xs, mode, upd):
    (x,) = xs
    obs = g.observers[nid]
    if (mode == TRAIN and upd) or not obs.ready:
        observe_activation(obs, x)
    xq, state = fake_quant_forward(x, QuantConfig(node.attrs["n_bits"]), observer=obs)
    return xq, ste_mask(x, state.params)


def _b_act_quant(g, nid, node, xs, out, cache, gy):
    return [np.where(cache, gy, 0.0)], {}


def _f_softmax(g, nid, node, xs, mode, upd):
    return _softmax(xs[0]), None


def _b_softmax(g, nid, node, xs, out, cache, gy):
    return [out * (gy - (gy * out).sum(axis=-1, keepdims=True))], {}


def _f_log_softmax(g, nid, node, xs, mode, upd):
    return _log_softmax(xs[0]), None


def _b_log_softmax(g, nid, node, xs, out, cache, gy):
    return [gy - np.exp(out) * gy.sum(axis=-1, keepdims=True)], {}


def _f_add(g, nid, node, xs, mode, upd):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"add {g.name_of(nid)}: {a.shape} vs {b.shape}")
    return a + b, None


def _b_add(g, nid, node, xs, out, cache, gy):
    return [gy, gy], {}


def _f_mul(g, nid, node, xs, mode, upd):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"mul {g.name_of(nid)}: {a.shape} vs {b.shape}")
    return a * b, None


def _b_mul(g, nid, node, xs, out, cache, gy):
    a, b = xs
    return [gy * b, gy * a], {}


def _f_scale(g, nid, node, xs, mode, upd):
    return xs[0] * node.attrs["c"], None


def _b_scale(g, nid, node, xs, out, cache, gy):
    return [gy * node.attrs["c"]], {}


def _f_sum(g, nid, node, xs, mode, upd):
    return np.asarray(xs[0].sum()), None


def _b_sum(g, nid, node, xs, out, cache, gy):
    return [np.full_like(xs[0], float(gy))], {}


def _f_mean0(g, nid, node, xs, mode, upd):
    if xs[0].shape[0] == 0:
        raise ShapeError("mean over an empty batch")
    return xs[0].mean(axis=0), None


def _b_mean0(g, nid, node, xs, out, cache, gy):
    n = xs[0].shape[0]
    return [np.broadcast_to(gy / n, xs[0].shape).copy()], {}


def _f_bn_stats_match(g, nid, node, xs, mode, upd):
    (x,) = xs
    ref = g.bn[node.attrs["bn"]]
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    f = x.shape[1]
    dm = mu - ref.running_mean
    dv = var - ref.running_var
    return np.asarray((dm @ dm + dv @ dv) / f), (mu, dm, dv)


def _b_bn_stats_match(g, nid, node, xs, out, cache, gy):
    (x,) = xs
    mu, dm, dv = cache
    n, f = x.shape
    gy = float(gy)
    gx = (2.0 * gy / f) * (dm / n + dv * 2.0 * (x - mu) / n)
    return [gx], {}


_FORWARD = {
    "input": _f_input,
    "identity": _f_identity,
    "dense": _f_dense,
    "relu": _f_relu,
    "tanh": _f_tanh,
    "clip": _f_clip,
    "batchnorm": _f_batchnorm,
    "act_quant": _f_act_quant,
    "softmax": _f_softmax,
    "log_softmax": _f_log_softmax,
    "add": _f_add,
    "mul": _f_mul,
    "scale": _f_scale,
    "sum": _f_sum,
    "mean0": _f_mean0,
    "bn_stats_match": _f_bn_stats_match,
}

_BACKWARD = {
    "identity": _b_identity,
    "dense": _b_dense,
    "relu": _b_relu,
    "tanh": _b_tanh,
    "clip": _b_clip,
    "batchnorm": _b_batchnorm,
    "act_quant": _b_act_quant,
    "softmax": _b_softmax,
    "log_softmax": _b_log_softmax,
    "add": _b_add,
    "mul": _b_mul,
    "scale": _b_scale,
    "sum": _b_sum,
    "mean0": _b_mean0,
    "bn_stats_match": _b_bn_stats_match,
}


def forward(graph: Graph, inputs, mode: str = EVAL, outputs=None, update_stats=None) -> Activations:
    """Evaluate ``graph``; only ancestors of ``outputs`` are computed.

    ``inputs`` is an array (fed to the first input node) or a mapping from
    input names to arrays. In train mode batch-norm normalizes with batch
    statistics and, unless ``update_stats`` is False, refreshes running
    statistics and activation observers.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    upd = (mode == TRAIN) if update_stats is None else bool(update_stats)
    if not isinstance(inputs, dict):
        inputs = {graph.nodes[graph.input_ids[0]].name: inputs}
    if outputs is None:
        needed = range(len(graph.nodes))
    else:
        if isinstance(outputs, (str, int, np.integer)):
            outputs = [outputs]
        needed = graph.ancestors([graph.id(o) for o in outputs])
    values: dict[int, np.ndarray] = {}
    cache: dict[int, tuple] = {}
    for nid in needed:
        node = graph.nodes[nid]
        if node.op == "input":
            if node.name not in inputs:
                raise KeyError(f"missing input {node.name!r}")
            x = np.asarray(inputs[node.name], dtype=np.float64)
            if x.ndim < 1 or tuple(x.shape[1:]) != node.attrs["shape"]:
                raise ShapeError(
                    f"input {node.name!r}: expected (N, {node.attrs['shape']}), got {x.shape}"
                )
            values[nid] = x
            continue
        xs = [values[i] for i in node.inputs]
        out, c = _FORWARD[node.op](graph, nid, node, xs, mode, upd)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite output at node {graph.name_of(nid)} ({node.op})")
        values[nid] = out
        cache[nid] = c
    return Activations(values, cache, graph.version, mode)


def backward(graph: Graph, loss, acts: Activations, upstream=None, wrt_inputs: bool = False):
    """Gradients of node ``loss`` with respect to every parameter.

    For a non-scalar node an ``upstream`` gradient must be supplied. With
    ``wrt_inputs`` the gradients w.r.t. input nodes are returned as well.
    """
    if acts.version != graph.version:
        raise StaleActivationsError("graph changed since forward")
    lid = graph.id(loss)
    if lid not in acts.values:
        raise KeyError(f"node {graph.name_of(lid)} was not computed by forward")
    out = acts.values[lid]
    if upstream is None:
        if out.size != 1:
            raise ShapeError(f"loss node {graph.name_of(lid)} is not scalar: {out.shape}")
        seed = np.ones_like(out)
    else:
        seed = np.asarray(upstream, dtype=np.float64)
        if seed.shape != out.shape:
            raise ShapeError(f"upstream {seed.shape} vs output {out.shape}")
    node_grads = {lid: seed}
    pgrads = {name: np.zeros_like(v) for name, v in graph.params.items()}
    igrads = {}
    for nid in range(lid, -1, -1):
        gy = node_grads.pop(nid, None)
        if gy is None:
            continue
        node = graph.nodes[nid]
        if node.op == "input":
            igrads[node.name] = gy
            continue
        xs = [acts.values[i] for i in node.inputs]
        gxs, pg = _BACKWARD[node.op](graph, nid, node, xs, acts.values[nid], acts.cache[nid], gy)
        for name, gp in pg.items():
            pgrads[name] = pgrads[name] + gp
        for i, gx in zip(node.inputs, gxs):
            if i in node_grads:
                node_grads[i] = node_grads[i] + gx
            else:
                node_grads[i] = gx
    if wrt_inputs:
        for i in graph.input_ids:
            name = graph.nodes[i].name
            if name not in igrads and i in acts.values:
                igrads[name] = np.zeros_like(acts.values[i])
        return pgrads, igrads
    return pgrads


def finite_diff_grad(loss_fn, theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn(theta))
        flat[i] = orig - eps
        down = float(loss_fn(theta))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite loss at coordinate {i}")
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as ``ZSQ1`` + u32 version + one record per array.

    Record: u32 name length, utf-8 name, u32 rank, u32 dims, float64 LE data.
    """
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a ZSQ1 checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out
