"""First-order optimizers and the Gradient Inundation (GI) update hook.

Every optimizer exposes ``update(key, theta, grad, commit)``. With
``commit=False`` the update is computed from the current moment buffers but
nothing is stored, which lets GI preview candidate gradient scales.

GI scales each quantized layer's gradient by a factor ``kappa >= 1`` chosen
so that the number of integer weights that change in that step exceeds a
target ``T = rho * layer_size``: kappa doubles from 1 until the target is
exceeded, then a short bisection between kappa/2 and kappa looks for the
candidate with the fewest crossings above ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import count_threshold_crossings, quantize
from .tensor import Graph, NonFiniteError

OPTIMIZERS = ("sgd", "sgd_nesterov", "adam", "rmsprop")


class Optimizer:
    kind = "base"

    def __init__(self, lr: float):
        self.lr = float(lr)
        self.state: dict[str, dict] = {}

    def update(self, key: str, theta, grad, commit: bool = True) -> np.ndarray:
        raise NotImplementedError

    def step(self, graph: Graph, grads: dict, names=None) -> None:
        """Apply one update to every (or each named) parameter of ``graph``."""
        for name in names if names is not None else list(graph.params):
            new = self.update(name, graph.params[name], grads[name])
            if not np.all(np.isfinite(new)):
                raise NonFiniteError(f"non-finite parameter {name} after step")
            graph.set_param(name, new)

    def snapshot(self) -> dict:
        return {k: {kk: (vv.copy() if isinstance(vv, np.ndarray) else vv) for kk, vv in s.items()}
                for k, s in self.state.items()}


class SGD(Optimizer):
    """SGD with (optionally Nesterov) momentum, following the usual buffer recurrence."""

    def __init__(self, lr, momentum=0.9, nesterov=True):
        super().__init__(lr)
        self.momentum = float(momentum)
        self.nesterov = bool(nesterov)
        self.kind = "sgd_nesterov" if nesterov and momentum else "sgd"

    def update(self, key, theta, grad, commit=True):
        grad = np.asarray(grad, dtype=np.float64)
        d = grad
        if self.momentum:
            prev = self.state.get(key, {}).get("buf")
            buf = grad.copy() if prev is None else self.momentum * prev + grad
            d = grad + self.momentum * buf if self.nesterov else buf
            if commit:
                self.state[key] = {"buf": buf}
        return theta - self.lr * d


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)

    def update(self, key, theta, grad, commit=True):
        grad = np.asarray(grad, dtype=np.float64)
        st = self.state.get(key)
        if st is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
            t = 0
        else:
            m, v, t = st["m"], st["v"], st["t"]
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1**t)
        vhat = v / (1.0 - self.beta2**t)
        if commit:
            self.state[key] = {"m": m, "v": v, "t": t}
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, lr, alpha=0.99, eps=1e-8):
        super().__init__(lr)
        self.alpha = float(alpha)
        self.eps = float(eps)

    def update(self, key, theta, grad, commit=True):
        grad = np.asarray(grad, dtype=np.float64)
        prev = self.state.get(key, {}).get("v")
        v = (1.0 - self.alpha) * grad * grad if prev is None else self.alpha * prev + (1.0 - self.alpha) * grad * grad
        if commit:
            self.state[key] = {"v": v}
        return theta - self.lr * grad / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9, **kw) -> Optimizer:
    if kind == "sgd_nesterov":
        return SGD(lr, momentum=momentum, nesterov=True)
    if kind == "sgd":
        return SGD(lr, momentum=momentum, nesterov=False)
    if kind == "adam":
        return Adam(lr, **kw)
    if kind == "rmsprop":
        return RMSProp(lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")


def optimizer_step(opt: Optimizer, theta, grad, key: str = "theta") -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {grad.shape}")
    new = opt.update(key, theta, grad, commit=True)
    if not np.all(np.isfinite(new)):
        raise NonFiniteError(f"non-finite result updating {key}")
    return new


def preview_update(opt: Optimizer, theta, grad, kappa: float, key: str = "theta") -> np.ndarray:
    """Parameters the optimizer would produce from ``kappa * grad``; no state change."""
    return opt.update(key, np.asarray(theta, dtype=np.float64), kappa * np.asarray(grad, dtype=np.float64), commit=False)


# ---------------------------------------------------------------------------
# Gradient Inundation


@dataclass(frozen=True)
class GIConfig:
    rho0: float = 0.01
    decay_factor: float = 0.1
    decay_interval: int = 100
    warmup_epochs: int = 20
    kappa_cap_warmup: float = 128.0
    search_budget: int = 5
    doubling_cap: int = 40
    constrained: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rho0 <= 1.0:
            raise ValueError("rho0 must lie in [0, 1]")
        if self.decay_interval <= 0 or self.kappa_cap_warmup < 1 or self.doubling_cap < 1:
            raise ValueError("GI caps and decay interval must be positive")
        if self.search_budget < 0 or self.warmup_epochs < 0:
            raise ValueError("search_budget and warmup_epochs must be >= 0")


@dataclass
class LayerUpdateReport:
    layer: str
    kappa: float
    crossings: int
    target: float
    search_steps: int
    capped: bool
    zero_grad: bool = False
    size: int = 0

    @property
    def satisfied(self) -> bool:
        return self.crossings > self.target


def rho_schedule(epoch: int, cfg: GIConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.rho0 * cfg.decay_factor ** (epoch // cfg.decay_interval)


def target_count(rho: float, layer) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    size = layer if isinstance(layer, (int, np.integer)) else layer.size
    return rho * size


def kappa_cap(cfg: GIConfig, in_warmup: bool) -> float:
    return float(cfg.kappa_cap_warmup) if in_warmup else 2.0**cfg.doubling_cap


def _pick(candidates, target, constrained):
    """Best (kappa, crossings): fewest crossings above target, else closest; ties -> smaller kappa."""
    above = [c for c in candidates if c[1] > target]
    pool = above if (constrained and above) else candidates
    return min(pool, key=lambda c: (abs(c[1] - target), c[0]))


def search_kappa(layer, grad, opt: Optimizer, target: float, cfg: GIConfig, in_warmup: bool = False):
    """Pick the gradient scale for one quantized layer.

    ``layer`` is a :class:`QuantizedLayerState` whose ``theta``/``q``/``params``
    describe the current weights; crossings are counted against ``layer.q``
    under the current quantization parameters.
    """
    if target < 0:
        raise ValueError("target must be >= 0")
    grad = np.asarray(grad, dtype=np.float64)
    n_bits = layer.cfg.n_bits

    def crossings(kappa):
        cand = preview_update(opt, layer.theta, grad, kappa, key=layer.layer)
        return count_threshold_crossings(layer.q, quantize(cand, layer.params, n_bits))

    def report(kappa, count, steps, capped, zero=False):
        return kappa, LayerUpdateReport(layer.layer, kappa, count, target, steps, capped, zero, layer.size)

    c1 = crossings(1.0)
    if not np.any(grad):
        return report(1.0, c1, 0, False, zero=True)
    if target == 0 or c1 > target:
        return report(1.0, c1, 0, False)

    cap = kappa_cap(cfg, in_warmup)
    seen = [(1.0, c1)]
    kappa, count = 1.0, c1
    while count <= target and kappa * 2.0 <= cap:
        kappa *= 2.0
        count = crossings(kappa)
        seen.append((kappa, count))
    if count <= target:
        best = _pick(seen, target, cfg.constrained)
        return report(best[0], best[1], 0, True)

    lo, hi = kappa / 2.0, kappa
    steps = 0
    for _ in range(cfg.search_budget):
        mid = 0.5 * (lo + hi)
        c = crossings(mid)
        seen.append((mid, c))
        steps += 1
        if c > target:
            hi = mid
        else:
            lo = mid
    best = _pick(seen, target, cfg.constrained)
    return report(best[0], best[1], steps, False)


def gi_step(graph: Graph, grads: dict, opt: Optimizer, rho: float, cfg: GIConfig, in_warmup: bool = False):
    """One optimizer step where each quantized weight gets a GI-scaled gradient.

    Requires that ``graph`` was just run forward so that its weight
    quantization states reflect the current parameters. Non-quantized
    parameters take a plain step. Returns one report per quantized layer.
    """
    layers = graph.quantized_layers()
    scales = {}
    reports = []
    for nid in layers:
        state = graph.wquant.get(nid)
        wname = graph.nodes[nid].params[0]
        if state is None or state.theta is None or not np.array_equal(state.theta, graph.params[wname]):
            raise RuntimeError(f"layer {wname}: quantization state is stale; run forward first")
        kappa, rep = search_kappa(state, grads[wname], opt, target_count(rho, state), cfg, in_warmup)
        scales[wname] = kappa
        reports.append(rep)
    committed = {}
    for name in list(graph.params):
        g = grads[name] * scales[name] if name in scales else grads[name]
        new = opt.update(name, graph.params[name], g)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"non-finite parameter after GI step in layer {name}")
        graph.set_param(name, new)
        committed[name] = new
    # recount on the committed weights; equals the chosen preview by construction
    for nid, rep in zip(layers, reports):
        state = graph.wquant[nid]
        rep.crossings = count_threshold_crossings(state.q, quantize(committed[rep.layer], state.params, state.cfg.n_bits))
    return reports


def plain_step(graph: Graph, grads: dict, opt: Optimizer):
    """Ordinary optimizer step that still reports per-layer threshold crossings."""
    reports = []
    for nid in graph.quantized_layers():
        state = graph.wquant.get(nid)
        wname = graph.nodes[nid].params[0]
        new = opt.update(wname, graph.params[wname], grads[wname], commit=False)
        count = count_threshold_crossings(state.q, quantize(new, state.params, state.cfg.n_bits))
        reports.append(LayerUpdateReport(wname, 1.0, count, 0.0, 0, False, not np.any(grads[wname]), state.size))
    opt.step(graph, grads)
    return reports
