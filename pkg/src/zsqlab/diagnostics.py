"""Loss-surface diagnostics: gradient angles, Hessian trace and spectrum, 1-D slices.

Hessian-vector products are central differences of gradients, so every
curvature tool here needs only a gradient oracle ``grad_fn(theta) -> array``
over a flat parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .tensor import TRAIN, Graph, NonFiniteError, backward, forward


@dataclass(frozen=True)
class ParamLayout:
    """Fixed ordering of a graph's parameters inside one flat vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    size: int

    @classmethod
    def of(cls, graph: Graph, names=None) -> "ParamLayout":
        names = tuple(names if names is not None else graph.params)
        shapes = tuple(graph.params[n].shape for n in names)
        offsets, pos = [], 0
        for shp in shapes:
            offsets.append(pos)
            pos += int(np.prod(shp))
        return cls(names, shapes, tuple(offsets), pos)

    def flatten(self, arrays: dict) -> np.ndarray:
        return np.concatenate([np.ravel(arrays[n]) for n in self.names]) if self.names else np.zeros(0)

    def unflatten(self, flat) -> dict:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"flat vector has {flat.size} entries, layout expects {self.size}")
        out = {}
        for n, shp, off in zip(self.names, self.shapes, self.offsets):
            k = int(np.prod(shp))
            out[n] = flat[off : off + k].reshape(shp).copy()
        return out

    def segment(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(self.offsets[i], self.offsets[i] + int(np.prod(self.shapes[i])))


def grad_cosine(a, b) -> float | None:
    """Cosine of the angle between two gradients; None when either is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"layout mismatch {a.shape} vs {b.shape}")
    sa = np.max(np.abs(a), initial=0.0)
    sb = np.max(np.abs(b), initial=0.0)
    if sa == 0.0 or sb == 0.0:
        return None
    # rescale first so tiny or huge gradients do not under/overflow the norms
    a, b = a / sa, b / sb
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def epoch_mean_grad(grads) -> np.ndarray:
    if len(grads) == 0:
        raise ValueError("an epoch needs at least one gradient")
    total = np.zeros_like(np.asarray(grads[0], dtype=np.float64))
    for g in grads:
        total = total + g
    return total / len(grads)


def inter_epoch_cosine(mean_t, mean_prev) -> float | None:
    if mean_prev is None:
        return None
    return grad_cosine(mean_t, mean_prev)


# ---------------------------------------------------------------------------
# curvature


def default_hvp_eps(theta) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(theta)))) if np.size(theta) else 1e-4


def hvp(grad_fn, theta, v, eps=None) -> np.ndarray:
    """Hessian-vector product by central differences along the unit direction of ``v``."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("hvp needs a nonzero direction")
    eps = default_hvp_eps(theta) if eps is None else eps
    if eps <= 0:
        raise ValueError("eps must be positive")
    u = v / norm
    gp = np.asarray(grad_fn(theta + eps * u), dtype=np.float64)
    gm = np.asarray(grad_fn(theta - eps * u), dtype=np.float64)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NonFiniteError("non-finite gradient in hvp")
    return (gp - gm) / (2.0 * eps) * norm


@dataclass
class TraceEstimate:
    trace: float
    stderr: float
    probes: int
    samples: np.ndarray = field(repr=False, default=None)
    flagged: int = 0


def hutchinson_trace(hvp_fn, dim: int, probes: int, seed=0, probe_ok=None, max_resample: int = 5) -> TraceEstimate:
    """Mean of v'Hv over Rademacher probes, with the standard error of that mean.

    ``probe_ok(v)`` may reject a probe (e.g. one whose finite-difference
    displacement straddles a rounding threshold); rejected probes are redrawn
    up to ``max_resample`` times, after which the last draw is kept and
    counted in ``flagged``.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    vals = np.empty(probes)
    flagged = 0
    for i in range(probes):
        v = rng.choice([-1.0, 1.0], size=dim)
        if probe_ok is not None:
            tries = 0
            while not probe_ok(v) and tries < max_resample:
                v = rng.choice([-1.0, 1.0], size=dim)
                tries += 1
            if tries == max_resample and not probe_ok(v):
                flagged += 1
        hv = hvp_fn(v)
        val = float(v @ hv)
        if not np.isfinite(val):
            raise NonFiniteError("non-finite Hessian-vector product")
        vals[i] = val
    stderr = float(vals.std(ddof=1) / math.sqrt(probes)) if probes > 1 else float("inf")
    return TraceEstimate(float(vals.mean()), stderr, probes, vals, flagged)


@dataclass
class SpectrumEstimate:
    ritz_values: np.ndarray
    top_vector: np.ndarray
    steps: int
    breakdown: bool = False
    trace: float | None = None
    trace_stderr: float | None = None
    trace_probes: int = 0


def lanczos_spectrum(hvp_fn, dim: int, m: int, seed=0, tol: float = 1e-12) -> SpectrumEstimate:
    """m-step Lanczos with full reorthogonalization.

    Returns the Ritz values of the tridiagonal projection in descending order
    and the Ritz vector of the largest one. On breakdown (an invariant
    subspace was found) the spectrum computed so far is returned, flagged.
    """
    if not 1 <= m <= dim:
        raise ValueError(f"need 1 <= m <= dim, got m={m}, dim={dim}")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    Q = np.zeros((m, dim))
    alphas, betas = [], []
    breakdown = False
    for j in range(m):
        Q[j] = q
        w = np.asarray(hvp_fn(q), dtype=np.float64)
        a = float(q @ w)
        alphas.append(a)
        # two passes of Gram-Schmidt against the whole basis
        for _ in range(2):
            w = w - Q[: j + 1].T @ (Q[: j + 1] @ w)
        b = float(np.linalg.norm(w))
        if j == m - 1:
            break
        if b < tol:
            breakdown = True
            break
        betas.append(b)
        q = w / b
    k = len(alphas)
    if k == 1:
        evals, evecs = np.array(alphas), np.ones((1, 1))
    else:
        evals, evecs = eigh_tridiagonal(np.array(alphas), np.array(betas[: k - 1]))
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    top = Q[:k].T @ evecs[:, order[0]]
    top /= np.linalg.norm(top)
    return SpectrumEstimate(evals, top, k, breakdown)


def power_iteration(hvp_fn, dim: int, iters: int = 500, seed=0) -> tuple[float, np.ndarray]:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = hvp_fn(v)
        lam = float(v @ w)
        v = w / np.linalg.norm(w)
    return lam, v


def loss_slice(loss_fn, theta, direction, g_hat: float, ks):
    """Evaluate ``loss_fn(theta + k * g_hat * direction)`` for every k.

    Points where the loss is non-finite are reported as None. ``theta`` is
    never modified.
    """
    theta = np.asarray(theta, dtype=np.float64)
    e = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(e) - 1.0) > 1e-8:
        raise ValueError("slice direction must be unit norm")
    ks = np.asarray(ks, dtype=np.float64)
    if np.any(np.abs(ks) > 0.5):
        raise ValueError("slice coefficients must lie in [-0.5, 0.5]")
    curve = []
    for k in ks:
        try:
            val = float(loss_fn(theta + (k * g_hat) * e)) if k != 0 else float(loss_fn(theta))
        except NonFiniteError:
            val = float("nan")
        curve.append((float(k), val if np.isfinite(val) else None))
    return curve


# ---------------------------------------------------------------------------
# crossings


@dataclass
class CrossingHistogram:
    layers: list[str]
    mean_crossings: np.ndarray
    layer_sizes: np.ndarray
    top3_share: float


def crossing_histogram(reports) -> CrossingHistogram:
    """Mean crossings per layer per step over an epoch of step reports.

    ``reports`` is a list of steps, each a list of :class:`LayerUpdateReport`.
    ``top3_share`` is the fraction of all crossings carried by the three
    busiest layers (0 when nothing crossed).
    """
    if len(reports) == 0:
        raise ValueError("need at least one step")
    layers = []
    sizes = {}
    totals = {}
    for step in reports:
        for r in step:
            if r.layer not in totals:
                layers.append(r.layer)
                totals[r.layer] = 0
                sizes[r.layer] = r.size
            totals[r.layer] += r.crossings
    means = np.array([totals[name] / len(reports) for name in layers], dtype=np.float64)
    total = means.sum()
    share = float(np.sort(means)[::-1][:3].sum() / total) if total > 0 else 0.0
    return CrossingHistogram(layers, means, np.array([sizes[n] for n in layers]), share)


# ---------------------------------------------------------------------------
# model objectives


class GraphObjective:
    """Loss and gradient of one scalar node as functions of the flat parameters.

    The graph is copied; batch-norm uses batch statistics (the training-time
    function) without touching any running statistics.
    """

    def __init__(self, graph: Graph, feeds: dict, loss: str, mode: str = TRAIN):
        self.graph = graph.copy()
        self.feeds = feeds
        self.loss = loss
        self.mode = mode
        self.layout = ParamLayout.of(self.graph)
        self.theta0 = self.layout.flatten(self.graph.params)

    def _load(self, theta):
        for name, arr in self.layout.unflatten(theta).items():
            self.graph.params[name] = arr
        self.graph.version += 1

    def value(self, theta) -> float:
        self._load(theta)
        acts = forward(self.graph, self.feeds, mode=self.mode, outputs=[self.loss], update_stats=False)
        return float(acts[self.graph.id(self.loss)])

    def grad(self, theta) -> np.ndarray:
        self._load(theta)
        acts = forward(self.graph, self.feeds, mode=self.mode, outputs=[self.loss], update_stats=False)
        return self.layout.flatten(backward(self.graph, self.loss, acts))

    def hvp(self, v, eps=None) -> np.ndarray:
        return hvp(self.grad, self.theta0, v, eps)
