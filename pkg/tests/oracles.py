"""Reference implementations written independently of the package.

Scalar Python where practical, so an error in vectorized code cannot hide
in the oracle too.
"""

from __future__ import annotations

import math

import numpy as np


def quantize_scalar(theta: float, lo: float, hi: float, n: int) -> int:
    s = (2**n - 1) / (hi - lo)
    z = s * lo + 2 ** (n - 1)
    q = round(theta * s - z)  # Python rounds half to even
    return max(-(2 ** (n - 1)), min(2 ** (n - 1) - 1, q))


def dequantize_scalar(q: int, lo: float, hi: float, n: int) -> float:
    s = (2**n - 1) / (hi - lo)
    z = s * lo + 2 ** (n - 1)
    return (q + z) / s


def matmul(a, b):
    rows, inner, cols = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][k] * b[k][j] for k in range(inner)) for j in range(cols)] for i in range(rows)]


def log_sum_exp(row) -> float:
    m = max(row)
    return m + math.log(math.fsum(math.exp(v - m) for v in row))


def cross_entropy_row(logits, label) -> float:
    return log_sum_exp(logits) - logits[label]


def kl_rows(student, teacher) -> float:
    """KL(teacher || student) for one row of logits."""
    ls, lt = log_sum_exp(student), log_sum_exp(teacher)
    return math.fsum(math.exp(t - lt) * ((t - lt) - (s - ls)) for s, t in zip(student, teacher))


def two_class_kl(p: float, q: float) -> float:
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def ema_replay(batches, momentum=0.1):
    lo = hi = None
    for b in batches:
        bmin, bmax = min(b), max(b)
        if lo is None:
            lo, hi = bmin, bmax
        else:
            lo = (1 - momentum) * lo + momentum * bmin
            hi = (1 - momentum) * hi + momentum * bmax
    return lo, hi


def explicit_hessian(grad_fn, theta, eps=1e-5):
    """Hessian by central differences of the gradient, one column at a time, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        H[:, j] = (np.asarray(grad_fn(theta + e)) - np.asarray(grad_fn(theta - e))) / (2 * eps)
    return 0.5 * (H + H.T)


class SgdReplay:
    """SGD step rule for the replay, optionally with a Nesterov buffer."""

    def __init__(self, lr, momentum=0.0, buf=None):
        self.lr, self.momentum, self.buf = lr, momentum, buf

    def candidate(self, theta, grad, kappa):
        out = []
        for i, (t, g) in enumerate(zip(theta, grad)):
            d = kappa * g
            if self.momentum:
                b = d if self.buf is None else self.momentum * self.buf[i] + d
                d = d + self.momentum * b
            out.append(t - self.lr * d)
        return out


def replay_kappa_search(theta, grad, rule: SgdReplay, n_bits, target, cap, budget=5, constrained=True):
    """Doubling from 1 until crossings exceed the target, then bisection over the last bracket.

    Crossings are counted against the layer's current integer codes under its
    current min/max grid. Returns kappa.
    """
    lo_r, hi_r = min(theta), max(theta)
    q0 = [quantize_scalar(t, lo_r, hi_r, n_bits) for t in theta]

    def crossings(kappa):
        cand = rule.candidate(theta, grad, kappa)
        return sum(1 for a, c in zip(q0, cand) if quantize_scalar(c, lo_r, hi_r, n_bits) != a)

    c = crossings(1.0)
    if all(g == 0 for g in grad) or target == 0 or c > target:
        return 1.0
    tried = [(1.0, c)]
    kappa = 1.0
    while c <= target:
        if kappa * 2 > cap:
            break
        kappa *= 2
        c = crossings(kappa)
        tried.append((kappa, c))
    if c > target:
        left, right = kappa / 2, kappa
        for _ in range(budget):
            mid = (left + right) / 2
            cm = crossings(mid)
            tried.append((mid, cm))
            if cm > target:
                right = mid
            else:
                left = mid
    over = [t for t in tried if t[1] > target]
    pool = over if constrained and over else tried
    best = pool[0]
    for k, cc in pool[1:]:
        if (abs(cc - target), k) < (abs(best[1] - target), best[0]):
            best = (k, cc)
    return best[0]
