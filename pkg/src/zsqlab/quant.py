"""Uniform fake quantization with straight-through gradients.

A tensor is mapped to n-bit integers with a per-tensor scale ``S`` and
offset ``z``::

    S = (2**n - 1) / (hi - lo)
    z = S * lo + 2**(n - 1)
    q = round(x * S - z)          # half-to-even, clamped to the n-bit range
    x' = (q + z) / S

Weights take their range from the live tensor; activations take it from a
moving-average observer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEGENERATE_PAD = 1e-8


class DegenerateRangeError(ValueError):
    """Raised when a quantization range has zero (or negative) width."""


@dataclass(frozen=True)
class QuantConfig:
    n_bits: int

    def __post_init__(self):
        if int(self.n_bits) != self.n_bits or self.n_bits < 2:
            raise ValueError(f"n_bits must be an integer >= 2, got {self.n_bits}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.n_bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.n_bits - 1) - 1


@dataclass(frozen=True)
class AffineParams:
    scale: float
    zero: float
    lo: float
    hi: float


@dataclass
class ActivationObserver:
    momentum: float = 0.1
    running_min: float = 0.0
    running_max: float = 0.0
    observed_batches: int = 0

    @property
    def ready(self) -> bool:
        return self.observed_batches > 0


@dataclass
class QuantizedLayerState:
    """Quantization bookkeeping for one weight tensor."""

    layer: str
    cfg: QuantConfig
    theta: np.ndarray | None = None
    q: np.ndarray | None = None
    params: AffineParams | None = None
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.theta.size) if self.theta is not None else 0


def quant_params(lo: float, hi: float, n_bits: int) -> AffineParams:
    lo = float(lo)
    hi = float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("quantization range must be finite")
    if not lo < hi:
        raise DegenerateRangeError(f"degenerate range [{lo}, {hi}]")
    scale = (2.0**n_bits - 1.0) / (hi - lo)
    zero = scale * lo + 2.0 ** (n_bits - 1)
    return AffineParams(scale=scale, zero=zero, lo=lo, hi=hi)


def safe_quant_params(lo: float, hi: float, n_bits: int) -> AffineParams:
    """Like :func:`quant_params` but widens a constant range symmetrically."""
    try:
        return quant_params(lo, hi, n_bits)
    except DegenerateRangeError:
        return quant_params(lo - DEGENERATE_PAD, hi + DEGENERATE_PAD, n_bits)


def quantize(x, p: AffineParams, n_bits: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    qmin = -(2 ** (n_bits - 1))
    qmax = 2 ** (n_bits - 1) - 1
    # np.rint rounds half to even
    q = np.rint(x * p.scale - p.zero)
    return np.clip(q, qmin, qmax).astype(np.int64)


def dequantize(q, p: AffineParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) + p.zero) / p.scale


def fake_quant_forward(
    theta,
    cfg: QuantConfig,
    observer: ActivationObserver | None = None,
    layer: str = "",
) -> tuple[np.ndarray, QuantizedLayerState]:
    """Quantize-then-dequantize ``theta``.

    Without an observer the range is the min/max of ``theta`` itself (the
    weight path); with one, the observer's running range is used.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0:
        raise ValueError("cannot fake-quantize an empty tensor")
    if observer is None:
        lo, hi = float(theta.min()), float(theta.max())
    else:
        if not observer.ready:
            raise RuntimeError("activation observer has not seen any batch")
        lo, hi = observer.running_min, observer.running_max
    p = safe_quant_params(lo, hi, cfg.n_bits)
    q = quantize(theta, p, cfg.n_bits)
    state = QuantizedLayerState(layer=layer, cfg=cfg, theta=theta, q=q, params=p)
    return dequantize(q, p), state


def ste_mask(theta, p: AffineParams) -> np.ndarray:
    theta = np.asarray(theta)
    return (theta >= p.lo) & (theta <= p.hi)


def ste_backward(upstream, theta, p: AffineParams) -> np.ndarray:
    """Clipped straight-through gradient: identity inside [lo, hi], zero outside."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != np.shape(theta):
        raise ValueError(f"shape mismatch {upstream.shape} vs {np.shape(theta)}")
    return np.where(ste_mask(theta, p), upstream, 0.0)


def observe_activation(obs: ActivationObserver, batch) -> ActivationObserver:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("empty activation batch")
    if not np.all(np.isfinite(batch)):
        raise ValueError("non-finite activation values")
    lo, hi = float(batch.min()), float(batch.max())
    if obs.observed_batches == 0:
        obs.running_min, obs.running_max = lo, hi
    else:
        m = obs.momentum
        obs.running_min = (1.0 - m) * obs.running_min + m * lo
        obs.running_max = (1.0 - m) * obs.running_max + m * hi
    obs.observed_batches += 1
    return obs


def count_threshold_crossings(before, after) -> int:
    """Number of integer weights that changed between two quantizations."""
    before = np.asarray(before)
    after = np.asarray(after)
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch {before.shape} vs {after.shape}")
    return int(np.count_nonzero(before != after))
