import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from oracles import dequantize_scalar, ema_replay, quantize_scalar
from zsqlab.quant import (
    ActivationObserver,
    DegenerateRangeError,
    QuantConfig,
    count_threshold_crossings,
    dequantize,
    fake_quant_forward,
    observe_activation,
    quant_params,
    quantize,
    safe_quant_params,
    ste_backward,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
bits = st.sampled_from([2, 3, 4, 8])


def test_worked_example():
    p = quant_params(-1.0, 1.0, 4)
    assert (p.scale, p.zero) == (7.5, 0.5)
    assert quantize(np.array([-1.0, -0.2, 0.0, 0.31, 1.0]), p, 4).tolist() == [-8, -2, 0, 2, 7]


def test_half_rounds_to_even():
    # theta * 7.5 - 0.5 = 0.5 and 1.5 -> 0 and 2
    p = quant_params(-1.0, 1.0, 4)
    assert quantize(np.array([2 / 15, 4 / 15]), p, 4).tolist() == [0, 2]


@settings(max_examples=200, deadline=None)
@given(lo=finite, width=st.floats(1e-3, 1e3), n=bits, data=st.data())
def test_matches_scalar_oracle(lo, width, n, data):
    hi = lo + width
    assume(hi > lo)
    xs = data.draw(st.lists(st.floats(lo - width, hi + width), min_size=1, max_size=20))
    p = quant_params(lo, hi, n)
    got = quantize(np.array(xs), p, n).tolist()
    assert got == [quantize_scalar(x, lo, hi, n) for x in xs]
    for q in got:
        assert dequantize(np.array([q]), p)[0] == pytest.approx(dequantize_scalar(q, lo, hi, n), rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(lo=finite, width=st.floats(1e-2, 1e3), n=bits)
def test_endpoints_and_roundtrip(lo, width, n):
    hi = lo + width
    p = quant_params(lo, hi, n)
    q = quantize(np.array([lo, hi]), p, n)
    assert q.tolist() == [-(2 ** (n - 1)), 2 ** (n - 1) - 1]
    codes = np.arange(-(2 ** (n - 1)), 2 ** (n - 1))
    np.testing.assert_array_equal(quantize(dequantize(codes, p), p, n), codes)


@settings(max_examples=100, deadline=None)
@given(n=bits, xs=st.lists(st.floats(-5, 5), min_size=2, max_size=50))
def test_monotone_and_bounded_error(n, xs):
    x = np.sort(np.array(xs))
    lo, hi = float(x.min()), float(x.max())
    assume(hi - lo > 1e-6)
    p = quant_params(lo, hi, n)
    q = quantize(x, p, n)
    assert np.all(np.diff(q) >= 0)
    assert len(np.unique(q)) <= 2**n
    assert np.all(np.abs(dequantize(q, p) - x) <= 0.5 / p.scale + 1e-12 * (1 + np.abs(x)))


def test_degenerate_range():
    with pytest.raises(DegenerateRangeError):
        quant_params(1.0, 1.0, 4)
    p = safe_quant_params(1.0, 1.0, 4)
    assert p.lo < 1.0 < p.hi
    out, state = fake_quant_forward(np.full(5, 1.0), QuantConfig(4))
    assert np.allclose(out, 1.0, atol=1e-8)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        QuantConfig(1)
    with pytest.raises(ValueError):
        quantize(np.array([np.nan]), quant_params(0, 1, 4), 4)
    with pytest.raises(ValueError):
        quant_params(0.0, np.inf, 4)
    with pytest.raises(ValueError):
        fake_quant_forward(np.zeros(0), QuantConfig(4))
    with pytest.raises(RuntimeError):
        fake_quant_forward(np.zeros(3), QuantConfig(4), observer=ActivationObserver())
    with pytest.raises(ValueError):
        count_threshold_crossings(np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=1, max_size=8), min_size=1, max_size=10))
def test_observer_matches_ema_replay(batches):
    obs = ActivationObserver()
    for b in batches:
        observe_activation(obs, np.array(b))
    lo, hi = ema_replay(batches)
    assert obs.running_min == pytest.approx(lo, abs=1e-12)
    assert obs.running_max == pytest.approx(hi, abs=1e-12)
    assert obs.observed_batches == len(batches)


def test_ste_clips_outside_range():
    p = quant_params(-1.0, 1.0, 4)
    g = ste_backward(np.ones(4), np.array([-2.0, -1.0, 1.0, 1.5]), p)
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        ste_backward(np.ones(3), np.zeros(4), p)


@given(st.lists(st.tuples(st.integers(-8, 7), st.integers(-8, 7)), max_size=40))
def test_crossing_count_is_number_of_changed_codes(pairs):
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    assert count_threshold_crossings(a, b) == sum(x != y for x, y in pairs)
