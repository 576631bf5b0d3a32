import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mapo_lab.scoring import (PositionHistory, dynamic_score, max_displacement, percentile_normalize,
                              score_histories, variance)


def _oracle_r(pos):
    lo = [min(p[d] for p in pos) for d in range(3)]
    hi = [max(p[d] for p in pos) for d in range(3)]
    return float(np.sqrt(sum((h - l) ** 2 for h, l in zip(hi, lo))))


def _oracle_v(pos):
    n = len(pos)
    mean = [sum(p[d] for p in pos) / n for d in range(3)]
    return sum(sum((p[d] - mean[d]) ** 2 for d in range(3)) for p in pos) / n


def test_history_is_a_ring_buffer():
    h = PositionHistory(3)
    for k in range(5):
        h.record([k, 0, 0], k * 10)
    assert h.full and len(h) == 3
    assert h.iterations == [20, 30, 40]
    assert np.array_equal(h.positions[:, 0], [2, 3, 4])
    h.clear()
    assert len(h) == 0 and not h.full


def test_short_histories():
    assert max_displacement(np.zeros((1, 3))) == 0.0
    assert variance(np.ones((1, 3))) == 0.0
    with pytest.raises(ValueError):
        variance(np.zeros((0, 3)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 16), st.just(3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_r_and_v_match_oracles(pos):
    r, v = max_displacement(pos), variance(pos)
    ro, vo = _oracle_r(pos.tolist()), _oracle_v(pos.tolist())
    assert abs(r - ro) <= 1e-12 * max(abs(ro), 1e-300)
    assert abs(v - vo) <= 1e-9 * max(abs(vo), 1e-12)


def test_percentile_known_values():
    assert np.array_equal(percentile_normalize([5.0]), [1.0])
    out = percentile_normalize([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(out, [0.25, 0.5, 0.75, 1.0])
    assert np.allclose(percentile_normalize([2.0, 2.0, 2.0]), 1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 1e6, allow_nan=False)))
def test_percentile_properties(v):
    out = percentile_normalize(v)
    assert out[np.argmax(v)] == 1.0
    assert np.all((out >= 0) & (out <= 1))
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(0, 1)), arrays(np.float64, 20, elements=st.floats(0, 1)))
def test_harmonic_bounds(r, v):
    s = dynamic_score(r, v)
    lo = np.minimum(r, v)
    assert np.all(s >= lo - 1e-15)
    assert np.all(s <= 2 * lo + 2e-6 + 1e-15)


def test_score_modes():
    rng = np.random.default_rng(0)
    hs = []
    for k in range(10):
        h = PositionHistory(4)
        for i in range(4):
            h.record(rng.normal(size=3) * k, i)
        hs.append(h)
    both = score_histories(hs)
    disp = score_histories(hs, use_variance=False)
    assert np.array_equal(disp.S, disp.r_tilde)
    assert np.allclose(both.S, dynamic_score(both.r_tilde, both.v_tilde))
    assert np.argmax(both.S) == 9
