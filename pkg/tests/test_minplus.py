import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ncsynth import minplus as mp
from ncsynth.minplus import SymRateLatency as SR, SymTokenBucket as ST
from ncsynth.netmodel import RateLatency, TokenBucket


def ev(*exprs, x=()):
    return mp.evaluate(exprs, x)


def num(curve, x=()):
    return tuple(ev(*((curve.rate, curve.burst) if isinstance(curve, ST) else (curve.rate, curve.latency)), x=x))


# -- closed forms ------------------------------------------------------------

def test_aggregate_examples():
    assert num(mp.aggregate(ST.of(1, 2), ST.of(3, 4))) == (4, 6)
    assert num(mp.aggregate(ST.of(1.5, 2.5), ST.of(0, 0))) == (1.5, 2.5)
    total = ST.of(0, 0)
    for _ in range(7):
        total = mp.aggregate(total, ST.of(0.5, 1.25))
    assert num(total) == pytest.approx((3.5, 8.75))


def test_convolve_examples():
    assert num(mp.convolve(SR.of(10, 1), SR.of(8, 2))) == (8, 3)
    assert num(mp.convolve(SR.of(7, 2), mp.identity_service())) == (7, 2)
    assert num(mp.convolve(SR.of(5, 0), SR.of(5, 4))) == (5, 4)


def test_deconvolve_examples():
    assert num(mp.deconvolve(ST.of(2, 5), SR.of(10, 3))) == (2, 11)
    assert num(mp.deconvolve(ST.of(0, 0), SR.of(10, 3))) == (0, 0)
    assert num(mp.deconvolve(ST.of(2, 5), SR.of(10, 0))) == (2, 5)


def test_leftover_examples():
    R, L = num(mp.leftover(SR.of(10, 2), ST.of(4, 6)))
    assert R == 6 and L == pytest.approx(26 / 6)
    assert num(mp.leftover(SR.of(10, 2), ST.of(0, 0))) == (10, 2)
    with pytest.raises(mp.StabilityError):
        mp.leftover(SR.of(10, 2), ST.of(10, 1))


def test_leftover_unstable_at_evaluation_time():
    lo = mp.leftover(SR.of(10, 2), ST.of(mp.var(0) * 10, 1))
    assert ev(lo.latency, x=[0.5])[0] == pytest.approx((1 + 20) / 5)
    with pytest.raises(mp.StabilityError):
        ev(lo.latency, x=[1.0])


def test_delay_bound_examples():
    assert ev(mp.delay_bound(ST.of(2, 5), SR.of(10, 3)))[0] == pytest.approx(3.5)
    assert ev(mp.delay_bound(ST.of(3, 0), SR.of(9, 0)))[0] == 0
    assert ev(mp.delay_bound(ST.of(1, 2), SR.of(10, 3)))[0] == pytest.approx(3.2)


def test_scale_examples():
    a = ST.of(2, 4)
    assert num(mp.scale(a, 0)) == (0, 0)
    assert num(mp.scale(a, 1)) == (2, 4)
    assert num(mp.scale(a, 0.5)) == (1, 2)


# -- expression plumbing ---------------------------------------------------------

def test_constants_and_vars_are_interned():
    assert mp.const(2.5) is mp.const(2.5)
    assert mp.var(3) is mp.var(3)
    assert mp.var(3) is not mp.var(4)


def test_min_max_ramp_and_arithmetic():
    x = mp.var(0)
    assert ev(mp.minimum(3, 7))[0] == 3
    assert ev(mp.maximum(3, 7))[0] == 7
    assert ev(mp.ramp(x - 2), x=[1.0])[0] == 0
    assert ev(mp.ramp(x - 2), x=[5.0])[0] == 3
    assert ev((x * 3 + 1) / 2 - x, x=[2.0])[0] == pytest.approx(1.5)


def test_division_by_nonpositive_signals_stability():
    with pytest.raises(mp.StabilityError):
        ev(mp.const(1.0) / (mp.var(0) - 1), x=[1.0])


def test_tree_sum_and_max():
    items = [mp.var(i) for i in range(5)]
    x = [3.0, -1.0, 4.0, 1.0, 5.0]
    assert ev(mp.tree_sum(items), x=x)[0] == sum(x)
    assert ev(mp.tree_max(items), x=x)[0] == 5.0
    assert ev(mp.tree_sum([]))[0] == 0.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40))
def test_exclusive_sums_match_naive(values):
    items = [mp.var(i) for i in range(len(values))]
    excl = mp.exclusive_sums(items)
    for i, e in enumerate(excl):
        if len(values) == 1:
            assert e is None
        else:
            expected = math.fsum(values[:i] + values[i + 1:])
            assert ev(e, x=values)[0] == pytest.approx(expected, abs=1e-9)


def test_exclusive_sums_node_count_is_n_log_n():
    n = 512
    items = [mp.var(i) for i in range(n)]
    nodes = mp.count_nodes([e for e in mp.exclusive_sums(items) if e is not None])
    assert nodes <= 4 * n * math.log2(n)


# -- algebraic properties ---------------------------------------------------------

pos = st.floats(0.01, 100)
nonneg = st.floats(0, 100)


@given(pos, nonneg, pos, nonneg, pos, nonneg)
def test_aggregate_commutative_associative(r1, b1, r2, b2, r3, b3):
    a, b, c = ST.of(r1, b1), ST.of(r2, b2), ST.of(r3, b3)
    lhs = num(mp.aggregate(mp.aggregate(a, b), c))
    rhs = num(mp.aggregate(a, mp.aggregate(c, b)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(pos, nonneg, st.floats(0, 1), st.floats(0, 1))
def test_scale_composes(r, b, p, q):
    a = ST.of(r, b)
    assert num(mp.scale(mp.scale(a, p), q)) == pytest.approx(num(mp.scale(a, p * q)), rel=1e-12, abs=1e-300)


@given(pos, nonneg, st.floats(0.01, 0.99), nonneg, st.floats(0, 1))
def test_results_keep_type_invariants(R, L, frac, B, p):
    a = mp.scale(ST.of(R * frac, B), p)
    lo = num(mp.leftover(SR.of(R, L), a))
    assert lo[0] > 0 and lo[1] >= 0
    out = num(mp.deconvolve(a, SR.of(R, L)))
    assert out[0] >= 0 and out[1] >= 0
    conv = num(mp.convolve(SR.of(R, L), SR.of(lo[0], lo[1])))
    assert conv[0] > 0 and conv[1] >= 0


# -- brute-force oracle ----------------------------------------------------------

def test_oracle_convolution_point():
    grid = mp.Grid(10.0, 0.01)
    vals = mp.sample_convolve(RateLatency(10, 1), RateLatency(8, 2), grid)
    t = grid.points
    i = int(np.argmin(np.abs(t - 5.0)))
    assert vals[i] == pytest.approx(16.0, abs=1e-9)
    assert RateLatency(8, 3)(5.0) == 16.0


def test_oracle_deconvolution_at_zero():
    a, b = TokenBucket(2, 5), RateLatency(10, 3)
    grid = mp.Grid.for_curves([a], [b])
    assert mp.sample_deconvolve(a, b, grid, t=[0.0])[0] == pytest.approx(11.0, abs=2 * grid.delta)


def test_oracle_delay():
    a, b = TokenBucket(2, 5), RateLatency(10, 3)
    grid = mp.Grid.for_curves([a], [b])
    assert abs(mp.sample_delay(a, b, grid) - 3.5) <= grid.delta


def test_oracle_rejects_coarse_grid():
    with pytest.raises(mp.GridError, match="resolution"):
        mp.Grid(1.0, 0.1)
