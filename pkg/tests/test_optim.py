import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_diamond
from ncsynth import minplus as mp
from ncsynth.gen import GenSpec, enumerate_optimum, generate
from ncsynth.netmodel import Flow, ProblemInstance, RateLatency, Server, ServerGraph, TokenBucket
from ncsynth.objective import CompiledObjective
from ncsynth.optim import (FWOptions, frank_wolfe, frank_wolfe_momentum, lmo, metrics, mindelay_choice,
                           nelder_mead, polytope_violation, random_search, random_start,
                           round_and_repair, run_method, shortest_path_hops, step_size)


class Quadratic:
    """||x - c||^2 over a product of simplices; the minimiser is the projection of c."""

    def __init__(self, c, starts, unstable_above=None):
        self.c = np.asarray(c, dtype=float)
        self.block_starts = np.asarray(starts)
        self.n_vars = len(self.c)
        self.evaluations = 0
        self.unstable_above = unstable_above

    def calibrate(self, x):
        pass

    def _check(self, x):
        if self.unstable_above is not None and x[0] > self.unstable_above:
            raise mp.StabilityError("toy instability")

    def penalized(self, x):
        self.evaluations += 1
        self._check(x)
        return float(np.sum((x - self.c) ** 2))

    def value_and_grad(self, x):
        self.evaluations += 1
        self._check(x)
        return float(np.sum((x - self.c) ** 2)), 2 * (x - self.c)


class Linear(Quadratic):
    def penalized(self, x):
        self.evaluations += 1
        self._check(x)
        return float(self.c @ x)

    def value_and_grad(self, x):
        self.evaluations += 1
        self._check(x)
        return float(self.c @ x), self.c.copy()


# -- step rule and linear minimisation -----------------------------------------------

def test_step_size_examples():
    x, s = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(x + step_size(0) * (s - x), [0.0, 1.0])
    np.testing.assert_allclose(x + step_size(3) * (s - x), [0.5, 0.5])


def test_first_iteration_jumps_to_vertex():
    toy = Linear([1.0, 0.0], [0, 2])
    rep = frank_wolfe(toy, start=np.array([1.0, 0.0]), opts=FWOptions(max_iter=1))
    np.testing.assert_array_equal(rep.relaxed, [0.0, 1.0])


def test_lmo_examples():
    toy = Quadratic([0, 0, 0], [0, 3])
    np.testing.assert_array_equal(lmo(np.array([0.3, -0.2, 0.1]), toy), [0, 1, 0])
    np.testing.assert_array_equal(lmo(np.array([0.5, 0.5, 0.5]), toy), [1, 0, 0])
    two = Quadratic([0] * 5, [0, 2, 5])
    np.testing.assert_array_equal(lmo(np.array([2.0, 1.0, 0.0, -1.0, 3.0]), two), [0, 1, 0, 1, 0])


def test_random_start_examples():
    toy = Quadratic([0] * 6, [0, 1, 4, 6])
    x = random_start(toy, 7)
    assert x[0] == 1.0
    assert np.all(x >= 0)
    for a, b in ((0, 1), (1, 4), (4, 6)):
        assert abs(x[a:b].sum() - 1) <= 1e-12
    assert np.array_equal(x, random_start(toy, 7))
    assert not np.array_equal(x, random_start(toy, 8))


# -- toy problems with known minimisers -----------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_fw_converges_on_quadratic_toy(seed):
    # projection of (0.8, 0.6, -0.4) onto the simplex is (0.6, 0.4, 0)
    toy = Quadratic([0.8, 0.6, -0.4], [0, 3])
    rep = frank_wolfe(toy, seed=seed)
    assert rep.iterations <= 500
    np.testing.assert_allclose(rep.relaxed, [0.6, 0.4, 0.0], atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_fw_interior_minimiser_value(seed):
    toy = Quadratic([0.2, 0.3, 0.5], [0, 3])
    rep = frank_wolfe(toy, seed=seed)
    assert rep.relaxed_value <= 1e-3
    np.testing.assert_allclose(rep.relaxed, toy.c, atol=1e-2)


@pytest.mark.parametrize("seed", range(3))
def test_nelder_mead_on_quadratic_toy(seed):
    toy = Quadratic([0.2, 0.3, 0.5, 0.9, 0.1], [0, 3, 5])
    rep = nelder_mead(toy, budget=500, seed=seed)
    np.testing.assert_allclose(rep.relaxed, toy.c, atol=1e-2)
    assert np.array_equal(rep.relaxed, nelder_mead(Quadratic(toy.c, [0, 3, 5]), 500, seed).relaxed)


def test_nelder_mead_fixed_blocks_return_immediately():
    toy = Quadratic([1.0, 1.0], [0, 1, 2])
    rep = nelder_mead(toy, budget=500, seed=0)
    assert rep.status == "no free variables" and toy.evaluations == 1
    np.testing.assert_array_equal(rep.relaxed, [1.0, 1.0])


def test_momentum_with_constant_gradient_matches_plain():
    a = frank_wolfe(Linear([0.3, 0.1, 0.2, 0.5, 0.4], [0, 3, 5]), seed=3)
    b = frank_wolfe_momentum(Linear([0.3, 0.1, 0.2, 0.5, 0.4], [0, 3, 5]), seed=3)
    np.testing.assert_array_equal(a.relaxed, b.relaxed)
    assert a.trace == b.trace


def test_momentum_first_step_is_plain_step():
    inst = generate(GenSpec(ports=(5, 8), flows=(4, 8), seed=21))
    one = FWOptions(max_iter=1)
    a = frank_wolfe(CompiledObjective(inst), opts=one, seed=2)
    b = frank_wolfe_momentum(CompiledObjective(inst), opts=one, seed=2)
    np.testing.assert_array_equal(a.relaxed, b.relaxed)


def test_step_halving_on_instability():
    toy = Linear([-1.0, 0.0], [0, 2], unstable_above=0.9)
    rep = frank_wolfe(toy, start=np.array([0.0, 1.0]), opts=FWOptions(max_iter=3))
    assert rep.status == "ok"
    assert 0.5 <= rep.relaxed[0] <= 0.9


def test_abort_after_halvings():
    toy = Linear([-1.0, 0.0], [0, 2], unstable_above=0.0)
    rep = frank_wolfe(toy, start=np.array([0.0, 1.0]))
    assert rep.status.startswith("aborted") and "20 step halvings" in rep.status
    assert toy.evaluations == 1 + 21


# -- rounding and repair ---------------------------------------------------------

def test_round_examples():
    inst = make_diamond(rates=(1.0,), bursts=(1.0,))
    obj = CompiledObjective(inst)
    p, verdict = round_and_repair(np.array([0.7, 0.3]), obj)
    np.testing.assert_array_equal(p, [1.0, 0.0])
    assert verdict == "feasible"
    q, _ = round_and_repair(np.array([0.0, 1.0]), obj)
    np.testing.assert_array_equal(q, [0.0, 1.0])


def test_repair_moves_flow_off_overloaded_server():
    inst = make_diamond(rates=(4.0, 4.0), bursts=(1.0, 1.0))
    obj = CompiledObjective(inst)
    # argmax puts both 4-rate flows on the 5-rate branch
    p, verdict = round_and_repair(np.array([0.7, 0.3, 0.6, 0.4]), obj)
    assert verdict == "feasible"
    assert inst.is_capacity_feasible(p)
    ref = enumerate_optimum(obj)
    assert ref.feasible == 2
    assert sorted(inst.choice_of(p)) == [0, 1]


def test_repair_reports_infeasible():
    g = ServerGraph(tuple(Server(n, RateLatency(10, 1), n) for n in "ab"), (("a", "b"),))
    flows = tuple(Flow(f"f{i}", TokenBucket(6, 1), "a", ("b",), ((("a", "b"),),)) for i in range(2))
    inst = ProblemInstance(g, flows)
    obj = CompiledObjective.__new__(CompiledObjective)
    obj.instance = inst
    obj.evaluations = 0

    def feasible(x, tol=1e-12):
        return (inst.is_capacity_feasible(x), "infeasible: capacity")
    obj.feasible = feasible
    _, verdict = round_and_repair(np.ones(2), obj)
    assert verdict == "infeasible: capacity"


# -- baselines -------------------------------------------------------------------

def test_random_search_covers_small_instance():
    inst = make_diamond()
    obj = CompiledObjective(inst)
    rep = random_search(obj, budget=64, seed=0)
    ref = enumerate_optimum(CompiledObjective(inst))
    assert rep.objective == ref.value
    np.testing.assert_array_equal(rep.assignment, ref.assignment)
    one = random_search(CompiledObjective(inst), budget=1, seed=5)
    again = random_search(CompiledObjective(inst), budget=1, seed=5)
    np.testing.assert_array_equal(one.assignment, again.assignment)
    assert one.iterations == 1


def two_route_instance(burst, lat_b=2.0):
    curves = {"x": (1000.0, 0.0), "A": (10.0, 3.0), "B": (2.0, lat_b), "t": (1000.0, 0.0)}
    servers = tuple(Server(n, RateLatency(R, L), n) for n, (R, L) in curves.items())
    g = ServerGraph(servers, (("x", "A"), ("x", "B"), ("A", "t"), ("B", "t")))
    f = Flow("f", TokenBucket(0.5, burst), "x", ("t",), ((("x", "A", "t"), ("x", "B", "t")),))
    return ProblemInstance(g, (f,))


def test_mindelay_examples():
    assert mindelay_choice(two_route_instance(2.0)) == [1]  # 3.2 vs 3.0
    assert mindelay_choice(two_route_instance(0.0)) == [1]  # 3 vs 2
    assert mindelay_choice(two_route_instance(0.0, lat_b=4.0)) == [0]
    single = make_diamond(rates=(1.0,), bursts=(1.0,))
    assert mindelay_choice(ProblemInstance(single.graph, (Flow(
        "f", TokenBucket(1, 1), "a0", ("d0",), ((("a0", "c0", "d0"),),)),))) == [0]


def test_hops_examples():
    names = "sabcdt"
    servers = tuple(Server(n, RateLatency(10, 1), n) for n in names)
    edges = (("s", "a"), ("a", "b"), ("b", "c"), ("c", "t"), ("s", "d"), ("d", "t"))
    g = ServerGraph(servers, edges)
    f = Flow("f", TokenBucket(1, 1), "s", ("t",), ((("s", "a", "b", "c", "t"), ("s", "d", "t")),))
    np.testing.assert_array_equal(shortest_path_hops(ProblemInstance(g, (f,))), [0, 1])
    np.testing.assert_array_equal(shortest_path_hops(make_diamond()), [1, 0, 1, 0])
    # ties between priorities go to the highest one (level 0)
    two_levels = make_diamond(priorities=(0, 1))
    np.testing.assert_array_equal(shortest_path_hops(two_levels), [1, 0, 0, 0, 1, 0, 0, 0])
    # the choice does not look at curves
    slow = make_diamond(rates=(0.1, 0.1), bursts=(9.0, 9.0))
    np.testing.assert_array_equal(shortest_path_hops(slow), shortest_path_hops(make_diamond()))


def test_metrics_examples():
    m = metrics({"frank-wolfe": 6.0, "sp-hops": 10.0})
    assert m["frank-wolfe"]["RelGapShortestPath"] == pytest.approx(-0.4)
    assert m["frank-wolfe"]["RelGapBest"] == 0.0
    m = metrics({"random": 10.05, "sp-hops": 10.0})
    assert m["random"]["RelGapBest"] == pytest.approx(0.005)
    with pytest.raises(KeyError, match="baseline"):
        metrics({"random": 1.0})


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        run_method(CompiledObjective(make_diamond()), "simulated-annealing")


# -- properties on generated instances ---------------------------------------------

@settings(max_examples=15)
@given(st.integers(0, 10_000), st.booleans())
def test_fw_invariants_on_generated_instances(seed, momentum):
    inst = generate(GenSpec(ports=(3, 7), flows=(2, 5), max_combinations=4096, seed=seed))
    obj = CompiledObjective(inst)
    rep = frank_wolfe(obj, opts=FWOptions(max_iter=60, momentum=momentum), seed=seed)
    assert rep.polytope_violation <= 1e-12
    assert all(b <= a for a, b in zip(rep.trace, rep.trace[1:]))
    assert len(rep.trace) <= 60
    assert set(np.unique(rep.assignment)) <= {0.0, 1.0}
    if rep.feasible:
        assert inst.is_capacity_feasible(rep.assignment)
        assert rep.objective >= enumerate_optimum(CompiledObjective(inst)).value - 1e-12


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_stochastic_methods_are_reproducible(seed):
    inst = generate(GenSpec(ports=(3, 6), flows=(2, 4), seed=seed))
    for method in ("frank-wolfe", "random", "nelder-mead"):
        a = run_method(CompiledObjective(inst), method, seed=seed, budget=40)
        b = run_method(CompiledObjective(inst), method, seed=seed, budget=40)
        np.testing.assert_array_equal(a.assignment, b.assignment)
        assert a.trace == b.trace
