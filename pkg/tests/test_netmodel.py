import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_diamond, make_tandem
from ncsynth.netmodel import (Flow, InstanceError, ProblemInstance, RateLatency, Server, ServerGraph,
                              TokenBucket, check, expand_virtual_flows, greedy_witness,
                              k_shortest_paths, multicast_to_unicast, validate)


def line_graph(names, levels=(0,)):
    servers = tuple(Server(f"{n}{k}", RateLatency(10, 1), n, k) for n in names for k in levels)
    edges = tuple((f"{a}0", f"{b}0") for a, b in zip(names, names[1:]))
    return ServerGraph(servers, edges)


def test_curve_invariants():
    with pytest.raises(ValueError):
        RateLatency(0, 1)
    with pytest.raises(ValueError):
        RateLatency(1, -1)
    with pytest.raises(ValueError):
        TokenBucket(-1, 0)
    assert TokenBucket(0, 0)(5.0) == 0
    assert TokenBucket(2, 3)(0.0) == 0
    assert TokenBucket(2, 3)(1.0) == 5
    assert RateLatency(4, 1)(0.5) == 0 and RateLatency(4, 1)(3.0) == 8


def test_paths_times_priorities():
    inst = make_diamond(rates=(1.0,), bursts=(1.0,), priorities=(0, 1))
    assert len(inst.virtual_flows) == 4 and inst.n_vars == 4
    vfs = inst.virtual_flows
    assert [(v.alternative, v.priority) for v in vfs] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    for v in vfs:
        assert all(inst.graph.by_id[s].priority_level == v.priority for s in v.path)


def test_single_alternative_single_vf():
    inst = make_tandem()
    assert len(inst.virtual_flows) == 2
    assert [v.var_id for v in inst.virtual_flows] == [0, 1]


def multicast_instance(levels=(0,)):
    g = ServerGraph(tuple(Server(f"{n}{k}", RateLatency(10, 1), n, k) for n in "abc" for k in levels),
                    (("a0", "b0"), ("a0", "c0")))
    f = Flow("m", TokenBucket(1, 1), "a0", ("b0", "c0"), ((("a0", "b0"),), (("a0", "c0"),)), tuple(levels))
    return g, f


def test_multicast_shares_var():
    g, f = multicast_instance()
    vfs = multicast_to_unicast(f, g)
    assert len(vfs) == 2 and {v.var_id for v in vfs} == {0}
    g, f = multicast_instance((0, 1))
    vfs = multicast_to_unicast(f, g)
    assert len(vfs) == 4 and sorted({v.var_id for v in vfs}) == [0, 1]


def test_multicast_needs_path_per_destination():
    g, f = multicast_instance()
    bad = Flow("m", f.arrival, f.source, f.destinations, ((("a0", "b0"),), ()))
    with pytest.raises(InstanceError, match="no path"):
        multicast_to_unicast(bad, g)


def test_afdx_scale_expansion():
    dests = [f"d{i}" for i in range(8)]
    servers = (Server("src", RateLatency(1e4, 0.001), "src"),) + tuple(
        Server(d, RateLatency(1e4, 0.001), d) for d in dests)
    g = ServerGraph(servers, tuple(("src", d) for d in dests))
    groups = tuple((("src", d),) for d in dests)
    flows = [Flow(f"v{i}", TokenBucket(0.1, 1), "src", tuple(dests), groups) for i in range(1100)]
    vfs = expand_virtual_flows(flows, g)
    assert len(vfs) == 8800
    assert len({v.var_id for v in vfs}) == 1100


def test_unknown_server_and_missing_level():
    g = line_graph("ab")
    f = Flow("x", TokenBucket(1, 1), "a0", ("b0",), ((("a0", "zz"),),))
    errors = validate(ProblemInstance(g, (f,)))
    assert any("'zz'" in e for e in errors)
    f = Flow("x", TokenBucket(1, 1), "a0", ("b0",), ((("a0", "b0"),),), (0, 3))
    assert any("priority level 3" in e for e in validate(ProblemInstance(g, (f,))))


def test_disconnected_path_rejected():
    g = line_graph("abc")
    f = Flow("x", TokenBucket(1, 1), "a0", ("c0",), ((("a0", "c0"),),))
    assert any("disconnected" in e for e in validate(ProblemInstance(g, (f,))))


def test_cycle_rejected():
    servers = tuple(Server(n, RateLatency(10, 1), n) for n in "AB")
    g = ServerGraph(servers, (("A", "B"), ("B", "A")))
    f1 = Flow("f1", TokenBucket(1, 1), "A", ("B",), ((("A", "B"),),))
    f2 = Flow("f2", TokenBucket(1, 1), "B", ("A",), ((("B", "A"),),))
    errors = validate(ProblemInstance(g, (f1, f2)))
    assert errors and "cycle" in errors[0]
    with pytest.raises(InstanceError, match="cycle"):
        check(ProblemInstance(g, (f1, f2)))


def test_valid_instance_ok(tandem, diamond):
    assert validate(tandem) == []
    assert validate(diamond) == []


def test_no_feasible_witness():
    g = line_graph("ab")
    flows = tuple(Flow(f"f{i}", TokenBucket(6, 1), "a0", ("b0",), ((("a0", "b0"),),)) for i in range(2))
    errors = validate(ProblemInstance(g, flows))
    assert any("no feasible witness" in e for e in errors)


def test_witness_uses_alternatives():
    inst = make_diamond(rates=(4.0, 4.0), bursts=(1.0, 1.0))
    # both on the 5-rate branch would overload it; the witness splits them
    choice = greedy_witness(inst)
    assert choice is not None and sorted(choice) == [0, 1]
    assert inst.is_capacity_feasible(inst.one_hot(choice))


def test_capacity_rows_and_rho():
    inst = make_diamond()
    A, caps, names = inst.capacity
    assert A.shape == (len(names), inst.n_vars)
    row = names.index("b0")
    assert list(A[row]) == [1.0, 0.0, 2.0, 0.0]
    assert caps[row] == pytest.approx(0.999 * 5)
    lo = make_diamond(priorities=(0, 1), mode="leftover")
    A, caps, names = lo.capacity
    assert set(names) == {"a", "b", "c", "d"}


def test_leftover_mode_dependencies_go_high_to_low():
    from ncsynth.netmodel import dependency_graph
    g = dependency_graph(make_diamond(priorities=(0, 1), mode="leftover"))
    assert g.has_edge("a0", "a1") and not g.has_edge("a1", "a0")


def test_k_shortest_paths():
    servers = tuple(Server(n, RateLatency(10, 1), n) for n in "abcd")
    g = ServerGraph(servers, (("a", "b"), ("b", "d"), ("a", "c"), ("c", "d"), ("a", "d")))
    paths = k_shortest_paths(g, "a", "d", k=3)
    assert paths[0] == ("a", "d")
    assert sorted(paths[1:]) == [("a", "b", "d"), ("a", "c", "d")]
    assert k_shortest_paths(g, "d", "a") == []


def test_var_choice_roundtrip():
    inst = make_diamond(priorities=(0, 1))
    for v in range(inst.n_vars):
        i, j, k = inst.var_choice(v)
        vf = [x for x in inst.virtual_flows if x.var_id == v][0]
        assert (i, j, k) == (vf.flow_index, vf.alternative, vf.priority)
    assert inst.choice_of(inst.one_hot([3, 1])) == [3, 1]
    assert inst.n_combinations() == 16


@st.composite
def flow_structures(draw):
    """Random alternative and priority counts for a family of diamond-like flows."""
    n = draw(st.integers(1, 6))
    return [(draw(st.integers(1, 3)), draw(st.sampled_from([(0,), (0, 1), (1,)]))) for _ in range(n)]


@given(flow_structures())
def test_every_flow_is_one_contiguous_block(structure):
    names = "abcd"
    servers = tuple(Server(f"{n}{k}", RateLatency(10, 1), n, k) for n in names for k in (0, 1))
    g = ServerGraph(servers, (("a0", "b0"), ("b0", "d0"), ("a0", "c0"), ("c0", "d0"), ("a0", "d0")))
    all_paths = [("a0", "b0", "d0"), ("a0", "c0", "d0"), ("a0", "d0")]
    flows = tuple(Flow(f"f{i}", TokenBucket(0.1, 1), "a0", ("d0",), (tuple(all_paths[:n_alt]),), prios)
                  for i, (n_alt, prios) in enumerate(structure))
    inst = ProblemInstance(g, flows)
    blocks = {}
    for vf in inst.virtual_flows:
        blocks.setdefault(vf.flow_id, set()).add(vf.var_id)
    assert len(blocks) == len(flows)
    for i, f in enumerate(flows):
        ids = sorted(blocks[f.id])
        assert ids == list(inst.block(i))
        assert len(ids) == f.block_size
    p = inst.one_hot([0] * len(flows))
    sums = np.add.reduceat(p, inst.block_starts[:-1])
    assert np.all(sums == 1)
