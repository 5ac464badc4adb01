import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from ncsynth.netmodel import Flow, ProblemInstance, RateLatency, Server, ServerGraph, TokenBucket

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_tandem(cross_rate=2.0, cross_burst=2.0):
    """foi g(1,1) over s1 b(10,1) -> s2 b(5,1); cross flow at s1 only."""
    servers = (Server("s1", RateLatency(10, 1), "s1"), Server("s2", RateLatency(5, 1), "s2"))
    graph = ServerGraph(servers, (("s1", "s2"),))
    foi = Flow("foi", TokenBucket(1, 1), "s1", ("s2",), ((("s1", "s2"),),))
    cross = Flow("cross", TokenBucket(cross_rate, cross_burst), "s1", ("s1",), ((("s1",),),))
    return ProblemInstance(graph, (foi, cross))


def make_diamond(rates=(1.0, 2.0), bursts=(1.0, 2.0), priorities=(0,), mode="independent"):
    """a -> {b, c} -> d; every flow may take the upper or the lower branch."""
    curves = {"a": (10, 1), "b": (5, 1), "c": (8, 0.5), "d": (20, 0.1)}
    servers = []
    levels = sorted(set(priorities))
    for name, (R, L) in curves.items():
        for k in levels:
            servers.append(Server(f"{name}{k}", RateLatency(R, L * (1 + k)) if mode == "independent"
                                  else RateLatency(R, L), name, k))
    graph = ServerGraph(tuple(servers), (("a0", "b0"), ("a0", "c0"), ("b0", "d0"), ("c0", "d0")))
    flows = tuple(Flow(f"f{i}", TokenBucket(r, b), "a0", ("d0",), ((("a0", "b0", "d0"), ("a0", "c0", "d0")),),
                       tuple(levels)) for i, (r, b) in enumerate(zip(rates, bursts)))
    return ProblemInstance(graph, flows, priority_mode=mode)


@pytest.fixture
def tandem():
    return make_tandem()


@pytest.fixture
def diamond():
    return make_diamond()


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
