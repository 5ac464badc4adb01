"""Server graphs, flows, and the virtual-flow expansion of a synthesis problem.

A *port* is a physical output queue. Each port is split into one server per
priority level; a candidate path is written with server ids of any level and
is re-mapped onto the level chosen for the virtual flow.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import networkx as nx
import numpy as np

PRIORITY_MODES = ("independent", "leftover")


class InstanceError(ValueError):
    """Raised when a problem instance is malformed or infeasible."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RateLatency:
    rate: float
    latency: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"service rate must be > 0, got {self.rate}")
        if not self.latency >= 0:
            raise ValueError(f"service latency must be >= 0, got {self.latency}")

    def __call__(self, t):
        return self.rate * np.maximum(np.asarray(t, dtype=float) - self.latency, 0.0)


@dataclass(frozen=True)
class TokenBucket:
    rate: float
    burst: float

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"arrival rate must be >= 0, got {self.rate}")
        if not self.burst >= 0:
            raise ValueError(f"arrival burst must be >= 0, got {self.burst}")

    def __call__(self, t):
        # 0 on t <= 0, B + r t afterwards
        t = np.asarray(t, dtype=float)
        return np.where(t > 0, self.burst + self.rate * t, 0.0)


NULL_CURVE = TokenBucket(0.0, 0.0)


@dataclass(frozen=True)
class Server:
    id: str
    service: RateLatency
    port: str
    priority_level: int = 0


@dataclass(frozen=True)
class ServerGraph:
    servers: tuple[Server, ...]
    edges: tuple[tuple[str, str], ...] = ()

    @cached_property
    def by_id(self) -> dict[str, Server]:
        return {s.id: s for s in self.servers}

    @cached_property
    def by_port_level(self) -> dict[tuple[str, int], Server]:
        return {(s.port, s.priority_level): s for s in self.servers}

    @cached_property
    def port_links(self) -> set[tuple[str, str]]:
        by_id = self.by_id
        return {(by_id[a].port, by_id[b].port) for a, b in self.edges
                if a in by_id and b in by_id}

    @cached_property
    def ports(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(s.port for s in self.servers))

    def port_service(self, port: str) -> RateLatency:
        """Curve of the whole port: the one configured on its lowest level."""
        level = min(s.priority_level for s in self.servers if s.port == port)
        return self.by_port_level[port, level].service

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(s.id for s in self.servers)
        g.add_edges_from(self.edges)
        return g


@dataclass(frozen=True)
class Flow:
    id: str
    arrival: TokenBucket
    source: str
    destinations: tuple[str, ...]
    # candidate_paths[d][j]: path alternative j towards destination d
    candidate_paths: tuple[tuple[tuple[str, ...], ...], ...]
    allowed_priorities: tuple[int, ...] = (0,)
    deadline: Optional[float] = None

    @property
    def n_alternatives(self) -> int:
        return len(self.candidate_paths[0]) if self.candidate_paths else 0

    @property
    def is_multicast(self) -> bool:
        return len(self.destinations) > 1

    @property
    def block_size(self) -> int:
        return self.n_alternatives * len(self.allowed_priorities)


@dataclass(frozen=True)
class VirtualFlow:
    index: int
    flow_index: int
    flow_id: str
    alternative: int
    priority: int
    destination: int
    path: tuple[str, ...]
    var_id: int


def _mapped_path(graph: ServerGraph, path: Sequence[str], level: int, flow_id: str) -> tuple[str, ...]:
    out = []
    for sid in path:
        if sid not in graph.by_id:
            raise InstanceError(f"flow {flow_id}: path references unknown server {sid!r}")
        port = graph.by_id[sid].port
        server = graph.by_port_level.get((port, level))
        if server is None:
            raise InstanceError(
                f"flow {flow_id}: priority level {level} absent at port {port!r}")
        out.append(server.id)
    return tuple(out)


def multicast_to_unicast(flow: Flow, graph: ServerGraph, first_var: int = 0,
                         flow_index: int = 0, first_index: int = 0) -> list[VirtualFlow]:
    """One unicast virtual flow per (destination, alternative, priority).

    All destinations of one (alternative, priority) choice share a var_id.
    """
    if not flow.candidate_paths or len(flow.candidate_paths) != len(flow.destinations):
        raise InstanceError(f"flow {flow.id}: need one candidate path group per destination")
    counts = {len(group) for group in flow.candidate_paths}
    if 0 in counts:
        raise InstanceError(f"flow {flow.id}: no path to some destination")
    if len(counts) != 1:
        raise InstanceError(
            f"flow {flow.id}: every destination needs the same number of path alternatives")
    vfs = []
    var = first_var
    index = first_index
    for j in range(flow.n_alternatives):
        for k in sorted(flow.allowed_priorities):
            for d, group in enumerate(flow.candidate_paths):
                path = _mapped_path(graph, group[j], k, flow.id)
                vfs.append(VirtualFlow(index, flow_index, flow.id, j, k, d, path, var))
                index += 1
            var += 1
    return vfs


def expand_virtual_flows(flows: Sequence[Flow], graph: ServerGraph) -> list[VirtualFlow]:
    """Cartesian expansion of every flow over its path alternatives and priorities."""
    vfs: list[VirtualFlow] = []
    var = 0
    for i, flow in enumerate(flows):
        if not flow.allowed_priorities:
            raise InstanceError(f"flow {flow.id}: no allowed priority")
        new = multicast_to_unicast(flow, graph, var, i, len(vfs))
        vfs.extend(new)
        var += flow.block_size
    return vfs


@dataclass(frozen=True)
class ProblemInstance:
    graph: ServerGraph
    flows: tuple[Flow, ...]
    utilization_cap: float = 0.999
    priority_mode: str = "independent"

    @cached_property
    def virtual_flows(self) -> tuple[VirtualFlow, ...]:
        return tuple(expand_virtual_flows(self.flows, self.graph))

    @cached_property
    def block_starts(self) -> np.ndarray:
        """Offsets of each flow's simplex block; var ids are contiguous per flow."""
        sizes = [f.block_size for f in self.flows]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_vars(self) -> int:
        return int(self.block_starts[-1])

    def block(self, i: int) -> range:
        return range(int(self.block_starts[i]), int(self.block_starts[i + 1]))

    def var_choice(self, var: int) -> tuple[int, int, int]:
        """(flow index, alternative, priority) selected by a var id."""
        i = int(np.searchsorted(self.block_starts, var, side="right") - 1)
        flow = self.flows[i]
        local = var - int(self.block_starts[i])
        prios = sorted(flow.allowed_priorities)
        return i, local // len(prios), prios[local % len(prios)]

    @cached_property
    def var_rates(self) -> np.ndarray:
        rates = np.empty(self.n_vars)
        for i, flow in enumerate(self.flows):
            rates[self.block_starts[i]:self.block_starts[i + 1]] = flow.arrival.rate
        return rates

    @cached_property
    def server_vars(self) -> dict[str, list[int]]:
        """Var ids crossing each server, multicast branches counted once."""
        out: dict[str, list[int]] = {s.id: [] for s in self.graph.servers}
        for vf in self.virtual_flows:
            for sid in vf.path:
                lst = out[sid]
                if vf.var_id not in lst:
                    lst.append(vf.var_id)
        return out

    @cached_property
    def capacity(self) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
        """Linear capacity constraints ``A @ p <= caps``.

        One row per server, or per port when lower levels borrow from the
        port curve (leftover priority mode).
        """
        rho = self.utilization_cap
        if self.priority_mode == "leftover":
            names = self.graph.ports
            caps = np.array([rho * self.graph.port_service(p).rate for p in names])
            row = {p: n for n, p in enumerate(names)}
            key = lambda s: row[s.port]  # noqa: E731
        else:
            names = tuple(s.id for s in self.graph.servers)
            caps = np.array([rho * s.service.rate for s in self.graph.servers])
            row = {sid: n for n, sid in enumerate(names)}
            key = lambda s: row[s.id]  # noqa: E731
        A = np.zeros((len(names), self.n_vars))
        rates = self.var_rates
        for sid, vars_ in self.server_vars.items():
            r = key(self.graph.by_id[sid])
            for v in vars_:
                A[r, v] = rates[v]
        return A, caps, names

    def loads(self, p: np.ndarray) -> np.ndarray:
        A, _, _ = self.capacity
        return A @ np.asarray(p, dtype=float)

    def is_capacity_feasible(self, p: np.ndarray, tol: float = 1e-12) -> np.ndarray | bool:
        A, caps, _ = self.capacity
        loads = A @ np.asarray(p, dtype=float)
        limit = caps + tol * np.maximum(caps, 1.0)
        if loads.ndim == 2:
            limit = limit[:, None]
        return (loads <= limit).all(axis=0)

    def one_hot(self, choice: Sequence[int]) -> np.ndarray:
        """Integral assignment from a per-flow local index into each block."""
        p = np.zeros(self.n_vars)
        for i, c in enumerate(choice):
            if not 0 <= c < self.flows[i].block_size:
                raise IndexError(f"choice {c} out of range for flow {self.flows[i].id}")
            p[self.block_starts[i] + c] = 1.0
        return p

    def choice_of(self, p: np.ndarray) -> list[int]:
        """Per-flow argmax, ties to the lowest var id."""
        return [int(np.argmax(p[self.block_starts[i]:self.block_starts[i + 1]]))
                for i in range(len(self.flows))]

    def n_combinations(self) -> int:
        return int(np.prod([f.block_size for f in self.flows], dtype=object)) if self.flows else 1


def greedy_witness(instance: ProblemInstance) -> Optional[list[int]]:
    """Largest-rate-first placement minimising peak utilisation; None if it overloads."""
    A, caps, _ = instance.capacity
    loads = np.zeros(len(caps))
    choice = [0] * len(instance.flows)
    order = sorted(range(len(instance.flows)), key=lambda i: (-instance.flows[i].arrival.rate, i))
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in order:
            start = int(instance.block_starts[i])
            best, best_peak = 0, np.inf
            for c in range(instance.flows[i].block_size):
                trial = loads + A[:, start + c]
                peak = np.max(trial / caps) if len(caps) else 0.0
                if peak < best_peak - 1e-15:
                    best, best_peak = c, peak
            choice[i] = best
            loads += A[:, start + best]
    if np.all(loads <= caps * (1 + 1e-12)):
        return choice
    return None


def fewest_hops_choice(instance: ProblemInstance) -> list[int]:
    """Per flow, the alternative with fewest servers; ties to the lowest index and the highest priority."""
    choice = []
    for f in instance.flows:
        hops = [sum(len(group[j]) for group in f.candidate_paths) for j in range(f.n_alternatives)]
        choice.append(int(np.argmin(hops)) * len(f.allowed_priorities))
    return choice


def feasible_witness(instance: ProblemInstance) -> Optional[list[int]]:
    """A capacity-feasible integral choice (greedy first, then fewest hops), or None."""
    choice = greedy_witness(instance)
    if choice is not None:
        return choice
    choice = fewest_hops_choice(instance)
    return choice if instance.is_capacity_feasible(instance.one_hot(choice)) else None


def dependency_graph(instance: ProblemInstance) -> nx.DiGraph:
    """Server-level dependencies induced by all virtual flows."""
    g = nx.DiGraph()
    for vf in instance.virtual_flows:
        g.add_nodes_from(vf.path)
        g.add_edges_from(zip(vf.path, vf.path[1:]))
    if instance.priority_mode == "leftover":
        levels: dict[str, list[Server]] = {}
        for s in instance.graph.servers:
            levels.setdefault(s.port, []).append(s)
        for servers in levels.values():
            servers.sort(key=lambda s: s.priority_level)
            for hi, lo in itertools.combinations(servers, 2):
                if hi.priority_level < lo.priority_level:
                    g.add_edge(hi.id, lo.id)
    return g


def _structural_errors(instance: ProblemInstance) -> list[str]:
    errors = []
    graph = instance.graph
    if not 0 < instance.utilization_cap <= 1:
        errors.append(f"utilization cap must lie in (0,1], got {instance.utilization_cap}")
    if instance.priority_mode not in PRIORITY_MODES:
        errors.append(f"unknown priority mode {instance.priority_mode!r}")
    ids = [s.id for s in graph.servers]
    if len(set(ids)) != len(ids):
        errors.append("duplicate server ids")
    pl = [(s.port, s.priority_level) for s in graph.servers]
    if len(set(pl)) != len(pl):
        errors.append("duplicate (port, priority_level) pairs")
    for s in graph.servers:
        if s.priority_level < 0:
            errors.append(f"server {s.id}: negative priority level")
    for a, b in graph.edges:
        for sid in (a, b):
            if sid not in graph.by_id:
                errors.append(f"edge ({a}, {b}) references unknown server {sid!r}")
    flow_ids = [f.id for f in instance.flows]
    if len(set(flow_ids)) != len(flow_ids):
        errors.append("duplicate flow ids")
    links = graph.port_links
    for f in instance.flows:
        if f.deadline is not None and not f.deadline > 0:
            errors.append(f"flow {f.id}: deadline must be > 0")
        if not f.destinations:
            errors.append(f"flow {f.id}: no destination")
        if not f.allowed_priorities:
            errors.append(f"flow {f.id}: no allowed priority")
        for sid in (f.source, *f.destinations):
            if sid not in graph.by_id:
                errors.append(f"flow {f.id}: unknown server {sid!r}")
        if len(f.candidate_paths) != len(f.destinations):
            errors.append(f"flow {f.id}: need one candidate path group per destination")
            continue
        for d, group in enumerate(f.candidate_paths):
            if not group:
                errors.append(f"flow {f.id}: no path to destination {f.destinations[d]}")
            if len(set(group)) != len(group):
                errors.append(f"flow {f.id}: duplicate candidate paths")
            for path in group:
                missing = [sid for sid in path if sid not in graph.by_id]
                if missing:
                    errors.append(f"flow {f.id}: path references unknown server {missing[0]!r}")
                    continue
                if not path:
                    errors.append(f"flow {f.id}: empty path")
                    continue
                ports = [graph.by_id[sid].port for sid in path]
                for a, b in zip(ports, ports[1:]):
                    if (a, b) not in links:
                        errors.append(f"flow {f.id}: disconnected path, no link {a}->{b}")
                src, dst = f.source, f.destinations[d]
                if src in graph.by_id and ports[0] != graph.by_id[src].port:
                    errors.append(f"flow {f.id}: path does not start at source {src}")
                if dst in graph.by_id and ports[-1] != graph.by_id[dst].port:
                    errors.append(f"flow {f.id}: path does not end at destination {dst}")
                for k in f.allowed_priorities:
                    for port in ports:
                        if (port, k) not in graph.by_port_level:
                            errors.append(f"flow {f.id}: priority level {k} absent at port {port!r}")
                            break
        if len({len(g) for g in f.candidate_paths}) > 1:
            errors.append(f"flow {f.id}: every destination needs the same number of path alternatives")
    return sorted(set(errors), key=errors.index)


def validate(instance: ProblemInstance) -> list[str]:
    """All problems found in ``instance``; an empty list means it is usable."""
    errors = _structural_errors(instance)
    if errors:
        return errors
    try:
        instance.virtual_flows
    except InstanceError as exc:
        return exc.errors
    dep = dependency_graph(instance)
    if not nx.is_directed_acyclic_graph(dep):
        cycle = nx.find_cycle(dep)
        return [f"cycle among candidate paths: {' -> '.join(a for a, _ in cycle)}"]
    if feasible_witness(instance) is None:
        errors.append("no feasible witness: every tried placement overloads a server")
    return errors


def check(instance: ProblemInstance) -> ProblemInstance:
    errors = validate(instance)
    if errors:
        raise InstanceError(errors)
    return instance


def k_shortest_paths(graph: ServerGraph, source: str, target: str, k: int = 3) -> list[tuple[str, ...]]:
    """Up to ``k`` loop-free hop-count shortest paths (Yen's algorithm)."""
    g = graph.digraph()
    try:
        gen = nx.shortest_simple_paths(g, source, target)
        return [tuple(p) for p in itertools.islice(gen, k)]
    except nx.NetworkXNoPath:
        return []


def with_cap(instance: ProblemInstance, rho: float) -> ProblemInstance:
    return ProblemInstance(instance.graph, instance.flows, rho, instance.priority_mode)


__all__ = [
    "InstanceError", "RateLatency", "TokenBucket", "NULL_CURVE", "Server", "ServerGraph", "Flow",
    "VirtualFlow", "ProblemInstance", "expand_virtual_flows", "multicast_to_unicast",
    "validate", "check", "greedy_witness", "feasible_witness", "fewest_hops_choice", "dependency_graph", "k_shortest_paths", "with_cap",
]
