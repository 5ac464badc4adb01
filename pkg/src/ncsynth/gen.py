"""Random layered-DAG problem instances and the exhaustive-enumeration oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .netmodel import (Flow, ProblemInstance, RateLatency, Server, ServerGraph, TokenBucket,
                       fewest_hops_choice, k_shortest_paths, validate)


class GenerationError(RuntimeError):
    pass


class EnumerationError(ValueError):
    pass


Range = tuple[float, float]


@dataclass(frozen=True)
class GenSpec:
    """Parameters of the random instance generator (all ranges inclusive)."""
    ports: tuple[int, int] = (3, 18)
    layers: tuple[int, int] = (2, 4)
    edge_density: float = 0.5
    flows: tuple[int, int] = (3, 21)
    server_rate: Range = (50.0, 100.0)
    server_latency: Range = (0.001, 0.01)
    flow_rate: Range = (0.1, 1.0)
    flow_burst: Range = (0.1, 1.0)
    k: int = 3
    multipath_share: float = 0.5  # fraction of flows drawn among pairs with >= 2 routes
    priorities: int = 2
    target_utilization: Range = (0.2, 0.8)
    max_combinations: Optional[int] = None
    utilization_cap: float = 0.999
    priority_mode: str = "independent"
    seed: int = 0

    def __post_init__(self):
        for name in ("ports", "layers", "flows", "server_rate", "server_latency",
                     "flow_rate", "flow_burst", "target_utilization"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.ports[0] < 2:
            raise ValueError("need at least 2 ports")
        if self.layers[0] < 2:
            raise ValueError("need at least 2 layers")
        if self.flows[0] < 1:
            raise ValueError("need at least 1 flow")
        if self.k < 1 or self.priorities < 1:
            raise ValueError("k and priorities must be >= 1")
        if not 0 <= self.multipath_share <= 1:
            raise ValueError("multipath_share must lie in [0, 1]")
        if not 0 < self.edge_density <= 1:
            raise ValueError("edge_density must lie in (0, 1]")
        if not (0 < self.target_utilization[0] and self.target_utilization[1] < self.utilization_cap):
            raise ValueError("target utilization must lie inside (0, utilization_cap)")
        if self.server_rate[0] <= 0:
            raise ValueError("server rates must be > 0")


def _layered_dag(rng: np.random.Generator, spec: GenSpec) -> tuple[list[int], list[tuple[int, int]]]:
    n = int(rng.integers(spec.ports[0], spec.ports[1] + 1))
    n_layers = min(int(rng.integers(spec.layers[0], spec.layers[1] + 1)), n)
    layer = list(range(n_layers)) + [int(v) for v in rng.integers(0, n_layers, size=n - n_layers)]
    layer.sort()
    edges = set()
    by_layer = [[u for u in range(n) if layer[u] == i] for i in range(n_layers)]
    for u in range(n):
        for v in range(n):
            if layer[v] > layer[u] and rng.random() < spec.edge_density / (layer[v] - layer[u]):
                edges.add((u, v))
    # every port gets a link from the previous layer and to the next one
    for i in range(1, n_layers):
        for v in by_layer[i]:
            if not any((u, v) in edges for u in by_layer[i - 1]):
                edges.add((int(rng.choice(by_layer[i - 1])), v))
        for u in by_layer[i - 1]:
            if not any((u, v) in edges for v in by_layer[i]):
                edges.add((u, int(rng.choice(by_layer[i]))))
    return layer, sorted(edges)


def _draw(rng: np.random.Generator, spec: GenSpec) -> ProblemInstance:
    layer, port_edges = _layered_dag(rng, spec)
    n = len(layer)
    P = spec.priorities
    servers = []
    for u in range(n):
        R = float(rng.uniform(*spec.server_rate))
        L = float(rng.uniform(*spec.server_latency))
        for k in range(P):
            if spec.priority_mode == "leftover":
                curve = RateLatency(R, L)
            else:
                curve = RateLatency(R / P, L * (1 + k))
            servers.append(Server(f"p{u}.{k}", curve, f"p{u}", k))
    edges = tuple((f"p{u}.0", f"p{v}.0") for u, v in port_edges)
    graph = ServerGraph(tuple(servers), edges)
    succ: dict[int, set[int]] = {u: set() for u in range(n)}
    for u, v in port_edges:
        succ[u].add(v)
    reach = {}
    for u in sorted(range(n), key=lambda u: -layer[u]):
        reach[u] = set(succ[u]).union(*(reach[v] for v in succ[u])) if succ[u] else set()
    pairs = [(u, v) for u in range(n) for v in sorted(reach[u])]
    routes = {(u, v): k_shortest_paths(graph, f"p{u}.0", f"p{v}.0", spec.k) for u, v in pairs}
    multi = [pv for pv in pairs if len(routes[pv]) > 1]
    n_flows = int(rng.integers(spec.flows[0], spec.flows[1] + 1))
    flows = []
    for i in range(n_flows):
        pool = multi if multi and rng.random() < spec.multipath_share else pairs
        u, v = pool[int(rng.integers(len(pool)))]
        paths = routes[u, v]
        flows.append(Flow(f"f{i}", TokenBucket(float(rng.uniform(*spec.flow_rate)),
                                               float(rng.uniform(*spec.flow_burst))),
                          f"p{u}.0", (f"p{v}.0",), (tuple(paths),), tuple(range(P))))
    inst = ProblemInstance(graph, tuple(flows), spec.utilization_cap, spec.priority_mode)
    # rescale rates so that the fewest-hops placement hits the drawn peak utilisation
    A, caps, _ = inst.capacity
    peak = float(np.max((A @ inst.one_hot(fewest_hops_choice(inst))) / (caps / spec.utilization_cap)))
    target = float(rng.uniform(*spec.target_utilization))
    c = target / peak
    flows = tuple(Flow(f.id, TokenBucket(f.arrival.rate * c, f.arrival.burst), f.source, f.destinations,
                       f.candidate_paths, f.allowed_priorities, f.deadline) for f in flows)
    return ProblemInstance(graph, flows, spec.utilization_cap, spec.priority_mode)


def generate(spec: GenSpec, retries: int = 100) -> ProblemInstance:
    """Deterministic random instance for ``spec`` (retries rejected draws)."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(retries):
        inst = _draw(rng, spec)
        if spec.max_combinations is not None and inst.n_combinations() > spec.max_combinations:
            continue
        if not validate(inst):
            return inst
    raise GenerationError(f"no valid instance after {retries} draws (seed {spec.seed})")


def generate_dataset(spec: GenSpec, count: int) -> list[ProblemInstance]:
    base = spec.seed
    out = []
    for i in range(count):
        s = GenSpec(**{**spec.__dict__, "seed": base + i})
        out.append(generate(s))
    return out


# -- statistics ---------------------------------------------------------------

def stats(instance: ProblemInstance) -> dict[str, float]:
    """Size summary; combination counts are log10."""
    ports = instance.graph.ports
    return {
        "servers": len(ports),
        "priority_servers": len(instance.graph.servers),
        "flows": len(instance.flows),
        "virtual_flows": len(instance.virtual_flows),
        "path_alternatives": int(sum(f.n_alternatives for f in instance.flows)),
        "path_combinations_log10": float(sum(math.log10(f.n_alternatives) for f in instance.flows)),
        "combinations_log10": float(sum(math.log10(f.block_size) for f in instance.flows)),
    }


def dataset_stats(instances: Sequence[ProblemInstance]) -> dict[str, dict[str, float]]:
    """min / mean / median / max of every :func:`stats` field over a dataset."""
    rows = [stats(inst) for inst in instances]
    out = {}
    for key in rows[0] if rows else ():
        v = np.array([r[key] for r in rows], dtype=float)
        out[key] = {"min": float(v.min()), "mean": float(v.mean()),
                    "median": float(np.median(v)), "max": float(v.max())}
    return out


def format_stats(table: dict[str, dict[str, float]]) -> str:
    lines = [f"{'quantity':<26}{'min':>10}{'mean':>10}{'median':>10}{'max':>10}"]
    for key, row in table.items():
        lines.append(f"{key:<26}" + "".join(f"{row[c]:>10.3g}" for c in ("min", "mean", "median", "max")))
    return "\n".join(lines)


# -- enumeration oracle -----------------------------------------------------------

@dataclass
class Enumeration:
    choice: list[int]
    assignment: np.ndarray
    value: float
    evaluated: int
    feasible: int
    ranking: Optional[list[tuple[float, tuple[int, ...]]]] = None


def decode(indices: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Mixed-radix digits (first flow most significant) of combination indices."""
    out = np.empty((len(indices), len(sizes)), dtype=np.int64)
    rem = np.asarray(indices, dtype=np.int64).copy()
    for i in range(len(sizes) - 1, -1, -1):
        out[:, i] = rem % sizes[i]
        rem //= sizes[i]
    return out


def enumerate_optimum(objective, limit: int = 10**6, ranking: bool = False,
                      chunk: int = 4096) -> Enumeration:
    """Evaluate every integral combination; minimum over the feasible ones.

    Ties go to the lowest combination index, so the reduction is deterministic.
    """
    inst = objective.instance
    sizes = [f.block_size for f in inst.flows]
    total = inst.n_combinations()
    if total > limit:
        raise EnumerationError(f"{total} combinations exceed the limit {limit}")
    A, caps, _ = inst.capacity
    best_value, best_index = math.inf, -1
    n_feasible = 0
    ranked = []
    starts = inst.block_starts[:-1]
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk))
        digits = decode(idx, sizes)
        X = np.zeros((inst.n_vars, len(idx)))
        cols = np.arange(len(idx))
        for i, s in enumerate(starts):
            X[s + digits[:, i], cols] = 1.0
        ok = np.all(A @ X <= (caps * (1 + 1e-12))[:, None], axis=0) if len(caps) else np.ones(len(idx), bool)
        if not ok.any():
            continue
        out = objective.batch(X[:, ok])
        good = out[2] <= 1e-12 * np.maximum(1.0, np.abs(out[0]))
        values = out[0][good]
        kept = idx[ok][good]
        n_feasible += len(kept)
        if len(values):
            j = int(np.argmin(values))
            if values[j] < best_value:
                best_value, best_index = float(values[j]), int(kept[j])
        if ranking:
            ranked.extend((float(v), tuple(int(d) for d in decode(np.array([k]), sizes)[0]))
                          for v, k in zip(values, kept))
    if best_index < 0:
        raise EnumerationError("no feasible combination")
    choice = [int(d) for d in decode(np.array([best_index]), sizes)[0]]
    if ranking:
        ranked.sort(key=lambda t: t[0])
    return Enumeration(choice, inst.one_hot(choice), best_value, total, n_feasible,
                       ranked if ranking else None)
