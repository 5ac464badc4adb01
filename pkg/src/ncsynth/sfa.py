"""Separated flow analysis over the virtual-flow model.

Every virtual flow enters cross traffic weighted by its selection variable.
Arrival bounds are kept *unscaled* per (var, server); scaling by ``p`` is
applied only where the traffic interferes with somebody else, so a flow's own
bound is computed as if it were selected.

Branches of one multicast choice share a var id and are counted once per
server; the first virtual flow (lowest index) reaching a server fixes which
upstream branch that server's arrival bound comes from.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import networkx as nx

from . import minplus as mp
from .minplus import Expr, SymRateLatency, SymTokenBucket
from .netmodel import ProblemInstance, VirtualFlow, dependency_graph


@dataclass(frozen=True)
class CrossTrafficBound:
    server: str
    vars: tuple[int, ...]
    arrivals: tuple[SymTokenBucket, ...]  # p-scaled, aligned with ``vars``


@dataclass(frozen=True)
class DelayTerm:
    vf: int
    expr: Expr

    @cached_property
    def var_ids(self) -> frozenset[int]:
        seen, found = set(), set()
        stack = [self.expr]
        while stack:
            node = stack.pop()
            if node.uid in seen:
                continue
            seen.add(node.uid)
            if node.op == "var":
                found.add(int(node.value))
            stack.extend(node.args)
        return frozenset(found)


class _Memo:
    """Concurrent map with at-most-once insertion; the first writer wins."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._data: dict = {}
        self._lock = threading.Lock()

    def get_or_compute(self, key, fn):
        if not self.enabled:
            return fn()
        try:
            return self._data[key]
        except KeyError:
            pass
        value = fn()
        with self._lock:
            return self._data.setdefault(key, value)


class Analysis:
    """Parameterised SFA of one problem instance.

    With ``memo=False`` every bound is re-derived by plain backtracking,
    which is exponential on deep networks and only meant for cross-checks.
    """

    def __init__(self, instance: ProblemInstance, memo: bool = True):
        self.instance = instance
        self.memo = memo
        self._bursts = _Memo(memo)
        self._tables = _Memo(memo)
        self._leftovers = _Memo(memo)
        self._services = _Memo(memo)
        vfs = instance.virtual_flows
        # (var, server) -> upstream server on the first virtual flow of that var
        self._prev: dict[tuple[int, str], Optional[str]] = {}
        for vf in vfs:
            for pos, sid in enumerate(vf.path):
                self._prev.setdefault((vf.var_id, sid), vf.path[pos - 1] if pos else None)
        self._p = [mp.var(v) for v in range(instance.n_vars)]
        self._rates = instance.var_rates
        self._bursts0 = [instance.flows[instance.var_choice(v)[0]].arrival.burst
                         for v in range(instance.n_vars)] if instance.n_vars else []

    # -- arrival bounds ----------------------------------------------------

    def burst_at(self, var: int, server: str) -> Expr:
        """Unscaled burst of ``var``'s traffic on entering ``server``."""
        def compute():
            prev = self._prev[var, server]
            if prev is None:
                return mp.const(self._bursts0[var])
            lo = self.leftover_for(var, prev)
            return mp.deconvolve(SymTokenBucket.of(self._rates[var], self.burst_at(var, prev)), lo).burst
        return self._bursts.get_or_compute((var, server), compute)

    def arrival_at(self, vf: VirtualFlow, server: str) -> SymTokenBucket:
        """p-weighted arrival curve of ``vf`` at the input of ``server``."""
        if server not in vf.path:
            raise ValueError(f"server {server} not on path of virtual flow {vf.index}")
        unscaled = SymTokenBucket.of(self._rates[vf.var_id], self.burst_at(vf.var_id, server))
        return mp.scale(unscaled, self._p[vf.var_id])

    def cross_traffic(self, server: str) -> CrossTrafficBound:
        def compute():
            vars_ = tuple(self.instance.server_vars[server])
            arr = tuple(mp.scale(SymTokenBucket.of(self._rates[v], self.burst_at(v, server)), self._p[v])
                        for v in vars_)
            return CrossTrafficBound(server, vars_, arr)
        return self._tables.get_or_compute(("cross", server), compute)

    def _exclusive(self, server: str) -> dict[int, Optional[SymTokenBucket]]:
        def compute():
            ct = self.cross_traffic(server)
            rates = mp.exclusive_sums([a.rate for a in ct.arrivals])
            bursts = mp.exclusive_sums([a.burst for a in ct.arrivals])
            return {v: (None if r is None else SymTokenBucket(r, b))
                    for v, r, b in zip(ct.vars, rates, bursts)}
        return self._tables.get_or_compute(("excl", server), compute)

    def _others_naive(self, var: int, server: str) -> Optional[SymTokenBucket]:
        ct = self.cross_traffic(server)
        others = [a for v, a in zip(ct.vars, ct.arrivals) if v != var]
        if not others:
            return None
        return SymTokenBucket(mp.tree_sum([a.rate for a in others]), mp.tree_sum([a.burst for a in others]))

    # -- service -----------------------------------------------------------

    def service(self, server: str) -> SymRateLatency:
        """Service of a server before subtracting same-level cross traffic."""
        def compute():
            inst = self.instance
            s = inst.graph.by_id[server]
            if inst.priority_mode != "leftover":
                return SymRateLatency.from_curve(s.service)
            port_curve = SymRateLatency.from_curve(inst.graph.port_service(s.port))
            higher = [inst.graph.by_port_level[s.port, k].id for (port, k) in inst.graph.by_port_level
                      if port == s.port and k < s.priority_level]
            arrivals = [a for sid in sorted(higher) for a in self.cross_traffic(sid).arrivals]
            if not arrivals:
                return port_curve
            agg = SymTokenBucket(mp.tree_sum([a.rate for a in arrivals]),
                                 mp.tree_sum([a.burst for a in arrivals]))
            return mp.leftover(port_curve, agg)
        return self._services.get_or_compute(server, compute)

    def leftover_for(self, var: int, server: str) -> SymRateLatency:
        """Left-over service of ``server`` for ``var`` against all other vars there."""
        def compute():
            if self.memo:
                others = self._exclusive(server)[var]
            else:
                others = self._others_naive(var, server)
            if others is None:
                return self.service(server)
            return mp.leftover(self.service(server), others)
        return self._leftovers.get_or_compute((var, server), compute)

    # -- end-to-end --------------------------------------------------------

    def e2e_service(self, vf: VirtualFlow) -> SymRateLatency:
        curves = [self.leftover_for(vf.var_id, sid) for sid in vf.path]
        total = curves[0]
        for c in curves[1:]:
            total = mp.convolve(total, c)
        return total

    def e2e_delay(self, vf: VirtualFlow) -> DelayTerm:
        flow = self.instance.flows[vf.flow_index]
        own = SymTokenBucket.of(flow.arrival.rate, flow.arrival.burst)
        return DelayTerm(vf.index, mp.delay_bound(own, self.e2e_service(vf)))

    def prepare(self) -> None:
        """Build every per-server table in dependency order (keeps recursion shallow)."""
        if not self.memo:
            return
        for sid in nx.topological_sort(dependency_graph(self.instance)):
            self.service(sid)
            for v in self.instance.server_vars[sid]:
                self.leftover_for(v, sid)


def e2e_delay(instance: ProblemInstance, vf: VirtualFlow) -> DelayTerm:
    return Analysis(instance).e2e_delay(vf)


def analyze_all(instance: ProblemInstance, tasks: int = 1, memo: bool = True,
                analysis: Optional[Analysis] = None) -> list[DelayTerm]:
    """One delay term per virtual flow, sharing memoised sub-expressions."""
    analysis = analysis or Analysis(instance, memo=memo)
    analysis.prepare()
    vfs = instance.virtual_flows
    if tasks <= 1 or len(vfs) < 2:
        return [analysis.e2e_delay(vf) for vf in vfs]
    with ThreadPoolExecutor(max_workers=tasks) as pool:
        return list(pool.map(analysis.e2e_delay, vfs))
