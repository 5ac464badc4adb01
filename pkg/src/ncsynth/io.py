"""JSON instance and result files (strict: unknown fields are rejected)."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .netmodel import (PRIORITY_MODES, Flow, InstanceError, ProblemInstance, RateLatency, Server,
                       ServerGraph, TokenBucket, check)

FORMAT_VERSION = 1

_TOP = {"version", "servers", "edges", "flows", "options"}
_SERVER = {"id", "port", "priority_level", "rate", "latency"}
_FLOW = {"id", "rate", "burst", "source", "destinations", "candidate_paths", "allowed_priorities", "deadline"}
_OPTIONS = {"utilization_cap", "priority_mode"}


def _strict(obj: Any, allowed: set[str], where: str, required: set[str] = frozenset()) -> Mapping:
    if not isinstance(obj, dict):
        raise InstanceError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise InstanceError(f"{where}: unknown field {unknown[0]!r}")
    missing = sorted(required - set(obj))
    if missing:
        raise InstanceError(f"{where}: missing field {missing[0]!r}")
    return obj


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise InstanceError(f"{where}: expected a finite number, got {v!r}")
    return float(v)


def _paths(raw, n_dest: int, where: str) -> tuple:
    if not isinstance(raw, list) or not raw:
        raise InstanceError(f"{where}: candidate_paths must be a non-empty list")
    # a flat list of paths is accepted for single-destination flows
    if all(isinstance(p, list) and all(isinstance(s, str) for s in p) for p in raw):
        if n_dest != 1:
            raise InstanceError(f"{where}: candidate_paths must be grouped per destination")
        raw = [raw]
    out = []
    for group in raw:
        if not isinstance(group, list):
            raise InstanceError(f"{where}: malformed candidate_paths")
        paths = []
        for p in group:
            if not isinstance(p, list) or not all(isinstance(s, str) for s in p):
                raise InstanceError(f"{where}: a path must be a list of server ids")
            paths.append(tuple(p))
        out.append(tuple(paths))
    return tuple(out)


def instance_from_dict(doc: Mapping) -> ProblemInstance:
    """Parse and validate; raises :class:`InstanceError` with every problem found."""
    _strict(doc, _TOP, "instance", {"version", "servers", "flows"})
    if doc["version"] != FORMAT_VERSION:
        raise InstanceError(f"unsupported format version {doc['version']!r} (expected {FORMAT_VERSION})")
    servers = []
    for n, s in enumerate(doc["servers"]):
        where = f"servers[{n}]"
        _strict(s, _SERVER, where, {"id", "rate", "latency"})
        try:
            curve = RateLatency(_number(s["rate"], where), _number(s["latency"], where))
        except ValueError as exc:
            raise InstanceError(f"{where}: {exc}") from None
        level = s.get("priority_level", 0)
        if isinstance(level, bool) or not isinstance(level, int):
            raise InstanceError(f"{where}: priority_level must be an integer")
        servers.append(Server(str(s["id"]), curve, str(s.get("port", s["id"])), level))
    edges = []
    for n, e in enumerate(doc.get("edges", [])):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, str) for v in e)):
            raise InstanceError(f"edges[{n}]: expected [from, to]")
        edges.append((e[0], e[1]))
    flows = []
    for n, f in enumerate(doc["flows"]):
        where = f"flows[{n}]"
        _strict(f, _FLOW, where, {"id", "rate", "burst", "source", "destinations", "candidate_paths"})
        try:
            arrival = TokenBucket(_number(f["rate"], where), _number(f["burst"], where))
        except ValueError as exc:
            raise InstanceError(f"{where}: {exc}") from None
        dests = f["destinations"]
        if isinstance(dests, str):
            dests = [dests]
        prios = f.get("allowed_priorities", [0])
        if not isinstance(prios, list) or not all(isinstance(k, int) and not isinstance(k, bool) for k in prios):
            raise InstanceError(f"{where}: allowed_priorities must be a list of integers")
        deadline = f.get("deadline")
        flows.append(Flow(str(f["id"]), arrival, str(f["source"]), tuple(dests),
                          _paths(f["candidate_paths"], len(dests), where), tuple(prios),
                          None if deadline is None else _number(deadline, where)))
    opts = _strict(doc.get("options", {}), _OPTIONS, "options")
    cap = _number(opts.get("utilization_cap", 0.999), "options")
    mode = opts.get("priority_mode", "independent")
    if mode not in PRIORITY_MODES:
        raise InstanceError(f"options: unknown priority_mode {mode!r}")
    inst = ProblemInstance(ServerGraph(tuple(servers), tuple(edges)), tuple(flows), cap, mode)
    return check(inst)


def instance_to_dict(inst: ProblemInstance) -> dict:
    flows = []
    for f in inst.flows:
        d = {"id": f.id, "rate": f.arrival.rate, "burst": f.arrival.burst, "source": f.source,
             "destinations": list(f.destinations),
             "candidate_paths": [[list(p) for p in group] for group in f.candidate_paths],
             "allowed_priorities": list(f.allowed_priorities)}
        if f.deadline is not None:
            d["deadline"] = f.deadline
        flows.append(d)
    return {
        "version": FORMAT_VERSION,
        "servers": [{"id": s.id, "port": s.port, "priority_level": s.priority_level,
                     "rate": s.service.rate, "latency": s.service.latency} for s in inst.graph.servers],
        "edges": [list(e) for e in inst.graph.edges],
        "flows": flows,
        "options": {"utilization_cap": inst.utilization_cap, "priority_mode": inst.priority_mode},
    }


def dumps(doc: Mapping) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_instance(path: str | Path) -> ProblemInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{path}: not valid JSON ({exc})") from None
    return instance_from_dict(doc)


def save_instance(inst: ProblemInstance, path: str | Path) -> None:
    Path(path).write_text(dumps(instance_to_dict(inst)))


# -- results ----------------------------------------------------------------

def result_to_dict(inst: ProblemInstance, report, seed: Optional[int], options: Mapping,
                   timing: bool = False) -> dict:
    flows = []
    if report.assignment is not None:
        for i, (f, c) in enumerate(zip(inst.flows, inst.choice_of(report.assignment))):
            _, j, k = inst.var_choice(int(inst.block_starts[i]) + c)
            flows.append({"id": f.id, "alternative": j, "priority": k,
                          "delay_bound": report.flow_delays[i] if report.flow_delays else None})
    doc = {
        "version": FORMAT_VERSION,
        "method": report.method,
        "seed": seed,
        "options": dict(options),
        "flows": flows,
        "objective": _finite(report.objective),
        "verdict": report.verdict,
        "status": report.status,
        "iterations": report.iterations,
        "evaluations": report.evaluations,
        "trace": [_finite(v) for v in report.trace],
    }
    if timing:
        doc["wall_clock"] = report.wall_clock
    return doc


def _finite(v: float):
    return float(v) if math.isfinite(v) else None


def assignment_from_result(inst: ProblemInstance, doc: Mapping) -> np.ndarray:
    """One-hot assignment recorded in a result document."""
    by_id = {f["id"]: f for f in doc["flows"]}
    choice = []
    for i, f in enumerate(inst.flows):
        rec = by_id.get(f.id)
        if rec is None:
            raise InstanceError(f"result has no entry for flow {f.id}")
        choice.append(choice_index(inst, i, rec["alternative"], rec["priority"]))
    return inst.one_hot(choice)


def choice_index(inst: ProblemInstance, i: int, alternative: int, priority: Optional[int] = None) -> int:
    """Position inside flow ``i``'s block of (alternative, priority)."""
    f = inst.flows[i]
    prios = sorted(f.allowed_priorities)
    if priority is None:
        priority = prios[0]
    if not 0 <= alternative < f.n_alternatives:
        raise InstanceError(f"flow {f.id}: no alternative {alternative}")
    if priority not in prios:
        raise InstanceError(f"flow {f.id}: priority {priority} not allowed")
    return alternative * len(prios) + prios.index(priority)
