"""Frank-Wolfe over products of simplices, rounding, and baseline heuristics.

Optimizers work on any problem object exposing ``block_starts``,
``n_vars``, ``penalized(x)``, ``value_and_grad(x)`` and ``calibrate(x)``;
the rounding step additionally needs a :class:`CompiledObjective`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .minplus import StabilityError
from .netmodel import ProblemInstance, feasible_witness, fewest_hops_choice

METHODS = ("frank-wolfe", "frank-wolfe-momentum", "random", "sp-hops", "sp-mindelay", "nelder-mead")
STOCHASTIC = frozenset({"frank-wolfe", "frank-wolfe-momentum", "random", "nelder-mead"})


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimizerReport:
    method: str
    relaxed: Optional[np.ndarray] = None
    assignment: Optional[np.ndarray] = None
    objective: float = math.nan
    relaxed_value: float = math.nan
    feasible: bool = False
    verdict: str = "not evaluated"
    trace: list[float] = field(default_factory=list)
    flow_delays: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    evaluations: int = 0
    iterations: int = 0
    status: str = "ok"
    polytope_violation: float = 0.0


@dataclass(frozen=True)
class FWOptions:
    max_iter: int = 500
    tol: float = 1e-6
    momentum: bool = False
    max_halvings: int = 20


# -- simplex blocks -------------------------------------------------------

def _blocks(problem) -> list[tuple[int, int]]:
    starts = problem.block_starts
    return [(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]


def random_start(problem, seed: int) -> np.ndarray:
    """Uniform point on each flow's simplex (normalised exponentials)."""
    rng = np.random.default_rng(seed)
    x = np.empty(int(problem.block_starts[-1]))
    for a, b in _blocks(problem):
        e = rng.exponential(size=b - a)
        x[a:b] = e / e.sum()
    return x


def lmo(gradient: np.ndarray, problem) -> np.ndarray:
    """Vertex of the product of simplices minimising ``<gradient, s>``; ties to the lowest var."""
    s = np.zeros_like(gradient, dtype=float)
    for a, b in _blocks(problem):
        s[a + int(np.argmin(gradient[a:b]))] = 1.0
    return s


def polytope_violation(x: np.ndarray, problem) -> float:
    worst = 0.0
    for a, b in _blocks(problem):
        worst = max(worst, abs(float(x[a:b].sum()) - 1.0))
    if len(x):
        worst = max(worst, float(-x.min()), float(x.max() - 1.0))
    return worst


def project_blocks(x: np.ndarray, problem) -> np.ndarray:
    """Clamp to [0, 1] and rescale each block to sum 1."""
    y = np.clip(x, 0.0, 1.0)
    for a, b in _blocks(problem):
        s = y[a:b].sum()
        y[a:b] = y[a:b] / s if s > 0 else 1.0 / (b - a)
    return y


def _witness(instance: ProblemInstance) -> Optional[np.ndarray]:
    choice = feasible_witness(instance)
    return None if choice is None else instance.one_hot(choice)


def ensure_stable(problem, x: np.ndarray, max_steps: int = 40) -> np.ndarray:
    """Pull ``x`` toward a capacity-feasible vertex until every bound is defined."""
    instance = getattr(problem, "instance", None)
    if instance is None or problem.is_stable(x):
        return x
    w = _witness(instance)
    if w is None:
        raise OptimizationError("no stable starting point: no feasible witness")
    for _ in range(max_steps):
        x = 0.5 * (x + w)
        if problem.is_stable(x):
            return x
    return w


# -- rounding ---------------------------------------------------------------

def _flow_bound(objective, p: np.ndarray, i: int) -> float:
    try:
        return float(objective.outputs(p)[3 + i])
    except StabilityError:
        return math.inf


def round_and_repair(x: np.ndarray, objective) -> tuple[np.ndarray, str]:
    """Per-flow argmax, then move load off overloaded servers.

    Returns the integral assignment and the verification verdict.
    """
    inst = objective.instance
    A, caps, _ = inst.capacity
    starts = inst.block_starts
    choice = inst.choice_of(x)
    p = inst.one_hot(choice)
    limit = caps * (1 + 1e-12)
    for _ in range(max(1, len(inst.flows))):
        loads = A @ p
        over = np.flatnonzero(loads > limit)
        if not len(over):
            break
        moved = False
        for g in over[np.argsort(-(loads[over] / caps[over]), kind="stable")]:
            loads = A @ p
            if loads[g] <= limit[g]:
                continue
            users = [i for i in range(len(inst.flows)) if A[g, starts[i] + choice[i]] > 0]
            users.sort(key=lambda i: (-A[g, starts[i] + choice[i]], i))
            for i in users:
                cur = A[g, starts[i] + choice[i]]
                options = [c for c in range(inst.flows[i].block_size)
                           if c != choice[i] and A[g, starts[i] + c] < cur]
                if not options:
                    continue
                scored = []
                for c in options:
                    q = p.copy()
                    q[starts[i] + choice[i]] = 0.0
                    q[starts[i] + c] = 1.0
                    new_over = bool(np.any((A @ q > limit) & ~(loads > limit)))
                    scored.append((new_over, _flow_bound(objective, q, i), c))
                _, _, best = min(scored)
                p[starts[i] + choice[i]] = 0.0
                p[starts[i] + best] = 1.0
                choice[i] = best
                moved = True
                break
        if not moved:
            break
    feasible, verdict = objective.feasible(p)
    return p, verdict


# -- reports -----------------------------------------------------------------

def _finish(objective, report: OptimizerReport, relaxed: Optional[np.ndarray],
            t0: float, evals0: int, assignment: Optional[np.ndarray] = None) -> OptimizerReport:
    report.relaxed = relaxed
    if getattr(objective, "instance", None) is not None:
        if assignment is None and relaxed is not None:
            assignment, verdict = round_and_repair(relaxed, objective)
        elif assignment is not None:
            _, verdict = objective.feasible(assignment)
        else:
            verdict = "no assignment"
        report.assignment = assignment
        report.verdict = verdict
        report.feasible = verdict == "feasible"
        if assignment is not None:
            try:
                out = objective.outputs(assignment)
                report.objective = float(out[0])
                report.flow_delays = [float(v) for v in out[3:]]
            except StabilityError:
                report.objective = math.inf
    report.evaluations = objective.evaluations - evals0
    report.wall_clock = time.perf_counter() - t0
    return report


# -- Frank-Wolfe ---------------------------------------------------------------

def step_size(k: int) -> float:
    return 1.0 / math.sqrt(k + 1)


def frank_wolfe(objective, start: Optional[np.ndarray] = None, opts: FWOptions = FWOptions(),
                seed: int = 0) -> OptimizerReport:
    """Frank-Wolfe with step 1/sqrt(k+1); keeps the best iterate seen."""
    t0 = time.perf_counter()
    evals0 = getattr(objective, "evaluations", 0)
    name = "frank-wolfe-momentum" if opts.momentum else "frank-wolfe"
    report = OptimizerReport(name)
    x = random_start(objective, seed) if start is None else np.array(start, dtype=float)
    x = ensure_stable(objective, x)
    objective.calibrate(x)
    f, g = objective.value_and_grad(x)
    best_f, best_x = f, x.copy()
    report.polytope_violation = polytope_violation(x, objective)
    m = None
    k = 0
    for k in range(opts.max_iter):
        if opts.momentum:
            gamma = 2.0 / (k + 2)
            m = g.copy() if m is None else (1 - gamma) * m + gamma * g
            direction = m
        else:
            direction = g
        s = lmo(direction, objective)
        # duality gap uses the true gradient for both variants
        gap = float(g @ (x - (lmo(g, objective) if opts.momentum else s)))
        if gap < opts.tol:
            report.status = "converged"
            break
        delta = step_size(k)
        for _ in range(opts.max_halvings + 1):
            x_new = (1 - delta) * x + delta * s
            try:
                f_new, g_new = objective.value_and_grad(x_new)
                break
            except StabilityError:
                delta *= 0.5
        else:
            report.status = f"aborted: stability violated at iteration {k} after {opts.max_halvings} step halvings"
            break
        x, f, g = x_new, f_new, g_new
        report.polytope_violation = max(report.polytope_violation, polytope_violation(x, objective))
        if f < best_f:
            best_f, best_x = f, x.copy()
        report.trace.append(best_f)
    report.iterations = len(report.trace)
    report.relaxed_value = best_f
    return _finish(objective, report, best_x, t0, evals0)


def frank_wolfe_momentum(objective, start: Optional[np.ndarray] = None,
                         opts: FWOptions = FWOptions(), seed: int = 0) -> OptimizerReport:
    """Momentum variant: the LMO sees m_k = (1 - g_k) m_{k-1} + g_k grad, g_k = 2/(k+2)."""
    opts = FWOptions(opts.max_iter, opts.tol, True, opts.max_halvings)
    return frank_wolfe(objective, start, opts, seed)


# -- baselines -----------------------------------------------------------------

def _evaluate_choices(objective, choices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Objective of each integral choice row; inf where infeasible."""
    inst = objective.instance
    n = len(choices)
    X = np.zeros((inst.n_vars, n))
    cols = np.arange(n)
    for i in range(len(inst.flows)):
        X[inst.block_starts[i] + choices[:, i], cols] = 1.0
    ok = np.asarray(inst.is_capacity_feasible(X), dtype=bool).reshape(n)
    values = np.full(n, np.inf)
    if ok.any():
        out = objective.batch(X[:, ok])
        dl_ok = out[2] <= 1e-12 * np.maximum(1.0, np.abs(out[0]))
        vals = np.where(dl_ok, out[0], np.inf)
        values[ok] = vals
        ok[ok] = dl_ok
    return values, ok


def random_search(objective, budget: int = 500, seed: int = 0) -> OptimizerReport:
    """Best feasible one among ``budget`` uniformly drawn path/priority combinations."""
    t0 = time.perf_counter()
    evals0 = objective.evaluations
    inst = objective.instance
    rng = np.random.default_rng(seed)
    sizes = [f.block_size for f in inst.flows]
    choices = np.stack([rng.integers(0, s, size=budget) for s in sizes], axis=1) if sizes \
        else np.zeros((budget, 0), dtype=int)
    values, ok = _evaluate_choices(objective, choices)
    report = OptimizerReport("random")
    report.iterations = budget
    report.trace = [float(v) for v in np.minimum.accumulate(values)]
    if not ok.any():
        report.verdict = "infeasible: no feasible sample"
        report.evaluations = objective.evaluations - evals0
        report.wall_clock = time.perf_counter() - t0
        report.objective = math.inf
        return report
    best = int(np.argmin(values))
    return _finish(objective, report, None, t0, evals0, inst.one_hot(choices[best]))


def hop_choice(instance: ProblemInstance) -> list[int]:
    """Fewest servers (summed over destinations); ties to the lowest alternative, highest priority."""
    return fewest_hops_choice(instance)


def shortest_path_hops(instance: ProblemInstance) -> np.ndarray:
    return instance.one_hot(hop_choice(instance))


def mindelay_choice(instance: ProblemInstance) -> list[int]:
    """Cross-traffic-free proxy: sum of latencies plus burst over the path's minimum rate."""
    choice = []
    graph = instance.graph
    for i, f in enumerate(instance.flows):
        costs = []
        for v in instance.block(i):
            _, j, k = instance.var_choice(v)
            per_dest = []
            for group in f.candidate_paths:
                curves = [graph.by_port_level[graph.by_id[sid].port, k].service for sid in group[j]]
                per_dest.append(sum(c.latency for c in curves) + f.arrival.burst / min(c.rate for c in curves))
            costs.append(sum(per_dest) / len(per_dest))
        choice.append(int(np.argmin(costs)))
    return choice


def shortest_path_mindelay(instance: ProblemInstance) -> np.ndarray:
    return instance.one_hot(mindelay_choice(instance))


def _fixed(objective, name: str, assignment: np.ndarray) -> OptimizerReport:
    t0 = time.perf_counter()
    evals0 = objective.evaluations
    return _finish(objective, OptimizerReport(name), None, t0, evals0, assignment)


def nelder_mead(objective, budget: int = 500, seed: int = 0, step: float = 0.25) -> OptimizerReport:
    """Nelder-Mead on the relaxed variables, re-projected onto the simplices after every move."""
    t0 = time.perf_counter()
    evals0 = getattr(objective, "evaluations", 0)
    report = OptimizerReport("nelder-mead")
    x0 = random_start(objective, seed)
    free = [v for a, b in _blocks(objective) if b - a > 1 for v in range(a, b)]
    if getattr(objective, "instance", None) is not None:
        x0 = ensure_stable(objective, x0)
    objective.calibrate(x0)
    used = 0

    def f(x):
        nonlocal used
        used += 1
        try:
            return objective.penalized(x)
        except StabilityError:
            return math.inf

    if not free:
        report.status = "no free variables"
        report.relaxed_value = f(x0)
        report.trace = [report.relaxed_value]
        return _finish(objective, report, x0, t0, evals0)

    simplex = [x0]
    values = [f(x0)]
    for v in free:
        if used >= budget:
            break
        y = x0.copy()
        y[v] += step
        y = project_blocks(y, objective)
        simplex.append(y)
        values.append(f(y))
    trace = [min(values)]
    n = len(free)
    while used < budget and len(simplex) == n + 1:
        order = np.argsort(values, kind="stable")
        simplex = [simplex[i] for i in order]
        values = [values[i] for i in order]
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        xr = project_blocks(centroid + (centroid - worst), objective)
        fr = f(xr)
        if values[0] <= fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
        elif fr < values[0]:
            xe = project_blocks(centroid + 2.0 * (centroid - worst), objective)
            fe = f(xe) if used < budget else math.inf
            simplex[-1], values[-1] = (xe, fe) if fe < fr else (xr, fr)
        else:
            if fr < values[-1]:
                xc = project_blocks(centroid + 0.5 * (xr - centroid), objective)
            else:
                xc = project_blocks(centroid + 0.5 * (worst - centroid), objective)
            fc = f(xc) if used < budget else math.inf
            if fc < min(fr, values[-1]):
                simplex[-1], values[-1] = xc, fc
            else:
                best = simplex[0]
                for i in range(1, len(simplex)):
                    if used >= budget:
                        break
                    simplex[i] = project_blocks(best + 0.5 * (simplex[i] - best), objective)
                    values[i] = f(simplex[i])
        trace.append(min(values))
    i = int(np.argmin(values))
    report.trace = trace
    report.iterations = len(trace)
    report.relaxed_value = values[i]
    return _finish(objective, report, simplex[i], t0, evals0)


# -- dispatch and metrics ---------------------------------------------------------

def run_method(objective, method: str, seed: int = 0, budget: int = 500) -> OptimizerReport:
    if method == "frank-wolfe":
        return frank_wolfe(objective, opts=FWOptions(max_iter=budget), seed=seed)
    if method == "frank-wolfe-momentum":
        return frank_wolfe_momentum(objective, opts=FWOptions(max_iter=budget), seed=seed)
    if method == "random":
        return random_search(objective, budget=budget, seed=seed)
    if method == "sp-hops":
        return _fixed(objective, method, shortest_path_hops(objective.instance))
    if method == "sp-mindelay":
        return _fixed(objective, method, shortest_path_mindelay(objective.instance))
    if method == "nelder-mead":
        return nelder_mead(objective, budget=budget, seed=seed)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def rel_gap(value: float, baseline: float) -> float:
    return value / baseline - 1.0


def metrics(objectives: Mapping[str, float], baseline: str = "sp-hops") -> dict[str, dict[str, float]]:
    """RelGapShortestPath and RelGapBest of every method on one instance."""
    if baseline not in objectives:
        raise KeyError(f"baseline {baseline!r} missing")
    finite = [v for v in objectives.values() if math.isfinite(v)]
    if not finite:
        raise ValueError("no method produced a finite objective")
    best = min(finite)
    base = objectives[baseline]
    return {m: {"RelGapShortestPath": rel_gap(v, base), "RelGapBest": rel_gap(v, best)}
            for m, v in objectives.items()}


def summarize(per_instance: Sequence[Mapping[str, Mapping[str, float]]]) -> dict[str, dict[str, float]]:
    """Mean of each gap per method over instances (finite values only)."""
    out: dict[str, dict[str, list[float]]] = {}
    for rows in per_instance:
        for method, gaps in rows.items():
            for key, v in gaps.items():
                out.setdefault(method, {}).setdefault(key, []).append(v)
    return {m: {k: float(np.mean([v for v in vs if math.isfinite(v)])) if any(map(math.isfinite, vs))
                else math.inf for k, vs in d.items()}
            for m, d in out.items()}
