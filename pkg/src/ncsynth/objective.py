"""Objectives and penalty terms over the per-virtual-flow delay terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import adgraph
from . import minplus as mp
from .minplus import Expr, StabilityError
from .netmodel import ProblemInstance
from .sfa import DelayTerm, analyze_all

KINDS = ("average", "utility", "max-tail")
UTILITY_FAMILIES = ("linear", "logistic")

# logistic argument is clamped to keep exp() finite and its gradient defined
_LOGIT_CLAMP = 50.0


@dataclass(frozen=True)
class Utility:
    """Maps a flow's delay bound into [0, 1]; lower is better.

    ``linear``: clamp((d - lo) / (hi - lo), 0, 1).
    ``logistic``: 1 / (1 + exp(-steepness * (d / deadline - 1))).
    """
    family: str = "logistic"
    deadline: float = 1.0
    steepness: float = 10.0
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.family not in UTILITY_FAMILIES:
            raise ValueError(f"unknown utility family {self.family!r}")
        if self.family == "linear" and not self.hi > self.lo:
            raise ValueError("linear utility needs hi > lo")
        if self.family == "logistic" and not (self.deadline > 0 and self.steepness > 0):
            raise ValueError("logistic utility needs deadline > 0 and steepness > 0")

    def expr(self, d: mp.ExprLike) -> Expr:
        d = mp.as_expr(d)
        if self.family == "linear":
            scaled = (d - self.lo) / (self.hi - self.lo)
            return mp.minimum(mp.maximum(scaled, 0.0), 1.0)
        z = (d / self.deadline - 1.0) * self.steepness
        z = mp.minimum(mp.maximum(z, -_LOGIT_CLAMP), _LOGIT_CLAMP)
        return 1.0 / (mp.exp(0.0 - z) + 1.0)

    def __call__(self, d: float) -> float:
        return mp.evaluate([self.expr(mp.const(d))])[0]


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "average"
    utilities: Mapping[str, Utility] = field(default_factory=dict)
    lambda_cap: Optional[float] = None
    lambda_deadline: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; choose from {', '.join(KINDS)}")
        for lam in (self.lambda_cap, self.lambda_deadline):
            if lam is not None and lam < 0:
                raise ValueError("penalty weights must be >= 0")


def flow_values(terms: Sequence[DelayTerm], instance: ProblemInstance) -> list[Expr]:
    """Per flow: sum over its choices of p times the (destination-averaged) bound."""
    by_var: dict[int, list[Expr]] = {}
    for t in terms:
        vf = instance.virtual_flows[t.vf]
        by_var.setdefault(vf.var_id, []).append(t.expr)
    if len(by_var) != instance.n_vars:
        raise ValueError("delay terms do not cover every virtual flow")
    out = []
    for i in range(len(instance.flows)):
        parts = []
        for v in instance.block(i):
            exprs = by_var[v]
            mean = exprs[0] if len(exprs) == 1 else mp.tree_sum(exprs) / len(exprs)
            parts.append(mean * mp.var(v))
        out.append(mp.tree_sum(parts))
    return out


def build_average(terms: Sequence[DelayTerm], instance: ProblemInstance) -> Expr:
    values = flow_values(terms, instance)
    if not values:
        return mp.const(0.0)
    return mp.tree_sum(values) / len(values)


def default_utility(flow) -> Utility:
    if flow.deadline is None:
        raise ValueError(f"flow {flow.id}: utility objective needs a deadline or an explicit utility")
    return Utility("logistic", deadline=flow.deadline)


def build_utility(terms: Sequence[DelayTerm], instance: ProblemInstance,
                  utilities: Mapping[str, Utility] | None = None) -> Expr:
    utilities = utilities or {}
    values = flow_values(terms, instance)
    parts = []
    for flow, v in zip(instance.flows, values):
        u = utilities.get(flow.id) or default_utility(flow)
        parts.append(u.expr(v))
    return mp.tree_sum(parts)


def build_maxtail(terms: Sequence[DelayTerm], instance: ProblemInstance) -> Expr:
    values = flow_values(terms, instance)
    return mp.tree_max(values) if values else mp.const(0.0)


def capacity_violation(instance: ProblemInstance) -> Expr:
    """Sum over servers (ports in leftover mode) of [load - rho R]^+."""
    A, caps, _ = instance.capacity
    parts = []
    for row, cap in zip(A, caps):
        used = np.flatnonzero(row)
        if not len(used):
            continue
        load = mp.tree_sum([mp.var(int(v)) * float(row[v]) for v in used])
        parts.append(mp.ramp(load - float(cap)))
    return mp.tree_sum(parts)


def deadline_violation(instance: ProblemInstance, values: Sequence[Expr]) -> Expr:
    parts = [mp.ramp(v - f.deadline) for f, v in zip(instance.flows, values) if f.deadline is not None]
    return mp.tree_sum(parts)


def build_penalties(instance: ProblemInstance, terms: Sequence[DelayTerm],
                    lambda_cap: float, lambda_deadline: float) -> Expr:
    values = flow_values(terms, instance)
    return (capacity_violation(instance) * lambda_cap
            + deadline_violation(instance, values) * lambda_deadline)


def build_objective(terms: Sequence[DelayTerm], instance: ProblemInstance, spec: ObjectiveSpec) -> Expr:
    if spec.kind == "average":
        return build_average(terms, instance)
    if spec.kind == "utility":
        return build_utility(terms, instance, spec.utilities)
    return build_maxtail(terms, instance)


class CompiledObjective:
    """Objective, penalties, and per-flow bounds compiled into one tape.

    Outputs are ``[objective, capacity violation, deadline violation,
    per-flow values...]``; the penalised value is their weighted sum.
    """

    def __init__(self, instance: ProblemInstance, spec: ObjectiveSpec | None = None, tasks: int = 1):
        self.instance = instance
        self.spec = spec or ObjectiveSpec()
        self.tasks = tasks
        self.terms = analyze_all(instance, tasks=tasks)
        values = flow_values(self.terms, instance)
        main = build_objective(self.terms, instance, self.spec)
        outputs = [main, capacity_violation(instance), deadline_violation(instance, values), *values]
        self.graph = adgraph.compile(outputs, instance.n_vars)
        self.lambda_cap = self.spec.lambda_cap
        self.lambda_deadline = self.spec.lambda_deadline
        self.evaluations = 0

    @property
    def block_starts(self) -> np.ndarray:
        return self.instance.block_starts

    @property
    def n_vars(self) -> int:
        return self.instance.n_vars

    def calibrate(self, x) -> None:
        """Fix unset penalty weights to 10x the objective at ``x`` (once)."""
        if self.lambda_cap is not None and self.lambda_deadline is not None:
            return
        base = float(self.graph.forward(x)[0])
        lam = 10.0 * base if base > 0 else 1.0
        if self.lambda_cap is None:
            self.lambda_cap = lam
        if self.lambda_deadline is None:
            self.lambda_deadline = lam

    def _weights(self) -> np.ndarray:
        w = np.zeros(self.graph.n_outputs)
        w[0] = 1.0
        w[1] = self.lambda_cap or 0.0
        w[2] = self.lambda_deadline or 0.0
        return w

    def outputs(self, x, check: bool = True) -> np.ndarray:
        self.evaluations += 1
        return self.graph.forward(x, check=check, tasks=self.tasks)

    def value(self, x) -> float:
        return float(self.outputs(x)[0])

    def penalized(self, x) -> float:
        return float(self._weights() @ self.outputs(x))

    def value_and_grad(self, x) -> tuple[float, np.ndarray]:
        self.evaluations += 1
        w = self._weights()
        res = self.graph.value_and_grad(x, w, tasks=self.tasks)
        return float(w @ res.values), res.gradient

    def flow_delays(self, x) -> np.ndarray:
        return self.outputs(x)[3:]

    def is_stable(self, x) -> bool:
        try:
            self.graph.forward(x)
        except StabilityError:
            return False
        return True

    def feasible(self, x, tol: float = 1e-12) -> tuple[bool, str]:
        """Integral verification: capacity (with rho) and deadlines."""
        if not self.instance.is_capacity_feasible(x, tol):
            return False, "infeasible: capacity"
        out = self.outputs(x)
        if out[2] > tol * max(1.0, abs(out[0])):
            return False, "infeasible: deadline"
        return True, "feasible"

    def batch(self, X) -> np.ndarray:
        """Outputs for every column of ``X`` (n_vars, batch)."""
        self.evaluations += X.shape[1]
        return self.graph.forward(X, tasks=self.tasks)
