"""Closed-form (min,plus) operations on token-bucket and rate-latency curves.

The curve parameters are expression nodes, so every operation builds a piece
of the scalar DAG that the tape compiler later turns into instructions.
Plain numbers are accepted anywhere an expression is expected.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .netmodel import RateLatency, TokenBucket

#: Rate used for the identity element of concatenation.
IDENTITY_RATE = 1e18

OPS = ("const", "var", "add", "sub", "mul", "div", "min", "max", "ramp", "exp")
UNARY = frozenset({"ramp", "exp"})

_uid = itertools.count()


class StabilityError(ArithmeticError):
    """A left-over or delay bound was requested with cross traffic at or above the server rate."""


class Expr:
    """Node of a scalar expression DAG."""

    __slots__ = ("op", "args", "value", "uid", "__weakref__")

    def __init__(self, op: str, args: tuple = (), value: float = 0.0):
        self.op = op
        self.args = args
        self.value = value
        self.uid = next(_uid)

    def __repr__(self):
        if self.op == "const":
            return f"{self.value!r}"
        if self.op == "var":
            return f"p[{int(self.value)}]"
        return f"{self.op}({', '.join(map(repr, self.args))})"

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def __add__(self, other):
        return Expr("add", (self, as_expr(other)))

    def __radd__(self, other):
        return Expr("add", (as_expr(other), self))

    def __sub__(self, other):
        return Expr("sub", (self, as_expr(other)))

    def __rsub__(self, other):
        return Expr("sub", (as_expr(other), self))

    def __mul__(self, other):
        return Expr("mul", (self, as_expr(other)))

    def __rmul__(self, other):
        return Expr("mul", (as_expr(other), self))

    def __truediv__(self, other):
        return Expr("div", (self, as_expr(other)))

    def __rtruediv__(self, other):
        return Expr("div", (as_expr(other), self))

    def __neg__(self):
        return Expr("sub", (const(0.0), self))


ExprLike = Union[Expr, float, int]

_consts: dict[float, Expr] = {}
_vars: dict[int, Expr] = {}


def const(value: float) -> Expr:
    value = float(value)
    node = _consts.get(value)
    if node is None:
        node = _consts.setdefault(value, Expr("const", (), value))
    return node


def var(index: int) -> Expr:
    node = _vars.get(index)
    if node is None:
        node = _vars.setdefault(index, Expr("var", (), float(index)))
    return node


def as_expr(x: ExprLike) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def minimum(a: ExprLike, b: ExprLike) -> Expr:
    return Expr("min", (as_expr(a), as_expr(b)))


def maximum(a: ExprLike, b: ExprLike) -> Expr:
    return Expr("max", (as_expr(a), as_expr(b)))


def ramp(a: ExprLike) -> Expr:
    """``[a]^+``."""
    return Expr("ramp", (as_expr(a),))


def exp(a: ExprLike) -> Expr:
    return Expr("exp", (as_expr(a),))


def tree_sum(items: Sequence[ExprLike]) -> Expr:
    """Balanced sum; keeps the DAG shallow for level-scheduled evaluation."""
    items = list(items)
    if not items:
        return const(0.0)
    while len(items) > 1:
        nxt = [as_expr(items[i]) + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(as_expr(items[-1]))
        items = nxt
    return as_expr(items[0])


def tree_max(items: Sequence[ExprLike]) -> Expr:
    items = [as_expr(x) for x in items]
    if not items:
        raise ValueError("max of nothing")
    while len(items) > 1:
        nxt = [maximum(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def exclusive_sums(items: Sequence[ExprLike]) -> list[Expr | None]:
    """For every position, the sum of all *other* items (None when there are none).

    Divide and conquer: O(n log n) nodes, O(log n) depth, no subtraction.
    """
    items = [as_expr(x) for x in items]
    n = len(items)
    if n == 0:
        return []
    if n == 1:
        return [None]
    mid = n // 2
    left, right = items[:mid], items[mid:]
    sum_left, sum_right = tree_sum(left), tree_sum(right)
    out: list[Expr | None] = []
    for part in exclusive_sums(left):
        out.append(sum_right if part is None else part + sum_right)
    for part in exclusive_sums(right):
        out.append(sum_left if part is None else part + sum_left)
    return out


def evaluate(exprs: Iterable[Expr], x: Sequence[float] = ()) -> list[float]:
    """Direct interpretation of expression DAGs (memoised per node)."""
    x = np.asarray(x, dtype=float)
    memo: dict[int, float] = {}
    out = []
    for root in exprs:
        stack = [root]
        while stack:
            node = stack[-1]
            if node.uid in memo:
                stack.pop()
                continue
            pending = [a for a in node.args if a.uid not in memo]
            if pending:
                stack.extend(pending)
                continue
            stack.pop()
            memo[node.uid] = _apply(node, [memo[a.uid] for a in node.args], x)
        out.append(memo[root.uid])
    return out


def _apply(node: Expr, vals: list[float], x: np.ndarray) -> float:
    op = node.op
    if op == "const":
        return node.value
    if op == "var":
        return float(x[int(node.value)])
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "div":
        if vals[1] <= 0:
            raise StabilityError(f"division by non-positive value {vals[1]!r}")
        return vals[0] / vals[1]
    if op == "min":
        return min(vals[0], vals[1])
    if op == "max":
        return max(vals[0], vals[1])
    if op == "ramp":
        return max(vals[0], 0.0)
    if op == "exp":
        return math.exp(vals[0])
    raise ValueError(f"unknown op {op}")


def count_nodes(exprs: Iterable[Expr]) -> int:
    seen = set()
    stack = list(exprs)
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.extend(node.args)
    return len(seen)


# -- symbolic curves ------------------------------------------------------

@dataclass(frozen=True)
class SymTokenBucket:
    rate: Expr
    burst: Expr

    @classmethod
    def of(cls, rate: ExprLike, burst: ExprLike) -> "SymTokenBucket":
        return cls(as_expr(rate), as_expr(burst))

    @classmethod
    def from_curve(cls, curve: TokenBucket) -> "SymTokenBucket":
        return cls.of(curve.rate, curve.burst)

    def evaluate(self, x: Sequence[float] = ()) -> TokenBucket:
        r, b = evaluate((self.rate, self.burst), x)
        return TokenBucket(r, b)


@dataclass(frozen=True)
class SymRateLatency:
    rate: Expr
    latency: Expr

    @classmethod
    def of(cls, rate: ExprLike, latency: ExprLike) -> "SymRateLatency":
        return cls(as_expr(rate), as_expr(latency))

    @classmethod
    def from_curve(cls, curve: RateLatency) -> "SymRateLatency":
        return cls.of(curve.rate, curve.latency)

    def evaluate(self, x: Sequence[float] = ()) -> RateLatency:
        r, l = evaluate((self.rate, self.latency), x)
        return RateLatency(r, l)


def identity_service() -> SymRateLatency:
    return SymRateLatency.of(IDENTITY_RATE, 0.0)


def aggregate(a1: SymTokenBucket, a2: SymTokenBucket) -> SymTokenBucket:
    return SymTokenBucket(a1.rate + a2.rate, a1.burst + a2.burst)


def convolve(b1: SymRateLatency, b2: SymRateLatency) -> SymRateLatency:
    return SymRateLatency(minimum(b1.rate, b2.rate), b1.latency + b2.latency)


def deconvolve(a: SymTokenBucket, b: SymRateLatency) -> SymTokenBucket:
    """Output bound of ``a`` through a server offering ``b``."""
    return SymTokenBucket(a.rate, a.burst + a.rate * b.latency)


def _check_constant_stability(r: Expr, R: Expr) -> None:
    if r.is_const and R.is_const and r.value >= R.value:
        raise StabilityError(f"arrival rate {r.value} >= service rate {R.value}")


def leftover(b: SymRateLatency, a: SymTokenBucket) -> SymRateLatency:
    """Residual service under arbitrary multiplexing."""
    _check_constant_stability(a.rate, b.rate)
    residual = b.rate - a.rate
    return SymRateLatency(residual, (a.burst + b.rate * b.latency) / residual)


def delay_bound(a: SymTokenBucket, b: SymRateLatency) -> Expr:
    """Horizontal deviation ``B/R + L``."""
    _check_constant_stability(a.rate, b.rate)
    return a.burst / b.rate + b.latency


def scale(a: SymTokenBucket, p: ExprLike) -> SymTokenBucket:
    p = as_expr(p)
    return SymTokenBucket(p * a.rate, p * a.burst)


# -- brute-force sampling oracle -------------------------------------------

class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    horizon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise GridError(f"invalid horizon {self.horizon}")
        if not self.delta > 0 or self.horizon / self.delta < 100:
            raise GridError(
                f"grid too coarse: resolution {self.delta:g} over horizon {self.horizon:g}")

    @property
    def points(self) -> np.ndarray:
        n = int(round(self.horizon / self.delta))
        return np.arange(n + 1) * self.delta

    @classmethod
    def for_curves(cls, arrivals: Sequence[TokenBucket], services: Sequence[RateLatency],
                   resolution: float = 1e-3) -> "Grid":
        max_l = max((s.latency for s in services), default=0.0)
        max_b = max((a.burst for a in arrivals), default=0.0)
        max_r = max((a.rate for a in arrivals), default=0.0)
        margin = min(s.rate for s in services) - max_r
        if margin <= 0:
            margin = min(s.rate for s in services)
        horizon = 4.0 * (max_l + max_b / margin)
        if horizon <= 0:
            horizon = 1.0
        return cls(horizon, resolution * horizon)


def sample_convolve(b1: RateLatency, b2: RateLatency, grid: Grid) -> np.ndarray:
    """``inf_{0<=u<=t} b1(t-u) + b2(u)`` at every grid point t."""
    t = grid.points
    vals = b1(t[:, None] - t[None, :]) + b2(t[None, :])
    vals = np.where(t[None, :] <= t[:, None] + 1e-15, vals, np.inf)
    return vals.min(axis=1)


def sample_deconvolve(a: TokenBucket, b: RateLatency, grid: Grid,
                      t: np.ndarray | None = None) -> np.ndarray:
    """``sup_{u>=0} a(t+u) - b(u)`` with u truncated to the grid."""
    u = grid.points
    t = grid.points if t is None else np.atleast_1d(np.asarray(t, dtype=float))
    return (a(t[:, None] + u[None, :]) - b(u[None, :])).max(axis=1)


def sample_leftover(b: RateLatency, a: TokenBucket, grid: Grid) -> np.ndarray:
    """``sup_{0<=u<=t} b(u) - a(u)``."""
    t = grid.points
    diff = b(t) - a(t)
    return np.maximum.accumulate(diff)


def sample_delay(a: TokenBucket, b: RateLatency, grid: Grid) -> float:
    """First grid point d whose backlog-shifted deconvolution is non-positive."""
    u = grid.points

    def holds(i: int) -> bool:
        return (a(u - u[i]) - b(u)).max() <= 0

    if not holds(len(u) - 1):
        raise GridError(f"no delay found within horizon {grid.horizon:g} (resolution {grid.delta:g})")
    # the condition is monotone in d: bisect over grid indices
    lo, hi = -1, len(u) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if holds(mid):
            hi = mid
        else:
            lo = mid
    return float(u[hi])


__all__ = [
    "IDENTITY_RATE", "StabilityError", "Expr", "const", "var", "as_expr", "minimum", "maximum",
    "ramp", "exp", "tree_sum", "tree_max", "exclusive_sums", "evaluate", "count_nodes",
    "SymTokenBucket", "SymRateLatency", "identity_service", "aggregate", "convolve", "deconvolve",
    "leftover", "delay_bound", "scale", "Grid", "GridError", "sample_convolve",
    "sample_deconvolve", "sample_leftover", "sample_delay",
]
