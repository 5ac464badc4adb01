"""Instruction tape for expression DAGs: batched forward pass and reverse-mode gradients.

Each DAG node gets one slot. Instructions are scheduled by depth ("level")
and, inside a level, grouped by opcode, so one numpy call executes a whole
group. Every slot of a level depends only on lower levels, which makes the
adjoints of a level final by the time the reverse sweep reaches it.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .minplus import Expr, StabilityError

MAGIC = b"NCVM"
VERSION = 1

OPCODES = {"const": 0, "var": 1, "add": 2, "sub": 3, "mul": 4, "div": 5,
           "min": 6, "max": 7, "ramp": 8, "exp": 9}
OPNAMES = {v: k for k, v in OPCODES.items()}
_BINARY = {2, 3, 4, 5, 6, 7}
_BRANCHING = (6, 7, 8)


@dataclass(frozen=True)
class Group:
    level: int
    opcode: int
    out: np.ndarray
    a: np.ndarray
    b: np.ndarray  # == a for unary ops


@dataclass(frozen=True)
class EvalResult:
    values: np.ndarray
    gradient: Optional[np.ndarray] = None


class CompiledGraph:
    def __init__(self, opcode, arg0, arg1, value, outputs, n_vars):
        self.opcode = np.asarray(opcode, dtype=np.int8)
        self.arg0 = np.asarray(arg0, dtype=np.int64)
        self.arg1 = np.asarray(arg1, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.outputs = np.asarray(outputs, dtype=np.int64)
        self.n_vars = int(n_vars)
        self.n_slots = len(self.opcode)

        self.const_slots = np.flatnonzero(self.opcode == OPCODES["const"])
        self.var_slots = np.flatnonzero(self.opcode == OPCODES["var"])
        self.var_ids = self.value[self.var_slots].astype(np.int64)
        if len(self.var_ids) and self.var_ids.max() >= self.n_vars:
            raise ValueError("variable index beyond n_vars")

        level = np.zeros(self.n_slots, dtype=np.int64)
        for i in range(self.n_slots):
            op = self.opcode[i]
            if op in _BINARY:
                level[i] = 1 + max(level[self.arg0[i]], level[self.arg1[i]])
            elif op > 1:
                level[i] = 1 + level[self.arg0[i]]
        self.level = level
        groups = []
        inner = np.flatnonzero(self.opcode > 1)
        order = np.lexsort((inner, self.opcode[inner], level[inner]))
        inner = inner[order]
        if len(inner):
            keys = level[inner] * 16 + self.opcode[inner]
            cuts = np.flatnonzero(np.diff(keys)) + 1
            for chunk in np.split(inner, cuts):
                op = int(self.opcode[chunk[0]])
                a = self.arg0[chunk]
                b = self.arg1[chunk] if op in _BINARY else a
                groups.append(Group(int(level[chunk[0]]), op, chunk, a, b))
        self.groups = groups

    def __len__(self):
        return self.n_slots

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    # -- serialisation -----------------------------------------------------

    def to_bytes(self) -> bytes:
        """Versioned little-endian dump; for debugging, not a stable format."""
        head = MAGIC + struct.pack("<HqqqI", VERSION, self.n_slots, len(self.outputs),
                                   self.n_vars, 0)
        return b"".join([
            head,
            self.opcode.astype("<i1").tobytes(),
            self.arg0.astype("<i8").tobytes(),
            self.arg1.astype("<i8").tobytes(),
            self.value.astype("<f8").tobytes(),
            self.outputs.astype("<i8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompiledGraph":
        if data[:4] != MAGIC:
            raise ValueError("not a tape dump")
        version, n, n_out, n_vars, _ = struct.unpack_from("<HqqqI", data, 4)
        if version != VERSION:
            raise ValueError(f"unsupported tape version {version}")
        off = 4 + struct.calcsize("<HqqqI")

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr

        opcode = take("<i1", n)
        arg0 = take("<i8", n)
        arg1 = take("<i8", n)
        value = take("<f8", n)
        outputs = take("<i8", n_out)
        return cls(opcode, arg0, arg1, value, outputs, n_vars)

    # -- evaluation --------------------------------------------------------

    def _load(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[:1] != (self.n_vars,):
            raise ValueError(f"expected {self.n_vars} variables, got shape {x.shape}")
        slots = np.empty((self.n_slots,) + x.shape[1:])
        cv = self.value[self.const_slots]
        slots[self.const_slots] = cv.reshape(cv.shape + (1,) * (x.ndim - 1))
        slots[self.var_slots] = x[self.var_ids]
        return slots

    def run(self, x, check: bool = True, tasks: int = 1) -> np.ndarray:
        """All slot values; ``x`` is (n_vars,) or (n_vars, batch)."""
        slots = self._load(x)
        with _maybe_pool(tasks) as pool:
            for g in self.groups:
                va, vb = slots[g.a], slots[g.b]
                if g.opcode == 5 and check:
                    bad = vb <= 0
                    if bad.any():
                        where = np.flatnonzero(bad.reshape(len(g.out), -1).any(axis=1))[0]
                        slot = int(g.out[where])
                        raise StabilityError(
                            f"non-positive denominator at slot {slot} "
                            f"(outputs {self.outputs_depending_on(slot)})")
                if pool is None or len(g.out) < 2 * tasks:
                    slots[g.out] = _forward_op(g.opcode, va, vb)
                else:
                    res = np.empty_like(va)
                    parts = np.array_split(np.arange(len(g.out)), tasks)

                    def work(idx):
                        res[idx] = _forward_op(g.opcode, va[idx], vb[idx])
                    list(pool.map(work, parts))
                    slots[g.out] = res
        return slots

    def forward(self, x, check: bool = True, tasks: int = 1) -> np.ndarray:
        slots = self.run(x, check=check, tasks=tasks)
        return slots[self.outputs]

    def backward(self, slots: np.ndarray, weights, tasks: int = 1) -> np.ndarray:
        """Gradient of ``sum(weights * outputs)`` w.r.t. the variables.

        ``slots`` must come from :meth:`run` at the same point. Adjoints are
        accumulated in tape order only, so the result does not depend on
        ``tasks``.
        """
        weights = np.asarray(weights, dtype=float)
        adj = np.zeros_like(slots)
        np.add.at(adj, self.outputs, np.broadcast_to(
            weights.reshape(weights.shape + (1,) * (slots.ndim - weights.ndim)),
            (len(self.outputs),) + slots.shape[1:]))
        with _maybe_pool(tasks) as pool:
            for g in reversed(self.groups):
                gout = adj[g.out]
                va, vb, vo = slots[g.a], slots[g.b], slots[g.out]
                if pool is None or len(g.out) < 2 * tasks:
                    da, db = _backward_op(g.opcode, gout, va, vb, vo)
                else:
                    da = np.empty_like(gout)
                    db = np.empty_like(gout)
                    parts = np.array_split(np.arange(len(g.out)), tasks)

                    def work(idx):
                        da[idx], db[idx] = _backward_op(g.opcode, gout[idx], va[idx], vb[idx], vo[idx])
                    list(pool.map(work, parts))
                np.add.at(adj, g.a, da)
                if g.opcode in _BINARY:
                    np.add.at(adj, g.b, db)
        grad = np.zeros((self.n_vars,) + slots.shape[1:])
        grad[self.var_ids] = adj[self.var_slots]
        return grad

    def value_and_grad(self, x, weights, tasks: int = 1) -> EvalResult:
        slots = self.run(x, tasks=tasks)
        return EvalResult(slots[self.outputs], self.backward(slots, weights, tasks=tasks))

    def _branch_operands(self, x):
        slots = self.run(x, check=False)
        idx = np.flatnonzero(np.isin(self.opcode, _BRANCHING))
        ops = self.opcode[idx]
        a = slots[self.arg0[idx]]
        b = np.where(ops == 8, 0.0, slots[np.where(ops == 8, self.arg0[idx], self.arg1[idx])])
        return ops, a, b

    def branches(self, x) -> np.ndarray:
        """Branch taken by every min/max/ramp node, for detecting kinks between two points."""
        ops, a, b = self._branch_operands(x)
        return np.where(ops == 6, a <= b, a >= b)

    def tie_gaps(self, x) -> np.ndarray:
        """``|a - b|`` at every min/max node, ``|a|`` at ramps."""
        _, a, b = self._branch_operands(x)
        return np.abs(a - b)

    def outputs_depending_on(self, slot: int) -> list[int]:
        reach = np.zeros(self.n_slots, dtype=bool)
        reach[slot] = True
        for g in self.groups:
            hit = reach[g.a] | reach[g.b]
            if hit.any():
                reach[g.out[hit]] = True
        return [int(i) for i in np.flatnonzero(reach[self.outputs])]


class _NullPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _maybe_pool(tasks: int):
    return ThreadPoolExecutor(max_workers=tasks) if tasks > 1 else _NullPool()


def _forward_op(op, a, b):
    if op == 2:
        return a + b
    if op == 3:
        return a - b
    if op == 4:
        return a * b
    if op == 5:
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b
    if op == 6:
        return np.minimum(a, b)
    if op == 7:
        return np.maximum(a, b)
    if op == 8:
        return np.maximum(a, 0.0)
    if op == 9:
        return np.exp(a)
    raise ValueError(f"bad opcode {op}")


def _backward_op(op, g, a, b, out):
    if op == 2:
        return g, g
    if op == 3:
        return g, -g
    if op == 4:
        return g * b, g * a
    if op == 5:
        return g / b, -g * out / b
    if op == 6:
        # H(b - a) with H(0) = 1: ties go to the first operand
        first = a <= b
        return np.where(first, g, 0.0), np.where(first, 0.0, g)
    if op == 7:
        first = a >= b
        return np.where(first, g, 0.0), np.where(first, 0.0, g)
    if op == 8:
        return np.where(a >= 0, g, 0.0), g * 0.0
    if op == 9:
        return g * out, g * 0.0
    raise ValueError(f"bad opcode {op}")


def compile(terms: Sequence[Expr], n_vars: Optional[int] = None) -> CompiledGraph:  # noqa: A001
    """Topological tape for ``terms``; shared nodes are emitted once.

    Slot numbering is the DFS post-order from the outputs, children left to
    right, so recompiling the same DAG yields the same tape.
    """
    slot_of: dict[int, int] = {}
    open_nodes: set[int] = set()
    opcode, arg0, arg1, value = [], [], [], []
    max_var = -1
    for root in terms:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node.uid in slot_of:
                continue
            if not expanded:
                if node.uid in open_nodes:
                    raise ValueError("expression graph contains a cycle")
                open_nodes.add(node.uid)
                stack.append((node, True))
                for child in reversed(node.args):
                    if child.uid not in slot_of:
                        stack.append((child, False))
                continue
            open_nodes.discard(node.uid)
            op = OPCODES[node.op]
            slot_of[node.uid] = len(opcode)
            opcode.append(op)
            arg0.append(slot_of[node.args[0].uid] if node.args else -1)
            arg1.append(slot_of[node.args[1].uid] if len(node.args) > 1 else -1)
            value.append(node.value)
            if op == 1:
                max_var = max(max_var, int(node.value))
    outputs = [slot_of[t.uid] for t in terms]
    if n_vars is None:
        n_vars = max_var + 1
    return CompiledGraph(opcode, arg0, arg1, value, outputs, n_vars)


def forward(g: CompiledGraph, x, tasks: int = 1) -> np.ndarray:
    return g.forward(x, tasks=tasks)


def backward(g: CompiledGraph, x, weights, tasks: int = 1) -> np.ndarray:
    return g.value_and_grad(x, weights, tasks=tasks).gradient


def eval_parallel(g: CompiledGraph, x, tasks: int, weights=None) -> EvalResult:
    """Forward (and, with weights, reverse) pass split over ``tasks`` threads.

    Results are bitwise identical for every task count: threads only split
    element-wise work, accumulation order is fixed by the tape.
    """
    if g.n_outputs == 0:
        return EvalResult(np.zeros(0), None if weights is None else np.zeros(g.n_vars))
    if weights is None:
        return EvalResult(g.forward(x, tasks=tasks))
    return g.value_and_grad(x, weights, tasks=tasks)


@dataclass
class GradCheck:
    max_rel_error: float
    rel_errors: np.ndarray
    checked: int
    skipped_ties: int
    skipped_unstable: int

    def passed(self, tol: float = 1e-5, quantile: float = 1.0) -> bool:
        if not self.checked:
            return True
        return float(np.mean(self.rel_errors <= tol)) >= quantile


def gradcheck(g: CompiledGraph, x, weights, h: float = 1e-6) -> GradCheck:
    """Reverse-mode gradient of ``weights @ outputs`` against central differences.

    A coordinate is skipped when a min/max/ramp node takes different branches
    at ``x - h e_i`` and ``x + h e_i`` (a kink lies in between).
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    if g.n_outputs == 0 or g.n_vars == 0:
        return GradCheck(0.0, np.zeros(0), 0, 0, 0)
    grad = g.value_and_grad(x, w).gradient
    scale = 1e-8 * max(1.0, float(np.max(np.abs(grad))))
    errors, ties, unstable = [], 0, 0
    for i in range(g.n_vars):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        try:
            fp, fm = w @ g.forward(xp), w @ g.forward(xm)
        except StabilityError:
            unstable += 1
            continue
        if not np.array_equal(g.branches(xp), g.branches(xm)):
            ties += 1
            continue
        fd = (fp - fm) / (2 * h)
        errors.append(abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), scale))
    errs = np.array(errors)
    return GradCheck(float(errs.max()) if len(errs) else 0.0, errs, len(errs), ties, unstable)
