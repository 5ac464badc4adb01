"""Command-line entry point: analyze, optimize, generate, bench, gradcheck.

Exit codes: 0 success, 1 infeasible (or failed check), 2 input error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gen, io, optim
from .adgraph import gradcheck
from .minplus import StabilityError
from .netmodel import InstanceError, check, with_cap
from .objective import KINDS, CompiledObjective, ObjectiveSpec

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class InputError(Exception):
    pass


def _objective(inst, args) -> CompiledObjective:
    if getattr(args, "rho", None) is not None:
        inst = with_cap(inst, args.rho)
        check(inst)
    spec = ObjectiveSpec(args.objective, lambda_cap=getattr(args, "lambda_cap", None),
                         lambda_deadline=getattr(args, "lambda_deadline", None))
    return CompiledObjective(inst, spec, tasks=args.tasks)


def _parse_assignment(inst, text: str) -> np.ndarray:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != len(inst.flows):
        raise InputError(f"assignment lists {len(parts)} flows, instance has {len(inst.flows)}")
    choice = []
    for i, p in enumerate(parts):
        try:
            j, _, k = p.partition(":")
            choice.append(io.choice_index(inst, i, int(j), int(k) if k else None))
        except ValueError:
            raise InputError(f"bad assignment entry {p!r} (expected ALT or ALT:PRIORITY)") from None
    return inst.one_hot(choice)


# -- subcommands ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    inst = io.load_instance(args.instance)
    if args.result:
        x = io.assignment_from_result(inst, json.loads(Path(args.result).read_text()))
    elif args.assignment:
        x = _parse_assignment(inst, args.assignment)
    else:
        x = inst.one_hot([0] * len(inst.flows))
    obj = CompiledObjective(inst, ObjectiveSpec("average"), tasks=args.tasks)
    if not inst.is_capacity_feasible(x):
        print("infeasible: capacity exceeded at this assignment", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        bounds = obj.flow_delays(x)
    except StabilityError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    for f, b in zip(inst.flows, bounds):
        print(f"{f.id}\t{b:.12g}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    inst = io.load_instance(args.instance)
    obj = _objective(inst, args)
    report = optim.run_method(obj, args.method, seed=args.seed, budget=args.budget)
    options = {"objective": args.objective, "budget": args.budget, "rho": obj.instance.utilization_cap,
               "lambda_cap": obj.lambda_cap, "lambda_deadline": obj.lambda_deadline,
               "tasks": args.tasks, "instance": Path(args.instance).name}
    seed = args.seed if args.method in optim.STOCHASTIC else None
    text = io.dumps(io.result_to_dict(obj.instance, report, seed, options, timing=args.timing))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    summary = (f"{report.method}: objective {report.objective:.9g}, {report.verdict}, "
               f"{report.iterations} iterations, {report.evaluations} evaluations")
    print(summary, file=sys.stderr if not args.output else sys.stdout)
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def _genspec(args) -> gen.GenSpec:
    return gen.GenSpec(ports=tuple(args.ports), layers=tuple(args.layers), edge_density=args.density,
                       flows=tuple(args.flows), k=args.k, priorities=args.priorities,
                       max_combinations=args.max_combinations, priority_mode=args.priority_mode,
                       seed=args.seed)


def cmd_generate(args) -> int:
    try:
        spec = _genspec(args)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        instances = gen.generate_dataset(spec, args.count)
    except gen.GenerationError as exc:
        print(f"infeasible spec: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out)
    if args.count == 1 and out.suffix == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        io.save_instance(instances[0], out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for n, inst in enumerate(instances):
            io.save_instance(inst, out / f"instance_{spec.seed + n:05d}.json")
    print(gen.format_stats(gen.dataset_stats(instances)))
    return EXIT_OK


def bench_instance(path: Path, methods: Sequence[str], seeds: Sequence[int], objective: str,
                   budget: int, limit: int) -> list[dict]:
    """Every method on one instance; one record per (seed, method)."""
    records = []
    try:
        inst = io.load_instance(path)
    except (InstanceError, OSError) as exc:
        return [{"instance": path.name, "error": str(exc)}]
    optimum = None
    if inst.n_combinations() <= limit:
        try:
            optimum = gen.enumerate_optimum(CompiledObjective(inst, ObjectiveSpec(objective)), limit).value
        except gen.EnumerationError:
            optimum = None
    for seed in seeds:
        values = {}
        rows = []
        for m in methods:
            rec = {"instance": path.name, "seed": seed, "method": m}
            try:
                rep = optim.run_method(CompiledObjective(inst, ObjectiveSpec(objective)), m, seed, budget)
                val = rep.objective if rep.feasible else math.inf
                rec.update(objective=io._finite(val), verdict=rep.verdict, wall_clock=rep.wall_clock)
                values[m] = val
            except Exception as exc:  # recorded, the run continues
                rec["error"] = f"{type(exc).__name__}: {exc}"
                values[m] = math.inf
            rows.append(rec)
        gaps = {}
        if "sp-hops" in values and math.isfinite(values["sp-hops"]) and any(map(math.isfinite, values.values())):
            gaps = optim.metrics(values, "sp-hops")
        best = min(values.values())
        for rec in rows:
            m = rec["method"]
            if m in gaps:
                rec.update({k: io._finite(v) for k, v in gaps[m].items()})
            elif math.isfinite(best) and math.isfinite(values[m]):
                rec["RelGapBest"] = values[m] / best - 1
            if optimum is not None:
                rec["optimum"] = optimum
                rec["optimum_found"] = bool(values[m] <= optimum * (1 + 1e-9))
        records.extend(rows)
    return records


def bench_summary(records: Sequence[dict], methods: Sequence[str]) -> str:
    lines = [f"{'method':<22}{'runs':>6}{'RelGapSP':>12}{'RelGapBest':>12}{'optimum %':>11}"]
    for m in methods:
        rows = [r for r in records if r.get("method") == m]
        sp = [r["RelGapShortestPath"] for r in rows if r.get("RelGapShortestPath") is not None]
        best = [r["RelGapBest"] for r in rows if r.get("RelGapBest") is not None]
        opt = [r["optimum_found"] for r in rows if "optimum_found" in r]
        fmt = lambda v: f"{100 * np.mean(v):>11.2f}%" if v else f"{'-':>12}"
        lines.append(f"{m:<22}{len(rows):>6}{fmt(sp)}{fmt(best)}"
                     + (f"{100 * np.mean(opt):>10.1f}%" if opt else f"{'-':>11}"))
    return "\n".join(lines)


def cmd_bench(args) -> int:
    paths = sorted(Path(args.directory).glob("*.json"))
    if not paths:
        raise InputError(f"no instance files in {args.directory}")
    methods = args.methods
    work = lambda p: bench_instance(p, methods, args.seeds, args.objective, args.budget, args.limit)
    if args.tasks > 1:
        with ThreadPoolExecutor(max_workers=args.tasks) as pool:
            results = list(pool.map(work, paths))
    else:
        results = [work(p) for p in paths]
    records = [r for rs in results for r in rs]
    if args.output:
        Path(args.output).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    print(bench_summary(records, methods))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    inst = io.load_instance(args.instance)
    obj = CompiledObjective(inst, ObjectiveSpec(args.objective))
    worst, checked, ties, unstable = 0.0, 0, 0, 0
    rng = np.random.default_rng(args.seed)
    for n in range(args.points):
        x = optim.ensure_stable(obj, optim.random_start(obj, args.seed + n)) if inst.n_vars else np.zeros(0)
        w = rng.uniform(0.5, 1.5, size=obj.graph.n_outputs)
        res = gradcheck(obj.graph, x, w, h=args.h)
        worst = max(worst, res.max_rel_error)
        checked += res.checked
        ties += res.skipped_ties
        unstable += res.skipped_unstable
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} over {checked} coordinates; "
          f"{ties} tie coordinates skipped; {unstable} unstable skipped")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INFEASIBLE


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="delay bound of every flow at an integral assignment")
    a.add_argument("instance")
    a.add_argument("--assignment", help="per flow ALT or ALT:PRIORITY, comma separated")
    a.add_argument("--result", help="take the assignment from a result file")
    a.add_argument("--tasks", type=int, default=1)
    a.set_defaults(func=cmd_analyze)

    o = sub.add_parser("optimize", help="choose paths and priorities")
    o.add_argument("instance")
    o.add_argument("--method", choices=optim.METHODS, default="frank-wolfe")
    o.add_argument("--objective", choices=KINDS, default="average")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--budget", type=int, default=500)
    o.add_argument("--rho", type=float, help="utilization cap (overrides the file)")
    o.add_argument("--lambda-cap", type=float)
    o.add_argument("--lambda-deadline", type=float)
    o.add_argument("--tasks", type=int, default=1)
    o.add_argument("--output", "-o", help="result file (default: stdout)")
    o.add_argument("--timing", action="store_true", help="record wall-clock in the result")
    o.set_defaults(func=cmd_optimize)

    g = sub.add_parser("generate", help="random instances")
    g.add_argument("--out", "-o", required=True, help="file (count 1, *.json) or directory")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ports", type=int, nargs=2, default=(3, 18), metavar=("MIN", "MAX"))
    g.add_argument("--layers", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    g.add_argument("--flows", type=int, nargs=2, default=(3, 21), metavar=("MIN", "MAX"))
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--k", type=int, default=3, help="candidate paths per flow")
    g.add_argument("--priorities", type=int, default=2)
    g.add_argument("--priority-mode", choices=("independent", "leftover"), default="independent")
    g.add_argument("--max-combinations", type=int)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="all methods over a directory of instances")
    b.add_argument("directory")
    b.add_argument("--methods", nargs="+", choices=optim.METHODS, default=list(optim.METHODS))
    b.add_argument("--seeds", type=int, nargs="+", default=[0])
    b.add_argument("--objective", choices=KINDS, default="average")
    b.add_argument("--budget", type=int, default=500)
    b.add_argument("--limit", type=int, default=10**6, help="enumerate instances up to this many combinations")
    b.add_argument("--tasks", type=int, default=1)
    b.add_argument("--output", "-o", help="per-run records (JSON lines)")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="reverse-mode gradient against finite differences")
    c.add_argument("instance")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=3)
    c.add_argument("--h", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--objective", choices=KINDS, default="average")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InstanceError, InputError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except optim.OptimizationError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
