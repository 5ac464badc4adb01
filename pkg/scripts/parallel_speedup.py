"""Time forward plus backward passes at several task counts and check results are bitwise equal.

Usage: python scripts/parallel_speedup.py [--flows 300 340] [--tasks 1 2 4 8]
"""
import argparse
import os
import timeit

import numpy as np

from ncsynth import adgraph
from ncsynth.gen import GenSpec, generate
from ncsynth.objective import CompiledObjective
from ncsynth.optim import ensure_stable, random_start


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--flows", type=int, nargs=2, default=(300, 340))
    p.add_argument("--tasks", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    inst = generate(GenSpec(ports=(30, 40), flows=tuple(args.flows), seed=args.seed))
    obj = CompiledObjective(inst)
    g = obj.graph
    x = ensure_stable(obj, random_start(obj, args.seed))
    w = np.ones(g.n_outputs)
    print(f"{len(inst.flows)} flows, {g.n_outputs} outputs, {os.cpu_count()} CPUs")

    ref = adgraph.eval_parallel(g, x, tasks=1, weights=w)
    base = None
    for tasks in args.tasks:
        res = adgraph.eval_parallel(g, x, tasks=tasks, weights=w)
        same = res.values.tobytes() == ref.values.tobytes() and res.gradient.tobytes() == ref.gradient.tobytes()
        t = min(timeit.repeat(lambda: adgraph.eval_parallel(g, x, tasks=tasks, weights=w),
                              number=1, repeat=args.repeat))
        base = base or t
        print(f"tasks={tasks:<3} {t:.4f}s  speedup {base / t:.2f}x  bitwise equal: {same}")


if __name__ == "__main__":
    main()
