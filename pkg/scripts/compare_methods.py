"""Run every optimizer on small generated instances and report optimum hit rate and gap.

Usage: python scripts/compare_methods.py [--count 200] [--seed 4000] [--budget 500]
"""
import argparse
import math

import numpy as np

from ncsynth.gen import GenSpec, enumerate_optimum, generate
from ncsynth.objective import CompiledObjective
from ncsynth.optim import METHODS, run_method


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=4000)
    p.add_argument("--budget", type=int, default=500)
    p.add_argument("--methods", nargs="+", default=list(METHODS))
    args = p.parse_args()

    found = {m: [] for m in args.methods}
    gaps = {m: [] for m in args.methods}
    infeasible = {m: 0 for m in args.methods}
    for n in range(args.count):
        inst = generate(GenSpec(ports=(3, 10), flows=(3, 8), max_combinations=4096, seed=args.seed + n))
        best = enumerate_optimum(CompiledObjective(inst)).value
        for m in args.methods:
            rep = run_method(CompiledObjective(inst), m, n, args.budget)
            val = rep.objective if rep.feasible else math.inf
            infeasible[m] += not rep.feasible
            found[m].append(val <= best * (1 + 1e-9))
            if math.isfinite(val):
                gaps[m].append(val / best - 1)

    print(f"{'method':<22}{'optimum %':>10}{'mean gap %':>12}{'p90 gap %':>11}{'infeasible':>12}")
    for m in args.methods:
        g = np.array(gaps[m]) if gaps[m] else np.array([np.nan])
        print(f"{m:<22}{100 * np.mean(found[m]):>10.1f}{100 * g.mean():>12.2f}"
              f"{100 * np.percentile(g, 90):>11.2f}{infeasible[m]:>12}")


if __name__ == "__main__":
    main()
