"""Time compiled-graph re-evaluation against re-deriving all bounds per evaluation.

Usage: python scripts/precompile_speedup.py [--instances 3] [--flows 100 120]
"""
import argparse
import timeit

from ncsynth import minplus as mp
from ncsynth.gen import GenSpec, generate
from ncsynth.objective import CompiledObjective
from ncsynth.optim import ensure_stable, random_start
from ncsynth.sfa import analyze_all


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--flows", type=int, nargs=2, default=(100, 120))
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    print(f"{'seed':>5}{'flows':>7}{'outputs':>9}{'rederive s':>12}{'compiled s':>12}{'speedup':>9}")
    for seed in range(args.instances):
        inst = generate(GenSpec(ports=(14, 18), flows=tuple(args.flows), seed=seed))
        obj = CompiledObjective(inst)
        x = ensure_stable(obj, random_start(obj, seed))
        slow = min(timeit.repeat(lambda: mp.evaluate([t.expr for t in analyze_all(inst)], x),
                                 number=1, repeat=args.repeat))
        fast = min(timeit.repeat(lambda: obj.graph.forward(x), number=1, repeat=args.repeat))
        print(f"{seed:>5}{len(inst.flows):>7}{obj.graph.n_outputs:>9}{slow:>12.4f}{fast:>12.5f}{slow / fast:>8.0f}x")


if __name__ == "__main__":
    main()
