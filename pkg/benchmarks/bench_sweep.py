"""Time one coordinate sweep with the compiled and pure-Python backends.

    python3 benchmarks/bench_sweep.py --sizes 10 25 50 --repeat 3

Both backends run on the same cache and coordinate list; the script also
checks that they produce the same direction.
"""
import argparse
import time

import numpy as np

from sparselqr.coordinate import available_backends, build_spectral_cache
from sparselqr.model import mass_spring
from sparselqr.newton_cd import active_set, initialize
from sparselqr.objective import evaluate


def time_sweep(cache, rows, cols, a, lam, kvals, backend, repeat):
    best = np.inf
    for _ in range(repeat):
        cache.reset()
        t0 = time.perf_counter()
        cache.sweep(rows, cols, a, lam, kvals, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, cache.D.copy()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 25, 50])
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'N':>5} {'coords':>7} {'r':>4} " + " ".join(f"{b + ' (ms)':>15}" for b in backends)
          + f" {'speedup':>8} {'max|dD|':>10}")
    for N in args.sizes:
        plant, cost = mass_spring(N)
        cost = cost.with_lambda(args.lam)
        K = initialize(plant, cost).K
        ev = evaluate(plant, cost, K)
        cache = build_spectral_cache(plant, cost, ev)
        act = active_set(ev, cost, K)
        rows, cols = act.rows, act.cols
        a = cache.curvatures()[rows, cols]
        lam = cost.Lambda[rows, cols]
        kvals = K[rows, cols]
        times, dirs = {}, {}
        for b in backends:
            times[b], dirs[b] = time_sweep(cache, rows, cols, a, lam, kvals, b, args.repeat)
        line = f"{N:>5} {len(rows):>7} {cache.r:>4} " + " ".join(f"{1e3 * times[b]:>15.2f}" for b in backends)
        if "compiled" in times:
            diff = np.abs(dirs["compiled"] - dirs["python"]).max()
            line += f" {times['python'] / times['compiled']:>8.1f} {diff:>10.2e}"
        print(line)


if __name__ == "__main__":
    main()
