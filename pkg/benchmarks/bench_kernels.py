"""Wall-time comparison of the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--N 20000] [--dt 1e-3] [--repeat 3]

Both backends run single-threaded on the same inputs; the script also
confirms they produce the same exit classes.
"""
import argparse
import time

import numpy as np

from chainexit import builtin_model
from chainexit._backend import get_kernels
from chainexit.montecarlo import ExitProblem, run_ensemble
from chainexit.pde import PdeGrid, solve_bvp


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=20_000, help="paths per ensemble")
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--K", type=int, default=128, help="PDE grid size per axis")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    try:
        get_kernels("cython")
        backends = ["cython", "python"]
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")
        backends = ["python"]

    pb = ExitProblem.from_model(builtin_model("lin2"))
    rows = []
    ens = {}
    for b in backends:
        t, ens[b] = best_of(lambda: run_ensemble(pb, 0.5, [0.0, 1e-3], args.N, args.dt, seed=1,
                                                 threads=1, backend=b), args.repeat)
        rows.append(("run_paths (lin2, eps 0.5)", b, t, args.N / t))
    grid = PdeGrid(args.K, args.K, args.K)
    for b in backends:
        t, _ = best_of(lambda: solve_bvp(pb, 0.5, 1e-3, grid, backend=b), args.repeat)
        rows.append((f"solve_bvp {args.K}^3", b, t, None))

    print(f"{'kernel':28s} {'backend':8s} {'seconds':>9s} {'paths/s':>12s}")
    for name, b, t, rate in rows:
        print(f"{name:28s} {b:8s} {t:9.3f} {'' if rate is None else f'{rate:12.0f}'}")
    if len(backends) == 2:
        same = np.array_equal(ens["cython"]["cls"], ens["python"]["cls"])
        print(f"exit classes identical across backends: {same}")
        for name in sorted({r[0] for r in rows}):
            tc, tp = (r[2] for r in rows if r[0] == name)
            print(f"speed-up {name}: {tp / tc:.1f}x")


if __name__ == "__main__":
    main()
