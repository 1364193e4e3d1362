"""Timing comparison of the numba kernels against the pure-numpy fallback.

The backend is fixed at import time by MALSIM_BACKEND, so this script
re-executes itself once per backend in a subprocess and merges the results.

    python3 benchmarks/bench_backends.py            # compare both backends
    python3 benchmarks/bench_backends.py --repeats 5
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def make_workloads(rng):
    Xc = rng.normal(size=(2000, 256))
    Yc = rng.normal(size=(1000, 256))
    Li = rng.integers(0, 64, size=(2000, 400))
    Mi = rng.integers(0, 64, size=(1000, 400))
    Xs = rng.normal(size=(20000, 64))
    g = rng.normal(size=20000)
    h = rng.uniform(0.01, 0.25, size=20000)
    return {
        "sq_dist_matrix 2000x1000, d=256": lambda k: k.sq_dist_matrix(Xc, Yc),
        "mismatch_matrix 2000x1000, T=400": lambda k: k.mismatch_matrix(Li, Mi),
        "best_split n=20000, d=64": lambda k: k.best_split(Xs, g, h, 1.0, 0.0, 1.0),
    }


def run_child(repeats):
    from malsim import kernels
    from malsim.backend import backend_name

    rng = np.random.default_rng(0)
    workloads = make_workloads(rng)
    results = {"backend": backend_name(), "timings": {}}
    for name, fn in workloads.items():
        fn(kernels)  # warm-up (includes jit compilation on the numba backend)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(kernels)
            times.append(time.perf_counter() - t0)
        results["timings"][name] = min(times)
    print(json.dumps(results))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        run_child(args.repeats)
        return

    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, MALSIM_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--child",
             "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True)
        doc = json.loads(out.stdout.strip().splitlines()[-1])
        assert doc["backend"] == backend, f"backend flag ignored: {doc['backend']}"
        results[backend] = doc["timings"]

    width = max(len(n) for n in results["numba"])
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name in results["numba"]:
        nb, np_ = results["numba"][name], results["numpy"][name]
        print(f"{name:<{width}}  {nb * 1e3:>8.1f}ms  {np_ * 1e3:>8.1f}ms  {np_ / nb:>7.1f}x")


if __name__ == "__main__":
    main()
