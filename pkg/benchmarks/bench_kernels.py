"""Compare the compiled and NumPy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, plus the speedup.
Outputs of the two backends are checked for bit equality first.
"""
import argparse
import time

import numpy as np

from manifoldnet.kernels import available_backends

CASES = [
    ("sq_dists 1000x200 d=16", "sq_dists", (1000, 200, 16)),
    ("assign_nearest 2000x30 d=16", "assign_nearest", (2000, 30, 16)),
    ("assign_nearest 2000x30 d=64", "assign_nearest", (2000, 30, 64)),
    ("cluster_sums 5000 d=32 z=30", "cluster_sums", (5000, 30, 32)),
    ("nearest_other 1000 d=64", "nearest_other", (1000, 1000, 64)),
]


def make_args(kernel, n, m, d, rng):
    x = rng.normal(size=(n, d))
    if kernel in ("sq_dists", "assign_nearest"):
        return (x, rng.normal(size=(m, d)))
    if kernel == "cluster_sums":
        return (x, rng.integers(0, m, size=n).astype(np.int64), m)
    return (x, x, True)


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the NumPy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'case':32s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup")
    for label, kernel, (n, m, d) in CASES:
        kargs = make_args(kernel, n, m, d, rng)
        times = {b: best_time(getattr(mod, kernel), kargs, args.repeat) for b, mod in backends.items()}
        line = f"{label:32s} " + " ".join(f"{times[b] * 1e3:8.2f}ms" for b in backends)
        if "cython" in times:
            outs = [getattr(mod, kernel)(*kargs) for mod in backends.values()]
            tag = "" if same(*outs) else "  MISMATCH"
            line += f"   {times['python'] / times['cython']:6.1f}x{tag}"
        print(line)


if __name__ == "__main__":
    main()
