"""Timing comparison of the compiled and pure-Python kernel backends.

Runs each hot kernel on workload shapes close to what crafting and
filtering actually use (vocab 2000, dim 32, documents of 50 tokens) and
reports the best wall time per call over a number of repeats.

    python3 benchmarks/bench_kernels.py [--repeats N] [--seed S]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ragward import _kernels_py

try:
    from ragward import _kernels
except ImportError:
    _kernels = None


def best_ms(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def build_workload(seed):
    rng = np.random.default_rng(seed)
    V, D, T = 2000, 32, 50
    E = np.ascontiguousarray(rng.normal(0, 0.1, size=(V, D)))
    w = np.ascontiguousarray(rng.normal(0, 0.1, size=D))
    q = np.ascontiguousarray(rng.normal(0, 1.0, size=D))
    ids = np.ascontiguousarray(rng.integers(0, V, size=T), dtype=np.int64)
    cand = np.ascontiguousarray(np.arange(V), dtype=np.int64)
    scale = 1.0 / np.sqrt(D)
    return E, w, q, ids, cand, scale


def bench_backend(mod, repeats, seed):
    E, w, q, ids, cand, scale = build_workload(seed)

    def flip_step():
        # one optimizer step: gradient at a position, then exact
        # re-scoring of every candidate substitution
        grad = mod.grad_at(E, w, scale, ids, q, 7)
        fo = E @ grad
        top = np.argsort(-fo)[:200].astype(np.int64)
        mod.substitution_scores(E, w, scale, ids, 7, top, q)

    return {
        "pool": best_ms(lambda: mod.pool(E, w, scale, ids), repeats),
        "grad_norms": best_ms(lambda: mod.grad_norms(E, w, scale, ids, q), repeats),
        "substitution_scores(C=V)": best_ms(
            lambda: mod.substitution_scores(E, w, scale, ids, 7, cand, q), repeats),
        "flip_step(C=200)": best_ms(flip_step, repeats),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    results = {"python": bench_backend(_kernels_py, args.repeats, args.seed)}
    if _kernels is not None:
        results["compiled"] = bench_backend(_kernels, args.repeats, args.seed)
    else:
        print("compiled backend not importable; timing python only\n")

    ops = list(results["python"])
    width = max(len(op) for op in ops)
    header = f"{'kernel':<{width}}  {'python ms':>10}"
    if "compiled" in results:
        header += f"  {'compiled ms':>11}  {'speedup':>7}"
    print(header)
    print("-" * len(header))
    for op in ops:
        py = results["python"][op]
        line = f"{op:<{width}}  {py:>10.3f}"
        if "compiled" in results:
            cy = results["compiled"][op]
            line += f"  {cy:>11.3f}  {py / cy:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
