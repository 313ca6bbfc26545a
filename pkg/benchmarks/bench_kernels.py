"""Time the compiled and pure-Python kernel backends on identical inputs.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Each kernel is run on both backends, outputs are checked for equality, and
the best-of-``repeat`` wall time is reported with the speedup.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from aiectr import _pykernels, kernels


def cases(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows, dim = max(n // 50, 1), 8
    idx = rng.integers(0, rows, n).astype(np.int64)
    src = rng.normal(size=(n, dim))
    key = rng.integers(0, 1000, n).astype(float)
    rank = rng.integers(0, 500, n).astype(np.int64)
    group = rng.integers(0, max(n // 10, 1), n).astype(np.int64)
    score = rng.integers(0, 50, n).astype(float)
    n_groups = int(group.max()) + 1
    return {
        "scatter_add_rows": (lambda m: (lambda: _scatter(m, rows, dim, idx, src))),
        "dominance_counts": (lambda m: (lambda: m.dominance_counts(key, rank, 500))),
        "group_argmax": (lambda m: (lambda: m.group_argmax(group, score, n_groups))),
    }


def _scatter(module, rows, dim, idx, src):
    out = np.zeros((rows, dim))
    module.scatter_add_rows(out, idx, src)
    return out


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=200_000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled backend unavailable (extension not built or AIECTR_PURE_PYTHON=1)", file=sys.stderr)
        return 1
    print(f"n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for name, make in cases(args.n).items():
        py_fn, c_fn = make(_pykernels), make(compiled)
        equal = _same(py_fn(), c_fn())
        t_py = min(timeit.repeat(py_fn, number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(c_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x  {equal}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
