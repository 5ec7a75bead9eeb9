"""Time the numba kernels against the numpy fallbacks on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from moca_lab.kernels import numpy_impl

try:
    from moca_lab.kernels import numba_impl
except ImportError:
    numba_impl = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    a = rng.standard_normal((64, 64))
    gram = a.T @ a
    n = 200_000
    z = rng.beta(31.5, 31.5, n)
    u = rng.random(n)
    draws = rng.integers(0, np.arange(1, 50_001))
    return {
        "jacobi 64x64": lambda m: m.jacobi_eigvals(gram, 1e-12),
        "wood accept 2e5": lambda m: m.wood_accept(z, u, 0.3, 0.5, 10.0, 31.5),
        "reservoir 5e4 offers": lambda m: m.reservoir_assign(50, 0, draws),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_np = _best(lambda: fn(numpy_impl), args.repeat)
        if numba_impl is None:
            print(f"{name:24s} {t_np * 1e3:9.2f}ms {'n/a':>10s}")
            continue
        fn(numba_impl)  # compile outside the timed region
        t_nb = _best(lambda: fn(numba_impl), args.repeat)
        print(f"{name:24s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
