"""Time the numba and numpy sliced-Wasserstein kernels side by side.

    python benchmarks/bench_swd.py [--repeats 20]

Each row is one (L, n) workload: sort-and-match costs plus the gradient
scatter, i.e. one forward and backward of the estimator after projection.
The first numba call (compilation) is excluded and reported separately.
"""

import argparse
import time

import numpy as np

from dacad import _kernels


def bench(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def workload(costs, scatter, ps, pt):
    def run():
        _, s, t = costs(ps, pt, 2.0)
        scatter(ps, pt, s, t, 2.0, 1.0 / ps.size)
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    warm = rng.standard_normal((2, 4))
    _, s, t = _kernels.sorted_costs_numba(warm, warm, 2.0)
    _kernels.scatter_coeffs_numba(warm, warm, s, t, 2.0, 1.0)
    print(f"numba first call (compile or cache load): {time.perf_counter() - t0:.2f}s\n")

    print(f"{'L':>6} {'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for L, n in [(32, 64), (128, 128), (128, 512), (512, 512), (128, 4096), (1000, 200)]:
        ps, pt = rng.standard_normal((L, n)), rng.standard_normal((L, n))
        t_np = bench(workload(_kernels.sorted_costs_numpy, _kernels.scatter_coeffs_numpy, ps, pt),
                     args.repeats)
        t_nb = bench(workload(_kernels.sorted_costs_numba, _kernels.scatter_coeffs_numba, ps, pt),
                     args.repeats)
        print(f"{L:>6} {n:>6} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
