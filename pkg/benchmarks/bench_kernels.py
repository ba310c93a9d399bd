"""Time the numba kernels against their numpy counterparts.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--size 200000]

Each kernel is called once before timing so numba compilation is excluded.
Results are checked for agreement before any timing is reported.
"""
import argparse
import time

import numpy as np

from roadresil import kernels


def workloads(size: int, rng: np.random.Generator) -> dict:
    lat = 32.7 + rng.uniform(-0.5, 0.5, size)
    lon = -97.1 + rng.uniform(-0.5, 0.5, size)
    hours = np.arange(size, dtype=np.int64)
    f = rng.normal(0.0, 3.0, size)
    poly_lat = 32.7 + np.cumsum(rng.uniform(-1e-4, 1e-4, 64))
    poly_lon = -97.1 + np.cumsum(rng.uniform(-1e-4, 1e-4, 64))
    return {
        "haversine_m": (lat[:-1], lon[:-1], lat[1:], lon[1:]),
        "polyline_length_m": (lat, lon),
        "polyline_distance_m": (32.7, -97.1, poly_lat, poly_lon),
        "runs_below": (hours, f, -1.0),
        "trapezoid": (hours.astype(float), f),
        "bin_sums": (hours % 168, f, 168),
    }


def best_of(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.allclose(x, y, rtol=1e-10, atol=1e-12) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-10, atol=1e-12))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=200_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if kernels.NUMBA_KERNELS is None:
        print("numba unavailable or disabled; nothing to compare")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, call_args in workloads(args.size, rng).items():
        np_fn = kernels.NUMPY_KERNELS[name]
        nb_fn = kernels.NUMBA_KERNELS[name]
        if not agree(np_fn(*call_args), nb_fn(*call_args)):
            raise SystemExit(f"{name}: backends disagree")
        t_np = best_of(np_fn, call_args, args.repeat)
        t_nb = best_of(nb_fn, call_args, args.repeat)
        print(f"{name:<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
