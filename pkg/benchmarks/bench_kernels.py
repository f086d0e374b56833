"""Time the compiled kernel core against its numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

Both implementations are imported directly, so the benchmark works
regardless of ``DOSEDR_PURE_PYTHON``. Results are checked for agreement
before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from dosedr import _kernels_py
from dosedr.smoother import get_kernel

try:
    from dosedr import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(n: int, rng: np.random.Generator):
    x = np.sort(rng.normal(1.0, 1.1, n))
    y = x ** 2 + rng.normal(0, 1, n)
    centers = np.linspace(-1.0, 3.0, 25)
    h = n ** -0.2
    means = rng.normal(1.0, 0.3, n // 4)
    ep, ga = get_kernel("epanechnikov"), get_kernel("gaussian")
    return {
        "window_moments (25 centers)": lambda m: m.window_moments(x, y, centers, h, ep.id, ep.radius),
        "self_moments (epanechnikov)": lambda m: m.self_moments(x, y, h, ep.id, ep.radius),
        "self_moments (gaussian)": lambda m: m.self_moments(x[: n // 4], y[: n // 4], h, ga.id, ga.radius),
        "gauss_average_density": lambda m: m.gauss_average_density(x[:2000], means, 0.45),
    }


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if _kernels is None:
        raise SystemExit("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'operation':<30}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, fn in cases(args.n, np.random.default_rng(args.seed)).items():
        np.testing.assert_allclose(fn(_kernels), fn(_kernels_py), rtol=1e-10, atol=1e-12)
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name:<30}{1e3 * t_py:>14.2f}{1e3 * t_cy:>14.2f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
