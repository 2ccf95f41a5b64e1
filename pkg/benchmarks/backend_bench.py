"""Timing comparison between the numba-jitted kernels and the numpy fallback.

Run:  python3 benchmarks/backend_bench.py
"""

from __future__ import annotations

import time

import numpy as np

from polydrive import accel, kernels


def _timeit(fn, *args, repeat: int = 5, inner: int = 20) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def _cases():
    rng = np.random.default_rng(0)

    rel = rng.normal(0.0, 10.0, (8, 20, 2))
    dists = np.linalg.norm(rel[:, -1, :], axis=1)
    cells = np.zeros((13, 3, 20, 6), dtype=np.float64)
    labels = np.full((13, 3, 20), -1, dtype=np.int64)
    yield "bin_proximity", (rel, dists, 3, cells, labels)

    pts = np.cumsum(rng.uniform(0.5, 2.0, (400, 2)), axis=0)
    cumlen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    yield "polyline_project", (pts, cumlen, 150.0, pts[200, 0] + 1.0, pts[200, 1] - 1.0, 8.0, 20.0)
    yield "polyline_point", (pts, cumlen, 123.4)

    n = 24
    states = rng.normal(0.0, 5.0, (n, 4))
    cmds = rng.normal(0.0, 0.3, (n, 2))
    is_car = np.ones(n, dtype=np.bool_)
    yield "integrate_cars", (states.copy(), cmds, is_car, 0.1, 2.5, 8.33)

    m = 40
    a = rng.normal(0.0, 50.0, (m, 2))
    b = a + rng.normal(0.0, 30.0, (m, 2))
    dist = np.empty(m)
    s = np.empty(m)
    lat = np.empty(m)
    yield "segment_features", (3.0, 4.0, a, b, dist, s, lat)


def main() -> None:
    print(f"active backend: {accel.BACKEND}")
    header = f"{'kernel':<18} {'jit (us)':>10} {'numpy (us)':>11} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, args in _cases():
        fn = getattr(kernels, name)
        fallback = getattr(fn, "py_func", fn)
        fn(*args)  # trigger compilation outside the timed region
        t_jit = _timeit(fn, *args)
        t_py = _timeit(fallback, *args)
        speedup = t_py / t_jit if t_jit > 0 else float("inf")
        print(f"{name:<18} {t_jit * 1e6:>10.1f} {t_py * 1e6:>11.1f} {speedup:>7.1f}x")
    if accel.BACKEND != "numba":
        print("note: numba backend inactive (POLYDRIVE_NUMBA=0 or numba missing); "
              "both columns time the fallback.")


if __name__ == "__main__":
    main()
