"""Time the numba and numpy kernel paths side by side.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths live in ``neuroloc.kernels`` regardless of ``NEUROLOC_NUMBA``;
this script calls them directly, checks they agree, and prints the median
time per call.
"""

import argparse
import statistics
import time

import numpy as np

from neuroloc import headmodel, kernels
from neuroloc._accel import HAVE_NUMBA


def timed(fn, repeat):
    fn()  # warm-up (includes JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    for c, n in ((8, 8), (8, 16), (3, 16)):
        x = rng.standard_normal((8, n, n, n))
        w = rng.standard_normal((c, 8, 3, 3, 3))
        b = rng.standard_normal(c)
        g = rng.standard_normal((c, n, n, n))
        yield (f"conv3d fwd 8->{c} @ {n}^3", kernels._conv3d_forward_nb,
               kernels._conv3d_forward_np, (x, w, b))
        yield (f"conv3d bwd 8->{c} @ {n}^3", kernels._conv3d_backward_nb,
               kernels._conv3d_backward_np, (x, w, g))
    space = headmodel.build_source_space(90.0, 70.0, 10.0, min_radius=5.0)
    sensors = headmodel.build_sensor_array(60, 120.0)
    yield (f"lead field 60 x {space.n_points} pts", kernels._lead_field_nb,
           kernels._lead_field_np, (space.points, sensors.positions, sensors.orientations))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<28} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow, a in cases(rng):
        ra, rb = fast(*a), slow(*a)
        ra = ra if isinstance(ra, tuple) else (ra,)
        rb = rb if isinstance(rb, tuple) else (rb,)
        for u, v in zip(ra, rb):
            np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-9 * np.abs(v).max())
        t_nb = timed(lambda: fast(*a), args.repeat)
        t_np = timed(lambda: slow(*a), args.repeat)
        print(f"{name:<28} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
