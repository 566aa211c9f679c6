"""Compare the numba and pure-numpy kernel paths on representative shapes.

    python3 benchmarks/bench_kernels.py [--repeat N] [--density D]

Both paths are called directly, so the env flag does not matter here.  The
numba path gets its weights pre-transposed, as the engine caches them.  Each
row reports the best-of-N wall time per call and checks the two results agree.
"""
import argparse
import time
from functools import partial

import numpy as np

from evspike import kernels


def best_time(fn, repeat):
    fn()  # warm-up (JIT compile for the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def sparse(rng, shape, density):
    x = rng.integers(1, 4, size=shape).astype(np.float64)
    return x * (rng.random(shape) < density)


def _nb_conv(w):
    return partial(kernels.conv_scatter_nb, wt=np.ascontiguousarray(w.transpose(1, 2, 3, 0)))


def cases(rng, density):
    x = sparse(rng, (2, 160, 160), density)
    w = rng.integers(-127, 128, size=(16, 2, 3, 3)).astype(np.float64)
    yield "conv 2x160x160 -> 16", _nb_conv(w), kernels.conv_scatter_np, (x, w, 2, 0, 79, 79)

    x = sparse(rng, (32, 39, 39), density)
    w = rng.integers(-127, 128, size=(64, 32, 3, 3)).astype(np.float64)
    yield "conv 32x39x39 -> 64", _nb_conv(w), kernels.conv_scatter_np, (x, w, 2, 0, 19, 19)

    x = sparse(rng, (96, 40, 40), density)
    w = rng.integers(-127, 128, size=(96, 3, 3)).astype(np.float64)
    yield "dw 96x40x40", kernels.dw_scatter_nb, kernels.dw_scatter_np, (x, w, 1, 1, 40, 40)

    x = sparse(rng, (4096,), density)
    w = rng.integers(-127, 128, size=(128, 4096)).astype(np.float64)
    yield "fc 4096 -> 128", partial(kernels.fc_scatter_nb, wt=np.ascontiguousarray(w.T)), kernels.fc_scatter_np, (x, w)


def bin_case(rng, n):
    t = np.sort(rng.integers(0, 1_000_000, n)).astype(np.uint64)
    x = rng.integers(0, 160, n).astype(np.uint16)
    y = rng.integers(0, 160, n).astype(np.uint16)
    p = rng.integers(0, 2, n).astype(np.uint8)
    return (t, x, y, p, 20_000, 50, 160, 160)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--density", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<24} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  match")
    rows = list(cases(rng, args.density))
    a = bin_case(rng, 1_000_000)
    rows.append(("bin 1M events", kernels._bin_events_nb, kernels._bin_events_np, a))
    for name, nb, npy, fargs in rows:
        t_nb = best_time(lambda: nb(*fargs), args.repeat)
        t_np = best_time(lambda: npy(*fargs), args.repeat)
        r_nb, r_np = nb(*fargs), npy(*fargs)
        if isinstance(r_nb, tuple):
            ok = np.array_equal(r_nb[0], r_np[0]) and r_nb[1] == r_np[1]
        else:
            ok = np.array_equal(r_nb, r_np)
        print(f"{name:<24} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
