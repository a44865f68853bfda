#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the hot kernels (3x3 convolution forward/backward and the two PDE
steps) on training-representative shapes and prints a comparison table.
Both implementations are imported directly, so the PSTMAE_BACKEND flag
does not matter here.

Usage: python benchmarks/bench_backends.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from pstmae import kernels_numba, kernels_numpy


def timeit(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(name, make_args, call, repeats):
    args = make_args()
    t_np = timeit(lambda: call(kernels_numpy, *args), repeats)
    t_nb = timeit(lambda: call(kernels_numba, *args), repeats)
    ref = call(kernels_numpy, *args)
    got = call(kernels_numba, *args)
    if isinstance(ref, tuple):
        err = max(float(np.abs(r - g).max()) for r, g in zip(ref, got))
    else:
        err = float(np.abs(ref - got).max())
    speedup = t_np / t_nb
    print(f"{name:<34} numpy {t_np * 1e3:8.3f} ms   numba {t_nb * 1e3:8.3f} ms   "
          f"numba speedup {speedup:6.2f}x   max|diff| {err:.2e}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    def conv_args(n, c, o, hw, stride):
        x = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
        k = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        dy = rng.standard_normal((n, o, hw // stride, hw // stride)).astype(np.float32)
        return x, k, dy, stride, hw

    print("== 3x3 convolution kernels (training shapes) ==")
    for n, c, o, hw, s, tag in ((64, 8, 16, 32, 2, "batch64 8->16ch 32px s2"),
                                (120, 16, 8, 32, 2, "batch120 16->8ch 32px s2"),
                                (8, 3, 8, 128, 1, "batch8 3->8ch 128px s1")):
        x, k, dy, stride, hw = conv_args(n, c, o, hw, s)
        bench_case(f"conv_fwd {tag}", lambda x=x, k=k, stride=stride: (x, k, stride),
                   lambda m, x, k, stride: m.conv_fwd(x, k, stride), args.repeats)
        bench_case(f"conv_input_grad {tag}",
                   lambda dy=dy, k=k, stride=stride, hw=hw: (dy, k, stride, hw),
                   lambda m, dy, k, stride, hw: m.conv_input_grad(dy, k, stride, hw, hw), args.repeats)
        bench_case(f"conv_kernel_grad {tag}",
                   lambda x=x, dy=dy, stride=stride: (x, dy, stride),
                   lambda m, x, dy, stride: m.conv_kernel_grad(x, dy, stride), args.repeats)

    print("== PDE steps ==")
    for n in (64, 128):
        h = 1.0 + 0.1 * rng.standard_normal((n, n))
        u = 0.01 * rng.standard_normal((n, n))
        v = 0.01 * rng.standard_normal((n, n))
        bench_case(f"swe_step {n}x{n}", lambda h=h, u=u, v=v: (h, u, v),
                   lambda m, h, u, v: m.swe_step(h, u, v, 1.0, 0.5, 1e-4, 1e-2), args.repeats)
        uu = rng.uniform(-1, 1, (n, n))
        vv = rng.uniform(-1, 1, (n, n))
        bench_case(f"dr_step {n}x{n}", lambda uu=uu, vv=vv: (uu, vv),
                   lambda m, uu, vv: m.dr_step(uu, vv, 1e-3, 5e-3, 5e-3, 5e-3, 2.0 / n), args.repeats)


if __name__ == "__main__":
    main()
