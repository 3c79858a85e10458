"""Compare the numba and numpy kernel backends on representative shapes.

    python benchmarks/bench_kernels.py [--repeat 50]

Each kernel is first checked for agreement across backends, then timed
with the best-of-N wall clock. Numba compile time is excluded (one warm-up
call per kernel).
"""
import argparse
import time

import numpy as np

from cosda import _kernels


def make_cases(rng):
    x = rng.standard_normal((64, 256))
    gain = rng.standard_normal(256)
    shift = rng.standard_normal(256)
    _, xhat, _, _, inv_std = _kernels.implementations("numpy")["bn_train_forward"](x, gain, shift, 1e-5)
    gout = rng.standard_normal((64, 256))
    p = rng.dirichlet(np.ones(10), size=4096)
    q = rng.dirichlet(np.ones(10), size=4096)
    base = rng.standard_normal(3)
    partner = rng.standard_normal((64, 3))
    thetas = rng.uniform(0.5, 1.0, 200_000)
    js = rng.integers(0, 64, 200_000)
    target = rng.standard_normal(3)
    xa = rng.standard_normal((2000, 32))
    wa = rng.standard_normal((32, 32))
    ba = rng.standard_normal(32)
    return {
        "affine_rows": (xa, wa, ba),
        "bn_train_forward": (x, gain, shift, 1e-5),
        "bn_train_backward": (gout, xhat, gain, inv_std),
        "rowwise_kl": (p, q, 1e-12),
        "rowwise_entropy": (p,),
        "pair_moments": (base, partner, thetas, js, target),
    }


def best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cases = make_cases(np.random.default_rng(args.seed))
    nb = _kernels.implementations("numba")
    npy = _kernels.implementations("numpy")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, case in cases.items():
        diff = max_diff(nb[name](*case), npy[name](*case))  # also warms up the jit
        t_np = best_of(npy[name], case, args.repeat)
        t_nb = best_of(nb[name], case, args.repeat)
        print(f"{name:<20} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
