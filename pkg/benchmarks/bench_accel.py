"""Compare the numba and numpy paths of the hot kernels.

Run: python3 benchmarks/bench_accel.py [--repeat 5]
Both paths are called in the same process, so numba must be importable;
the env flag only picks the default path used by the library.
"""

import argparse
import time

import numpy as np

from mmdbfair import _accel


def best_of(fn, repeat):
    fn()  # warm-up (triggers JIT compilation on the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    n = 32
    z = rng.normal(size=(2 * n, 8))
    K = _accel._gaussian_gram_np(z, z, 1.0)
    perms = np.stack([rng.permutation(2 * n) for _ in range(200)])
    big = rng.normal(size=(1024, 16))
    Kb = _accel._gaussian_gram_np(big, big, 2.0)
    bperm = np.arange(1024)
    yield "perm_stats n=32 P=200", lambda f: f(K, perms, n), "perm_stats"
    yield "block_stats b=B=16 (2x256 pts)", lambda f: f(Kb, bperm[:512], 16, 16), "block_stats"
    yield "gaussian_gram 1024x1024 d=16", lambda f: f(big, big, 2.0), "gaussian_gram"
    yield "sqdist 1024x1024 d=16", lambda f: f(big, big), "sqdist"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba unavailable (or disabled by MMDBFAIR_PURE_NUMPY); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max abs diff':>13s}")
    for label, call, name in cases(rng):
        f_np = getattr(_accel, f"_{name}_np")
        f_nb = getattr(_accel, f"_{name}_nb")
        diff = float(np.max(np.abs(np.asarray(call(f_np)) - np.asarray(call(f_nb)))))
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        print(f"{label:34s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f} {diff:13.2e}")


if __name__ == "__main__":
    main()
