"""Time every hot kernel under the numba and the numpy backend.

    python benchmarks/bench_kernels.py [--elements N] [--repeat R]

Each kernel is called once per backend to warm up (numba compiles on
first call), then timed as the best of ``--repeat`` runs. Outputs of the
two backends are compared before timing.
"""
import argparse
import time

import numpy as np

from qxkit import kernels


def inputs(n, rng):
    x = (rng.standard_normal(n) * 0.02).astype(np.float32)
    g = n // 64
    codebooks = np.sort(rng.uniform(-1, 1, (4, 16)))
    scale = np.abs(x.reshape(-1, 64)).max(axis=1).astype(np.float64)
    normed = x.reshape(-1, 64) / scale[:, None]
    blocks = x.reshape(-1, 32)
    d = np.abs(blocks).max(axis=1).astype(np.float64) / 8
    chunks = x.reshape(-1, 8, 32)
    lo = np.minimum(chunks.min(axis=2), 0).astype(np.float64)
    step = ((chunks.max(axis=2) - lo) / 15).astype(np.float64)
    hist = rng.dirichlet(np.ones(32), size=min(g, 8192))
    return {
        "group_histograms": (x.reshape(-1, 64), 32),
        "nearest_centroid": (normed.astype(np.float64), codebooks, rng.integers(0, 4, g)),
        "kmeans_assign": (hist, hist[:4].copy()),
        "q40_codes": (blocks, d),
        "affine_codes": (chunks, step, -lo),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--elements", type=int, default=2 ** 20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    n = max(256, args.elements // 256 * 256)
    data = inputs(n, np.random.default_rng(args.seed))

    print(f"{n} elements, best of {args.repeat}")
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  match")
    for name, call_args in data.items():
        nb, npy = kernels.get(name, "numba"), kernels.get(name, "numpy")
        match = same(nb(*call_args), npy(*call_args))
        t_nb = best_of(nb, call_args, args.repeat)
        t_np = best_of(npy, call_args, args.repeat)
        print(f"{name:<18} {t_nb * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_nb:>7.1f}x  {'yes' if match else 'NO'}")


if __name__ == "__main__":
    main()
