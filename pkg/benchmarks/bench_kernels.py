"""Time the compiled and numpy kernel backends on typical batch sizes.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 256 1000]
"""
import argparse
import timeit

import numpy as np

from moesimvae import kernels


def cases(n, rng):
    x = rng.random((n, 784))
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1) if n <= 512 else \
        np.maximum((x * x).sum(1)[:, None] + (x * x).sum(1)[None] - 2 * x @ x.T, 0)
    p = rng.dirichlet(np.ones(10), size=n)
    gram = p @ p.T
    target = (rng.random((n, n)) < 0.05).astype(np.uint8)
    z = rng.standard_normal((n, 10))
    in_x = np.zeros(2 * n, dtype=np.uint8)
    in_x[:n] = 1
    kmat = np.exp(-rng.random((2 * n, 2 * n)))
    return {
        "knn_from_sqdist": lambda m: m.knn_from_sqdist(sq, 10),
        "similarity_bce": lambda m: m.similarity_bce(gram, target, True, 1e-8),
        "rbf_kernel": lambda m: m.rbf_kernel(z, z, 1.0),
        "mmd_block_sums": lambda m: m.mmd_block_sums(kmat, in_x),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1000])
    args = ap.parse_args()
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled backend not built; timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'n':>6}" + "".join(f"{name + ' ms':>14}" for name in backends) + f"{'speedup':>10}")
    for n in args.sizes:
        for name, fn in cases(n, rng).items():
            times = {b: min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
                     for b, mod in backends.items()}
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<18}{n:>6}" + "".join(f"{t:>14.2f}" for t in times.values()) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
