"""Compare the compiled and pure-Python kernels on the workloads of an archetype fit.

    python3 benchmarks/bench_kernels.py [--repeats 3] [--K 16 64] [--threads 1]

Each workload is a batch of simplex QPs sharing one Gram matrix, built from the
default synthetic dataset the way the coefficient step of the fit builds them.
Before reporting timings the script checks that the backends agree: QP solutions
to 1e-10 (LAPACK and the compiled Cholesky sum in different orders) and simplex
projections bitwise.
"""

import argparse
import statistics
import time

import numpy as np

from vmarker import _backend
from vmarker.dataset import assemble_data_matrix
from vmarker.simplex import project_to_simplex, solve_simplex_qp
from vmarker.synth import SynthConfig, generate_synthetic_dataset


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times), out


def coefficient_batch(X, K, seed):
    """Gram matrix of K random data columns and one right-hand side per data column."""
    rng = np.random.default_rng(seed)
    Z = X[:, rng.choice(X.shape[1], size=K, replace=False)]
    return Z.T @ Z, X.T @ Z, np.einsum("ij,ij->j", X, X)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--K", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    if not _backend.HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    X = assemble_data_matrix(generate_synthetic_dataset(SynthConfig(), seed=0)).X
    print(f"data matrix {X.shape[0]} x {X.shape[1]}, threads={args.threads}, best of {args.repeats}")
    print(f"{'workload':<28}{'python s':>11}{'compiled s':>12}{'speedup':>10}")

    for K in args.K:
        Q, q, c = coefficient_batch(X, K, seed=K)
        res = {}
        for name in ("python", "compiled"):
            res[name] = best_of(lambda: solve_simplex_qp(Q, q, c, n_threads=args.threads, backend=name),
                                args.repeats)
        W_py, W_c = res["python"][2][0], res["compiled"][2][0]
        diff = np.abs(W_py - W_c).max()
        if diff > 1e-10:
            raise SystemExit(f"K={K}: backends disagree (max diff {diff:.3e})")
        tp, tc = res["python"][0], res["compiled"][0]
        print(f"{f'QP batch K={K}, {q.shape[0]} rows':<28}{tp:>11.4f}{tc:>12.4f}{tp / tc:>9.1f}x")

    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(2000, 64))
    res = {}
    for name in ("python", "compiled"):
        res[name] = best_of(lambda: [project_to_simplex(v, backend=name) for v in vecs], args.repeats)
    same = all(a.tobytes() == b.tobytes() for a, b in zip(res["python"][2], res["compiled"][2]))
    if not same:
        raise SystemExit("projection: backends disagree")
    tp, tc = res["python"][0], res["compiled"][0]
    print(f"{'projection 2000 x d=64':<28}{tp:>11.4f}{tc:>12.4f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
