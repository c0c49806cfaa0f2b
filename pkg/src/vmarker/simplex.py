"""Probability-simplex projection and simplex-constrained least squares.

The solver is an active-set method working on the Gram form of the problem,
``min_w w'Qw - 2q'w + c`` with ``Q = D'D``, ``q = D't``, ``c = t't``, which
lets one factorization of ``Q`` serve thousands of right-hand sides (one per
mesh vertex in the archetype fit).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels_py
from ._backend import get_kernels

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500


@dataclass
class SimplexLSResult:
    w: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool = True


def project_to_simplex(v, backend=None):
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("expected a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return get_kernels(backend).project_simplex(v)


def _as_warm_start(W0, n, d):
    if W0 is None:
        return np.full((n, d), 1.0 / d)
    W = np.array(W0, dtype=np.float64, ndmin=2, copy=True)
    if W.shape != (n, d):
        raise ValueError(f"warm start must be ({n}, {d}), got {W.shape}")
    bad = (W < 0).any(axis=1) | (np.abs(W.sum(axis=1) - 1.0) > 1e-9)
    for r in np.flatnonzero(bad):
        W[r] = _kernels_py.project_simplex(W[r])
    return np.ascontiguousarray(W)


def solve_simplex_qp(Q, q, c=None, W0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                     n_threads=1, backend=None):
    """Solve one simplex QP per row of ``q`` sharing the quadratic term ``Q``.

    Rows are split into contiguous chunks, one per thread; each row is solved
    independently, so results do not depend on ``n_threads``.

    Returns
    -------
    W : (n, d) solutions
    objective, kkt_residual : (n,) float arrays
    iterations : (n,) int array
    converged : (n,) bool array
    """
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    q = np.ascontiguousarray(np.atleast_2d(q), dtype=np.float64)
    n, d = q.shape
    if Q.shape != (d, d):
        raise ValueError(f"Q must be ({d}, {d}), got {Q.shape}")
    c = np.zeros(n) if c is None else np.ascontiguousarray(np.broadcast_to(c, (n,)), dtype=np.float64)
    W = _as_warm_start(W0, n, d)
    kern = get_kernels(backend)

    n_threads = max(1, min(int(n_threads), n))
    bounds = np.linspace(0, n, n_threads + 1).astype(int)
    chunks = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(ab):
        a, b = ab
        return kern.simplex_qp_batch(Q, q[a:b], c[a:b], W[a:b], tol, max_iter)

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    obj = np.concatenate([p[0] for p in parts])
    kkt = np.concatenate([p[1] for p in parts])
    iters = np.concatenate([p[2] for p in parts])
    conv = np.concatenate([p[3] for p in parts]).astype(bool)
    return W, obj, kkt, iters, conv


def simplex_ls(D, t, w0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, backend=None,
               history=None):
    """Minimize ``||t - D w||^2`` over the probability simplex.

    ``kkt_residual`` is the largest stationarity/complementarity violation of
    the gradient ``2 D'(Dw - t)``, divided by ``max(max diag D'D, max |D't|)``
    so that the tolerance does not depend on the units of ``D``. Passing a
    list as ``history`` runs the pure-Python kernel and appends the objective
    after every active-set step.
    """
    D = np.asarray(D, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if D.ndim != 2 or t.shape != (D.shape[0],):
        raise ValueError(f"shape mismatch: D {D.shape}, t {t.shape}")
    if D.shape[1] < 1:
        raise ValueError("need at least one column")
    if not tol > 0:
        raise ValueError("tol must be positive")
    Q = D.T @ D
    q = D.T @ t
    W0 = None if w0 is None else np.asarray(w0, dtype=np.float64)[None]
    if history is not None:
        W = _as_warm_start(W0, 1, D.shape[1])
        w, _, kkt, it, ok = _kernels_py._solve_one(Q, q, float(t @ t), W[0], tol, max_iter,
                                                    history=history)
        W[0] = w
        kkt, it, conv = [kkt], [it], [ok]
    else:
        W, _, kkt, it, conv = solve_simplex_qp(Q, q[None], t @ t, W0, tol, max_iter, backend=backend)
    w = W[0]
    r = t - D @ w
    return SimplexLSResult(w, float(r @ r), float(kkt[0]), int(it[0]), bool(conv[0]))


# -- independent oracle -------------------------------------------------------

def _michelot_projection(v):
    """Simplex projection by Michelot's iterative support pruning (oracle-only)."""
    keep = np.ones(v.size, dtype=bool)
    while True:
        theta = (v[keep].sum() - 1.0) / keep.sum()
        drop = keep & (v - theta <= 0)
        if not drop.any():
            break
        keep &= ~drop
    w = np.where(keep, v - theta, 0.0)
    return w / w.sum()


@lru_cache(maxsize=8)
def simplex_grid(d, step):
    """All points of the barycentric grid on the d-simplex with spacing ``step``."""
    n = int(round(1.0 / step))
    axes = np.meshgrid(*([np.arange(n + 1)] * (d - 1)), indexing="ij")
    counts = np.stack([a.ravel() for a in axes], axis=1)
    counts = counts[counts.sum(axis=1) <= n]
    last = n - counts.sum(axis=1, keepdims=True)
    grid = np.hstack([counts, last]).astype(np.float64) / n
    grid.setflags(write=False)
    return grid


def brute_force_simplex_ls(D, t, grid_step=1e-2, refine_iters=2000):
    """Grid enumeration of the simplex followed by accelerated projected gradient.

    Only meant for verification on tiny problems (``d <= 4``).
    """
    D = np.asarray(D, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = D.shape[1]
    if d > 4:
        raise ValueError(f"brute force supports d <= 4, got d={d}")
    if grid_step > 1e-2:
        raise ValueError("grid_step must be <= 1e-2")
    if d == 1:
        w = np.ones(1)
        r = t - D @ w
        return SimplexLSResult(w, float(r @ r), 0.0, 1)

    grid = simplex_grid(d, grid_step)
    res = grid @ D.T - t
    obj = np.einsum("ij,ij->i", res, res)
    w = grid[int(np.argmin(obj))].copy()

    L = 2.0 * np.linalg.norm(D, 2) ** 2
    if L > 0:
        y, w_prev, s = w.copy(), w.copy(), 1.0
        for _ in range(refine_iters):
            g = 2.0 * D.T @ (D @ y - t)
            w_new = _michelot_projection(y - g / L)
            s_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
            y = w_new + ((s - 1.0) / s_new) * (w_new - w_prev)
            w_prev, s = w_new, s_new
        r_new = t - D @ w_prev
        r_old = t - D @ w
        if r_new @ r_new <= r_old @ r_old:
            w = w_prev
    r = t - D @ w
    return SimplexLSResult(w, float(r @ r), float("nan"), refine_iters)
