"""Archetypal analysis of the vertex-trajectory matrix.

Finds column-stochastic ``B`` (M x K) and ``A`` (K x M) minimizing
``||X - X B A||_F^2``: every archetype ``z_j = X b_j`` is a convex
combination of vertex trajectories and every vertex is a convex combination
of archetypes. Optimized by block-coordinate descent; each block is a simplex
least-squares problem solved exactly, so the objective never increases.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import DataMatrix
from .io import dump_json, save_vmat
from .simplex import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_simplex_qp

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("furthest_sum", "random_vertices")


@dataclass
class FitOptions:
    K: int
    init_strategy: str = "furthest_sum"
    seed: int = 0
    outer_tol: float = 1e-6
    max_outer_iters: int = 200
    restarts: int = 5
    inner_tol: float = DEFAULT_TOL
    inner_max_iter: int = DEFAULT_MAX_ITER
    n_threads: int = 1

    def validate(self, n_vertices=None):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if n_vertices is not None and self.K > n_vertices:
            raise ValueError(f"K={self.K} exceeds the number of vertices M={n_vertices}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}, got {self.init_strategy!r}")
        if not self.outer_tol >= 0 or self.max_outer_iters < 0:
            raise ValueError("outer_tol and max_outer_iters must be non-negative")


@dataclass
class ArchetypeModel:
    B: np.ndarray
    A: np.ndarray
    Z: np.ndarray
    objective: float
    restart: int = 0
    degenerate: bool = False

    @property
    def n_markers(self):
        return self.B.shape[1]


@dataclass
class FitHistory:
    objective_per_iter: list = field(default_factory=list)
    converged: bool = False
    restart_objectives: list = field(default_factory=list)


def _matrix(X):
    return X.X if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)


def _furthest_sum(X, K, start):
    """Greedy max-sum-of-distances selection, then re-pick the starting point."""
    M = X.shape[1]
    sq = np.einsum("ij,ij->j", X, X)

    def dist_to(i):
        d2 = sq + sq[i] - 2.0 * (X[:, i] @ X)
        return np.sqrt(np.maximum(d2, 0.0))

    selected = [int(start)]
    score = dist_to(start)
    for _ in range(1, K):
        cand = score.copy()
        cand[selected] = -np.inf
        j = int(np.argmax(cand))
        selected.append(j)
        score += dist_to(j)
    if K > 1:
        score -= dist_to(selected[0])
        cand = score.copy()
        cand[selected[1:]] = -np.inf
        selected[0] = int(np.argmax(cand))
    return selected


def initialize_archetypes(X, opts, restart=0):
    """Initial ``B`` (M x K) of vertex indicator columns for a given restart."""
    X = _matrix(X)
    M = X.shape[1]
    opts.validate(M)
    rng = np.random.default_rng([opts.seed, restart])
    if opts.init_strategy == "random_vertices":
        idx = rng.choice(M, size=opts.K, replace=False)
    else:
        idx = _furthest_sum(X, opts.K, rng.integers(M))
    B = np.zeros((M, opts.K))
    B[idx, np.arange(opts.K)] = 1.0
    return B


def _objective(X, B, A):
    R = X - (X @ B) @ A
    return float(np.einsum("ij,ij->", R, R))


def _a_step(Gx, B, A, opts):
    XtZ = Gx @ B
    Q = B.T @ XtZ
    W, *_ = solve_simplex_qp(Q, XtZ, np.diag(Gx), A.T, opts.inner_tol,
                             opts.inner_max_iter, n_threads=opts.n_threads)
    return np.ascontiguousarray(W.T)


def _b_step(Gx, B, A, opts):
    K = B.shape[1]
    for j in range(K):
        a = A[j]
        na = float(a @ a)
        if na <= 0.0:
            continue
        q = Gx @ (a - B @ (A @ a)) + na * (Gx @ B[:, j])
        W, *_ = solve_simplex_qp(Gx, q[None] / na, 0.0, B[:, j][None], opts.inner_tol,
                                 opts.inner_max_iter)
        B[:, j] = W[0]
    return B


def _fit_once(X, Gx, opts, restart):
    B = initialize_archetypes(X, opts, restart)
    A0 = np.full((opts.K, X.shape[1]), 1.0 / opts.K)
    A = _a_step(Gx, B, A0, opts)
    obj = _objective(X, B, A)
    history = [obj]
    converged = False
    for _ in range(opts.max_outer_iters):
        B = _b_step(Gx, B, A, opts)
        A = _a_step(Gx, B, A, opts)
        new = _objective(X, B, A)
        history.append(new)
        prev, obj = obj, new
        if prev <= 0.0 or (prev - new) / prev < opts.outer_tol:
            converged = True
            break
    return B, A, obj, history, converged


def fit_archetypes(X, opts):
    """Fit archetypes with ``opts.restarts`` independent restarts.

    The restart with the lowest objective wins (ties go to the earliest).
    Returns ``(ArchetypeModel, FitHistory)``; the history is that of the
    winning restart.
    """
    Xm = _matrix(X)
    if not np.all(np.isfinite(Xm)):
        raise ValueError("data matrix must be finite")
    opts.validate(Xm.shape[1])
    Gx = Xm.T @ Xm
    degenerate = bool(np.allclose(Xm, Xm[:, :1]))
    if degenerate:
        warnings.warn("all vertex trajectories are identical; archetypes are not identifiable")

    best = None
    objectives = []
    for r in range(opts.restarts):
        B, A, obj, hist, conv = _fit_once(Xm, Gx, opts, r)
        objectives.append(obj)
        logger.debug("restart %d: objective %.6g after %d iterations", r, obj, len(hist) - 1)
        if best is None or obj < best[2]:
            best = (B, A, obj, hist, conv, r)
    B, A, obj, hist, conv, r = best
    model = ArchetypeModel(B, A, Xm @ B, obj, restart=r, degenerate=degenerate)
    return model, FitHistory(hist, conv, objectives)


def reconstruction_error(X, model):
    """``(||X - Z A||_F^2, mean per-vertex Euclidean error)`` for a fitted model."""
    if isinstance(X, DataMatrix):
        Xm, n = X.X, X.n_samples
    else:
        Xm = np.asarray(X, dtype=np.float64)
        n = Xm.shape[0] // 3
    Z, A = np.asarray(model.Z, dtype=np.float64), np.asarray(model.A, dtype=np.float64)
    if Z.shape[0] != Xm.shape[0] or A.shape[1] != Xm.shape[1] or Z.shape[1] != A.shape[0]:
        raise ValueError(f"shape mismatch: X {Xm.shape}, Z {Z.shape}, A {A.shape}")
    R = Xm - Z @ A
    frob = float(np.einsum("ij,ij->", R, R))
    per_vertex = np.sqrt((R.reshape(n, 3, -1) ** 2).sum(axis=1))
    return frob, float(per_vertex.mean())


def save_archetype_model(model, out_dir, seed, prefix="archetypes"):
    """Write ``A`` and ``B`` as VMAT files plus a JSON manifest; returns the manifest path."""
    import os

    a_path = os.path.join(out_dir, f"{prefix}_A.vmat")
    b_path = os.path.join(out_dir, f"{prefix}_B.vmat")
    save_vmat(a_path, model.A)
    save_vmat(b_path, model.B)
    manifest = os.path.join(out_dir, f"{prefix}.json")
    dump_json(manifest, {
        "version": 1,
        "K": model.n_markers,
        "seed": seed,
        "objective": model.objective,
        "restart": model.restart,
        "A_file": os.path.basename(a_path),
        "B_file": os.path.basename(b_path),
    })
    return manifest
