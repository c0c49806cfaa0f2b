"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same argument conventions;
``vmarker._backend`` picks one at import time.
"""

import numpy as np

# Relative Tikhonov shift added to the reduced Hessian when its exact
# factorization fails or has a squared pivot below PIVOT_FLOOR * max diag(Q),
# so that rank-deficient supports still have a unique minimizer.
RIDGE = 1e-10
PIVOT_FLOOR = 1e-12


def project_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[0]
    # stable sort, descending value then ascending index
    order = np.lexsort((np.arange(d), -v))
    u = v[order]
    css = np.cumsum(u)
    rho = 0
    for k in range(d):
        if u[k] - (css[k] - 1.0) / (k + 1) > 0:
            rho = k
    theta = (css[rho] - 1.0) / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    # cancellation in v - theta can leave the sum off by more than an ulp;
    # a sequential sum keeps this bitwise equal to the compiled kernel
    total = 0.0
    for x in w:
        total += x
    return w / total + 0.0


def _objective(Q, q, c, w):
    return float(w @ Q @ w - 2.0 * (q @ w) + c)


def _kkt(Q, q, w, scale):
    h = Q @ w - q
    support = w > 0
    lam = h[support].min()
    r_in = np.abs(h[support] - lam).max()
    outside = h[~support]
    r_out = max(0.0, lam - outside.min()) if outside.size else 0.0
    return 2.0 * max(r_in, r_out) / scale


def _factor(A, floor):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(L)) ** 2 <= floor:
        return None
    return L


def _solve_one(Q, q, c, w0, tol, max_iter, history=None):
    diag = np.diag(Q)
    scale = max(diag.max(), np.abs(q).max())
    if not scale > 0:
        return w0.copy(), c, 0.0, 0, True
    eps = RIDGE * max(diag.max(), 1e-300)

    w = w0.copy()
    inS = w > 0
    f_start = _objective(Q, q, c, w)
    if history is not None:
        history.append(f_start)
    it = 0
    last_added = -1
    while it < max_iter:
        it += 1
        S = np.flatnonzero(inS)
        QS = Q[np.ix_(S, S)]
        L = _factor(QS, PIVOT_FLOOR * diag.max())
        shift = eps
        while L is None:
            L = _factor(QS + shift * np.eye(S.size), 0.0)
            shift *= 100.0
        y1 = np.linalg.solve(L.T, np.linalg.solve(L, q[S]))
        y2 = np.linalg.solve(L.T, np.linalg.solve(L, np.ones(S.size)))
        mu = (1.0 - y1.sum()) / y2.sum()
        v = y1 + mu * y2
        if v.min() > 0:
            w[:] = 0.0
            w[S] = v
            h = Q @ w - q
            lam = h[S].min()
            out = np.flatnonzero(~inS)
            if out.size:
                j = out[np.argmin(h[out])]
                r_out = max(0.0, lam - h[j])
            else:
                j, r_out = -1, 0.0
            if 2.0 * r_out / scale <= tol:
                break
            if history is not None:
                history.append(_objective(Q, q, c, w))
            inS[j] = True
            last_added = j
        else:
            # blocking coordinate along w -> v
            vk = v
            wk = w[S].copy()
            neg = vk <= 0
            ratios = np.full(S.size, np.inf)
            ratios[neg] = wk[neg] / (wk[neg] - vk[neg])
            b = int(np.argmin(ratios))
            tau = ratios[b]
            blk = S[b]
            if tau == 0.0 and blk == last_added:
                # freshly added coordinate cannot enter: numerically degenerate
                inS[blk] = False
                break
            w[S] = wk + tau * (vk - wk)
            w[blk] = 0.0
            inS[blk] = False
            dead = S[w[S] <= 0]
            w[dead] = 0.0
            inS[dead] = False
            if history is not None:
                history.append(_objective(Q, q, c, w))

    w = np.maximum(w, 0.0)
    w /= w.sum()
    w += 0.0
    f = _objective(Q, q, c, w)
    if f > f_start:
        w = w0.copy()
        f = f_start
    kkt = _kkt(Q, q, w, scale)
    return w, f, kkt, it, kkt <= tol


def simplex_qp_batch(Q, q, c, W, tol, max_iter):
    """Solve ``min_w w'Qw - 2 q_r'w + c_r`` over the simplex for every row.

    ``W`` holds feasible warm starts and is overwritten with the solutions.
    Returns ``(objective, kkt_residual, iterations, converged)`` arrays.
    """
    n = q.shape[0]
    obj = np.empty(n)
    kkt = np.empty(n)
    iters = np.empty(n, dtype=np.int32)
    conv = np.empty(n, dtype=np.uint8)
    for r in range(n):
        w, f, k, it, ok = _solve_one(Q, q[r], c[r], W[r], tol, max_iter)
        W[r] = w
        obj[r], kkt[r], iters[r], conv[r] = f, k, it, ok
    return obj, kkt, iters, conv
