# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: simplex projection and a batched active-set solver for
simplex-constrained quadratic programs in Gram form.

Mirrors ``_kernels_py`` function for function.
"""

import numpy as np

from libc.math cimport sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free, qsort
from libc.string cimport memcpy

cdef double RIDGE = 1e-10
cdef double PIVOT_FLOOR = 1e-12


ctypedef struct _entry:
    double val
    Py_ssize_t idx


cdef int _cmp_desc(const void* a, const void* b) noexcept nogil:
    cdef const _entry* ea = <const _entry*>a
    cdef const _entry* eb = <const _entry*>b
    if ea.val > eb.val:
        return -1
    if ea.val < eb.val:
        return 1
    if ea.idx < eb.idx:
        return -1
    if ea.idx > eb.idx:
        return 1
    return 0


def project_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    cdef double[::1] x = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[0], k, rho = 0
    cdef double css = 0.0, theta, rho_css = 0.0, total = 0.0
    out = np.empty(d, dtype=np.float64)
    cdef double[::1] w = out
    cdef _entry* e = <_entry*>malloc(d * sizeof(_entry))
    if e == NULL:
        raise MemoryError()
    try:
        with nogil:
            for k in range(d):
                e[k].val = x[k]
                e[k].idx = k
            qsort(e, d, sizeof(_entry), _cmp_desc)
            for k in range(d):
                css += e[k].val
                if e[k].val - (css - 1.0) / (k + 1) > 0:
                    rho = k
                    rho_css = css
            theta = (rho_css - 1.0) / (rho + 1)
            for k in range(d):
                w[k] = x[k] - theta
                if w[k] < 0.0:
                    w[k] = 0.0
                total += w[k]
            for k in range(d):
                w[k] = w[k] / total + 0.0
    finally:
        free(e)
    return out


cdef inline double _objective(Py_ssize_t d, const double* Q, const double* q,
                              double c, const double* w) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double quad = 0.0, lin = 0.0, row
    for i in range(d):
        if w[i] == 0.0:
            continue
        row = 0.0
        for k in range(d):
            if w[k] != 0.0:
                row += Q[i * d + k] * w[k]
        quad += w[i] * row
        lin += q[i] * w[i]
    return quad - 2.0 * lin + c


cdef void _gradient(Py_ssize_t d, const double* Q, const double* q,
                    const int* S, Py_ssize_t nS, const double* w,
                    double* h) noexcept nogil:
    # h = Q w - q using only the support of w
    cdef Py_ssize_t i, s
    cdef double acc
    for i in range(d):
        acc = 0.0
        for s in range(nS):
            acc += Q[i * d + S[s]] * w[S[s]]
        h[i] = acc - q[i]


cdef double _kkt(Py_ssize_t d, const double* Q, const double* q, const double* w,
                 double scale, int* S, double* h) noexcept nogil:
    cdef Py_ssize_t i, nS = 0
    cdef double lam = INFINITY, r_in = 0.0, r_out = 0.0, t
    for i in range(d):
        if w[i] > 0:
            S[nS] = <int>i
            nS += 1
    _gradient(d, Q, q, S, nS, w, h)
    for i in range(nS):
        if h[S[i]] < lam:
            lam = h[S[i]]
    for i in range(d):
        if w[i] > 0:
            t = fabs(h[i] - lam)
            if t > r_in:
                r_in = t
        else:
            t = lam - h[i]
            if t > r_out:
                r_out = t
    if r_out > r_in:
        r_in = r_out
    return 2.0 * r_in / scale


cdef int _cholesky(Py_ssize_t n, double* A, double floor) noexcept nogil:
    # in-place lower Cholesky of the n x n row-major block; 0 on success,
    # 1 when a squared pivot falls to ``floor`` or below
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(n):
        for j in range(i + 1):
            s = A[i * n + j]
            for k in range(j):
                s -= A[i * n + k] * A[j * n + k]
            if i == j:
                if s <= floor:
                    return 1
                A[i * n + i] = sqrt(s)
            else:
                A[i * n + j] = s / A[j * n + j]
    return 0


cdef void _chol_solve(Py_ssize_t n, const double* L, double* b) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i * n + k] * b[k]
        b[i] = s / L[i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k * n + i] * b[k]
        b[i] = s / L[i * n + i]


cdef int _solve_one(Py_ssize_t d, const double* Q, const double* q, double c,
                    double* w, double tol, int max_iter,
                    double* w0, char* inS, int* S, double* L,
                    double* y1, double* y2, double* h, double* wk,
                    double* obj_out, double* kkt_out) noexcept nogil:
    cdef Py_ssize_t i, j, s, nS, b
    cdef double dmax = 0.0, scale, eps, f_start, f, mu, s1, s2, vmin
    cdef double tau, ratio, lam, hj, r_out, total, shift, floor
    cdef int it = 0, last_added = -1, jbest, blk

    for i in range(d):
        if Q[i * d + i] > dmax:
            dmax = Q[i * d + i]
    scale = dmax
    for i in range(d):
        if fabs(q[i]) > scale:
            scale = fabs(q[i])
    memcpy(w0, w, d * sizeof(double))
    if not scale > 0:
        obj_out[0] = c
        kkt_out[0] = 0.0
        return 0
    eps = RIDGE * (dmax if dmax > 1e-300 else 1e-300)

    for i in range(d):
        inS[i] = 1 if w[i] > 0 else 0
    f_start = _objective(d, Q, q, c, w)

    while it < max_iter:
        it += 1
        nS = 0
        for i in range(d):
            if inS[i]:
                S[nS] = <int>i
                nS += 1
        # exact factorization first; ridge only for (near-)singular supports
        shift = 0.0
        floor = PIVOT_FLOOR * dmax
        while True:
            for i in range(nS):
                for j in range(nS):
                    L[i * nS + j] = Q[S[i] * d + S[j]]
                L[i * nS + i] += shift
            if _cholesky(nS, L, floor) == 0:
                break
            shift = eps if shift == 0.0 else shift * 100.0
            floor = 0.0
        for i in range(nS):
            y1[i] = q[S[i]]
            y2[i] = 1.0
        _chol_solve(nS, L, y1)
        _chol_solve(nS, L, y2)
        s1 = 0.0
        s2 = 0.0
        for i in range(nS):
            s1 += y1[i]
            s2 += y2[i]
        mu = (1.0 - s1) / s2
        vmin = INFINITY
        for i in range(nS):
            y1[i] = y1[i] + mu * y2[i]
            if y1[i] < vmin:
                vmin = y1[i]
        if vmin > 0:
            for i in range(d):
                w[i] = 0.0
            for i in range(nS):
                w[S[i]] = y1[i]
            _gradient(d, Q, q, S, nS, w, h)
            lam = INFINITY
            for i in range(nS):
                if h[S[i]] < lam:
                    lam = h[S[i]]
            jbest = -1
            hj = INFINITY
            for i in range(d):
                if not inS[i] and h[i] < hj:
                    hj = h[i]
                    jbest = <int>i
            r_out = lam - hj if jbest >= 0 else 0.0
            if r_out < 0.0:
                r_out = 0.0
            if 2.0 * r_out / scale <= tol:
                break
            inS[jbest] = 1
            last_added = jbest
        else:
            tau = INFINITY
            b = -1
            for i in range(nS):
                wk[i] = w[S[i]]
                if y1[i] <= 0:
                    ratio = wk[i] / (wk[i] - y1[i])
                    if ratio < tau:
                        tau = ratio
                        b = i
            blk = S[b]
            if tau == 0.0 and blk == last_added:
                inS[blk] = 0
                break
            for i in range(nS):
                w[S[i]] = wk[i] + tau * (y1[i] - wk[i])
            w[blk] = 0.0
            inS[blk] = 0
            for i in range(nS):
                if w[S[i]] <= 0:
                    w[S[i]] = 0.0
                    inS[S[i]] = 0

    total = 0.0
    for i in range(d):
        if w[i] < 0.0:
            w[i] = 0.0
        total += w[i]
    for i in range(d):
        w[i] = w[i] / total + 0.0
    f = _objective(d, Q, q, c, w)
    if f > f_start:
        memcpy(w, w0, d * sizeof(double))
        f = f_start
    obj_out[0] = f
    kkt_out[0] = _kkt(d, Q, q, w, scale, S, h)
    return it


def simplex_qp_batch(const double[:, ::1] Q, const double[:, ::1] q,
                     const double[::1] c, double[:, ::1] W,
                     double tol, int max_iter):
    """Solve ``min_w w'Qw - 2 q_r'w + c_r`` over the simplex for every row.

    ``W`` holds feasible warm starts and is overwritten with the solutions.
    Returns ``(objective, kkt_residual, iterations, converged)`` arrays.
    The GIL is released for the whole batch.
    """
    cdef Py_ssize_t n = q.shape[0], d = q.shape[1], r
    if Q.shape[0] != d or Q.shape[1] != d or W.shape[0] != n or W.shape[1] != d or c.shape[0] != n:
        raise ValueError("inconsistent shapes")
    obj = np.empty(n)
    kkt = np.empty(n)
    iters = np.empty(n, dtype=np.int32)
    cdef double[::1] obj_v = obj
    cdef double[::1] kkt_v = kkt
    cdef int[::1] it_v = iters
    cdef double* buf = <double*>malloc((d * d + 6 * d + 1) * sizeof(double))
    cdef char* inS = <char*>malloc(d + 1)
    cdef int* S = <int*>malloc((d + 1) * sizeof(int))
    if buf == NULL or inS == NULL or S == NULL:
        free(buf)
        free(inS)
        free(S)
        raise MemoryError()
    cdef double* L = buf
    cdef double* w0 = buf + d * d
    cdef double* y1 = w0 + d
    cdef double* y2 = y1 + d
    cdef double* h = y2 + d
    cdef double* wk = h + d
    try:
        with nogil:
            for r in range(n):
                it_v[r] = _solve_one(d, &Q[0, 0], &q[r, 0], c[r], &W[r, 0],
                                     tol, max_iter, w0, inS, S, L, y1, y2, h,
                                     wk, &obj_v[r], &kkt_v[r])
    finally:
        free(buf)
        free(inS)
        free(S)
    conv = (kkt <= tol).astype(np.uint8)
    return obj, kkt, iters, conv
