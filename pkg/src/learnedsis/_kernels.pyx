# cython: language_level=3
"""Compiled batched small-matrix kernels.

Same contracts as ``_kernels_py``. The state dimension is small (tens), so
plain triple loops beat the per-call overhead of stacked LAPACK calls.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, isfinite

cnp.import_array()


cdef int _factor(const double[:, :] S, double j, double[:, :] L) noexcept nogil:
    """Cholesky of S + j I into L. Returns 0 on success, 1 on failure."""
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t i, k, p
    cdef double acc
    for i in range(n):
        for k in range(n):
            L[i, k] = 0.0
    for k in range(n):
        acc = S[k, k] + j
        for p in range(k):
            acc -= L[k, p] * L[k, p]
        if not (acc > 0.0) or not isfinite(acc):
            return 1
        L[k, k] = sqrt(acc)
        for i in range(k + 1, n):
            acc = S[i, k]
            for p in range(k):
                acc -= L[i, p] * L[k, p]
            L[i, k] = acc / L[k, k]
    return 0


def cholesky_batched(S, base, floor, cap):
    cdef const double[:, :, :] Sv = np.ascontiguousarray(S, dtype=np.float64)
    cdef const double[:] basev = np.ascontiguousarray(base, dtype=np.float64)
    cdef const double[:] floorv = np.ascontiguousarray(floor, dtype=np.float64)
    cdef const double[:] capv = np.ascontiguousarray(cap, dtype=np.float64)
    cdef Py_ssize_t B = Sv.shape[0]
    cdef Py_ssize_t n = Sv.shape[1]
    L = np.zeros((B, n, n), dtype=np.float64)
    jitter = np.empty(B, dtype=np.float64)
    status = np.zeros(B, dtype=np.int64)
    cdef double[:, :, :] Lv = L
    cdef double[:] jv = jitter
    cdef cnp.int64_t[:] sv = status
    cdef Py_ssize_t b
    cdef double j
    with nogil:
        for b in range(B):
            j = basev[b]
            while True:
                if _factor(Sv[b], j, Lv[b]) == 0:
                    break
                if j > 0.0:
                    j = j * 10.0
                else:
                    j = floorv[b]
                if j > capv[b] or not isfinite(j):
                    sv[b] = 1
                    break
            jv[b] = j
    return L, jitter, status


def solve_lower_batched(L, rhs):
    cdef const double[:, :, :] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[:, :] rv = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef Py_ssize_t B = Lv.shape[0]
    cdef Py_ssize_t n = Lv.shape[1]
    out = np.empty((B, n), dtype=np.float64)
    cdef double[:, :] ov = out
    cdef Py_ssize_t b, i, p
    cdef double acc
    with nogil:
        for b in range(B):
            for i in range(n):
                acc = rv[b, i]
                for p in range(i):
                    acc -= Lv[b, i, p] * ov[b, p]
                ov[b, i] = acc / Lv[b, i, i]
    return out


def solve_lower_transpose_batched(L, rhs):
    cdef const double[:, :, :] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[:, :] rv = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef Py_ssize_t B = Lv.shape[0]
    cdef Py_ssize_t n = Lv.shape[1]
    out = np.empty((B, n), dtype=np.float64)
    cdef double[:, :] ov = out
    cdef Py_ssize_t b, i, p
    cdef double acc
    with nogil:
        for b in range(B):
            for i in range(n - 1, -1, -1):
                acc = rv[b, i]
                for p in range(i + 1, n):
                    acc -= Lv[b, p, i] * ov[b, p]
                ov[b, i] = acc / Lv[b, i, i]
    return out


def lower_matvec_batched(L, v):
    cdef const double[:, :, :] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[:, :] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t B = Lv.shape[0]
    cdef Py_ssize_t n = Lv.shape[1]
    out = np.empty((B, n), dtype=np.float64)
    cdef double[:, :] ov = out
    cdef Py_ssize_t b, i, p
    cdef double acc
    with nogil:
        for b in range(B):
            for i in range(n):
                acc = 0.0
                for p in range(i + 1):
                    acc += Lv[b, i, p] * vv[b, p]
                ov[b, i] = acc
    return out


def cholesky_backward_batched(L, Lbar):
    cdef const double[:, :, :] Lv = np.ascontiguousarray(L, dtype=np.float64)
    cdef const double[:, :, :] Gv = np.ascontiguousarray(Lbar, dtype=np.float64)
    cdef Py_ssize_t B = Lv.shape[0]
    cdef Py_ssize_t n = Lv.shape[1]
    out = np.empty((B, n, n), dtype=np.float64)
    work = np.empty((n, n), dtype=np.float64)
    cdef double[:, :, :] ov = out
    cdef double[:, :] P = work
    cdef Py_ssize_t b, i, j, k
    cdef double acc
    with nogil:
        for b in range(B):
            # P = Phi(L^T tril(Lbar)); row i of L^T is column i of L.
            for i in range(n):
                for j in range(n):
                    if j > i:
                        P[i, j] = 0.0
                        continue
                    acc = 0.0
                    for k in range(i, n):
                        acc += Lv[b, k, i] * Gv[b, k, j]
                    if i == j:
                        acc *= 0.5
                    P[i, j] = acc
            # Columns: X = L^{-T} P, solved in place (upper-triangular system).
            for j in range(n):
                for i in range(n - 1, -1, -1):
                    acc = P[i, j]
                    for k in range(i + 1, n):
                        acc -= Lv[b, k, i] * P[k, j]
                    P[i, j] = acc / Lv[b, i, i]
            # Rows: S = X L^{-1}, i.e. solve S L = X row by row from the right.
            for i in range(n):
                for j in range(n - 1, -1, -1):
                    acc = P[i, j]
                    for k in range(j + 1, n):
                        acc -= P[i, k] * Lv[b, k, j]
                    P[i, j] = acc / Lv[b, j, j]
            for i in range(n):
                for j in range(i + 1):
                    acc = 0.5 * (P[i, j] + P[j, i])
                    ov[b, i, j] = acc
                    ov[b, j, i] = acc
    return out


def gaussian_gram_batched(z):
    cdef const double[:, :] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t B = zv.shape[0]
    cdef Py_ssize_t n = zv.shape[1]
    out = np.empty((B, n, n), dtype=np.float64)
    cdef double[:, :, :] ov = out
    cdef Py_ssize_t b, i, j
    cdef double d, e
    with nogil:
        for b in range(B):
            for i in range(n):
                ov[b, i, i] = 1.0
                for j in range(i):
                    d = zv[b, i] - zv[b, j]
                    e = exp(-d * d)
                    ov[b, i, j] = e
                    ov[b, j, i] = e
    return out


def adam_update(p, g, m, v, double lr, double beta1, double beta2,
                double eps, double corr1, double corr2):
    """Fused in-place ADAM step on flat float64 arrays."""
    cdef double[::1] pv = p
    cdef const double[::1] gv = g
    cdef double[::1] mv = m
    cdef double[::1] vv = v
    cdef Py_ssize_t n = pv.shape[0]
    cdef Py_ssize_t i
    cdef double gi, mi, vi
    cdef double a1 = 1.0 - beta1
    cdef double a2 = 1.0 - beta2
    with nogil:
        for i in range(n):
            gi = gv[i]
            mi = beta1 * mv[i] + a1 * gi
            vi = beta2 * vv[i] + a2 * (gi * gi)
            mv[i] = mi
            vv[i] = vi
            if lr != 0.0:
                pv[i] -= lr * (mi / corr1) / (sqrt(vi / corr2) + eps)
