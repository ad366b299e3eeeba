# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: batched Cholesky, cyclic Jacobi eigensolver, row log-sum-exp.

Mirrors ``diffem._pykernels`` function for function; ``diffem.kernels``
picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, exp, log, INFINITY

cnp.import_array()


def cholesky_batch(const double[:, :, ::1] a):
    """Lower Cholesky factors of a (B, d, d) stack.

    Returns ``(L, bad_batch, bad_pivot)``; both indices are -1 on success,
    otherwise they locate the first non-positive pivot.
    """
    cdef Py_ssize_t nb = a.shape[0], d = a.shape[1]
    out = np.zeros((nb, d, d), dtype=np.float64)
    cdef double[:, :, ::1] L = out
    cdef Py_ssize_t b, i, j, k
    cdef double s
    for b in range(nb):
        for j in range(d):
            s = a[b, j, j]
            for k in range(j):
                s -= L[b, j, k] * L[b, j, k]
            if not (s > 0.0):
                return out, b, j
            L[b, j, j] = sqrt(s)
            for i in range(j + 1, d):
                s = a[b, i, j]
                for k in range(j):
                    s -= L[b, i, k] * L[b, j, k]
                L[b, i, j] = s / L[b, j, j]
    return out, -1, -1


cdef void _jacobi_one(double[:, ::1] A, double[:, ::1] V, double tol, int max_sweeps) noexcept nogil:
    cdef Py_ssize_t d = A.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep
    cdef double off, norm, apq, tau, t, c, s, akp, akq
    for p in range(d):
        for q in range(d):
            V[p, q] = 1.0 if p == q else 0.0
    norm = 0.0
    for p in range(d):
        for q in range(d):
            norm += A[p, q] * A[p, q]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(d):
            for q in range(p + 1, d):
                off += A[p, q] * A[p, q]
        if off <= tol * tol * norm or off == 0.0:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for k in range(d):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(d):
                    akp = A[p, k]
                    akq = A[q, k]
                    A[p, k] = c * akp - s * akq
                    A[q, k] = s * akp + c * akq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(d):
                    akp = V[k, p]
                    akq = V[k, q]
                    V[k, p] = c * akp - s * akq
                    V[k, q] = s * akp + c * akq


def eigh_batch(const double[:, :, ::1] a, double tol=1e-15, int max_sweeps=100):
    """Eigen-decomposition of a (B, d, d) stack of symmetric matrices.

    Returns ``(w, V)`` with eigenvalues ascending along the last axis of
    ``w`` and matching eigenvectors in the columns of ``V``.
    """
    cdef Py_ssize_t nb = a.shape[0], d = a.shape[1]
    work = np.array(a, dtype=np.float64, copy=True)
    vecs = np.empty((nb, d, d), dtype=np.float64)
    cdef double[:, :, ::1] W = work
    cdef double[:, :, ::1] V = vecs
    cdef Py_ssize_t b
    with nogil:
        for b in range(nb):
            _jacobi_one(W[b], V[b], tol, max_sweeps)
    w = np.ascontiguousarray(np.diagonal(work, axis1=1, axis2=2))
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    return w, np.ascontiguousarray(vecs)


def logsumexp_rows(const double[:, ::1] v):
    """log(sum(exp(v), axis=1)) with the max-shift."""
    cdef Py_ssize_t n = v.shape[0], m = v.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double mx, acc
    with nogil:
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                if v[i, j] > mx:
                    mx = v[i, j]
            if mx == -INFINITY:
                o[i] = -INFINITY
                continue
            if m == 1:
                o[i] = v[i, 0]
                continue
            acc = 0.0
            for j in range(m):
                acc += exp(v[i, j] - mx)
            o[i] = mx + log(acc)
    return out
