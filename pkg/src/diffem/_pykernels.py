"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same algorithms, same signatures. Used when the extension is not built or
when ``DIFFEM_PURE_PYTHON=1`` is set.
"""
import numpy as np


def cholesky_batch(a):
    a = np.asarray(a, dtype=np.float64)
    nb, d, _ = a.shape
    L = np.zeros_like(a)
    for b in range(nb):
        for j in range(d):
            s = a[b, j, j] - L[b, j, :j] @ L[b, j, :j]
            if not s > 0.0:
                return L, b, j
            L[b, j, j] = np.sqrt(s)
            L[b, j + 1:, j] = (a[b, j + 1:, j] - L[b, j + 1:, :j] @ L[b, j, :j]) / L[b, j, j]
    return L, -1, -1


def _jacobi_one(A, V, tol, max_sweeps):
    d = A.shape[0]
    norm = float(np.sum(A * A))
    iu = np.triu_indices(d, 1)
    for _ in range(max_sweeps):
        off = float(np.sum(A[iu] ** 2))
        if off <= tol * tol * norm or off == 0.0:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                colp, colq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * colp - s * colq
                A[:, q] = s * colp + c * colq
                rowp, rowq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rowp - s * rowq
                A[q, :] = s * rowp + c * rowq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq


def eigh_batch(a, tol=1e-15, max_sweeps=100):
    work = np.array(a, dtype=np.float64, copy=True)
    nb, d, _ = work.shape
    vecs = np.empty_like(work)
    for b in range(nb):
        vecs[b] = np.eye(d)
        _jacobi_one(work[b], vecs[b], tol, max_sweeps)
    w = np.diagonal(work, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
    return w, np.ascontiguousarray(vecs)


def logsumexp_rows(v):
    v = np.asarray(v, dtype=np.float64)
    mx = np.max(v, axis=1)
    out = np.full(v.shape[0], -np.inf)
    ok = np.isfinite(mx)
    if v.shape[1] == 1:
        return v[:, 0].copy()
    out[ok] = mx[ok] + np.log(np.sum(np.exp(v[ok] - mx[ok, None]), axis=1))
    return out
