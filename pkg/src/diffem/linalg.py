"""Symmetric / SPD matrix primitives.

All functions accept a single ``(d, d)`` matrix or a stack ``(..., d, d)``.
Eigen-decompositions use cyclic Jacobi rotations from :mod:`diffem.kernels`.
"""
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from diffem import kernels
from diffem.errors import ArgumentError, DegenerateCovariance, NearSingularWarning

# Module tolerances; override by assignment (e.g. ``linalg.SYM_RTOL = 1e-10``).
SYM_RTOL = 1e-12
JACOBI_TOL = 1e-15
JACOBI_MAX_SWEEPS = 100


def symmetrize(m):
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def batched_gram(a, b):
    """G[k] = sum_i a[i, k]^T-outer b[i, k], i.e. einsum("ika,ikb->kab") via matmul."""
    return np.matmul(np.transpose(a, (1, 2, 0)), np.transpose(b, (1, 0, 2)))


def batched_apply(m, v):
    """out[i, k] = m[k] @ v[i, k], i.e. einsum("kab,ikb->ika") via matmul."""
    return np.transpose(np.matmul(np.transpose(v, (1, 0, 2)), np.transpose(m, (0, 2, 1))), (1, 0, 2))


def _stack(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ArgumentError(f"expected square matrices, got shape {a.shape}")
    return np.ascontiguousarray(a.reshape((-1,) + a.shape[-2:])), a.shape[:-2]


def validate_spd(a):
    """Check symmetry and positive definiteness; return the symmetrised matrix."""
    a = np.asarray(a, dtype=np.float64)
    flat, _ = _stack(a)
    scale = np.maximum(np.abs(flat).max(axis=(1, 2)), np.finfo(float).tiny)
    asym = np.abs(flat - np.swapaxes(flat, 1, 2)).max(axis=(1, 2))
    if np.any(asym > SYM_RTOL * scale):
        raise ArgumentError("matrix is not symmetric")
    a = symmetrize(a)
    w = eigh(a).eigenvalues
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DegenerateCovariance("matrix is not positive definite")
    return a


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def eigh(a):
    """Ascending eigenvalues and orthonormal eigenvectors of symmetric ``a``."""
    flat, lead = _stack(a)
    w, v = kernels.eigh_batch(flat, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    d = flat.shape[-1]
    return EigenDecomposition(w.reshape(lead + (d,)), v.reshape(lead + (d, d)))


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def logdet(self):
        """log det of the factored matrix, ``2 * sum(log L_aa)``."""
        return 2.0 * np.sum(np.log(np.diagonal(self.lower, axis1=-2, axis2=-1)), axis=-1)

    def inverse(self):
        """Inverse of the lower factor, ``L^{-1}``."""
        d = self.lower.shape[-1]
        eye = np.broadcast_to(np.eye(d), self.lower.shape)
        return np.linalg.solve(self.lower, eye)


def cholesky(a):
    """Cholesky factor ``L`` with ``a = L L^T``.

    Raises :class:`DegenerateCovariance` carrying the failing pivot index
    (and stack index as ``component`` for batched input).
    """
    flat, lead = _stack(a)
    L, bad, pivot = kernels.cholesky_batch(flat)
    if bad >= 0:
        raise DegenerateCovariance(
            f"non-positive pivot {pivot} in matrix {bad}", pivot=int(pivot), component=int(bad)
        )
    return CholeskyFactor(L.reshape(lead + flat.shape[-2:]))


def spd_sqrt(a):
    """Symmetric PSD square root; eigenvalues are clamped at zero first."""
    w, v = eigh(symmetrize(a))
    s = np.sqrt(np.clip(w, 0.0, None))
    return symmetrize((v * s[..., None, :]) @ np.swapaxes(v, -1, -2))


def spd_sqrt_differential(a, h):
    """Directional derivative of ``spd_sqrt`` at ``a`` along symmetric ``h``.

    Solves ``R dR + dR R = h`` in the eigenbasis of ``a``. Entries whose
    divisor ``sqrt(l_i) + sqrt(l_j)`` vanishes are set to zero and a
    :class:`NearSingularWarning` is emitted.
    """
    w, v = eigh(symmetrize(a))
    s = np.sqrt(np.clip(w, 0.0, None))
    denom = s[..., :, None] + s[..., None, :]
    vt = np.swapaxes(v, -1, -2)
    g = vt @ symmetrize(h) @ v
    zero = denom == 0
    if np.any(zero):
        warnings.warn("zero divisor masked in sqrt differential", NearSingularWarning, stacklevel=2)
        denom = np.where(zero, 1.0, denom)
        g = np.where(zero, 0.0, g)
    return symmetrize(v @ (g / denom) @ vt)


def logsumexp(v):
    """Stable ``log(sum(exp(v)))`` of a nonempty 1-D vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ArgumentError("logsumexp of an empty vector")
    return float(kernels.logsumexp_rows(np.ascontiguousarray(v[None, :]))[0])


def logsumexp_rows(m):
    """Row-wise log-sum-exp of a 2-D array."""
    return kernels.logsumexp_rows(np.ascontiguousarray(m, dtype=np.float64))
