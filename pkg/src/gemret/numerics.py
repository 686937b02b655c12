"""Small dense linear-algebra kernel shared by every other module.

Activation tensors are ``(H, W, K)`` float64 arrays, descriptors are 1-D
arrays and matrices are 2-D arrays.  Nothing here wraps numpy types.
"""
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

ZERO_NORM = 1e-12


class ConvergenceError(RuntimeError):
    pass


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray   # non-increasing
    eigenvectors: np.ndarray  # columns aligned with eigenvalues


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm.

    A vector whose norm is below 1e-12 is returned as all zeros instead of
    raising, so a descriptor with no active features scores 0 against
    everything.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < ZERO_NORM:
        return np.zeros_like(v)
    return v / n


def inner_product(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def _fix_signs(vecs):
    # deterministic orientation: largest-magnitude component positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(a, tol: float = 1e-14, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    The input is symmetrized as ``(A + A.T) / 2``.  Each sweep visits every
    off-diagonal pair once; iteration stops when the off-diagonal Frobenius
    norm drops below ``max(tol, 8 n eps) * ||A||_F``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return EigenDecomposition(np.diag(a).copy(), v)

    def off_norm(m):
        return np.linalg.norm(m - np.diag(np.diag(m)))

    threshold = max(tol, 8 * n * np.finfo(np.float64).eps) * scale
    for _ in range(max_sweeps):
        if off_norm(a) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / abs(theta)
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        if off_norm(a) > threshold:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal residual {off_norm(a):.3e})")

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(vals[order], _fix_signs(v[:, order]))


def default_floor(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    tr = float(np.trace(a))
    return max(1e-10 * tr / a.shape[0], 1e-300)


def inv_sqrt_psd(a, floor: Optional[float] = None):
    """``V diag(max(lam, floor))^-1/2 V^T`` for a symmetric PSD matrix."""
    if floor is None:
        floor = default_floor(a)
    vals, vecs = sym_eig(a)
    inv = 1.0 / np.sqrt(np.maximum(vals, floor))
    return (vecs * inv) @ vecs.T


def finite_diff_grad(fn: Callable[[np.ndarray], float], point: Sequence[float],
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    shape = x.shape
    x = x.ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = fn(x.reshape(shape))
        x[i] = orig - step
        fm = fn(x.reshape(shape))
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(shape)


def relative_error(analytic, numeric, floor: float = 1e-6):
    """Componentwise ``|a - n| / max(floor, |a| + |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))
