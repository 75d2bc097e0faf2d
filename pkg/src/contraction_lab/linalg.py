from __future__ import annotations

import numpy as np

from .errors import EigenvalueViolation

# eigenvalues of sigma sigma^T - lambda0^2 I below -NEG_TOL are a hard error;
# anything in (-NEG_TOL, CLAMP_TOL) is treated as an exact zero
NEG_TOL = 1e-10
CLAMP_TOL = 1e-12


def psd_sqrt(A: np.ndarray, neg_tol: float = NEG_TOL) -> np.ndarray:
    """Symmetric square root of a (batch of) positive semidefinite matrices."""
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, V = np.linalg.eigh(A)
    if np.any(w < -neg_tol):
        raise EigenvalueViolation(f"matrix is indefinite (smallest eigenvalue {w.min():.3e})")
    w = np.where(w < CLAMP_TOL, 0.0, w)
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def sigma0_from_a(a: np.ndarray, lambda0: float) -> np.ndarray:
    """sqrt(a - lambda0^2 I) for a = sigma sigma^T, batched over leading axes."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    shifted = a - lambda0**2 * np.eye(d)
    try:
        return psd_sqrt(shifted, NEG_TOL * max(1.0, lambda0**2))
    except EigenvalueViolation:
        w_min = float(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2))).min())
        raise EigenvalueViolation(
            f"lambda0^2 = {lambda0**2:.6g} exceeds min eigenvalue {w_min:.6g} of sigma sigma^T"
        ) from None


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise ``M @ v`` for M of shape (d, k) or (n, d, k) and v of shape (n, k).

    Written as an explicit sum over k so each row's result is independent of
    the batch size (BLAS kernels may reorder the reduction).
    """
    k = v.shape[1]
    if M.ndim == 2:
        out = M[None, :, 0] * v[:, 0:1]
        for j in range(1, k):
            out = out + M[None, :, j] * v[:, j : j + 1]
    else:
        out = M[:, :, 0] * v[:, 0:1]
        for j in range(1, k):
            out = out + M[:, :, j] * v[:, j : j + 1]
    return out


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a[:, 0] * b[:, 0]
    for j in range(1, a.shape[1]):
        out = out + a[:, j] * b[:, j]
    return out
