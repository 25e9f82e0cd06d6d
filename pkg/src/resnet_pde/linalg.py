"""Small iterative solvers used by the point-cloud operators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def pcg(A, b, diag=None, rtol=1e-10, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradient for SPD ``A``.

    ``A`` may be anything supporting ``A @ x``. Stops once
    ``|r| <= rtol * |b|``.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    minv = np.ones(n) if diag is None else 1.0 / np.asarray(diag, dtype=float)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(0, 0.0, True)
    z = minv * r
    p = z.copy()
    rz = r @ z
    k = 0
    res = np.linalg.norm(r)
    while res > rtol * bnorm and k < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = np.linalg.norm(r)
        k += 1
    return x, CGInfo(k, res / bnorm, res <= rtol * bnorm)


def power_iteration(apply, n, iters=200, tol=1e-10, seed=0):
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Returns the Rayleigh quotient of the final iterate, which never
    exceeds the true top eigenvalue.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0):
            lam = lam_new
            break
        lam = lam_new
    return float(v @ apply(v))
