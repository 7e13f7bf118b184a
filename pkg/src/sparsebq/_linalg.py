"""Shared dense linear-algebra helpers: guarded Cholesky and rank-1 updates."""

import numpy as np
from scipy.linalg import cholesky, solve_triangular

__all__ = [
    "ConditioningError",
    "chol_lower",
    "chol_lower_jittered",
    "cholupdate",
    "solve_lower",
    "solve_lower_t",
]


class ConditioningError(RuntimeError):
    """A kernel-derived matrix could not be factorized even after jitter escalation."""

    def __init__(self, factor_name, jitter):
        super().__init__(
            f"Cholesky factorization of {factor_name} failed "
            f"(last jitter tried: {jitter:.3g})"
        )
        self.factor_name = factor_name
        self.jitter = jitter


def chol_lower(a):
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    return cholesky(a, lower=True, check_finite=False)


def chol_lower_jittered(a, scale, factor_name, jitter0=1e-8, jitter_max=1e-4):
    """Lower Cholesky factor with escalating diagonal jitter.

    Jitter starts at ``jitter0 * scale`` and is multiplied by 10 until the
    factorization succeeds or the jitter exceeds ``jitter_max * scale``.

    Returns
    -------
    (L, jitter) : the factor and the absolute jitter that was added.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    jitter = jitter0 * scale
    idx = np.diag_indices(n)
    while True:
        try:
            aj = a.copy()
            aj[idx] += jitter
            return chol_lower(aj), jitter
        except (np.linalg.LinAlgError, ValueError):
            pass
        jitter = 1e-10 * scale if jitter == 0.0 else jitter * 10.0
        if jitter > jitter_max * scale * (1.0 + 1e-12):
            raise ConditioningError(factor_name, jitter / 10.0)


def solve_lower(L, b):
    """Solve L x = b with L lower triangular."""
    return solve_triangular(L, b, lower=True, check_finite=False)


def solve_lower_t(L, b):
    """Solve L^T x = b with L lower triangular."""
    return solve_triangular(L, b, lower=True, trans="T", check_finite=False)


def cholupdate(L, v):
    """Rank-1 update of a lower Cholesky factor.

    Given L with L L^T = A, returns L' with L' L'^T = A + v v^T.
    Does not modify its inputs.
    """
    L = np.array(L, dtype=float)
    v = np.array(v, dtype=float)
    n = v.size
    for k in range(n):
        lkk = L[k, k]
        r = np.hypot(lkk, v[k])
        c = r / lkk
        s = v[k] / lkk
        L[k, k] = r
        if k + 1 < n:
            L[k + 1:, k] = (L[k + 1:, k] + s * v[k + 1:]) / c
            v[k + 1:] = c * v[k + 1:] - s * L[k + 1:, k]
    return L
