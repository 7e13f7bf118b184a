"""Compact covariance-matrix-adaptation evolution strategy, bound constrained.

Batch-evaluating and budget-exact: the objective receives a population as an
(n, D) array and the total number of evaluations never exceeds the given
budget (the last generation may be partial).
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["CmaResult", "cmaes_maximize"]


@dataclass
class CmaResult:
    x_best: np.ndarray
    f_best: float
    n_evals: int


def cmaes_maximize(
    f_batch,
    x0,
    sigma0,
    lo,
    hi,
    rng,
    max_evals=400,
    popsize=None,
    ftol=1e-11,
    sigma_min=1e-12,
):
    """Maximize ``f_batch`` inside the box [lo, hi] starting from ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = x0.size
    lam = popsize if popsize is not None else 4 + int(3 * math.log(n + 1))
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w = w / w.sum()
    mu_eff = 1.0 / np.sum(w**2)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(
        1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff)
    )
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))

    mean = np.clip(x0, lo, hi)
    sigma = float(sigma0)
    cov = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    eigen_stale = True
    b_mat = np.eye(n)
    d_vec = np.ones(n)

    x_best = mean.copy()
    f_best = -np.inf
    n_evals = 0
    prev_best = -np.inf
    stall = 0

    while n_evals < max_evals:
        if eigen_stale:
            cov = 0.5 * (cov + cov.T)
            vals, vecs = np.linalg.eigh(cov)
            d_vec = np.sqrt(np.maximum(vals, 1e-20))
            b_mat = vecs
            eigen_stale = False
        k = min(lam, max_evals - n_evals)
        z = rng.standard_normal((lam, n))
        ystep = z * d_vec[None, :] @ b_mat.T
        xs = np.clip(mean + sigma * ystep, lo, hi)
        fs = np.asarray(f_batch(xs[:k]), dtype=float)
        n_evals += k
        order = np.argsort(-fs)
        if fs[order[0]] > f_best:
            f_best = float(fs[order[0]])
            x_best = xs[order[0]].copy()
        if k < lam:
            break

        sel = order[:mu]
        y_sel = (xs[sel] - mean) / sigma
        y_w = w @ y_sel
        mean = np.clip(mean + sigma * y_w, lo, hi)

        inv_sqrt_y = b_mat @ ((b_mat.T @ y_w) / d_vec)
        p_sigma = (1.0 - c_sigma) * p_sigma + math.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * inv_sqrt_y
        h_sigma = float(
            np.linalg.norm(p_sigma)
            / math.sqrt(1.0 - (1.0 - c_sigma) ** (2.0 * (n_evals / lam + 1)))
            < (1.4 + 2.0 / (n + 1.0)) * chi_n
        )
        p_c = (1.0 - c_c) * p_c + h_sigma * math.sqrt(
            c_c * (2.0 - c_c) * mu_eff
        ) * y_w

        rank_mu = (y_sel * w[:, None]).T @ y_sel
        cov = (
            (1.0 - c_1 - c_mu) * cov
            + c_1 * (np.outer(p_c, p_c) + (1.0 - h_sigma) * c_c * (2.0 - c_c) * cov)
            + c_mu * rank_mu
        )
        sigma *= math.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))
        sigma = min(sigma, 10.0 * float(np.max(hi - lo)))
        eigen_stale = True

        if sigma < sigma_min:
            break
        if f_best <= prev_best + ftol:
            stall += 1
            if stall >= 20 + 5 * n:
                break
        else:
            stall = 0
        prev_best = f_best

    return CmaResult(x_best, f_best, n_evals)
