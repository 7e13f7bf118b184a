"""Sparse Bayesian quadrature: Gaussian integrals of the sparse GP posterior.

For an axis-aligned Gaussian component the posterior of its integral
against the GP is available in closed form. The data-dependent part runs
through the same per-inducing-point weight vectors for the mean and the
covariance, so everything reduces to triangular solves against the factors
stored in the sparse GP state.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._linalg import solve_lower
from .kernel import mean_fn

__all__ = [
    "QuadCache",
    "component_integrals",
    "bq_mean",
    "bq_cov",
    "bq_cov_matrix",
    "mixture_expected_log_joint",
    "ExpectedLogJointGradients",
    "bq_mean_gradients",
]


def _weights_matrix(state, mu, var_diag):
    """Per-component weight vectors over inducing points, rows w_j.

    ``mu`` is (K, D), ``var_diag`` (K, D) the diagonal covariance of each
    component. Entry (j, p) integrates the kernel column of inducing point
    p against component j.
    """
    hp = state.hp
    v = var_diag + hp.ell**2  # (K, D)
    scale = hp.sigma_f**2 * np.prod(hp.ell / np.sqrt(v), axis=1)  # (K,)
    expo = np.empty((mu.shape[0], state.m))
    for j in range(mu.shape[0]):
        d2 = (mu[j] - state.z) ** 2 / v[j]
        expo[j] = -0.5 * np.sum(d2, axis=1)
    return scale[:, None] * np.exp(expo)


def _mean_integrals(state, mu, var_diag):
    """Closed-form integral of the negative-quadratic mean per component."""
    hp = state.hp
    return hp.m0 - 0.5 * np.sum(
        ((mu - hp.mu_m) ** 2 + var_diag) / hp.omega**2, axis=1
    )


@dataclass(frozen=True)
class QuadCache:
    """Per-mixture quadrature bundle shared by value and gradient paths."""

    mu: np.ndarray          # (K, D)
    var_diag: np.ndarray    # (K, D)
    weights_z: np.ndarray   # (K, M) w_j vectors
    mean_integrals: np.ndarray  # (K,)
    data_means: np.ndarray      # (K,) w_j . pred_w

    @property
    def component_means(self):
        return self.mean_integrals + self.data_means


def component_integrals(state, mu, var_diag):
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    var_diag = np.atleast_2d(np.asarray(var_diag, dtype=float))
    wmat = _weights_matrix(state, mu, var_diag)
    return QuadCache(
        mu=mu,
        var_diag=var_diag,
        weights_z=wmat,
        mean_integrals=_mean_integrals(state, mu, var_diag),
        data_means=wmat @ state.pred_w,
    )


def bq_mean(state, mu_j, var_diag_j):
    """Posterior mean of the integral of the GP against one Gaussian."""
    cache = component_integrals(state, mu_j, var_diag_j)
    return float(cache.component_means[0])


def bq_cov_matrix(state, mu, var_diag, cache=None):
    """Posterior covariance matrix of the component integrals."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    var_diag = np.atleast_2d(np.asarray(var_diag, dtype=float))
    if cache is None:
        cache = component_integrals(state, mu, var_diag)
    hp = state.hp
    k = mu.shape[0]
    w_sum = var_diag[:, None, :] + var_diag[None, :, :] + hp.ell**2  # (K, K, D)
    diff = mu[:, None, :] - mu[None, :, :]
    prior = hp.sigma_f**2 * np.prod(
        hp.ell / np.sqrt(w_sum), axis=2
    ) * np.exp(-0.5 * np.sum(diff**2 / w_sum, axis=2))
    a = solve_lower(state.chol_kzz, cache.weights_z.T)  # (M, K)
    b = solve_lower(state.chol_s, a)
    cov = prior - (a.T @ a - b.T @ b)
    return 0.5 * (cov + cov.T) if k > 1 else cov


def bq_cov(state, comp_j, comp_k):
    """Posterior covariance between the integrals of two Gaussian components."""
    mu = np.vstack([comp_j[0], comp_k[0]])
    var_diag = np.vstack([comp_j[1], comp_k[1]])
    return float(bq_cov_matrix(state, mu, var_diag)[0, 1])


def _component_params(q):
    mu = np.atleast_2d(q.mu)
    var_diag = (q.sigma[:, None] * q.lam[None, :]) ** 2
    return mu, var_diag


def mixture_expected_log_joint(state, q):
    """Posterior mean and variance of the expected log joint under ``q``."""
    mu, var_diag = _component_params(q)
    cache = component_integrals(state, mu, var_diag)
    mean = float(q.weights @ cache.component_means)
    cov = bq_cov_matrix(state, mu, var_diag, cache)
    var = float(q.weights @ cov @ q.weights)
    return mean, max(var, 0.0)


@dataclass(frozen=True)
class ExpectedLogJointGradients:
    """Gradient of the expected log joint w.r.t. natural mixture parameters."""

    value: float
    mu: np.ndarray       # (K, D)
    sigma: np.ndarray    # (K,)
    lam: np.ndarray      # (D,)
    weights: np.ndarray  # (K,)


def bq_mean_gradients(state, q):
    """Analytic gradients of sum_k w_k E[I_k] w.r.t. all mixture parameters.

    Returned in natural coordinates (component means, scales, shared scale
    vector, and weights); reparameterizations chain through these.
    """
    hp = state.hp
    mu, var_diag = _component_params(q)
    k, dim = mu.shape
    cache = component_integrals(state, mu, var_diag)
    value = float(q.weights @ cache.component_means)

    v = var_diag + hp.ell**2                      # (K, D)
    wv = cache.weights_z * state.pred_w[None, :]  # (K, M) weighted by solves
    wv_sum = np.sum(wv, axis=1)                   # (K,)

    # location gradient: quadratic mean part plus kernel-weight part
    grad_mu_data = (wv @ state.z - mu * wv_sum[:, None]) / v
    grad_mu = q.weights[:, None] * (
        -(mu - hp.mu_m) / hp.omega**2 + grad_mu_data
    )

    # accumulate sum_p wv_kp * diff^2 per dimension for the scale gradients
    t = np.empty((k, dim))
    for j in range(k):
        t[j] = wv[j] @ (mu[j] - state.z) ** 2
    dE_dv = 0.5 * (t - v * wv_sum[:, None]) / v**2  # (K, D)

    lam_sq = q.lam**2
    sig_sq = q.sigma**2
    grad_sigma = q.weights * (
        -q.sigma * np.sum(lam_sq / hp.omega**2)
        + np.sum(dE_dv * 2.0 * q.sigma[:, None] * lam_sq[None, :], axis=1)
    )
    grad_lam = np.sum(
        q.weights[:, None]
        * (
            -sig_sq[:, None] * q.lam[None, :] / hp.omega**2
            + dE_dv * 2.0 * sig_sq[:, None] * q.lam[None, :]
        ),
        axis=0,
    )
    return ExpectedLogJointGradients(
        value=value,
        mu=grad_mu,
        sigma=grad_sigma,
        lam=grad_lam,
        weights=cache.component_means.copy(),
    )
