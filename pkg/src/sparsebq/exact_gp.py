"""Exact heteroskedastic GP: closed-form posterior and MAP training.

Used to bootstrap hyperparameters on small subsets and as the brute-force
oracle against which the sparse approximation is checked.
"""

import math

from dataclasses import dataclass

import numpy as np

from ._linalg import ConditioningError, chol_lower_jittered, solve_lower, solve_lower_t
from ._optim import maximize_with_restarts
from .kernel import (
    HyperpriorSpec,
    KernelHyperparams,
    k_cross,
    kernel_from_sq_diffs,
    mean_fn,
    pairwise_sq_diffs,
)

__all__ = ["ExactGPState", "fit_exact", "exact_predict", "log_marginal_likelihood", "train_map"]


@dataclass(frozen=True)
class ExactGPState:
    """Trained exact GP: data snapshot, hyperparameters, and solved factors."""

    ds: object
    hp: KernelHyperparams
    chol_kn: np.ndarray
    alpha: np.ndarray

    @property
    def lml(self):
        ybar = self.ds.y - mean_fn(self.ds.x, self.hp)
        n = self.ds.n
        return float(
            -0.5 * ybar @ self.alpha
            - np.sum(np.log(np.diag(self.chol_kn)))
            - 0.5 * n * np.log(2 * np.pi)
        )


def fit_exact(ds, hp):
    """Factorize K_XX + D and solve for the posterior weights."""
    kn = k_cross(ds.x, ds.x, hp)
    kn[np.diag_indices(ds.n)] += ds.sigma_tot_sq
    L, _ = chol_lower_jittered(kn, hp.sigma_f**2, "K_XX + D", jitter0=0.0)
    ybar = ds.y - mean_fn(ds.x, hp)
    alpha = solve_lower_t(L, solve_lower(L, ybar))
    return ExactGPState(ds, hp, L, alpha)


def exact_predict(state, x):
    """Latent posterior mean and variance at one point or a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xq = np.atleast_2d(x)
    ks = k_cross(state.ds.x, xq, state.hp)
    mean = mean_fn(xq, state.hp) + ks.T @ state.alpha
    v = solve_lower(state.chol_kn, ks)
    var = np.maximum(state.hp.sigma_f**2 - np.sum(v * v, axis=0), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def log_marginal_likelihood(ds, hp):
    """Exact heteroskedastic log marginal likelihood."""
    return fit_exact(ds, hp).lml


def _map_objective(ds, spec):
    dim = ds.dim
    d2 = pairwise_sq_diffs(ds.x, ds.x)
    diag = np.diag_indices(ds.n)
    const = -0.5 * ds.n * np.log(2 * np.pi)

    def objective(vec):
        try:
            hp = KernelHyperparams.from_vector(vec, dim)
            kn = kernel_from_sq_diffs(d2, hp)
            kn[diag] += ds.sigma_tot_sq
            L, _ = chol_lower_jittered(kn, hp.sigma_f**2, "K_XX + D", jitter0=0.0)
            ybar = ds.y - mean_fn(ds.x, hp)
            half = solve_lower(L, ybar)
            lml = const - 0.5 * half @ half - np.sum(np.log(np.diag(L)))
            return float(lml) + spec.log_density(hp)
        except (ValueError, OverflowError, ConditioningError):
            return -np.inf

    return objective


def hyperparam_bounds(spec, dim):
    """Data-driven box constraints in packed coordinates.

    The bounds rule out degenerate optima the smooth objective admits:
    a needle-shaped mean function (omega far below the data spread, with
    the output scale exploding to absorb the residuals) scores well on
    the likelihood but produces a useless surrogate.
    """
    lo, hi = [], []
    y_scale = spec.y_range + 1.0
    hpd_sd = np.exp(spec.log_ell_center)

    lo.append(spec.log_sigma_f_center - 8.0)
    # An output scale approaching the observed y range turns the GP into a
    # huge-amplitude noise field that pointwise-fits anything while
    # predicting garbage between points; half the range still leaves the
    # smooth-residual swing representable (the function can move by a few
    # output scales across a few length scales).
    hi.append(math.log(0.5 * y_scale))
    for d in range(dim):
        lo.append(math.log(1e-4 * spec.span[d]))
        hi.append(math.log(10.0 * spec.span[d]))
    lo.append(spec.m0_center - 2.0 * y_scale - 10.0)
    # the envelope's peak may not materially exceed the best observation:
    # phantom plateaus above y_max would otherwise attract the whole
    # variational mass into no-data regions
    hi.append(spec.y_max + 3.0)
    for c, sd in zip(spec.mu_center, 10.0 * spec.span):
        lo.append(c - sd)
        hi.append(c + sd)
    for d in range(dim):
        # the mean function is a global envelope: a bowl much narrower than
        # the high-density data bulk both misstates the posterior and
        # suppresses acquisition beyond the current data frontier
        lo.append(math.log(0.5 * hpd_sd[d]))
        hi.append(math.log(100.0 * spec.span[d]))
    return list(zip(lo, hi))


def perturb_start(spec):
    """Restart starting points: a short-length-scale probe, then random jitter.

    The first restart shrinks the length scales by 8x: targets whose
    structure is much finer than the data spread (thin ridges, rings) sit
    in a different basin than the data-scale start.
    """
    dim = spec.log_ell_center.size

    def perturb(vec, rng, i):
        out = vec.copy()
        if i == 0:
            out[1 : 1 + dim] -= math.log(8.0)
            return out
        out[0] += 0.3 * rng.standard_normal()
        out[1 : 1 + dim] += rng.uniform(-2.0, 0.7, dim)
        out[1 + dim] += 0.3 * rng.standard_normal()
        out[2 + dim : 2 + 2 * dim] += 0.3 * np.exp(
            spec.log_ell_center
        ) * rng.standard_normal(dim)
        out[2 + 2 * dim :] += 0.3 * rng.standard_normal(dim)
        return out

    return perturb


def train_map(ds, hp0, restarts=3, maxiter=200, seed=0, spec=None):
    """Maximum-a-posteriori hyperparameters for an exact GP on ``ds``.

    The returned parameters never score below ``hp0`` on the objective
    (log marginal likelihood plus log hyperprior).
    """
    if ds.n < ds.dim + 2:
        raise ValueError("need at least D + 2 points to train")
    if spec is None:
        spec = HyperpriorSpec.from_dataset(ds)
    objective = _map_objective(ds, spec)
    best = maximize_with_restarts(
        objective,
        hp0.to_vector(),
        bounds=hyperparam_bounds(spec, ds.dim),
        restarts=restarts,
        perturb=perturb_start(spec),
        rng=np.random.default_rng(seed),
        maxiter=maxiter,
    )
    return KernelHyperparams.from_vector(best, ds.dim)
