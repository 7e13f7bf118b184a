"""Heteroskedastic sparse variational GP regression.

All quantities are kept in the Cholesky form that stays stable under large
noise ratios: L is the factor of the inducing Gram matrix, R the whitened
cross-covariance scaled by per-point precisions, L_S the factor of
S = I + R R^T, and c the projected centered observations. The variational
bound, the predictive distribution, and the rank-1 updates below are all
expressed through these factors.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._linalg import ConditioningError, chol_lower_jittered, cholupdate, solve_lower, solve_lower_t
from .dataset import Dataset
from .exact_gp import hyperparam_bounds, perturb_start
from ._optim import maximize_with_restarts
from .kernel import (
    HyperpriorSpec,
    KernelHyperparams,
    k_cross,
    kernel_from_sq_diffs,
    mean_fn,
    pairwise_sq_diffs,
)

__all__ = [
    "SparseGPState",
    "fit",
    "gp_elbo",
    "predict",
    "optimize_hyperparams",
    "rank1_add_point",
    "rank1_add_point_with_inducing",
]

# Starting jitter for the inducing Gram diagonal, relative to sigma_f^2.
# Escalates by tens (up to 1e-4) only when the factorization fails; starting
# near machine precision keeps the Z = X posterior within rounding of the
# exact GP.
KZZ_JITTER = 1e-12


@dataclass(frozen=True)
class SparseGPState:
    """Fitted sparse GP, closed under rank-1 observation updates."""

    ds: Dataset
    z: np.ndarray
    hp: KernelHyperparams
    chol_kzz: np.ndarray          # L, lower factor of K_ZZ (+ jitter)
    chol_s: np.ndarray            # L_S, lower factor of I + R R^T
    r_proj: np.ndarray            # R = L^-1 K_ZX D^-1/2
    c_proj: np.ndarray            # c = L_S^-1 R D^-1/2 (y - m(X))
    dy: np.ndarray                # D^-1/2 (y - m(X))
    jitter: float
    pred_w: np.ndarray = field(default=None)  # L^-T L_S^-T c

    def __post_init__(self):
        if self.pred_w is None:
            w = solve_lower_t(self.chol_kzz, solve_lower_t(self.chol_s, self.c_proj))
            object.__setattr__(self, "pred_w", w)

    @property
    def n(self):
        return self.ds.n

    @property
    def m(self):
        return self.z.shape[0]

    def variational_params(self):
        """Mean and covariance of the optimal distribution at inducing points."""
        half = solve_lower_t(self.chol_s, np.eye(self.m))
        a = self.chol_kzz @ half  # L L_S^-T
        m_u = mean_fn(self.z, self.hp) + self.chol_kzz @ solve_lower_t(
            self.chol_s, self.c_proj
        )
        return m_u, a @ a.T

    def gp_elbo(self):
        """Variational lower bound on the log marginal likelihood."""
        n = self.n
        sigma_tot = self.ds.sigma_tot_sq
        logdet_s = 2.0 * float(np.sum(np.log(np.diag(self.chol_s))))
        logdet_d = float(np.sum(np.log(sigma_tot)))
        quad = float(self.dy @ self.dy) - float(self.c_proj @ self.c_proj)
        trace = self.hp.sigma_f**2 * float(np.sum(1.0 / sigma_tot)) - float(
            np.sum(self.r_proj**2)
        )
        return -0.5 * (n * math.log(2 * math.pi) + logdet_s + logdet_d + quad + trace)


def _as_rows(ds, z):
    z = np.asarray(z)
    if z.ndim == 1 and np.issubdtype(z.dtype, np.integer):
        return ds.x[z]
    return np.atleast_2d(np.asarray(z, dtype=float))


def _match_pairs(ds, z):
    """(inducing row, training column) pairs that are the same point.

    The jitter is part of the surrogate model (white noise on the latent),
    so the cross-covariance of an inducing point with its own training row
    carries it too; this keeps Z = X algebraically equal to the exact GP.
    """
    by_row = {}
    for n, row in enumerate(ds.x):
        by_row.setdefault(row.tobytes(), []).append(n)
    return [
        (p, n)
        for p, row in enumerate(z)
        for n in by_row.get(row.tobytes(), ())
    ]


def _build_state(ds, z, hp, kzz, kzx, match):
    """Factorize the sparse GP from precomputed kernel blocks.

    ``kzx`` is consumed (mutated in place).
    """
    L, jitter = chol_lower_jittered(kzz, hp.sigma_f**2, "K_ZZ", jitter0=KZZ_JITTER)
    for p, n in match:
        kzx[p, n] += jitter
    sqrt_dinv = 1.0 / np.sqrt(ds.sigma_tot_sq)
    kzx *= sqrt_dinv
    r_proj = solve_lower(L, kzx)
    s = r_proj @ r_proj.T
    s[np.diag_indices(z.shape[0])] += 1.0
    chol_s, _ = chol_lower_jittered(s, 1.0, "I + R R^T", jitter0=0.0)
    dy = (ds.y - mean_fn(ds.x, hp)) * sqrt_dinv
    c = solve_lower(chol_s, r_proj @ dy)
    return SparseGPState(ds, z, hp, L, chol_s, r_proj, c, dy, jitter)


def fit(ds, z, hp):
    """Fit the sparse GP for fixed inducing inputs and hyperparameters.

    ``z`` is either an index array into the training inputs or a matrix of
    inducing rows (which must be training inputs). Deterministic; raises
    :class:`ConditioningError` if a factorization fails even after jitter
    escalation.
    """
    z = _as_rows(ds, z)
    if np.any(ds.sigma_tot_sq <= 0):
        raise ValueError("all total variances must be positive")
    return _build_state(
        ds, z, hp, k_cross(z, z, hp), k_cross(z, ds.x, hp), _match_pairs(ds, z)
    )


def gp_elbo(ds, z, hp):
    """GP-ELBO for the given data, inducing inputs, and hyperparameters."""
    return fit(ds, z, hp).gp_elbo()


def predict(state, x):
    """Latent posterior mean and variance at one point or a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xq = np.atleast_2d(x)
    kzs = k_cross(state.z, xq, state.hp)
    mean = mean_fn(xq, state.hp) + kzs.T @ state.pred_w
    a = solve_lower(state.chol_kzz, kzs)
    b = solve_lower(state.chol_s, a)
    var = state.hp.sigma_f**2 - np.sum(a * a, axis=0) + np.sum(b * b, axis=0)
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def optimize_hyperparams(
    ds, z, hp0, restarts=1, maxiter=100, seed=0, spec=None
):
    """Ascend the GP-ELBO plus log hyperprior over the hyperparameters.

    Warm-startable: the result never scores below ``hp0``.
    """
    z = _as_rows(ds, z)
    if spec is None:
        spec = HyperpriorSpec.from_dataset(ds)
    dim = ds.dim
    d2_zz = pairwise_sq_diffs(z, z)
    d2_zx = pairwise_sq_diffs(z, ds.x)
    match = _match_pairs(ds, z)

    def objective(vec):
        try:
            hp = KernelHyperparams.from_vector(vec, dim)
            state = _build_state(
                ds,
                z,
                hp,
                kernel_from_sq_diffs(d2_zz, hp),
                kernel_from_sq_diffs(d2_zx, hp),
                match,
            )
            return state.gp_elbo() + spec.log_density(hp)
        except (ConditioningError, ValueError, OverflowError):
            return -np.inf

    best = maximize_with_restarts(
        objective,
        hp0.to_vector(),
        bounds=hyperparam_bounds(spec, dim),
        restarts=restarts,
        perturb=perturb_start(spec),
        rng=np.random.default_rng(seed),
        maxiter=maxiter,
    )
    return KernelHyperparams.from_vector(best, dim)


def _extended_dataset(ds, x_new, y_new, sigma_tot_sq_new):
    # Bypasses duplicate merging: a rank-1 update models a strictly new row.
    # The split of the new total variance into observation and shaping parts
    # is unknown at this layer, so the whole of it is booked as observation.
    x = np.vstack([ds.x, np.atleast_2d(np.asarray(x_new, dtype=float))])
    y = np.append(ds.y, y_new)
    s_obs = np.append(ds.sigma_obs_sq, sigma_tot_sq_new)
    s_tot = np.append(ds.sigma_tot_sq, sigma_tot_sq_new)
    return Dataset(x, y, s_obs, s_tot)


def rank1_add_point(state, x_new, y_new, sigma_tot_sq_new):
    """Add one observation without a new inducing point (same inducing set).

    Matches a full refit on the extended dataset up to rounding, at cost
    O(M^2 + M N) instead of a refit.
    """
    x_new = np.asarray(x_new, dtype=float)
    hp = state.hp
    sd = math.sqrt(sigma_tot_sq_new)
    kz = k_cross(state.z, x_new[None, :], hp)[:, 0]
    u = solve_lower(state.chol_kzz, kz)
    r_new = u / sd
    chol_s = cholupdate(state.chol_s, r_new)
    dy_new = (y_new - mean_fn(x_new, hp)) / sd
    c = solve_lower(chol_s, state.chol_s @ state.c_proj + r_new * dy_new)
    return SparseGPState(
        _extended_dataset(state.ds, x_new, y_new, sigma_tot_sq_new),
        state.z,
        hp,
        state.chol_kzz,
        chol_s,
        np.hstack([state.r_proj, r_new[:, None]]),
        c,
        np.append(state.dy, dy_new),
        state.jitter,
    )


def rank1_add_point_with_inducing(state, x_new, y_new, sigma_tot_sq_new):
    """Add one observation together with a co-located inducing point.

    Falls back to the fixed-inducing update when the new location
    coincides (numerically) with an existing inducing point, where the
    grown Gram matrix would be singular.
    """
    x_new = np.asarray(x_new, dtype=float)
    if any(np.array_equal(row, x_new) for row in state.z):
        return rank1_add_point(state, x_new, y_new, sigma_tot_sq_new)
    hp = state.hp
    sd = math.sqrt(sigma_tot_sq_new)
    kz = k_cross(state.z, x_new[None, :], hp)[:, 0]
    u = solve_lower(state.chol_kzz, kz)
    c1_sq = hp.sigma_f**2 + state.jitter - float(u @ u)
    if c1_sq <= state.jitter:
        return rank1_add_point(state, x_new, y_new, sigma_tot_sq_new)
    c1 = math.sqrt(c1_sq)

    chol_kzz = np.zeros((state.m + 1, state.m + 1))
    chol_kzz[: state.m, : state.m] = state.chol_kzz
    chol_kzz[state.m, : state.m] = u
    chol_kzz[state.m, state.m] = c1

    kx = k_cross(x_new[None, :], state.ds.x, hp)[0]
    sqrt_dinv = 1.0 / np.sqrt(state.ds.sigma_tot_sq)
    v2 = (kx * sqrt_dinv - u @ state.r_proj) / c1
    c2 = c1 / sd
    r_top_new = u / sd
    dy_new = (y_new - mean_fn(x_new, hp)) / sd

    l1 = cholupdate(state.chol_s, r_top_new)
    v3 = state.r_proj @ v2 + c2 * r_top_new
    w = solve_lower(l1, v3)
    gamma_sq = 1.0 + c2**2 + float(v2 @ v2) - float(w @ w)
    gamma = math.sqrt(max(gamma_sq, 1e-300))
    chol_s = np.zeros((state.m + 1, state.m + 1))
    chol_s[: state.m, : state.m] = l1
    chol_s[state.m, : state.m] = w
    chol_s[state.m, state.m] = gamma

    top_rhs = state.chol_s @ state.c_proj + r_top_new * dy_new
    bottom_rhs = float(v2 @ state.dy) + c2 * dy_new
    c_top = solve_lower(l1, top_rhs)
    c_bottom = (bottom_rhs - float(w @ c_top)) / gamma
    c = np.append(c_top, c_bottom)

    r_proj = np.zeros((state.m + 1, state.n + 1))
    r_proj[: state.m, : state.n] = state.r_proj
    r_proj[: state.m, state.n] = r_top_new
    r_proj[state.m, : state.n] = v2
    r_proj[state.m, state.n] = c2

    return SparseGPState(
        _extended_dataset(state.ds, x_new, y_new, sigma_tot_sq_new),
        np.vstack([state.z, x_new[None, :]]),
        hp,
        chol_kzz,
        chol_s,
        r_proj,
        c,
        np.append(state.dy, dy_new),
        state.jitter,
    )
