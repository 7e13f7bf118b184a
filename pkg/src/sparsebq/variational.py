"""Mixture-of-Gaussians posterior: ELBO estimation, fitting, and build-up.

The variational family is a mixture of K Gaussians with per-component scale
and a shared diagonal scale vector. The ELBO objective combines the
closed-form quadrature mean of the expected log joint with a Monte Carlo
entropy estimate (reparameterized, so the whole objective is differentiable
for fixed noise draws).
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, softmax

from . import quadrature
from .kernel import hpd_subset
from .sgpr import predict

__all__ = [
    "MixturePosterior",
    "ElboEstimate",
    "FitOptions",
    "pdf",
    "sample",
    "entropy_mc",
    "elbo",
    "fit",
    "build_up",
    "initial_mixture",
    "symmetrized_kl_mc",
]

MAX_COMPONENTS = 30


@dataclass(frozen=True)
class MixturePosterior:
    """Weights, component means and scales, and the shared scale vector."""

    weights: np.ndarray  # (K,)
    mu: np.ndarray       # (K, D)
    sigma: np.ndarray    # (K,)
    lam: np.ndarray      # (D,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("weights must lie on the simplex")
        if np.any(sigma <= 0) or np.any(lam <= 0):
            raise ValueError("scales must be positive")
        if w.size != mu.shape[0] or w.size != sigma.size or mu.shape[1] != lam.size:
            raise ValueError("inconsistent mixture shapes")
        for arr in (w, mu, sigma, lam):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "lam", lam)

    @property
    def k(self):
        return self.weights.size

    @property
    def dim(self):
        return self.lam.size

    def to_dict(self):
        return {
            "D": self.dim,
            "K": self.k,
            "weights": self.weights.tolist(),
            "means": self.mu.tolist(),
            "scales": self.sigma.tolist(),
            "lambda": self.lam.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.array(d["weights"], dtype=float),
            mu=np.array(d["means"], dtype=float),
            sigma=np.array(d["scales"], dtype=float),
            lam=np.array(d["lambda"], dtype=float),
        )


@dataclass(frozen=True)
class ElboEstimate:
    """ELBO mean with the quadrature uncertainty of the expected log joint."""

    mean: float
    sd: float
    n_mc_entropy: int


def _component_logpdfs(q, x):
    """(S, K) matrix of per-component log densities at rows of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    scales = q.sigma[:, None] * q.lam[None, :]  # (K, D)
    diff = x[:, None, :] - q.mu[None, :, :]     # (S, K, D)
    z2 = np.sum((diff / scales[None, :, :]) ** 2, axis=2)
    log_norm = -0.5 * q.dim * math.log(2 * math.pi) - np.sum(
        np.log(scales), axis=1
    )
    return log_norm[None, :] - 0.5 * z2


def log_pdf(q, x):
    single = np.asarray(x).ndim == 1
    logs = _component_logpdfs(q, x) + np.log(q.weights)[None, :]
    out = logsumexp(logs, axis=1)
    return float(out[0]) if single else out


def pdf(q, x):
    out = np.exp(log_pdf(q, x))
    return float(out) if np.isscalar(out) or out.ndim == 0 else out


def sample(q, n, seed=0):
    """n i.i.d. draws; deterministic for a given seed or Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comps = rng.choice(q.k, size=n, p=q.weights)
    eps = rng.standard_normal((n, q.dim))
    return q.mu[comps] + q.sigma[comps, None] * q.lam[None, :] * eps


def entropy_mc(q, n_mc, rng, return_grads=False):
    """Reparameterized Monte Carlo entropy with ``n_mc`` draws per component.

    With ``return_grads`` also returns the gradients w.r.t. the natural
    mixture parameters, differentiating through both the sample locations
    and the density parameters for the fixed standard-normal draws.
    """
    k, d = q.k, q.dim
    eps = rng.standard_normal((k, n_mc, d))
    scales = q.sigma[:, None] * q.lam[None, :]                    # (K, D)
    x = q.mu[:, None, :] + scales[:, None, :] * eps               # (K, n, D)
    x_flat = x.reshape(k * n_mc, d)

    comp_logs = _component_logpdfs(q, x_flat)                     # (S, K)
    log_q = logsumexp(comp_logs + np.log(q.weights)[None, :], axis=1)
    per_comp_mean = log_q.reshape(k, n_mc).mean(axis=1)
    h = -float(q.weights @ per_comp_mean)
    if not return_grads:
        return h

    s = k * n_mc
    resp = softmax(comp_logs + np.log(q.weights)[None, :], axis=1)  # (S, K)
    diff = x_flat[:, None, :] - q.mu[None, :, :]                    # (S, K, D)
    inv_var = 1.0 / scales**2                                       # (K, D)
    # d log q / d x at each sample
    dlogq_dx = -np.einsum("sk,skd,kd->sd", resp, diff, inv_var)
    # coefficient per sample row: w_k / n for the component that produced it
    coef = np.repeat(q.weights / n_mc, n_mc)                        # (S,)

    # location gradients: path term plus explicit parameter term
    grad_mu = -(coef[:, None] * dlogq_dx).reshape(k, n_mc, d).sum(axis=1)
    grad_mu -= np.einsum("s,sm,smd,md->md", coef, resp, diff, inv_var)

    # sigma gradients
    lam_eps = q.lam[None, None, :] * eps                            # (K, n, D)
    path_sigma = np.einsum(
        "sd,sd->s", dlogq_dx, lam_eps.reshape(s, d)
    )
    grad_sigma = -(coef * path_sigma).reshape(k, n_mc).sum(axis=1)
    z2 = np.sum(diff**2 * inv_var[None, :, :], axis=2)              # (S, K)
    dlogq_dsigma = resp * (z2 - d) / q.sigma[None, :]
    grad_sigma -= coef @ dlogq_dsigma

    # lambda gradients (shared across components)
    sig_eps = q.sigma[:, None, None] * eps                          # (K, n, D)
    grad_lam = -np.einsum("s,sd,sd->d", coef, dlogq_dx, sig_eps.reshape(s, d))
    dlogq_dlam = np.einsum(
        "sm,smd,md->sd", resp, diff**2, inv_var / q.lam[None, :]
    ) - (1.0 / q.lam)[None, :]
    grad_lam -= coef @ dlogq_dlam

    # weight gradients (natural, before any simplex reparameterization)
    grad_w = -per_comp_mean.copy()
    ratios = np.exp(comp_logs - log_q[:, None])                     # N_m / q
    grad_w -= coef @ ratios
    return h, grad_mu, grad_sigma, grad_lam, grad_w


def elbo(q, state, n_mc=100, seed=0):
    """ELBO estimate: quadrature expected log joint plus MC entropy."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    elj_mean, elj_var = quadrature.mixture_expected_log_joint(state, q)
    h = entropy_mc(q, n_mc, rng)
    return ElboEstimate(elj_mean + h, math.sqrt(max(elj_var, 0.0)), n_mc)


@dataclass(frozen=True)
class FitOptions:
    n_iters: int = 300
    n_mc_entropy: int = 100
    learning_rate: float = 0.08
    lr_decay: float = 0.1  # final rate as a fraction of the initial one
    smooth_window: int = 20
    seed: int = 0
    max_restarts: int = 3
    scale_reference: np.ndarray | None = None  # per-dim data scale for bounds
    scale_bound_factor: float = 10.0**1.5


def _pack(q):
    return np.concatenate(
        [q.mu.ravel(), np.log(q.sigma), np.log(q.lam), np.log(q.weights + 1e-300)]
    )


def _unpack(theta, k, d):
    mu = theta[: k * d].reshape(k, d)
    log_sigma = theta[k * d : k * d + k]
    log_lam = theta[k * d + k : k * d + k + d]
    logits = theta[k * d + k + d :]
    w = softmax(logits)
    return MixturePosterior(w, mu, np.exp(log_sigma), np.exp(log_lam))


def _clip_scales(theta, k, d, opts):
    bound = math.log(opts.scale_bound_factor)
    sl = slice(k * d, k * d + k)
    theta[sl] = np.clip(theta[sl], -bound, bound)
    ll = slice(k * d + k, k * d + k + d)
    if opts.scale_reference is not None:
        ref = np.log(opts.scale_reference)
        theta[ll] = np.clip(theta[ll], ref - bound, ref + bound)
    else:
        theta[ll] = np.clip(theta[ll], -4 * bound, 4 * bound)
    return theta


def _elbo_and_grad(theta, state, k, d, n_mc, rng):
    q = _unpack(theta, k, d)
    elj = quadrature.bq_mean_gradients(state, q)
    h, h_mu, h_sigma, h_lam, h_w = entropy_mc(q, n_mc, rng, return_grads=True)
    value = elj.value + h
    g_mu = elj.mu + h_mu
    g_sigma = (elj.sigma + h_sigma) * q.sigma      # to log sigma
    g_lam = (elj.lam + h_lam) * q.lam              # to log lambda
    g_w = elj.weights + h_w
    g_logits = q.weights * (g_w - float(q.weights @ g_w))  # softmax chain
    grad = np.concatenate([g_mu.ravel(), g_sigma, g_lam, g_logits])
    return value, grad, q


def fit(q0, state, opts=FitOptions()):
    """Stochastic gradient ascent on the ELBO from ``q0``.

    Adam with exponential step decay; the returned mixture is the snapshot
    with the best smoothed ELBO, so the result does not score below the
    start beyond Monte Carlo noise. Divergence restarts from ``q0`` with a
    halved step size, at most ``max_restarts`` times.
    """
    k, d = q0.k, q0.dim
    lr0 = opts.learning_rate
    for attempt in range(opts.max_restarts + 1):
        rng = np.random.default_rng(opts.seed)
        theta = _pack(q0)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        history = []
        best_value = -np.inf
        best_theta = theta.copy()
        diverged = False
        for t in range(opts.n_iters):
            value, grad, _ = _elbo_and_grad(theta, state, k, d, opts.n_mc_entropy, rng)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                diverged = True
                break
            history.append(value)
            smoothed = float(np.mean(history[-opts.smooth_window :]))
            if smoothed > best_value:
                best_value = smoothed
                best_theta = theta.copy()
            lr = lr0 * opts.lr_decay ** (t / max(opts.n_iters - 1, 1))
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad**2
            m_hat = m / (1.0 - 0.9 ** (t + 1))
            v_hat = v / (1.0 - 0.999 ** (t + 1))
            theta = theta + lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            theta = _clip_scales(theta, k, d, opts)
        if not diverged:
            return _unpack(best_theta, k, d)
        lr0 *= 0.5
    raise RuntimeError("variational fit diverged repeatedly")


def initial_mixture(state, k=2, lam_scale=None):
    """Small starting mixture placed on the best observed points."""
    ds = state.ds
    if lam_scale is None:
        idx = hpd_subset(ds, 0.8)
        lam_scale = np.std(ds.x[idx], axis=0)
        lam_scale = np.where(lam_scale > 1e-6, lam_scale, 1.0)
    order = np.argsort(ds.y)[::-1]
    k = min(k, ds.n)
    mu = ds.x[order[:k]].copy()
    sigma = np.geomspace(0.5, 1.0, k)[::-1].copy()
    return MixturePosterior(np.full(k, 1.0 / k), mu, sigma, lam_scale)


def symmetrized_kl_mc(p, q, n=20000, seed=0):
    """Symmetrized KL divergence between two mixtures, by Monte Carlo."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xp = sample(p, n, rng)
    xq = sample(q, n, rng)
    kl_pq = float(np.mean(log_pdf(p, xp) - log_pdf(q, xp)))
    kl_qp = float(np.mean(log_pdf(q, xq) - log_pdf(p, xq)))
    return 0.5 * (kl_pq + kl_qp)


def _coverage_gap_order(q, state, elbo_mean, rel_floor=-5.0):
    """Training points ranked by the log gap between surrogate and mixture.

    The gap log p_surrogate - log q measures how badly a region is
    under-covered in relative terms: absolute density residuals near the
    peak are dominated by fit noise, while a genuinely missed region shows
    a gap of many nats. Points whose surrogate density is below
    exp(rel_floor) of the posterior scale are ignored.
    """
    ds = state.ds
    f_mean, _ = predict(state, ds.x)
    log_target = f_mean - elbo_mean
    log_q = log_pdf(q, ds.x)
    gap = np.where(
        log_target > rel_floor,
        np.minimum(log_target, 50.0) - np.maximum(log_q, -60.0),
        -np.inf,
    )
    return np.argsort(gap)[::-1], gap


def _spawn_component(q, state, elbo_mean):
    """New component at the training point with the largest coverage gap."""
    ds = state.ds
    order, _ = _coverage_gap_order(q, state, elbo_mean)
    existing = {tuple(row) for row in q.mu}
    spawn = ds.x[order[0]]
    for idx in order:
        if tuple(ds.x[idx]) not in existing:
            spawn = ds.x[idx]
            break
    sigma_new = float(np.exp(np.mean(np.log(q.sigma))))
    w_new = 1.0 / (q.k + 1)
    weights = np.append(q.weights * (1.0 - w_new), w_new)
    weights = weights / weights.sum()
    return MixturePosterior(
        weights,
        np.vstack([q.mu, spawn[None, :]]),
        np.append(q.sigma, sigma_new),
        q.lam,
    )


def rebalance_mixture(q, state, opts, max_moves=2, refit_iters=None):
    """Relocate the weakest components onto materially uncovered mass.

    At the component cap, newly discovered high-density regions can no
    longer be covered by growth; moving the lowest-weight component there
    (and refitting) keeps the mixture tracking the surrogate. A move that
    drops the ELBO is rolled back and stops the rebalancing.
    """
    refit_opts = (
        opts if refit_iters is None else replace(opts, n_iters=refit_iters)
    )
    for _ in range(max_moves):
        est = elbo(q, state, opts.n_mc_entropy, np.random.default_rng(opts.seed))
        order, gap = _coverage_gap_order(q, state, est.mean)
        best = None
        existing = {tuple(row) for row in q.mu}
        for i in order:
            if not gap[i] > 1.0:  # mixture within a factor e of the surrogate
                break
            if tuple(state.ds.x[i]) not in existing:
                best = state.ds.x[i]
                break
        if best is None:
            break
        k_min = int(np.argmin(q.weights))
        mu = q.mu.copy()
        mu[k_min] = best
        weights = q.weights.copy()
        weights[k_min] = max(weights[k_min], 1.0 / (2 * q.k))
        sigma = q.sigma.copy()
        sigma[k_min] = float(np.exp(np.mean(np.log(q.sigma))))
        q_try = MixturePosterior(weights / weights.sum(), mu, sigma, q.lam)
        q_new = fit(q_try, state, refit_opts)
        est_new = elbo(q_new, state, opts.n_mc_entropy, np.random.default_rng(opts.seed))
        if est_new.mean < est.mean - max(4.0 * est.sd, 0.2):
            break
        q = q_new
    return q


def reseed_weak_components(q, state, elbo_mean, weight_floor=5e-3):
    """Relocate negligible-weight components onto uncovered mass.

    Gradient fitting cannot rescue a component whose weight has collapsed
    far from the remaining residual mass; recycling it to the largest
    residual training point gives the next fit a useful start. Returns the
    (possibly unchanged) mixture and whether anything moved.
    """
    weak = np.where(q.weights < weight_floor)[0]
    if weak.size == 0:
        return q, False
    order, gap = _coverage_gap_order(q, state, elbo_mean)
    existing = {tuple(row) for row in q.mu}
    candidates = (
        state.ds.x[i] for i in order if gap[i] > 1.0
    )
    mu = q.mu.copy()
    weights = q.weights.copy()
    moved = False
    for k in weak:
        for cand in candidates:
            if tuple(cand) not in existing:
                mu[k] = cand
                existing.add(tuple(cand))
                weights[k] = 4.0 * weight_floor
                moved = True
                break
    if not moved:
        return q, False
    return MixturePosterior(weights / weights.sum(), mu, q.sigma, q.lam), True


def build_up(
    state,
    opts=FitOptions(),
    kl_tol=0.01,
    max_components=MAX_COMPONENTS,
    q0=None,
    kl_samples=20000,
    max_additions=None,
    refit_iters=None,
    max_reseeds=4,
):
    """Grow the mixture until the posterior stabilizes or the cap is reached.

    Starts from two components (or ``q0``). Each round first recycles
    collapsed components onto uncovered mass, otherwise spawns a new one at
    the largest surrogate-mass residual, then refits. Growth stops when the
    symmetrized KL between successive posteriors falls below ``kl_tol``, at
    the component cap, or when an addition fails to help.
    """
    if q0 is None:
        q = fit(initial_mixture(state, k=2), state, opts)
    else:
        q = q0
    additions = 0
    reseeds = 0
    refit_opts = (
        opts if refit_iters is None else replace(opts, n_iters=refit_iters)
    )
    rng = np.random.default_rng(opts.seed + 1)
    while True:
        est = elbo(q, state, opts.n_mc_entropy, np.random.default_rng(opts.seed))
        q_try, recycled = reseed_weak_components(q, state, est.mean)
        if recycled:
            reseeds += 1
            if reseeds > max_reseeds:
                break
        else:
            if max_additions is not None and additions >= max_additions:
                break
            if q.k >= max_components:
                break
            q_try = _spawn_component(q, state, est.mean)
        q_new = fit(q_try, state, refit_opts)
        kl = symmetrized_kl_mc(q, q_new, kl_samples, rng)
        est_new = elbo(q_new, state, opts.n_mc_entropy, np.random.default_rng(opts.seed))
        if est_new.mean < est.mean - max(4.0 * est.sd, 0.2):
            warnings.warn(
                "component addition decreased the ELBO; keeping previous mixture",
                RuntimeWarning,
                stacklevel=2,
            )
            break
        q = q_new
        if not recycled:
            additions += 1
            if kl < kl_tol:
                break
    return q
