"""Active-learning acquisition over the sparse surrogate.

Two criteria: pointwise uncertainty sampling for exact targets, and the
integrated change in the median interquartile range for noisy targets. The
noisy criterion scores a candidate by the posterior spread that would
remain after a hypothetical observation there, evaluated over a fixed
Monte Carlo sample of the current posterior so that candidates are
compared under common randomness.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from ._linalg import solve_lower, solve_lower_t
from .cmaes import cmaes_maximize
from .dataset import NOISELESS_VARIANCE_FLOOR, NoiseShapeConfig, shape_noise
from .kernel import k_cross
from .sgpr import predict, rank1_add_point_with_inducing
from .variational import log_pdf, sample

__all__ = ["AcquisitionConfig", "a1", "log_a1", "A2Evaluator", "propose", "resolve_kind"]


@dataclass(frozen=True)
class AcquisitionConfig:
    kind: str = "auto"  # "a1", "a2", or "auto" (by observation noise)
    p_alpha: float = 0.75
    n_imiqr_mc: int = 512
    n_starts: int = 8
    search_lo: np.ndarray | None = None
    search_hi: np.ndarray | None = None
    grow_inducing: bool = True  # hypothetical updates add a co-located inducing point
    es_max_evals: int = 150
    es_popsize: int | None = None

    def __post_init__(self):
        if not 0.5 < self.p_alpha < 1.0:
            raise ValueError("p_alpha must lie in (0.5, 1)")
        if self.n_imiqr_mc < 1:
            raise ValueError("n_imiqr_mc must be >= 1")
        if self.kind not in ("a1", "a2", "auto"):
            raise ValueError(f"unknown acquisition kind {self.kind!r}")

    @property
    def alpha(self):
        return float(norm.ppf(self.p_alpha))


def resolve_kind(cfg, ds):
    """Pick the pointwise rule for exact data, the integrated one for noisy."""
    if cfg.kind != "auto":
        return cfg.kind
    return "a1" if float(np.max(ds.sigma_obs_sq)) <= 1e-3 else "a2"


def log_a1(state, q, x):
    """Log of the uncertainty-sampling acquisition (stable to evaluate)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    mean, var = predict(state, np.atleast_2d(x))
    out = np.log(np.maximum(var, 1e-300)) + log_pdf(q, np.atleast_2d(x)) + mean
    return float(out[0]) if single else out


def a1(state, q, x):
    """Pointwise acquisition: latent variance times posterior mass times density."""
    return np.exp(np.clip(log_a1(state, q, x), -745.0, 709.0))


def hypothetical_noise_sq(state, x, noise_cfg, obs_noise_fn=None):
    """Total variance a hypothetical observation at x would carry.

    Observation part from the target's declared noise model (the noiseless
    floor by default) plus shaping noise at the predicted log-density gap.
    """
    mean, _ = predict(state, x)
    obs = NOISELESS_VARIANCE_FLOOR if obs_noise_fn is None else float(obs_noise_fn(x))
    gap = max(state.ds.y_max - mean, 0.0)
    return obs + shape_noise(gap, noise_cfg, dim=state.ds.dim), mean


class A2Evaluator:
    """Integrated-spread acquisition against a fixed posterior sample.

    For each candidate, scores minus twice the average hyperbolic sine of
    the posterior latent sd at the sample points after a hypothetical
    observation at the candidate. The hypothetical update matches the
    rank-1 update of the sparse GP exactly (co-located inducing point when
    ``grow_inducing``), but reuses cached solves so one candidate costs
    O(NM + M^2 + |sample| M).
    """

    def __init__(self, state, cfg, mc_set, noise_cfg=None, obs_noise_fn=None):
        self.state = state
        self.cfg = cfg
        self.alpha = cfg.alpha
        self.mc_set = np.atleast_2d(np.asarray(mc_set, dtype=float))
        self.noise_cfg = noise_cfg if noise_cfg is not None else NoiseShapeConfig()
        self.obs_noise_fn = obs_noise_fn
        kzw = k_cross(state.z, self.mc_set, state.hp)
        self.a_w = solve_lower(state.chol_kzz, kzw)          # (M, W)
        self.b_w = solve_lower(state.chol_s, self.a_w)       # (M, W)
        self.sinv_a = solve_lower_t(state.chol_s, self.b_w)  # S^-1 A
        self.a_norm2 = np.sum(self.a_w**2, axis=0)
        self.b_norm2 = np.sum(self.b_w**2, axis=0)
        self.sf2 = state.hp.sigma_f**2

    def baseline(self):
        """Acquisition value of making no observation at all."""
        var = np.clip(self.sf2 - self.a_norm2 + self.b_norm2, 0.0, self.sf2)
        return -2.0 * float(np.mean(np.sinh(self.alpha * np.sqrt(var))))

    def _posterior_sd_after(self, x):
        st = self.state
        sigma_sq, _ = hypothetical_noise_sq(st, x, self.noise_cfg, self.obs_noise_fn)
        kz = k_cross(st.z, x[None, :], st.hp)[:, 0]
        u = solve_lower(st.chol_kzz, kz)
        sd = math.sqrt(sigma_sq)

        v = u / sd
        g = solve_lower(st.chol_s, v)
        sinv_v = solve_lower_t(st.chol_s, g)
        denom = 1.0 + float(v @ sinv_v)

        c1_sq = self.sf2 + st.jitter - float(u @ u)
        grow = self.cfg.grow_inducing and c1_sq > st.jitter
        # quadratic forms against S + v v^T for the cached sample columns
        cross = sinv_v @ self.a_w                                 # (W,)
        quad_p = self.b_norm2 - cross**2 / denom
        if not grow:
            var = self.sf2 - self.a_norm2 + quad_p
            return np.sqrt(np.clip(var, 0.0, self.sf2))

        c1 = math.sqrt(c1_sq)
        kx = k_cross(x[None, :], st.ds.x, st.hp)[0]
        sqrt_dinv = 1.0 / np.sqrt(st.ds.sigma_tot_sq)
        v2 = (kx * sqrt_dinv - u @ st.r_proj) / c1
        c2 = c1 / sd
        s12 = st.r_proj @ v2 + c2 * v
        s22 = 1.0 + c2**2 + float(v2 @ v2)

        sinv_s12 = solve_lower_t(st.chol_s, solve_lower(st.chol_s, s12))
        p_inv_s12 = sinv_s12 - sinv_v * (float(v @ sinv_s12) / denom)
        gamma_sq = s22 - float(s12 @ p_inv_s12)

        kxw = k_cross(x[None, :], self.mc_set, st.hp)[0]
        t_w = (kxw - u @ self.a_w) / c1
        cross_t = t_w - p_inv_s12 @ self.a_w
        quad = quad_p + cross_t**2 / max(gamma_sq, 1e-300)
        var = self.sf2 - (self.a_norm2 + t_w**2) + quad
        return np.sqrt(np.clip(var, 0.0, self.sf2))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            sd = self._posterior_sd_after(x)
            return -2.0 * float(np.mean(np.sinh(self.alpha * sd)))
        return np.array([self(row) for row in x])


def _search_box(cfg, state):
    if cfg.search_lo is None or cfg.search_hi is None:
        x = state.ds.x
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        span = np.maximum(hi - lo, 1e-3)
        return lo - span, hi + span
    return np.asarray(cfg.search_lo, float), np.asarray(cfg.search_hi, float)


def propose(state, q, cfg, n_points, rng, noise_cfg=None, obs_noise_fn=None):
    """Sequentially pick ``n_points`` acquisition maximizers.

    Between picks the surrogate absorbs a hypothetical observation at the
    chosen point (predicted mean, hypothetical noise) via a rank-1 update,
    which spreads a batch of picks apart. Candidate optimization restarts
    from posterior samples and the best observed point; a failed restart is
    skipped, and only all restarts failing is an error.
    """
    noise_cfg = noise_cfg if noise_cfg is not None else NoiseShapeConfig()
    kind = resolve_kind(cfg, state.ds)
    lo, hi = _search_box(cfg, state)
    span = hi - lo
    mc_set = sample(q, cfg.n_imiqr_mc, rng) if kind == "a2" else None
    picks = []
    for _ in range(n_points):
        if kind == "a1":
            def acq(xs, _st=state):
                return log_a1(_st, q, xs)
        else:
            acq = A2Evaluator(state, cfg, mc_set, noise_cfg, obs_noise_fn)

        starts = [state.ds.x[int(np.argmax(state.ds.y))]]
        starts.extend(sample(q, max(cfg.n_starts - 1, 1), rng))
        best_x, best_f = None, -np.inf
        for x0 in starts[: cfg.n_starts]:
            x0 = np.clip(x0, lo, hi)
            try:
                res = cmaes_maximize(
                    acq,
                    x0,
                    sigma0=0.15 * float(np.max(span)),
                    lo=lo,
                    hi=hi,
                    rng=rng,
                    max_evals=cfg.es_max_evals,
                    popsize=cfg.es_popsize,
                )
            except (np.linalg.LinAlgError, FloatingPointError):
                continue
            if res.f_best > best_f:
                best_f, best_x = res.f_best, res.x_best
        if best_x is None:
            raise RuntimeError("all acquisition optimizer restarts failed")
        picks.append(best_x)
        sigma_sq, y_hyp = hypothetical_noise_sq(
            state, best_x, noise_cfg, obs_noise_fn
        )
        state = rank1_add_point_with_inducing(state, best_x, y_hyp, sigma_sq)
    return np.array(picks)
