"""The main inference loop: trim, bootstrap, build up, then actively refine.

Each iteration proposes a batch of points with the acquisition function,
evaluates the target there, refreshes the noise shaping, re-selects the
inducing points under the better of two hyperparameter candidates (exact GP
on a stratified subset vs. the current sparse GP, compared by GP-ELBO),
refits the sparse GP, and updates the mixture posterior warm-started from
the previous iteration.
"""

import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import sgpr, variational
from .acquisition import AcquisitionConfig, propose, resolve_kind
from .dataset import Dataset, NoiseShapeConfig, TrimConfig, apply_noise_shaping, trim
from .exact_gp import train_map
from .inducing import InducingConfig, select_inducing, stratified_subset
from .kernel import KernelHyperparams, default_hyperparams
from .targets import EvaluationError
from .variational import ElboEstimate, FitOptions, MixturePosterior

__all__ = ["LoopConfig", "RunResult", "run", "checkpoint", "resume", "CheckpointError"]

CHECKPOINT_SCHEMA = "sparsebq-checkpoint/1"
FINAL_ELBO_MC = 2**16

# integer tags for deriving per-purpose, per-iteration seeds
_SEED_SUBSET = 1
_SEED_EXACT = 2
_SEED_HYPER = 3
_SEED_FIT = 4
_SEED_ELBO = 5
_SEED_ACQ = 6
_SEED_FINAL = 7


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, malformed, or from another version."""


def _seed(base, tag, iteration=0):
    return int(
        np.random.SeedSequence([int(base), int(tag), int(iteration)]).generate_state(1)[0]
    )


@dataclass(frozen=True)
class LoopConfig:
    """All knobs of the inference loop, with sub-configs for each stage."""

    n_f_budget: int = 200
    n_active_per_iter: int | None = None  # default: 5 exact, 25 noisy
    elbo_stability_tol: float | None = None
    seed: int = 0
    trim: TrimConfig = field(default_factory=TrimConfig)
    noise_shaping: NoiseShapeConfig = field(default_factory=NoiseShapeConfig)
    inducing: InducingConfig = field(default_factory=InducingConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    subset_size: int = 300
    strata: int = 5
    build_kl_tol: float = 0.01
    max_components: int = variational.MAX_COMPONENTS
    n_mc_entropy: int = 100
    fit_iters_build: int = 200
    fit_iters_loop: int = 120
    build_additions_per_iter: int = 3
    hyper_maxiter_init: int = 60
    hyper_maxiter_loop: int = 4
    hyper_restarts_init: int = 2
    search_expand: float = 1.0

    def __post_init__(self):
        if self.n_f_budget < 0:
            raise ValueError("n_f_budget must be >= 0")
        if self.n_active_per_iter is not None and self.n_active_per_iter < 1:
            raise ValueError("n_active_per_iter must be >= 1")

    def resolve_n_active(self, target_exact):
        if self.n_active_per_iter is not None:
            return self.n_active_per_iter
        return 5 if target_exact else 25

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "n_f_budget": self.n_f_budget,
            "n_active_per_iter": self.n_active_per_iter,
            "elbo_stability_tol": self.elbo_stability_tol,
            "seed": self.seed,
            "trim": {"beta": self.trim.beta, "eta_trim": self.trim.eta_trim},
            "noise_shaping": {
                "sigma_min_sq": self.noise_shaping.sigma_min_sq,
                "sigma_med_sq": self.noise_shaping.sigma_med_sq,
                "lambda_slope": self.noise_shaping.lambda_slope,
                "theta_threshold": self.noise_shaping.theta_threshold,
                "enabled": self.noise_shaping.enabled,
            },
            "inducing": {
                "m_min": self.inducing.m_min,
                "m_max_base": self.inducing.m_max_base,
                "m_max_growth": self.inducing.m_max_growth,
                "frac_tol": self.inducing.frac_tol,
            },
            "acquisition": {
                "kind": self.acquisition.kind,
                "p_alpha": self.acquisition.p_alpha,
                "n_imiqr_mc": self.acquisition.n_imiqr_mc,
                "n_starts": self.acquisition.n_starts,
                "search_lo": arr(self.acquisition.search_lo),
                "search_hi": arr(self.acquisition.search_hi),
                "grow_inducing": self.acquisition.grow_inducing,
                "es_max_evals": self.acquisition.es_max_evals,
                "es_popsize": self.acquisition.es_popsize,
            },
            "subset_size": self.subset_size,
            "strata": self.strata,
            "build_kl_tol": self.build_kl_tol,
            "max_components": self.max_components,
            "n_mc_entropy": self.n_mc_entropy,
            "fit_iters_build": self.fit_iters_build,
            "fit_iters_loop": self.fit_iters_loop,
            "build_additions_per_iter": self.build_additions_per_iter,
            "hyper_maxiter_init": self.hyper_maxiter_init,
            "hyper_maxiter_loop": self.hyper_maxiter_loop,
            "hyper_restarts_init": self.hyper_restarts_init,
            "search_expand": self.search_expand,
        }

    @classmethod
    def from_dict(cls, d):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            n_f_budget=d["n_f_budget"],
            n_active_per_iter=d.get("n_active_per_iter"),
            elbo_stability_tol=d.get("elbo_stability_tol"),
            seed=d.get("seed", 0),
            trim=TrimConfig(**d.get("trim", {})),
            noise_shaping=NoiseShapeConfig(**d.get("noise_shaping", {})),
            inducing=InducingConfig(**d.get("inducing", {})),
            acquisition=AcquisitionConfig(
                kind=d["acquisition"].get("kind", "auto"),
                p_alpha=d["acquisition"].get("p_alpha", 0.75),
                n_imiqr_mc=d["acquisition"].get("n_imiqr_mc", 512),
                n_starts=d["acquisition"].get("n_starts", 8),
                search_lo=arr(d["acquisition"].get("search_lo")),
                search_hi=arr(d["acquisition"].get("search_hi")),
                grow_inducing=d["acquisition"].get("grow_inducing", True),
                es_max_evals=d["acquisition"].get("es_max_evals", 150),
                es_popsize=d["acquisition"].get("es_popsize"),
            )
            if "acquisition" in d
            else AcquisitionConfig(),
            subset_size=d.get("subset_size", 300),
            strata=d.get("strata", 5),
            build_kl_tol=d.get("build_kl_tol", 0.01),
            max_components=d.get("max_components", variational.MAX_COMPONENTS),
            n_mc_entropy=d.get("n_mc_entropy", 100),
            fit_iters_build=d.get("fit_iters_build", 200),
            fit_iters_loop=d.get("fit_iters_loop", 120),
            build_additions_per_iter=d.get("build_additions_per_iter", 3),
            hyper_maxiter_init=d.get("hyper_maxiter_init", 60),
            hyper_maxiter_loop=d.get("hyper_maxiter_loop", 4),
            hyper_restarts_init=d.get("hyper_restarts_init", 2),
            search_expand=d.get("search_expand", 1.0),
        )


@dataclass(frozen=True)
class RunResult:
    posterior: MixturePosterior
    elbo: ElboEstimate
    final_state: sgpr.SparseGPState
    evaluation_log: list
    diagnostics: dict


class _LoopState:
    """Everything that evolves across iterations (checkpointable)."""

    def __init__(self):
        self.ds = None
        self.hp = None
        self.hp_exact = None
        self.z_rows = None
        self.q = None
        self.iteration = 0
        self.evals_used = 0
        self.eval_log = []
        self.elbo_trace = []
        self.m_trace = []
        self.timings = []
        self.acq_rng = None
        self.search_lo = None
        self.search_hi = None
        self.stopped_early = False


def _acq_config(cfg, state):
    return replace(
        cfg.acquisition, search_lo=state.search_lo, search_hi=state.search_hi
    )


def _fit_options(cfg, n_iters, seed, lam_scale):
    return FitOptions(
        n_iters=n_iters,
        n_mc_entropy=cfg.n_mc_entropy,
        seed=seed,
        scale_reference=lam_scale,
    )


def _lam_scale(ds):
    from .kernel import hpd_subset

    idx = hpd_subset(ds, 0.8)
    scale = np.std(ds.x[idx], axis=0)
    return np.where(scale > 1e-6, scale, 1.0)


def _initialize(initial, cfg):
    state = _LoopState()
    ds = trim(initial, cfg.trim)
    state.ds = apply_noise_shaping(ds, cfg.noise_shaping)
    lo = state.ds.x.min(axis=0)
    hi = state.ds.x.max(axis=0)
    span = np.maximum(hi - lo, 1e-3)
    state.search_lo = lo - cfg.search_expand * span
    state.search_hi = hi + cfg.search_expand * span
    state.acq_rng = np.random.default_rng(_seed(cfg.seed, _SEED_ACQ))

    subset = stratified_subset(
        state.ds, cfg.subset_size, cfg.strata, _seed(cfg.seed, _SEED_SUBSET)
    )
    subset_ds = state.ds.take(subset)
    hp0 = default_hyperparams(subset_ds)
    state.hp_exact = train_map(
        subset_ds,
        hp0,
        restarts=cfg.hyper_restarts_init,
        maxiter=cfg.hyper_maxiter_init,
        seed=_seed(cfg.seed, _SEED_EXACT),
    )
    z_idx = select_inducing(state.ds, state.hp_exact, cfg.inducing, cfg.n_f_budget)
    state.z_rows = state.ds.x[z_idx]
    state.hp = sgpr.optimize_hyperparams(
        state.ds,
        state.z_rows,
        state.hp_exact,
        restarts=0,
        maxiter=min(cfg.hyper_maxiter_init, 30),
        seed=_seed(cfg.seed, _SEED_HYPER),
    )
    gp = sgpr.fit(state.ds, state.z_rows, state.hp)
    opts = _fit_options(
        cfg, cfg.fit_iters_build, _seed(cfg.seed, _SEED_FIT), _lam_scale(state.ds)
    )
    state.q = variational.build_up(
        gp,
        opts,
        kl_tol=cfg.build_kl_tol,
        max_components=cfg.max_components,
    )
    est = variational.elbo(
        state.q, gp, cfg.n_mc_entropy, _seed(cfg.seed, _SEED_ELBO, 0)
    )
    state.elbo_trace.append(est.mean)
    state.m_trace.append(gp.m)
    return state, gp


def _shrunk_scales(hp, factor=8.0):
    return KernelHyperparams(
        hp.sigma_f, hp.ell / factor, hp.m0, hp.mu_m, hp.omega
    )


def _refit(state, cfg, iteration):
    """Hyperparameter comparison rule, inducing re-selection, sparse refit.

    Candidates: the warm-retrained exact GP on a fresh stratified subset, a
    retrain started from shrunken length scales (fine structure sits in a
    different basin and becomes identifiable as acquisitions densify the
    high-density region), and the previous sparse GP hyperparameters. The
    winner by GP-ELBO on the current inducing set seeds the re-optimization.
    """
    subset = stratified_subset(
        state.ds, cfg.subset_size, cfg.strata, _seed(cfg.seed, _SEED_SUBSET, iteration)
    )
    subset_ds = state.ds.take(subset)
    state.hp_exact = train_map(
        subset_ds,
        state.hp_exact,
        restarts=0,
        maxiter=cfg.hyper_maxiter_loop,
        seed=_seed(cfg.seed, _SEED_EXACT, iteration),
    )
    probe = train_map(
        subset_ds,
        _shrunk_scales(state.hp_exact),
        restarts=0,
        maxiter=2 * cfg.hyper_maxiter_loop,
        seed=_seed(cfg.seed, _SEED_EXACT, iteration) + 1,
    )
    candidates = [state.hp_exact, probe, state.hp]
    scores = []
    for hp in candidates:
        try:
            scores.append(sgpr.gp_elbo(state.ds, state.z_rows, hp))
        except Exception:
            scores.append(-np.inf)
    winner = candidates[int(np.argmax(scores))]
    z_idx = select_inducing(state.ds, winner, cfg.inducing, cfg.n_f_budget)
    state.z_rows = state.ds.x[z_idx]
    state.hp = sgpr.optimize_hyperparams(
        state.ds,
        state.z_rows,
        winner,
        restarts=0,
        maxiter=cfg.hyper_maxiter_loop,
        seed=_seed(cfg.seed, _SEED_HYPER, iteration),
    )
    return sgpr.fit(state.ds, state.z_rows, state.hp)


def _iterate(state, gp, target, cfg):
    """One acquisition-evaluate-refit-update round. Returns the new gp."""
    iteration = state.iteration + 1
    n_active = cfg.resolve_n_active(target.exact)
    n_batch = min(n_active, cfg.n_f_budget - state.evals_used)
    picks = propose(
        gp,
        state.q,
        _acq_config(cfg, state),
        n_batch,
        state.acq_rng,
        noise_cfg=cfg.noise_shaping,
        obs_noise_fn=target.obs_variance,
    )
    new_x, new_y, new_s2 = [], [], []
    for x_star in picks:
        state.evals_used += 1
        try:
            y_star, sd_star = target.evaluate(x_star)
        except EvaluationError as exc:
            warnings.warn(
                f"iteration {iteration}: evaluation failed at {x_star}: {exc}",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        if not math.isfinite(y_star):
            warnings.warn(
                f"iteration {iteration}: non-finite log density at {x_star}; skipped",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        new_x.append(x_star)
        new_y.append(y_star)
        new_s2.append(sd_star**2)
        state.eval_log.append(
            {
                "iteration": iteration,
                "x": [float(v) for v in x_star],
                "y": y_star,
                "sigma_obs": sd_star,
            }
        )
    if new_x:
        state.ds = apply_noise_shaping(
            state.ds.extend(np.array(new_x), np.array(new_y), np.array(new_s2)),
            cfg.noise_shaping,
        )
    gp = _refit(state, cfg, iteration)
    opts = _fit_options(
        cfg,
        cfg.fit_iters_loop,
        _seed(cfg.seed, _SEED_FIT, iteration),
        _lam_scale(state.ds),
    )
    q = variational.fit(state.q, gp, opts)
    q = variational.build_up(
        gp,
        opts,
        kl_tol=cfg.build_kl_tol,
        max_components=cfg.max_components,
        q0=q,
        max_additions=cfg.build_additions_per_iter,
        max_reseeds=1,
    )
    state.q = variational.rebalance_mixture(q, gp, opts)
    est = variational.elbo(
        state.q, gp, cfg.n_mc_entropy, _seed(cfg.seed, _SEED_ELBO, iteration)
    )
    state.elbo_trace.append(est.mean)
    state.m_trace.append(gp.m)
    state.iteration = iteration
    return gp


def _should_stop_early(state, cfg):
    tol = cfg.elbo_stability_tol
    if tol is None or len(state.elbo_trace) < 4:
        return False
    last = state.elbo_trace[-4:]
    return all(abs(last[i + 1] - last[i]) < tol for i in range(3))


def _finalize(state, gp, cfg):
    est = variational.elbo(
        state.q, gp, FINAL_ELBO_MC, _seed(cfg.seed, _SEED_FINAL)
    )
    diagnostics = {
        "elbo_trace": list(state.elbo_trace),
        "m_trace": list(state.m_trace),
        "iteration_seconds": list(state.timings),
        "n_evaluations": state.evals_used,
        "n_training_points": state.ds.n,
        "stopped_early": state.stopped_early,
    }
    return RunResult(
        posterior=state.q,
        elbo=est,
        final_state=gp,
        evaluation_log=list(state.eval_log),
        diagnostics=diagnostics,
    )


def run(initial, target, cfg=LoopConfig()):
    """Full post-process inference on a pre-existing evaluation set.

    With a zero budget this is a pure post-process fit (no target calls).
    Failed target evaluations are skipped with a warning and still consume
    budget. Equivalent to driving :class:`_ResumableRun` to completion.
    """
    return _ResumableRun(initial, target, cfg).run_to_completion()


def _state_to_dict(state, cfg):
    return {
        "schema": CHECKPOINT_SCHEMA,
        "config": cfg.to_dict(),
        "dataset": {
            "x": state.ds.x.tolist(),
            "y": state.ds.y.tolist(),
            "sigma_obs_sq": state.ds.sigma_obs_sq.tolist(),
            "sigma_tot_sq": state.ds.sigma_tot_sq.tolist(),
        },
        "hp": state.hp.to_vector().tolist(),
        "hp_exact": state.hp_exact.to_vector().tolist(),
        "z_rows": state.z_rows.tolist(),
        "posterior": state.q.to_dict(),
        "iteration": state.iteration,
        "evals_used": state.evals_used,
        "eval_log": state.eval_log,
        "elbo_trace": state.elbo_trace,
        "m_trace": state.m_trace,
        "timings": state.timings,
        "acq_rng_state": state.acq_rng.bit_generator.state,
        "search_lo": state.search_lo.tolist(),
        "search_hi": state.search_hi.tolist(),
        "stopped_early": state.stopped_early,
        "target_rng_state": None,
    }


def _state_from_dict(payload):
    cfg = LoopConfig.from_dict(payload["config"])
    state = _LoopState()
    d = payload["dataset"]
    state.ds = Dataset(
        np.array(d["x"], dtype=float),
        np.array(d["y"], dtype=float),
        np.array(d["sigma_obs_sq"], dtype=float),
        np.array(d["sigma_tot_sq"], dtype=float),
    )
    dim = state.ds.dim
    state.hp = KernelHyperparams.from_vector(np.array(payload["hp"]), dim)
    state.hp_exact = KernelHyperparams.from_vector(np.array(payload["hp_exact"]), dim)
    state.z_rows = np.array(payload["z_rows"], dtype=float)
    state.q = MixturePosterior.from_dict(payload["posterior"])
    state.iteration = payload["iteration"]
    state.evals_used = payload["evals_used"]
    state.eval_log = payload["eval_log"]
    state.elbo_trace = payload["elbo_trace"]
    state.m_trace = payload["m_trace"]
    state.timings = payload["timings"]
    state.acq_rng = np.random.default_rng(0)
    state.acq_rng.bit_generator.state = payload["acq_rng_state"]
    state.search_lo = np.array(payload["search_lo"], dtype=float)
    state.search_hi = np.array(payload["search_hi"], dtype=float)
    state.stopped_early = payload["stopped_early"]
    return state, cfg


class _ResumableRun:
    """Driver that owns the loop state and can checkpoint at any iteration."""

    def __init__(self, initial=None, target=None, cfg=None, _payload=None):
        self.target = target
        if _payload is not None:
            self.state, self.cfg = _state_from_dict(_payload)
            if target is not None and _payload.get("target_rng_state") is not None:
                target.set_rng_state(_payload["target_rng_state"])
            self.gp = sgpr.fit(self.state.ds, self.state.z_rows, self.state.hp)
        else:
            self.cfg = cfg if cfg is not None else LoopConfig()
            self.state, self.gp = _initialize(initial, self.cfg)

    @property
    def done(self):
        return (
            self.state.evals_used >= self.cfg.n_f_budget or self.state.stopped_early
        )

    def step(self):
        if self.done:
            return False
        t0 = time.monotonic()
        self.gp = _iterate(self.state, self.gp, self.target, self.cfg)
        self.state.timings.append(time.monotonic() - t0)
        if _should_stop_early(self.state, self.cfg):
            self.state.stopped_early = True
        return True

    def run_to_completion(self):
        while self.step():
            pass
        return self.result()

    def result(self):
        return _finalize(self.state, self.gp, self.cfg)


def checkpoint(driver, path):
    """Serialize the full loop state (dataset, models, RNG) to a JSON file."""
    payload = _state_to_dict(driver.state, driver.cfg)
    if driver.target is not None:
        payload["target_rng_state"] = driver.target.rng_state()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def resume(path, target):
    """Reload a checkpoint and return a driver that continues the run."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"checkpoint schema {payload.get('schema')!r} != {CHECKPOINT_SCHEMA!r}"
        )
    return _ResumableRun(target=target, _payload=payload)
