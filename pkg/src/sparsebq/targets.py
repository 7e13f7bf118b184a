"""Benchmark targets, the noisy-evaluation wrapper, and initial-set generators.

Every generator records *all* log-density evaluations it makes (including
rejected slice-sampling probes and every optimizer population member), since
the whole point of post-process inference is to recycle them.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .cmaes import cmaes_maximize
from .dataset import NOISELESS_VARIANCE_FLOOR, Dataset, Evaluation

__all__ = [
    "EvaluationError",
    "TargetHandle",
    "gaussian_target",
    "rosenbrock_gaussian_6d",
    "rosenbrock_gaussian_target",
    "two_moons_2d",
    "two_moons_target",
    "noisy_wrap",
    "slice_sampler_init",
    "optimizer_init",
    "builtin_target",
]

DEFAULT_TWO_MOONS_KAPPA = 8.0


class EvaluationError(RuntimeError):
    """A single target evaluation failed; the caller may skip the point."""


class _BudgetExhausted(Exception):
    pass


@dataclass
class TargetHandle:
    """A black-box log-density with metadata the engine needs.

    ``fn`` maps a point to either y or (y, sigma_obs_sd). ``exact`` declares
    noiseless evaluations; ``true_lml`` and ``reference_sampler`` carry
    optional ground truth for benchmarking.
    """

    dim: int
    fn: object
    exact: bool = True
    name: str = "target"
    plausible_lo: np.ndarray = None
    plausible_hi: np.ndarray = None
    sigma_obs_sd: float = 0.0
    true_lml: float | None = None
    reference_sampler: object = None
    concurrency_safe: bool = True
    _rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.plausible_lo is None:
            self.plausible_lo = np.full(self.dim, -5.0)
        if self.plausible_hi is None:
            self.plausible_hi = np.full(self.dim, 5.0)
        self.plausible_lo = np.asarray(self.plausible_lo, dtype=float)
        self.plausible_hi = np.asarray(self.plausible_hi, dtype=float)

    def evaluate(self, x):
        """(y, sigma_obs_sd) at x; raises EvaluationError on failure."""
        out = self.fn(np.asarray(x, dtype=float))
        if isinstance(out, tuple):
            y, sd = out
        else:
            y, sd = out, math.sqrt(NOISELESS_VARIANCE_FLOOR) if self.exact else self.sigma_obs_sd
        y = float(y)
        if math.isnan(y):
            raise EvaluationError(f"target returned NaN at {x}")
        return y, float(sd)

    def obs_variance(self, x):
        """Declared observation variance at x (noiseless floor when exact)."""
        if self.exact:
            return NOISELESS_VARIANCE_FLOOR
        return self.sigma_obs_sd**2

    def rng_state(self):
        return None if self._rng is None else self._rng.bit_generator.state

    def set_rng_state(self, state):
        if state is not None:
            if self._rng is None:
                self._rng = np.random.default_rng(0)
            self._rng.bit_generator.state = state


def _gaussian_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * float(z @ z) - np.sum(np.log(sd)) - 0.5 * x.size * math.log(2 * math.pi)


def gaussian_target(dim, mean=None, sd=None):
    """Diagonal multivariate normal; exactly normalized (log Z = 0)."""
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
    sd = np.ones(dim) if sd is None else np.asarray(sd, dtype=float)

    def fn(x):
        return _gaussian_logpdf(np.asarray(x, dtype=float), mean, sd)

    def ref(n, seed=0):
        rng = np.random.default_rng(seed)
        return mean + sd * rng.standard_normal((n, dim))

    return TargetHandle(
        dim=dim,
        fn=fn,
        name=f"gaussian_{dim}d",
        plausible_lo=mean - 4 * sd,
        plausible_hi=mean + 4 * sd,
        true_lml=0.0,
        reference_sampler=ref,
    )


def _rosen_term(a, b):
    return -((a**2 - b) ** 2) - (b - 1.0) ** 2 / 100.0


def rosenbrock_gaussian_6d(x):
    """Two banana-shaped factors, a 2D normal factor, and a broad normal prior."""
    x = np.asarray(x, dtype=float)
    quad = -0.5 * (x[4] ** 2 + x[5] ** 2) - math.log(2 * math.pi)
    prior = -0.5 * float(x @ x) / 9.0 - 3.0 * math.log(2 * math.pi * 9.0)
    return float(_rosen_term(x[0], x[1]) + _rosen_term(x[2], x[3]) + quad + prior)


def two_moons_2d(x, kappa=DEFAULT_TWO_MOONS_KAPPA):
    """Bimodal ring-segment density with 2:1 mode masses; -inf at the origin."""
    x = np.asarray(x, dtype=float)
    r = math.hypot(x[0], x[1])
    if r == 0.0:
        return -math.inf
    radial = -0.5 * ((r - 1.0 / math.sqrt(2.0)) / 0.01) ** 2
    c = kappa * x[0] / r
    angular = np.logaddexp(c - math.log(3.0), -c + math.log(2.0 / 3.0))
    return float(radial + angular)


_GRID_CACHE = {}


def _grid_2d(key, logf, lo, hi, steps):
    """Cached 2D grid of log densities with cell centers."""
    if key in _GRID_CACHE:
        return _GRID_CACHE[key]
    xs = np.linspace(lo[0], hi[0], steps[0])
    ys = np.linspace(lo[1], hi[1], steps[1])
    dx = xs[1] - xs[0]
    dy = ys[1] - ys[0]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    logp = logf(pts)
    _GRID_CACHE[key] = (pts, logp, dx, dy)
    return _GRID_CACHE[key]


def _grid_sample(pts, logp, dx, dy, n, rng):
    p = np.exp(logp - logp.max())
    p /= p.sum()
    idx = rng.choice(pts.shape[0], size=n, p=p)
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([dx, dy])
    return pts[idx] + jitter


def _grid_log_normalizer(logp, dx, dy):
    m = logp.max()
    return float(m + math.log(np.sum(np.exp(logp - m))) + math.log(dx * dy))


def _two_moons_grid(kappa):
    def logf(pts):
        r = np.hypot(pts[:, 0], pts[:, 1])
        r = np.maximum(r, 1e-12)
        radial = -0.5 * ((r - 1.0 / math.sqrt(2.0)) / 0.01) ** 2
        c = kappa * pts[:, 0] / r
        return radial + np.logaddexp(c - math.log(3.0), -c + math.log(2.0 / 3.0))

    return _grid_2d(
        ("two_moons", kappa), logf, (-0.85, -0.85), (0.85, 0.85), (851, 851)
    )


def two_moons_target(kappa=DEFAULT_TWO_MOONS_KAPPA):
    pts, logp, dx, dy = _two_moons_grid(kappa)

    def ref(n, seed=0):
        return _grid_sample(pts, logp, dx, dy, n, np.random.default_rng(seed))

    return TargetHandle(
        dim=2,
        fn=lambda x: two_moons_2d(x, kappa),
        name="two_moons",
        plausible_lo=np.full(2, -1.0),
        plausible_hi=np.full(2, 1.0),
        true_lml=_grid_log_normalizer(logp, dx, dy),
        reference_sampler=ref,
    )


def _rosenbrock_block_grid():
    def logf(pts):
        a, b = pts[:, 0], pts[:, 1]
        prior = (
            -0.5 * (a**2 + b**2) / 9.0
            - math.log(2 * math.pi * 9.0)
        )
        return _rosen_term(a, b) + prior

    return _grid_2d(
        ("rosen_block",), logf, (-4.2, -3.8), (4.2, 11.5), (1051, 1913)
    )


def rosenbrock_gaussian_target():
    pts, logp, dx, dy = _rosenbrock_block_grid()
    block_lml = _grid_log_normalizer(logp, dx, dy)
    # the last two coordinates multiply two normal densities: N(0; 0, 10)
    gauss_lml = -0.5 * math.log(2 * math.pi * 10.0)
    post_sd = math.sqrt(0.9)

    def ref(n, seed=0):
        rng = np.random.default_rng(seed)
        b12 = _grid_sample(pts, logp, dx, dy, n, rng)
        b34 = _grid_sample(pts, logp, dx, dy, n, rng)
        tail = post_sd * rng.standard_normal((n, 2))
        return np.column_stack([b12, b34, tail])

    return TargetHandle(
        dim=6,
        fn=rosenbrock_gaussian_6d,
        name="rosenbrock_gaussian_6d",
        plausible_lo=np.full(6, -6.0),
        plausible_hi=np.full(6, 6.0),
        true_lml=2.0 * block_lml + 2.0 * gauss_lml,
        reference_sampler=ref,
    )


def noisy_wrap(target, sigma_obs, seed=0):
    """Additive Gaussian noise on the log density, with the sd reported."""
    if not sigma_obs > 0:
        raise ValueError("sigma_obs must be positive")
    rng = np.random.default_rng(seed)

    def fn(x):
        y = target.fn(np.asarray(x, dtype=float))
        if isinstance(y, tuple):
            y = y[0]
        return y + sigma_obs * rng.standard_normal(), sigma_obs

    handle = TargetHandle(
        dim=target.dim,
        fn=fn,
        exact=False,
        name=f"{target.name}_noisy",
        plausible_lo=target.plausible_lo,
        plausible_hi=target.plausible_hi,
        sigma_obs_sd=sigma_obs,
        true_lml=target.true_lml,
        reference_sampler=target.reference_sampler,
        concurrency_safe=False,
    )
    handle._rng = rng
    return handle


class _Recorder:
    """Wraps a target; records every evaluation and enforces the budget.

    Evaluations with infinitely low density consume budget but are not
    stored: they cannot anchor the surrogate (and trimming would drop them
    anyway).
    """

    def __init__(self, target, budget):
        self.target = target
        self.budget = budget
        self.evals = []
        self.n = 0

    def __call__(self, x):
        if self.n >= self.budget:
            raise _BudgetExhausted
        y, sd = self.target.evaluate(x)
        self.n += 1
        if math.isfinite(y):
            self.evals.append(Evaluation(np.array(x, dtype=float), y, sd**2))
        return y

    def batch(self, xs):
        out = np.empty(xs.shape[0])
        for i, row in enumerate(xs):
            out[i] = self(row)
        return out

    def dataset(self):
        if not self.evals:
            raise ValueError("no evaluations recorded")
        return Dataset.from_evaluations(self.evals)


def slice_sampler_init(target, n_chains, budget, seed=0, width=None):
    """Initial set from coordinate-wise slice sampling with stepping out.

    Every density evaluation along the way (including stepping-out and
    shrinkage probes) is recorded; the total never exceeds the budget.
    """
    if budget < n_chains * 10:
        raise ValueError("budget must be at least 10 evaluations per chain")
    rng = np.random.default_rng(seed)
    recorder = _Recorder(target, budget)
    span = target.plausible_hi - target.plausible_lo
    w = span / 4.0 if width is None else np.full(target.dim, width)
    per_chain = [budget // n_chains] * n_chains
    for i in range(budget - sum(per_chain)):
        per_chain[i] += 1

    for chain, chain_budget in enumerate(per_chain):
        start_count = recorder.n
        limit = start_count + chain_budget
        x = target.plausible_lo + span * rng.uniform(0.2, 0.8, size=target.dim)
        try:
            fx = recorder(x)
            while recorder.n < limit:
                for d in rng.permutation(target.dim):
                    if recorder.n >= limit:
                        break
                    log_y = fx + math.log(rng.uniform())
                    lo_d = x[d] - w[d] * rng.uniform()
                    hi_d = lo_d + w[d]
                    probe = x.copy()
                    for _ in range(8):  # stepping out, bounded
                        probe[d] = lo_d
                        if recorder.n >= limit or recorder(probe) <= log_y:
                            break
                        lo_d -= w[d]
                    for _ in range(8):
                        probe[d] = hi_d
                        if recorder.n >= limit or recorder(probe) <= log_y:
                            break
                        hi_d += w[d]
                    while True:  # shrinkage
                        if recorder.n >= limit:
                            break
                        xd_new = rng.uniform(lo_d, hi_d)
                        probe[d] = xd_new
                        f_new = recorder(probe)
                        if f_new > log_y:
                            x = probe.copy()
                            fx = f_new
                            break
                        if xd_new < x[d]:
                            lo_d = xd_new
                        else:
                            hi_d = xd_new
                        if hi_d - lo_d < 1e-12:
                            break
        except (_BudgetExhausted, EvaluationError):
            continue
    return recorder.dataset()


def optimizer_init(target, n_runs, budget, seed=0):
    """Initial set from repeated derivative-free maximization runs.

    Each run starts at a fresh random point in the plausible box; all
    population evaluations are recorded.
    """
    if budget < n_runs * 20:
        raise ValueError("budget must be at least 20 evaluations per run")
    rng = np.random.default_rng(seed)
    recorder = _Recorder(target, budget)
    lo, hi = target.plausible_lo, target.plausible_hi
    per_run = [budget // n_runs] * n_runs
    for i in range(budget - sum(per_run)):
        per_run[i] += 1
    for run, run_budget in enumerate(per_run):
        run_rng = np.random.default_rng(rng.integers(2**63))
        x0 = lo + (hi - lo) * run_rng.uniform(size=target.dim)
        try:
            cmaes_maximize(
                recorder.batch,
                x0,
                sigma0=0.25 * float(np.max(hi - lo)),
                lo=lo - 0.5 * (hi - lo),
                hi=hi + 0.5 * (hi - lo),
                rng=run_rng,
                max_evals=run_budget,
            )
        except (_BudgetExhausted, EvaluationError):
            continue
    return recorder.dataset()


def builtin_target(name, **params):
    """Look up a built-in target by name (CLI entry point)."""
    if name == "gaussian":
        return gaussian_target(
            int(params.get("dim", 2)),
            params.get("mean"),
            params.get("sd"),
        )
    if name == "rosenbrock_gaussian_6d":
        return rosenbrock_gaussian_target()
    if name == "two_moons":
        return two_moons_target(float(params.get("kappa", DEFAULT_TWO_MOONS_KAPPA)))
    raise ValueError(f"unknown builtin target {name!r}")
