"""Evaluation datasets: ingestion, trimming, and noise shaping.

A dataset is an immutable snapshot of log-density evaluations (x, y) with a
per-point observation variance and a per-point *total* variance, which adds
artificial shaping variance so that low-density points carry less weight in
the sparse surrogate.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NOISELESS_VARIANCE_FLOOR",
    "Evaluation",
    "Dataset",
    "NoiseShapeConfig",
    "TrimConfig",
    "IngestError",
    "shape_noise",
    "trim",
    "apply_noise_shaping",
    "ingest",
]

# Observation variance used for exact targets (small value for numerical
# stability of the Gaussian observation model).
NOISELESS_VARIANCE_FLOOR = 1e-5


class IngestError(ValueError):
    """Raised when an initial-evaluation file cannot be parsed."""


@dataclass(frozen=True)
class Evaluation:
    """A single log-density evaluation."""

    x: np.ndarray
    y: float
    sigma_obs_sq: float = NOISELESS_VARIANCE_FLOOR

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x", x)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("x must be a finite vector")
        if not math.isfinite(self.y):
            raise ValueError("y must be finite")
        if not (self.sigma_obs_sq >= 0.0 and math.isfinite(self.sigma_obs_sq)):
            raise ValueError("sigma_obs_sq must be finite and >= 0")


@dataclass(frozen=True)
class NoiseShapeConfig:
    """Parameters of the shaping-variance function.

    ``theta_threshold`` defaults to 10 * D and is resolved against the
    dataset dimension when left as None.
    """

    sigma_min_sq: float = 1e-3
    sigma_med_sq: float = 1.0
    lambda_slope: float = 0.05
    theta_threshold: float | None = None
    enabled: bool = True

    def __post_init__(self):
        if not (self.sigma_min_sq > 0 and self.sigma_med_sq > 0):
            raise ValueError("sigma_min_sq and sigma_med_sq must be positive")
        if self.sigma_min_sq > self.sigma_med_sq:
            raise ValueError("sigma_min_sq must not exceed sigma_med_sq")
        if not self.lambda_slope > 0:
            raise ValueError("lambda_slope must be positive")
        if self.theta_threshold is not None and not self.theta_threshold > 0:
            raise ValueError("theta_threshold must be positive")

    def theta_for_dim(self, dim):
        if self.theta_threshold is not None:
            return self.theta_threshold
        return 10.0 * dim


@dataclass(frozen=True)
class TrimConfig:
    """Parameters of the low-density trimming rule.

    ``eta_trim`` defaults to 20 * D and is resolved against the dataset
    dimension when left as None.
    """

    beta: float = 1.96
    eta_trim: float | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.eta_trim is not None and not self.eta_trim > 0:
            raise ValueError("eta_trim must be positive")

    def eta_for_dim(self, dim):
        if self.eta_trim is not None:
            return self.eta_trim
        return 20.0 * dim


def shape_noise(delta_y, cfg, dim=None):
    """Shaping variance added to an observation at log-density gap ``delta_y``.

    Interpolates geometrically between ``sigma_min_sq`` (at gap 0) and
    ``sigma_med_sq`` (at the threshold), then grows quadratically in the
    variance (linearly in standard deviation) beyond the threshold.
    Accepts scalars or arrays; ``dim`` is required when the config leaves
    the threshold as the 10 * D default.
    """
    delta = np.asarray(delta_y, dtype=float)
    if not np.all(np.isfinite(delta)) or np.any(delta < 0):
        raise ValueError("delta_y must be finite and >= 0")
    if cfg.theta_threshold is None and dim is None:
        raise ValueError("dim required when theta_threshold is not set")
    if not cfg.enabled:
        return np.zeros_like(delta) if delta.ndim else 0.0
    theta = cfg.theta_for_dim(dim)
    rho = np.minimum(1.0, delta / theta)
    out = np.exp(
        (1.0 - rho) * math.log(cfg.sigma_min_sq) + rho * math.log(cfg.sigma_med_sq)
    )
    excess = delta - theta
    out = out + np.where(excess >= 0.0, cfg.lambda_slope**2 * excess**2, 0.0)
    return float(out) if out.ndim == 0 else out


def _merge_duplicates(x, y, s2):
    """Merge rows with identical x by precision-weighted averaging of y."""
    n = x.shape[0]
    order = np.lexsort(x.T[::-1])
    keep_idx = []
    groups = {}
    i = 0
    while i < n:
        j = i + 1
        while j < n and np.array_equal(x[order[i]], x[order[j]]):
            j += 1
        rows = sorted(order[i:j])
        keep_idx.append(rows[0])
        groups[rows[0]] = rows
        i = j
    keep_idx.sort()
    xm = x[keep_idx]
    ym = np.empty(len(keep_idx))
    s2m = np.empty(len(keep_idx))
    for k, first in enumerate(keep_idx):
        rows = groups[first]
        if len(rows) == 1:
            ym[k] = y[first]
            s2m[k] = s2[first]
            continue
        ys = y[rows]
        vs = s2[rows]
        exact = vs <= 0.0
        if np.any(exact):
            ym[k] = float(np.mean(ys[exact]))
            s2m[k] = 0.0
        else:
            w = 1.0 / vs
            ym[k] = float(np.sum(w * ys) / np.sum(w))
            s2m[k] = float(1.0 / np.sum(w))
    return xm, ym, s2m


@dataclass(frozen=True)
class Dataset:
    """Immutable set of evaluations with per-point total observation variance.

    ``sigma_tot_sq`` equals ``sigma_obs_sq`` plus shaping variance after
    :func:`apply_noise_shaping`; until then the two coincide.
    """

    x: np.ndarray
    y: np.ndarray
    sigma_obs_sq: np.ndarray
    sigma_tot_sq: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        s2 = np.asarray(self.sigma_obs_sq, dtype=float)
        if y.size == 0:
            raise ValueError("empty dataset")
        if x.shape[0] != y.size or y.size != s2.size:
            raise ValueError("x, y, sigma_obs_sq must have matching lengths")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("x and y must be finite")
        if not (np.all(np.isfinite(s2)) and np.all(s2 >= 0.0)):
            raise ValueError("sigma_obs_sq must be finite and >= 0")
        tot = self.sigma_tot_sq
        tot = s2.copy() if tot is None else np.asarray(tot, dtype=float)
        if np.any(tot < s2 - 1e-300):
            raise ValueError("sigma_tot_sq must be >= sigma_obs_sq")
        for arr in (x, y, s2, tot):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma_obs_sq", s2)
        object.__setattr__(self, "sigma_tot_sq", tot)

    @classmethod
    def from_evaluations(cls, evals, merge=True):
        if not evals:
            raise ValueError("empty evaluation list")
        dims = {e.x.size for e in evals}
        if len(dims) != 1:
            raise ValueError(f"inconsistent dimensions: {sorted(dims)}")
        x = np.stack([e.x for e in evals])
        y = np.array([e.y for e in evals])
        s2 = np.array([e.sigma_obs_sq for e in evals])
        if merge:
            x, y, s2 = _merge_duplicates(x, y, s2)
        return cls(x, y, s2)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def y_max(self):
        return float(np.max(self.y))

    @property
    def evals(self):
        return [
            Evaluation(self.x[i], float(self.y[i]), float(self.sigma_obs_sq[i]))
            for i in range(self.n)
        ]

    def has_duplicates(self):
        return np.unique(self.x, axis=0).shape[0] != self.n

    def take(self, idx):
        """Subset snapshot at the given row indices (order preserved)."""
        idx = np.asarray(idx)
        return Dataset(
            self.x[idx], self.y[idx], self.sigma_obs_sq[idx], self.sigma_tot_sq[idx]
        )

    def extend(self, x_new, y_new, sigma_obs_sq_new):
        """New dataset with extra evaluations; duplicates in x are merged.

        The total variance of the result is reset to the observation
        variance; re-apply noise shaping afterwards (the gaps Delta y are
        relative to the possibly new maximum).
        """
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        x = np.vstack([self.x, x_new])
        y = np.concatenate([self.y, np.atleast_1d(y_new)])
        s2 = np.concatenate([self.sigma_obs_sq, np.atleast_1d(sigma_obs_sq_new)])
        xm, ym, s2m = _merge_duplicates(x, y, s2)
        return Dataset(xm, ym, s2m)


def trim(ds, cfg=TrimConfig()):
    """Remove points whose log-density is extremely low relative to the max.

    A point is dropped when the highest lower confidence bound exceeds the
    point's upper confidence bound by more than the trim threshold. The
    point achieving the highest lower bound always survives, and the order
    of survivors is preserved.
    """
    if ds.n == 0:
        raise ValueError("empty dataset")
    eta = cfg.eta_for_dim(ds.dim)
    sigma = np.sqrt(ds.sigma_obs_sq)
    lcb = ds.y - cfg.beta * sigma
    ucb = ds.y + cfg.beta * sigma
    keep = (np.max(lcb) - ucb) <= eta
    return Dataset(
        ds.x[keep], ds.y[keep], ds.sigma_obs_sq[keep], ds.sigma_tot_sq[keep]
    )


def apply_noise_shaping(ds, cfg=NoiseShapeConfig()):
    """Recompute total variances as observation variance plus shaping variance.

    Leaves x, y, and the observation variances untouched.
    """
    delta = ds.y_max - ds.y
    extra = shape_noise(delta, cfg, dim=ds.dim)
    return Dataset(ds.x, ds.y, ds.sigma_obs_sq, ds.sigma_obs_sq + extra)


def _parse_float(token, row_idx, what):
    try:
        value = float(token)
    except (TypeError, ValueError):
        raise IngestError(f"row {row_idx}: {what} is not a number: {token!r}")
    if not math.isfinite(value):
        raise IngestError(f"row {row_idx}: non-finite {what}: {token!r}")
    return value


def _ingest_csv(stream):
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("empty file")
    header = [h.strip() for h in header]
    if "y" not in header:
        raise IngestError("header must contain a 'y' column")
    y_pos = header.index("y")
    dim = y_pos
    expected = [f"x{i + 1}" for i in range(dim)]
    if header[:dim] != expected:
        raise IngestError(f"header must start with {expected} then 'y'")
    has_sigma = len(header) > y_pos + 1 and header[y_pos + 1] == "sigma_obs"
    evals = []
    for row_idx, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < dim + 1:
            raise IngestError(f"row {row_idx}: expected >= {dim + 1} fields")
        x = [_parse_float(row[d], row_idx, f"x{d + 1}") for d in range(dim)]
        y = _parse_float(row[dim], row_idx, "y")
        if has_sigma and len(row) > dim + 1 and row[dim + 1].strip():
            sd = _parse_float(row[dim + 1], row_idx, "sigma_obs")
            if sd < 0:
                raise IngestError(f"row {row_idx}: negative sigma_obs")
            s2 = sd * sd
        else:
            s2 = NOISELESS_VARIANCE_FLOOR
        evals.append(Evaluation(np.array(x), y, s2))
    if not evals:
        raise IngestError("no data rows")
    return evals


def _ingest_jsonl(stream):
    evals = []
    dim = None
    for row_idx, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"row {row_idx}: invalid JSON ({exc.msg})")
        if "x" not in rec or "y" not in rec:
            raise IngestError(f"row {row_idx}: missing 'x' or 'y'")
        x = [_parse_float(v, row_idx, "x entry") for v in rec["x"]]
        if dim is None:
            dim = len(x)
        elif len(x) != dim:
            raise IngestError(
                f"row {row_idx}: dimension {len(x)} != expected {dim}"
            )
        y = _parse_float(rec["y"], row_idx, "y")
        if "sigma_obs" in rec and rec["sigma_obs"] is not None:
            sd = _parse_float(rec["sigma_obs"], row_idx, "sigma_obs")
            if sd < 0:
                raise IngestError(f"row {row_idx}: negative sigma_obs")
            s2 = sd * sd
        else:
            s2 = NOISELESS_VARIANCE_FLOOR
        evals.append(Evaluation(np.array(x), y, s2))
    if not evals:
        raise IngestError("no data rows")
    return evals


def ingest(source, fmt=None):
    """Read an initial-evaluation file (CSV or line-delimited JSON).

    ``source`` may be a path or a text stream. The format is inferred from
    the file extension unless given ('csv' or 'jsonl'). Exact duplicates in
    x are merged by precision-weighted averaging. Missing noise columns
    default to the noiseless floor.
    """
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        if fmt is None:
            fmt = "jsonl" if path.endswith((".jsonl", ".ndjson", ".json")) else "csv"
        with open(path, "r", encoding="utf-8", newline="") as f:
            return ingest(f, fmt=fmt)
    if fmt is None:
        raise ValueError("fmt required when ingesting from a stream")
    if fmt == "csv":
        evals = _ingest_csv(source)
    elif fmt == "jsonl":
        evals = _ingest_jsonl(source)
    else:
        raise ValueError(f"unknown format: {fmt!r}")
    try:
        return Dataset.from_evaluations(evals)
    except ValueError as exc:
        raise IngestError(str(exc))
