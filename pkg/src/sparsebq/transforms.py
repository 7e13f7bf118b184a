"""Mappings between the model's parameter space and the unbounded inference space.

Bounded coordinates go through a shifted logit, lower-bounded ones through a
shifted log, and unbounded ones through an affine standardization by their
plausible range. The log-Jacobian correction keeps transformed log densities
normalized.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["DimSpec", "ParamSpace", "unbounded_space"]

_KINDS = ("unbounded", "bounded", "lower_bounded")


@dataclass(frozen=True)
class DimSpec:
    """One coordinate: kind, hard bounds, and a plausible range for scaling."""

    kind: str = "unbounded"
    lower: float = -math.inf
    upper: float = math.inf
    plausible_lo: float | None = None
    plausible_hi: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == "bounded":
            if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
                raise ValueError("bounded dims need finite bounds")
            if not self.lower < self.upper:
                raise ValueError("need lower < upper")
        if self.kind == "lower_bounded" and not math.isfinite(self.lower):
            raise ValueError("lower_bounded dims need a finite lower bound")
        p_lo, p_hi = self._plausible()
        if not p_lo < p_hi:
            raise ValueError("plausible range must be nonempty")
        if not (self.lower < p_lo and p_hi < self.upper):
            raise ValueError("plausible range must lie strictly inside the bounds")

    def _plausible(self):
        if self.plausible_lo is not None and self.plausible_hi is not None:
            return self.plausible_lo, self.plausible_hi
        if self.kind == "bounded":
            span = self.upper - self.lower
            return self.lower + 0.1 * span, self.upper - 0.1 * span
        if self.kind == "lower_bounded":
            return self.lower + 0.5, self.lower + 2.0
        return -1.0, 1.0


class ParamSpace:
    """Per-dimension transform bundle with vectorized maps and Jacobians."""

    def __init__(self, dims):
        self.dims = tuple(dims)
        self._centers = []
        self._halfwidths = []
        for d in self.dims:
            p_lo, p_hi = d._plausible()
            if d.kind == "bounded":
                t_lo = self._logit_raw(p_lo, d)
                t_hi = self._logit_raw(p_hi, d)
                self._centers.append(0.5 * (t_lo + t_hi))
                self._halfwidths.append(1.0)
            elif d.kind == "lower_bounded":
                self._centers.append(
                    0.5 * (math.log(p_lo - d.lower) + math.log(p_hi - d.lower))
                )
                self._halfwidths.append(1.0)
            else:
                self._centers.append(0.5 * (p_lo + p_hi))
                self._halfwidths.append(0.5 * (p_hi - p_lo))

    @property
    def dim(self):
        return len(self.dims)

    @staticmethod
    def _logit_raw(x, d):
        return math.log(x - d.lower) - math.log(d.upper - x)

    def to_inference(self, x):
        """Map original coordinates (strictly inside bounds) to inference space."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        out = np.empty_like(xs)
        for j, d in enumerate(self.dims):
            col = xs[:, j]
            if d.kind == "bounded":
                if np.any(col <= d.lower) or np.any(col >= d.upper):
                    raise ValueError(f"dim {j}: value on or outside bounds")
                out[:, j] = (
                    np.log(col - d.lower) - np.log(d.upper - col) - self._centers[j]
                )
            elif d.kind == "lower_bounded":
                if np.any(col <= d.lower):
                    raise ValueError(f"dim {j}: value on or outside bounds")
                out[:, j] = np.log(col - d.lower) - self._centers[j]
            else:
                out[:, j] = (col - self._centers[j]) / self._halfwidths[j]
        return out[0] if single else out

    def from_inference(self, u):
        """Inverse map back to the original coordinates."""
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        us = np.atleast_2d(u)
        out = np.empty_like(us)
        for j, d in enumerate(self.dims):
            col = us[:, j]
            if d.kind == "bounded":
                t = col + self._centers[j]
                s = 1.0 / (1.0 + np.exp(-t))
                out[:, j] = d.lower + (d.upper - d.lower) * s
            elif d.kind == "lower_bounded":
                out[:, j] = d.lower + np.exp(col + self._centers[j])
            else:
                out[:, j] = col * self._halfwidths[j] + self._centers[j]
        return out[0] if single else out

    def log_jacobian(self, u):
        """log |d x_orig / d u|, summed over dimensions.

        A log density transformed to inference space is the original log
        density at from_inference(u) plus this correction.
        """
        u = np.asarray(u, dtype=float)
        single = u.ndim == 1
        us = np.atleast_2d(u)
        total = np.zeros(us.shape[0])
        for j, d in enumerate(self.dims):
            col = us[:, j]
            if d.kind == "bounded":
                t = col + self._centers[j]
                # log of (b-a) * sigmoid(t) * (1 - sigmoid(t))
                total += (
                    math.log(d.upper - d.lower)
                    - t
                    - 2.0 * np.log1p(np.exp(-t))
                )
            elif d.kind == "lower_bounded":
                total += col + self._centers[j]
            else:
                total += math.log(self._halfwidths[j])
        return float(total[0]) if single else total

    def wrap_log_density(self, fn):
        """Original-space log density -> inference-space log density."""

        def wrapped(u):
            return fn(self.from_inference(u)) + self.log_jacobian(u)

        return wrapped

    def to_dict(self):
        return {
            "dims": [
                {
                    "kind": d.kind,
                    "lower": d.lower,
                    "upper": d.upper,
                    "plausible_lo": d._plausible()[0],
                    "plausible_hi": d._plausible()[1],
                }
                for d in self.dims
            ]
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            DimSpec(
                kind=rec["kind"],
                lower=rec.get("lower", -math.inf),
                upper=rec.get("upper", math.inf),
                plausible_lo=rec.get("plausible_lo"),
                plausible_hi=rec.get("plausible_hi"),
            )
            for rec in payload["dims"]
        )


def unbounded_space(dim, plausible_lo=None, plausible_hi=None):
    """All-unbounded space; default plausible range (-1, 1) per dimension."""
    lo = np.full(dim, -1.0) if plausible_lo is None else np.asarray(plausible_lo, float)
    hi = np.full(dim, 1.0) if plausible_hi is None else np.asarray(plausible_hi, float)
    return ParamSpace(
        DimSpec(kind="unbounded", plausible_lo=float(a), plausible_hi=float(b))
        for a, b in zip(lo, hi)
    )
