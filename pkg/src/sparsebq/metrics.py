"""Sample-based posterior quality metrics.

All three metrics compare an approximate posterior against a reference:
the mean marginal total variation (histogram overlap per dimension), the
symmetrized KL divergence between moment-matched Gaussians, and the
absolute log-marginal-likelihood error.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["MetricReport", "mmtv", "gskl", "delta_lml", "compute_report"]


@dataclass(frozen=True)
class MetricReport:
    mmtv: float
    gskl: float
    delta_lml: float | None
    n_samples_p: int
    n_samples_q: int
    covariance_regularized: bool = False

    def to_dict(self):
        return {
            "mmtv": self.mmtv,
            "gskl": self.gskl,
            "delta_lml": self.delta_lml,
            "n_samples_p": self.n_samples_p,
            "n_samples_q": self.n_samples_q,
            "covariance_regularized": self.covariance_regularized,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        rows = [
            ("MMTV", f"{self.mmtv:.4f}"),
            ("gsKL", f"{self.gskl:.6g}"),
            (
                "dLML",
                "n/a" if self.delta_lml is None else f"{self.delta_lml:.6g}",
            ),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def _fd_bins(values):
    """Freedman-Diaconis bin count over a 1D sample (at least 8 bins)."""
    q75, q25 = np.percentile(values, [75, 25])
    iqr = q75 - q25
    if iqr <= 0:
        return 64
    width = 2.0 * iqr / len(values) ** (1.0 / 3.0)
    span = values.max() - values.min()
    if width <= 0 or span <= 0:
        return 64
    return int(np.clip(math.ceil(span / width), 8, 2048))


def mmtv(samples_p, samples_q):
    """Mean marginal total variation in [0, 1], from histogram marginals.

    Per dimension, both samples are binned on a common grid over the union
    range with Freedman-Diaconis widths; the integral of the absolute
    density difference is half the L1 distance of the bin masses.
    """
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    d = p.shape[1]
    total = 0.0
    for j in range(d):
        both = np.concatenate([p[:, j], q[:, j]])
        bins = np.linspace(both.min(), both.max(), _fd_bins(both) + 1)
        mass_p, _ = np.histogram(p[:, j], bins=bins)
        mass_q, _ = np.histogram(q[:, j], bins=bins)
        total += 0.5 * float(
            np.abs(mass_p / len(p) - mass_q / len(q)).sum()
        )
    return total / d


def _gauss_kl(mean0, cov0, mean1, cov1):
    d = mean0.size
    chol1 = np.linalg.cholesky(cov1)
    solve = np.linalg.solve
    trace = float(np.trace(solve(cov1, cov0)))
    diff = mean1 - mean0
    quad = float(diff @ solve(cov1, diff))
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(chol1)))
        - np.sum(np.log(np.diag(np.linalg.cholesky(cov0))))
    )
    return 0.5 * (trace + quad - d + logdet)


def gskl(samples_p, samples_q):
    """Symmetrized KL between Gaussians moment-matched to each sample set."""
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if min(p.shape[0], q.shape[0]) <= p.shape[1] + 1:
        raise ValueError("not enough samples for a nonsingular covariance")
    value, _ = _gskl_with_flag(p, q)
    return value


def _gskl_with_flag(p, q):
    mean_p, mean_q = p.mean(axis=0), q.mean(axis=0)
    cov_p = np.cov(p, rowvar=False).reshape(p.shape[1], p.shape[1])
    cov_q = np.cov(q, rowvar=False).reshape(q.shape[1], q.shape[1])
    regularized = False
    for cov in (cov_p, cov_q):
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() <= 1e-12 * max(eigs.max(), 1e-300):
            cov += 1e-10 * np.eye(cov.shape[0])
            regularized = True
    value = 0.5 * (
        _gauss_kl(mean_p, cov_p, mean_q, cov_q)
        + _gauss_kl(mean_q, cov_q, mean_p, cov_p)
    )
    return max(value, 0.0), regularized


def delta_lml(elbo_mean, true_lml):
    """Absolute log-marginal-likelihood error."""
    return abs(float(elbo_mean) - float(true_lml))


def compute_report(samples_p, samples_q, elbo_mean=None, true_lml=None):
    """Bundle all metrics; dLML only when both log-normalizers are given."""
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    value, regularized = _gskl_with_flag(p, q)
    dl = None
    if elbo_mean is not None and true_lml is not None:
        dl = delta_lml(elbo_mean, true_lml)
    return MetricReport(
        mmtv=mmtv(p, q),
        gskl=value,
        delta_lml=dl,
        n_samples_p=p.shape[0],
        n_samples_q=q.shape[0],
        covariance_regularized=regularized,
    )
