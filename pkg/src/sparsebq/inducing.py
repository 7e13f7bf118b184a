"""Inducing-point selection and the stratified bootstrap subset.

Inducing points are chosen from the training inputs by weighted greedy
variance selection: each step adds the point with the largest residual
Nystrom variance scaled by its observation precision, until the fractional
trace error drops below tolerance (subject to hard bounds on the count).
"""

import math
from dataclasses import dataclass

import numpy as np

from .kernel import k_cross

__all__ = ["InducingConfig", "select_inducing", "greedy_trace_errors", "stratified_subset"]


@dataclass(frozen=True)
class InducingConfig:
    m_min: int = 200
    m_max_base: int = 300
    m_max_growth: float = 2.0
    frac_tol: float = 1e-5

    def __post_init__(self):
        if self.m_min < 1 or self.m_max_base < self.m_min:
            raise ValueError("need 1 <= m_min <= m_max_base")
        if not self.frac_tol > 0:
            raise ValueError("frac_tol must be positive")

    def m_max(self, n_extra=0):
        return int(self.m_max_base + self.m_max_growth * math.sqrt(max(n_extra, 0)))


def _greedy_select(ds, hp, m_min, m_max, frac_tol, collect_errors=False):
    n = ds.n
    precision = 1.0 / ds.sigma_tot_sq
    var = np.full(n, hp.sigma_f**2)
    denom = float(hp.sigma_f**2 * np.sum(precision))
    proj = np.empty((min(m_max, n), n))
    chosen = []
    errors = []
    tiny = 1e-12 * hp.sigma_f**2
    while len(chosen) < min(m_max, n):
        frac = float(var @ precision) / denom
        if collect_errors:
            errors.append(frac)
        if len(chosen) >= min(m_min, n) and frac < frac_tol:
            break
        score = var * precision
        j = int(np.argmax(score))
        if var[j] <= tiny:
            # Remaining points are numerically explained; only pad out to the
            # minimum count, by original order. Padded points contribute a
            # zero projection row so the factors stay consistent.
            if len(chosen) >= min(m_min, n):
                break
            chosen_set = set(chosen)
            j = next(i for i in range(n) if i not in chosen_set)
            proj[len(chosen)] = 0.0
            var[j] = 0.0
            chosen.append(j)
            continue
        m = len(chosen)
        k_col = k_cross(ds.x, ds.x[j][None, :], hp)[:, 0]
        if m > 0:
            k_col = k_col - proj[:m].T @ proj[:m, j]
        k_col /= math.sqrt(max(var[j], 1e-300))
        proj[m] = k_col
        var = np.maximum(var - k_col**2, 0.0)
        var[j] = 0.0
        chosen.append(j)
    if collect_errors:
        errors.append(float(var @ precision) / denom)
        return np.array(chosen), np.array(errors)
    return np.array(chosen)


def select_inducing(ds, hp, cfg=InducingConfig(), n_extra=0):
    """Indices into the training inputs to use as inducing points.

    ``n_extra`` is the post-process evaluation budget that widens the upper
    bound on the count. At least min(m_min, N) unique indices are returned.
    """
    if ds.n == 0:
        raise ValueError("empty dataset")
    return _greedy_select(ds, hp, cfg.m_min, cfg.m_max(n_extra), cfg.frac_tol)


def greedy_trace_errors(ds, hp, cfg=InducingConfig(), n_extra=0):
    """Selection plus the fractional trace error after each pick (for audits)."""
    return _greedy_select(
        ds, hp, cfg.m_min, cfg.m_max(n_extra), cfg.frac_tol, collect_errors=True
    )


def _kmeans(x, k, rng, iters=30):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = x[rng.integers(n, size=k - i)]
            break
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    for _ in range(iters):
        dist = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ centers.T
            + np.sum(centers * centers, axis=1)[None, :]
        )
        labels = np.argmin(dist, axis=1)
        new_centers = centers.copy()
        for i in range(k):
            members = x[labels == i]
            if members.shape[0] > 0:
                new_centers[i] = members.mean(axis=0)
            else:
                far = int(np.argmax(np.min(dist, axis=1)))
                new_centers[i] = x[far]
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


def _largest_remainder(sizes, total):
    sizes = np.asarray(sizes, dtype=float)
    raw = sizes / sizes.sum() * total
    alloc = np.floor(raw).astype(int)
    rem = total - alloc.sum()
    order = np.argsort(-(raw - alloc))
    for i in range(rem):
        alloc[order[i % len(alloc)]] += 1
    # every non-empty stratum contributes when the budget allows
    while total >= np.count_nonzero(sizes):
        zeros = np.where((alloc == 0) & (sizes > 0))[0]
        if zeros.size == 0:
            break
        donor = int(np.argmax(alloc))
        alloc[donor] -= 1
        alloc[zeros[0]] += 1
    alloc = np.minimum(alloc, sizes.astype(int))
    # re-distribute any clipped budget
    while alloc.sum() < total:
        room = sizes.astype(int) - alloc
        grow = int(np.argmax(room))
        if room[grow] <= 0:
            break
        alloc[grow] += 1
    return alloc


def stratified_subset(ds, n, strata=5, seed=0):
    """Representative subset: per-stratum K-means medoids over log-density bands.

    Training points are split into ``strata`` equal-count groups by their
    y values; each group runs K-means on the inputs with a proportional
    budget and contributes the points nearest to the cluster centers.
    """
    if n >= ds.n:
        return np.arange(ds.n)
    if strata < 1:
        raise ValueError("strata must be >= 1")
    rng = np.random.default_rng(seed)
    order = np.argsort(ds.y, kind="stable")
    groups = np.array_split(order, strata)
    sizes = [len(g) for g in groups]
    budgets = _largest_remainder(sizes, n)
    picked = []
    for group, budget in zip(groups, budgets):
        if budget == 0 or len(group) == 0:
            continue
        pts = ds.x[group]
        centers = _kmeans(pts, int(budget), rng)
        used = set()
        for center in centers:
            dist = np.sum((pts - center) ** 2, axis=1)
            for idx in np.argsort(dist, kind="stable"):
                if idx not in used:
                    used.add(int(idx))
                    picked.append(int(group[idx]))
                    break
    return np.sort(np.array(picked))
