"""Stopping times of the coupled chain and their Monte Carlo summaries.

Every detector returns a step count, or ``math.inf`` when the event does not
happen within the realised chain (censored at the horizon). Composite times
restart detection at intermediate stopping indices of the same chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import CoupledChain

__all__ = [
    "StoppingSummary",
    "detect_sigma_tilde",
    "detect_sigma",
    "detect_sigma_hat",
    "detect_sigma_dagger",
    "detect_sigma_bar",
    "detect_sigma_bar_k",
    "tail_and_moment",
    "fit_geometric_tail",
    "moment_recursion_q",
]

INF = math.inf


def _first(mask: np.ndarray, start: int) -> float:
    hits = np.flatnonzero(mask[start + 1:])
    return float(hits[0] + 1) if hits.size else INF


def _sigma_tilde(chain: CoupledChain, M: float, start: int) -> float:
    return _first(chain.size <= M, start)


def _sigma(chain: CoupledChain, d: float, start: int) -> float:
    return _first(chain.distance <= d, start)


def _sigma_hat(chain: CoupledChain, start: int, d0: float | None = None) -> float:
    dist = chain.distance
    if d0 is None:
        d0 = dist[start]
    if start + 1 >= len(chain):
        return INF
    with np.errstate(divide="ignore"):
        log_bound = np.cumsum(np.log(chain.delta[start + 1:])) + math.log(d0) if d0 > 0 else None
        later = dist[start + 1:]
        if log_bound is None:
            hit = later > 0.0
        else:
            hit = np.log(later) > log_bound
    idx = np.flatnonzero(hit)
    return float(idx[0] + 1) if idx.size else INF


def detect_sigma_tilde(chain: CoupledChain, M: float) -> float:
    """First ``k >= 1`` with ``|S^x(k)| + |S^y(k)| <= M``."""
    return _sigma_tilde(chain, M, 0)


def detect_sigma(chain: CoupledChain, d: float) -> float:
    """First ``k >= 1`` with ``|S^x(k) - S^y(k)| <= d``."""
    return _sigma(chain, d, 0)


def detect_sigma_hat(chain: CoupledChain, x=None, y=None) -> float:
    """First ``k >= 1`` with ``|S^x(k) - S^y(k)| > delta_0 ... delta_{k-1} |x - y|``.

    ``x`` and ``y`` default to the chain's initial pair.
    """
    d0 = None
    if x is not None and y is not None:
        d0 = float(np.hypot(*(np.asarray(x, float) - np.asarray(y, float))))
    return _sigma_hat(chain, 0, d0)


def _dagger(chain, d, start):
    s = _sigma(chain, d, start)
    if s == INF:
        return INF
    return s + _sigma_hat(chain, start + int(s))


def _bar(chain, d, M, start):
    s = _dagger(chain, d, start)
    if s == INF:
        return INF
    return s + _sigma_tilde(chain, M, start + int(s))


def detect_sigma_dagger(chain: CoupledChain, d: float) -> float:
    """``sigma + sigma_hat`` restarted at ``S(sigma)``."""
    return _dagger(chain, d, 0)


def detect_sigma_bar(chain: CoupledChain, d: float, M: float) -> float:
    """``sigma_dagger + sigma_tilde`` restarted at ``S(sigma_dagger)``."""
    return _bar(chain, d, M, 0)


def detect_sigma_bar_k(chain: CoupledChain, d: float, M: float, k: int) -> float:
    """``k``-fold composition of :func:`detect_sigma_bar` along the chain."""
    total = 0.0
    for _ in range(k):
        s = _bar(chain, d, M, int(total))
        if s == INF:
            return INF
        total += s
    return total


def moment_recursion_q(gamma_K: float, lambda1: float, p: float, T: float) -> float:
    """``q`` with ``q^2 = (3^{p-1} v 1) gamma_K e^{-p l1 T} / (gamma_K + p l1)``."""
    q2 = max(3.0 ** (p - 1.0), 1.0) * gamma_K * math.exp(-p * lambda1 * T) / (gamma_K + p * lambda1)
    return math.sqrt(q2)


@dataclass
class StoppingSummary:
    name: str
    samples: np.ndarray
    tail: np.ndarray
    geom_rate: float
    rate_ci: tuple
    r_squared: float
    fit_range: tuple
    vartheta: float | None
    exp_moment: float | None
    moment_ci: tuple | None
    censored_fraction: float
    censored_bound: float | None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.samples.size)

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else float(v)

        return {
            "name": self.name,
            "n": self.n,
            "censored_fraction": self.censored_fraction,
            "tail": [float(v) for v in self.tail],
            "geom_rate": num(self.geom_rate),
            "rate_ci": [num(v) for v in self.rate_ci],
            "r_squared": num(self.r_squared),
            "fit_range": list(self.fit_range),
            "vartheta": num(self.vartheta),
            "exp_moment": num(self.exp_moment),
            "moment_ci": None if self.moment_ci is None else [num(v) for v in self.moment_ci],
            "censored_bound": num(self.censored_bound),
            **self.extra,
        }


def _tail(samples: np.ndarray, kmax: int) -> np.ndarray:
    finite = samples[np.isfinite(samples)].astype(np.int64)
    counts = np.bincount(np.minimum(finite, kmax + 1), minlength=kmax + 2)[: kmax + 1]
    le = np.cumsum(counts)
    return 1.0 - le / samples.size


def fit_geometric_tail(samples, min_count: int = 30):
    """Weighted least-squares fit of ``log P(sigma > k)`` against ``k``.

    The segment starts at the first ``k`` with tail below one and ends at the
    last ``k`` where at least ``min_count`` finite samples still exceed ``k``.
    Returns ``(slope, intercept, r_squared, (k_lo, k_hi))``; slope is NaN if
    fewer than three points qualify.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    finite = samples[np.isfinite(samples)]
    if finite.size == 0:
        return math.nan, math.nan, math.nan, (0, 0)
    kmax = int(finite.max())
    tail = _tail(samples, kmax)
    n_cens = n - finite.size
    exceed_finite = tail * n - n_cens
    ks = np.arange(kmax + 1)
    ok = (tail < 1.0) & (tail > 0.0) & (exceed_finite >= min_count)
    if ok.sum() < 3:
        return math.nan, math.nan, math.nan, (0, 0)
    lo, hi = int(ks[ok][0]), int(ks[ok][-1])
    sel = (ks >= lo) & (ks <= hi) & (tail > 0)
    x, p = ks[sel].astype(float), tail[sel]
    y = np.log(p)
    w = n * p / np.maximum(1.0 - p, 1.0 / n)
    W = w.sum()
    xm, ym = (w * x).sum() / W, (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_tot = (w * (y - ym) ** 2).sum()
    r2 = 1.0 - (w * resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2), (lo, hi)


def tail_and_moment(samples, vartheta: float | None = None, name: str = "sigma", *,
                    horizon: int | None = None, n_boot: int = 1000, seed: int = 0,
                    min_count: int = 30) -> StoppingSummary:
    """Tail curve, geometric rate and ``E[e^{vartheta sigma} 1{sigma < inf}]`` with bootstrap CIs.

    ``samples`` uses ``inf`` for censored values. If ``vartheta`` is None it is
    set to half the fitted rate.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("no samples")
    finite_mask = np.isfinite(samples)
    cens = 1.0 - finite_mask.mean()
    kmax = int(samples[finite_mask].max()) if finite_mask.any() else (horizon or 0)
    if horizon is not None:
        kmax = max(kmax, int(horizon))
    tail = _tail(samples, kmax)

    slope, _, r2, rng_fit = fit_geometric_tail(samples, min_count)
    rate = -slope
    boot = np.random.default_rng(seed)
    n = samples.size
    idx = boot.integers(0, n, size=(n_boot, n)) if n_boot else None

    rate_ci = (math.nan, math.nan)
    if math.isfinite(rate) and n_boot:
        rates = np.array([-fit_geometric_tail(samples[i], min_count)[0] for i in idx])
        rates = rates[np.isfinite(rates)]
        if rates.size:
            rate_ci = (float(np.quantile(rates, 0.025)), float(np.quantile(rates, 0.975)))

    if vartheta is None and math.isfinite(rate) and rate > 0:
        vartheta = 0.5 * rate
    exp_moment = moment_ci = cens_bound = None
    if finite_mask.any() and vartheta is not None:
        vals = np.where(finite_mask, np.exp(vartheta * np.where(finite_mask, samples, 0.0)), 0.0)
        exp_moment = float(vals.mean())
        if n_boot:
            means = vals[idx].mean(axis=1)
            moment_ci = (float(np.quantile(means, 0.025)), float(np.quantile(means, 0.975)))
        # what the censored samples would add at the very least if they were finite
        h = horizon if horizon is not None else kmax
        cens_bound = float(cens * math.exp(vartheta * (h + 1)))
    return StoppingSummary(name, samples, tail, rate, rate_ci, r2, rng_fit, vartheta, exp_moment,
                           moment_ci, float(cens), cens_bound)
