"""Symmetric alpha-stable driving noise.

The Levy measure is ``nu(dx) = c_alpha |x|^{-alpha-1} dx``. Jumps with
``|x| >= K`` form a compound Poisson process with rate ``gamma_K`` and jump
law ``nu_K``; everything below ``K`` is the small-jump residual, which is
simulated approximately (see :class:`SmallJumpModel`).

Scale bookkeeping
-----------------
With this Levy measure the characteristic exponent is ``-s |xi|^alpha`` where

    s = c_alpha * 2 * int_0^inf (1 - cos u) u^{-1-alpha} du
      = c_alpha * 2 Gamma(1 - alpha) cos(pi alpha / 2) / alpha     (alpha != 1)
      = c_alpha * pi                                              (alpha == 1)

so ``c_alpha = 1`` does *not* give the unit-scale process ``exp(-|xi|^alpha t)``.
Use :meth:`StableSpec.unit_scale` for that normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StableSpec",
    "JumpStream",
    "SmallJumpModel",
    "stable_scale",
    "gamma_K",
    "p_K_density",
    "p_K_cdf",
    "sample_large_jump",
    "sample_small_increment",
    "sample_jump_stream",
    "sample_jump_stream_steps",
    "char_function",
    "small_jump_variance",
    "gaussian_cf_error_bound",
]


def stable_scale(alpha: float, c_alpha: float = 1.0) -> float:
    """Characteristic-function scale ``s`` induced by the Levy density constant."""
    if abs(alpha - 1.0) < 1e-12:
        return c_alpha * math.pi
    return c_alpha * 2.0 * math.gamma(1.0 - alpha) * math.cos(math.pi * alpha / 2.0) / alpha


@dataclass(frozen=True)
class StableSpec:
    """Symmetric alpha-stable noise with large-jump threshold ``K``."""

    alpha: float
    c_alpha: float = 1.0
    K: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha < 2.0):
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if not self.K > 0.0:
            raise ValueError(f"K must be positive, got {self.K}")
        if not self.c_alpha > 0.0:
            raise ValueError(f"c_alpha must be positive, got {self.c_alpha}")

    @classmethod
    def unit_scale(cls, alpha: float, K: float = 1.0) -> "StableSpec":
        """Noise parameters whose characteristic function is exactly ``exp(-|xi|^alpha t)``."""
        return cls(alpha=alpha, c_alpha=1.0 / stable_scale(alpha, 1.0), K=K)

    @property
    def scale(self) -> float:
        return stable_scale(self.alpha, self.c_alpha)

    @property
    def gamma_K(self) -> float:
        return gamma_K(self)

    def with_K(self, K: float) -> "StableSpec":
        return StableSpec(self.alpha, self.c_alpha, K)


def gamma_K(spec: StableSpec) -> float:
    """Total Levy mass of ``(-inf, -K] U [K, inf)``."""
    return 2.0 * spec.c_alpha / (spec.alpha * spec.K**spec.alpha)


def small_jump_variance(spec: StableSpec, cutoff: float | None = None) -> float:
    """``int_{|x| < cutoff} x^2 nu(dx)``; ``cutoff`` defaults to ``K``."""
    a = spec.K if cutoff is None else cutoff
    return 2.0 * spec.c_alpha * a ** (2.0 - spec.alpha) / (2.0 - spec.alpha)


def p_K_density(spec: StableSpec, z):
    """Density of ``nu_K``: ``(alpha K^alpha / 2) |z|^{-alpha-1}`` on ``|z| > K``."""
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    with np.errstate(divide="ignore", over="ignore"):
        val = 0.5 * spec.alpha * spec.K**spec.alpha * az ** (-spec.alpha - 1.0)
    out = np.where(az > spec.K, val, 0.0)
    return out if out.ndim else float(out)


def p_K_cdf(spec: StableSpec, z):
    """CDF of the two-sided Pareto law ``nu_K``."""
    z = np.asarray(z, dtype=float)
    az = np.maximum(np.abs(z), spec.K)
    tail = 0.5 * (spec.K / az) ** spec.alpha
    out = np.where(z < 0, tail, 1.0 - tail)
    out = np.where(np.abs(z) < spec.K, 0.5, out)
    return out if out.ndim else float(out)


def sample_large_jump(spec: StableSpec, rng: np.random.Generator, size=None):
    """Draw from ``nu_K`` by inverting the Pareto tail: ``K U^{-1/alpha}`` with a fair sign."""
    u = 1.0 - rng.random(size)  # (0, 1]
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    out = sign * spec.K * u ** (-1.0 / spec.alpha)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class SmallJumpModel:
    """Approximation of ``z - z^K``.

    ``scheme="gaussian"`` replaces all jumps below ``K`` by a variance-matched
    Brownian motion. ``scheme="gaussian+cp"`` keeps the jumps with
    ``K*eps_inner <= |x| < K`` exact (compound Poisson) and only replaces the
    ones below ``K*eps_inner``.
    """

    spec: StableSpec
    scheme: str = "gaussian"
    eps_inner: float = 0.1

    def __post_init__(self):
        if self.scheme not in ("gaussian", "gaussian+cp", "none"):
            raise ValueError(f"unknown small-jump scheme {self.scheme!r}")
        if self.scheme == "gaussian+cp" and not (0.0 < self.eps_inner < 1.0):
            raise ValueError("eps_inner must lie in (0, 1)")

    @property
    def cutoff(self) -> float:
        return self.spec.K * self.eps_inner if self.scheme == "gaussian+cp" else self.spec.K

    @property
    def variance_rate(self) -> float:
        if self.scheme == "none":
            return 0.0
        return small_jump_variance(self.spec, self.cutoff)

    @property
    def inner_rate(self) -> float:
        if self.scheme != "gaussian+cp":
            return 0.0
        return gamma_K(self.spec.with_K(self.cutoff)) - gamma_K(self.spec)

    def sample_inner_sizes(self, rng: np.random.Generator, size):
        """Jump sizes with ``cutoff <= |x| < K`` (two-sided truncated Pareto)."""
        a, K, al = self.cutoff, self.spec.K, self.spec.alpha
        u = rng.random(size)
        m = (a**-al - u * (a**-al - K**-al)) ** (-1.0 / al)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        return sign * m

    def sample_inner_jumps(self, horizon: float, rng: np.random.Generator):
        """Sorted ``(times, sizes)`` of the exact inner layer on ``[0, horizon]``."""
        rate = self.inner_rate
        if rate == 0.0:
            return np.empty(0), np.empty(0)
        n = rng.poisson(rate * horizon)
        times = np.sort(rng.random(n) * horizon)
        return times, self.sample_inner_sizes(rng, n)

    def cf_error_bound(self, xi: float, t: float) -> float:
        """Bound on |true cf - simulated cf| of the small part over time ``t``."""
        if self.scheme == "none":
            # dropping the small jumps entirely: |psi_small| <= xi^2 sigma^2 / 2
            return min(2.0, 0.5 * xi * xi * small_jump_variance(self.spec) * t)
        return gaussian_cf_error_bound(self.spec, xi, t, self.cutoff)


def gaussian_cf_error_bound(spec: StableSpec, xi: float, t: float, cutoff: float | None = None) -> float:
    """Analytic bound for the Gaussian substitution of jumps below ``cutoff``.

    ``|cos(u) - 1 + u^2/2| <= u^4/24`` gives
    ``|psi_small(xi) + sigma^2 xi^2/2| <= xi^4 c a^{4-alpha} / (12 (4-alpha))``,
    and ``|e^u - e^v| <= |u - v|`` for non-positive real parts.
    """
    a = spec.K if cutoff is None else cutoff
    return min(2.0, t * xi**4 * spec.c_alpha * a ** (4.0 - spec.alpha) / (12.0 * (4.0 - spec.alpha)))


def sample_small_increment(spec: StableSpec, dt: float, rng: np.random.Generator,
                           scheme: str = "gaussian", eps_inner: float = 0.1, size=None):
    """Increment of the small-jump part over a time step ``dt``."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    model = SmallJumpModel(spec, scheme, eps_inner)
    out = math.sqrt(model.variance_rate * dt) * rng.standard_normal(size)
    if model.inner_rate > 0.0:
        counts = rng.poisson(model.inner_rate * dt, size)
        total = int(np.sum(counts))
        sizes = model.sample_inner_sizes(rng, total)
        if size is None:
            out = out + sizes.sum()
        else:
            owner = np.repeat(np.arange(np.size(counts)), np.ravel(counts))
            out = out + np.bincount(owner, weights=sizes, minlength=np.size(counts)).reshape(np.shape(out))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class JumpStream:
    """Large-jump arrivals on ``[0, horizon]`` and the subsequence sampled with waiting time ``T``."""

    horizon: float
    times: np.ndarray
    sizes: np.ndarray
    sampled_index: np.ndarray
    waiting_T: float
    # sampled times generated by the gap construction may stop before horizon
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def sampled_times(self) -> np.ndarray:
        return self.times[self.sampled_index]

    @property
    def sampled_sizes(self) -> np.ndarray:
        return self.sizes[self.sampled_index]

    @property
    def is_empty(self) -> bool:
        """True when no arrival follows the first waiting window."""
        return self.sampled_index.size == 0

    @property
    def window_mask(self) -> np.ndarray:
        """Arrivals that fall in a waiting window and are therefore not sampled."""
        mask = np.ones(self.times.size, dtype=bool)
        mask[self.sampled_index] = False
        return mask


def _extract_sampled(times: np.ndarray, T: float) -> np.ndarray:
    idx = []
    last = 0.0
    for i, t in enumerate(times):
        if t > last + T:
            idx.append(i)
            last = t
    return np.asarray(idx, dtype=np.int64)


def sample_jump_stream(spec: StableSpec, T: float, horizon: float, rng: np.random.Generator) -> JumpStream:
    """Poisson(``gamma_K``) arrivals with ``nu_K`` marks on ``[0, horizon]``."""
    if T < 0.0:
        raise ValueError("waiting time T must be non-negative")
    if not horizon > T:
        raise ValueError("horizon must exceed the waiting time T")
    n = rng.poisson(gamma_K(spec) * horizon)
    times = np.sort(rng.random(n) * horizon)
    sizes = np.atleast_1d(sample_large_jump(spec, rng, n)).astype(float)
    return JumpStream(horizon, times, sizes, _extract_sampled(times, T), T)


def sample_jump_stream_steps(spec: StableSpec, T: float, n_sampled: int, rng: np.random.Generator) -> JumpStream:
    """Arrivals up to and including the ``n_sampled``-th sampled time.

    Built gap by gap: each gap is ``T + Exp(gamma_K)`` and the waiting window
    carries ``Poisson(gamma_K T)`` uniformly placed jumps. This has the same
    law as :func:`sample_jump_stream` restricted to ``[0, tau_n]``.
    """
    if n_sampled < 1:
        raise ValueError("n_sampled must be >= 1")
    g = gamma_K(spec)
    gaps = T + rng.exponential(1.0 / g, n_sampled)
    counts = rng.poisson(g * T, n_sampled) if T > 0 else np.zeros(n_sampled, dtype=np.int64)
    offsets = rng.random(int(counts.sum())) * T
    marks = np.atleast_1d(sample_large_jump(spec, rng, int(counts.sum()) + n_sampled)).astype(float)

    starts = np.concatenate(([0.0], np.cumsum(gaps)[:-1]))
    owner = np.repeat(np.arange(n_sampled), counts)
    window_times = starts[owner] + offsets
    sampled_times = np.cumsum(gaps)

    times = np.concatenate((window_times, sampled_times))
    order = np.argsort(times, kind="stable")
    times = times[order]
    sizes = marks[order]
    is_sampled = np.concatenate((np.zeros(window_times.size, bool), np.ones(n_sampled, bool)))[order]
    return JumpStream(float(sampled_times[-1]), times, sizes, np.flatnonzero(is_sampled), T)


def char_function(spec: StableSpec, xi, t: float):
    """``E exp(i xi z(t)) = exp(-s |xi|^alpha t)`` with ``s`` from :func:`stable_scale`."""
    if t < 0:
        raise ValueError("t must be non-negative")
    xi = np.asarray(xi, dtype=float)
    out = np.exp(-spec.scale * np.abs(xi) ** spec.alpha * t) + 0j
    return out if out.ndim else complex(out)
