"""Maximal coupling of shifted large-jump laws and the coupled chain ``S(k)``.

Between sampled jump times both copies are driven by the same noise
(synchronous coupling). At a sampled time the jump added to the first
coordinate is drawn from a maximal coupling of ``L(x1 + eta)`` and
``L(y1 + eta)``, so the two copies share it with probability ``1 - TV``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .rng import map_blocks, trial_rngs
from .sde_core import ModelConfig, realize_noise, simulate_batch
from .stable_noise import StableSpec, gamma_K, p_K_density

__all__ = [
    "CouplingError",
    "CouplingOutcome",
    "CoupledChainRecord",
    "CoupledChain",
    "ChainBatch",
    "tv_shifted",
    "l1_shifted",
    "tv_shifted_closed_form",
    "maximal_couple",
    "maximal_couple_batch",
    "coupled_jump",
    "coupled_chain",
    "coupled_chains",
    "delta_of_gap",
    "kappa",
    "theta",
    "theta_corrected",
    "expected_delta_power",
]

MAX_REJECTIONS = 1_000_000


class CouplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CouplingOutcome:
    xi_x: float
    xi_y: float
    coalesced: bool


def l1_shifted(spec: StableSpec, z1: float, z2: float, tol: float = 1e-8) -> float:
    """``int |p_K(z - z1) - p_K(z - z2)| dz`` by piecewise adaptive quadrature."""
    if z1 == z2:
        return 0.0
    a, b = sorted((float(z1), float(z2)))
    K = spec.K
    cuts = sorted({a - K, a + K, b - K, b + K, 0.5 * (a + b)})

    def f(z):
        return abs(p_K_density(spec, z - a) - p_K_density(spec, z - b))

    pieces = [(-np.inf, cuts[0])] + list(zip(cuts[:-1], cuts[1:])) + [(cuts[-1], np.inf)]
    total, err = 0.0, 0.0
    for lo, hi in pieces:
        if hi <= lo:
            continue
        val, e, *rest = integrate.quad(f, lo, hi, epsabs=tol / 20, epsrel=1e-12, limit=200, full_output=1)
        if len(rest) > 1 and e > tol / 10:
            raise CouplingError(f"TV quadrature did not converge on [{lo}, {hi}]: error estimate {e:.3g}")
        total += val
        err += e
    if err > tol:
        raise CouplingError(f"TV quadrature error estimate {err:.3g} exceeds {tol:.1g}")
    return total


def tv_shifted(spec: StableSpec, z1: float, z2: float, tol: float = 1e-8) -> float:
    """Total-variation distance between ``L(z1 + eta)`` and ``L(z2 + eta)``, ``eta ~ nu_K``."""
    return 0.5 * l1_shifted(spec, z1, z2, tol=2 * tol)


def tv_shifted_closed_form(spec: StableSpec, z1: float, z2: float) -> float:
    """Same quantity from the explicit overlap mass (used as a cross-check)."""
    D = abs(float(z1) - float(z2))
    K, al = spec.K, spec.alpha

    def tail(u):  # nu_K mass of [u, inf) for u >= K
        return 0.5 * (K / u) ** al

    overlap = tail(D + K)
    lo = max(0.5 * D, K)
    if D - K > lo:
        overlap += tail(lo) - tail(D - K)
    return 1.0 - 2.0 * overlap


def _dens(z: float, K: float, al: float, C: float) -> float:
    az = abs(z)
    return C * az ** (-al - 1.0) if az > K else 0.0


def maximal_couple(spec: StableSpec, x1_hat: float, y1_hat: float, rng: np.random.Generator) -> CouplingOutcome:
    """Draw ``(xi_x, xi_y)`` with marginals ``x1_hat + eta`` and ``y1_hat + eta`` and
    ``P(xi_x != xi_y) = TV``.

    A proposal from the first law is kept for both sides with probability
    ``min(1, g/f)``; this accepts a draw from ``min(f, g) / (1 - TV)`` with
    overall probability ``1 - TV``. Otherwise ``xi_y`` comes from the residual
    ``(g - f)^+ / TV`` by rejection from the second law, and ``xi_x`` keeps the
    rejected proposal, which is then distributed as ``(f - g)^+ / TV``.
    """
    K, al = spec.K, spec.alpha
    C = 0.5 * al * K**al
    inv = -1.0 / al
    x1_hat = float(x1_hat)
    y1_hat = float(y1_hat)

    def draw():
        u = 1.0 - rng.random()
        s = -1.0 if rng.random() < 0.5 else 1.0
        return s * K * u**inv

    X = x1_hat + draw()
    fx = _dens(X - x1_hat, K, al, C)
    if rng.random() * fx < _dens(X - y1_hat, K, al, C):
        return CouplingOutcome(X, X, True)
    for _ in range(MAX_REJECTIONS):
        Y = y1_hat + draw()
        gy = _dens(Y - y1_hat, K, al, C)
        if rng.random() * gy > _dens(Y - x1_hat, K, al, C):
            return CouplingOutcome(X, Y, False)
    raise CouplingError(f"residual sampler exceeded {MAX_REJECTIONS} proposals (TV too small?)")


def maximal_couple_batch(spec: StableSpec, x1_hat, y1_hat, rng: np.random.Generator):
    """Vectorised :func:`maximal_couple` over arrays of shift pairs.

    Returns ``(xi_x, xi_y, coalesced)`` arrays.
    """
    x1_hat, y1_hat = np.broadcast_arrays(np.asarray(x1_hat, float), np.asarray(y1_hat, float))
    x1_hat, y1_hat = x1_hat.ravel(), y1_hat.ravel()
    n = x1_hat.size
    K, al = spec.K, spec.alpha

    def draw(m):
        u = 1.0 - rng.random(m)
        s = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        return s * K * u ** (-1.0 / al)

    X = x1_hat + draw(n)
    u = rng.random(n)
    coalesced = u * p_K_density(spec, X - x1_hat) < p_K_density(spec, X - y1_hat)
    Y = X.copy()
    pending = np.flatnonzero(~coalesced)
    for _ in range(MAX_REJECTIONS):
        if pending.size == 0:
            break
        cand = y1_hat[pending] + draw(pending.size)
        v = rng.random(pending.size)
        ok = v * p_K_density(spec, cand - y1_hat[pending]) > p_K_density(spec, cand - x1_hat[pending])
        Y[pending[ok]] = cand[ok]
        pending = pending[~ok]
    else:
        raise CouplingError(f"residual sampler exceeded {MAX_REJECTIONS} rounds")
    return X, Y, coalesced


def coupled_jump(x_hat, y_hat, spec: StableSpec, rng: np.random.Generator):
    """Couple the jump in the first coordinate; second coordinates pass through."""
    x_hat = np.asarray(x_hat, float)
    y_hat = np.asarray(y_hat, float)
    out = maximal_couple(spec, x_hat[0], y_hat[0], rng)
    return np.array([out.xi_x, x_hat[1]]), np.array([out.xi_y, y_hat[1]])


def delta_of_gap(gap, lambda2: float, Flip: float):
    """Per-gap contraction factor ``e^{-l2 g} + Flip e^{g Flip} / (l2 + Flip)``."""
    gap = np.asarray(gap, dtype=float)
    if np.any(gap <= 0):
        raise ValueError("gap must be positive")
    out = np.exp(-lambda2 * gap) + Flip * np.exp(gap * Flip) / (lambda2 + Flip)
    return out if out.ndim else float(out)


def kappa(beta1: float, beta2: float, Flip: float, T: float) -> float:
    return beta1 * math.exp(beta2 * Flip * T)


def theta(gamma_K: float, lambda2: float, beta2: float, T: float, Flip: float):
    """Expected-contraction constant; returns ``(value, value < 1/2)``."""
    val = (gamma_K / (gamma_K + lambda2 * beta2) * math.exp(-lambda2 * beta2 * T)
           + 2.0 * (Flip / (Flip + lambda2)) ** beta2)
    return val, val < 0.5


def theta_corrected(gamma_K: float, lambda2: float, beta2: float, T: float, Flip: float):
    """Same as :func:`theta` with the ``e^{beta2 Flip T}`` factor the drift term needs.

    Under ``gamma_K >= 2 beta2 Flip`` this is a true upper bound for
    ``E[delta^beta2]`` when ``beta2 <= 1``.
    """
    val = (gamma_K / (gamma_K + lambda2 * beta2) * math.exp(-lambda2 * beta2 * T)
           + 2.0 * math.exp(beta2 * Flip * T) * (Flip / (Flip + lambda2)) ** beta2)
    return val, val < 0.5


def expected_delta_power(gamma_K: float, T: float, lambda2: float, Flip: float, beta2: float,
                         tol: float = 1e-10) -> float:
    """``E[delta(tau)^beta2]`` for a gap ``tau`` with density ``g e^{-g(t - T)}`` on ``t > T``."""
    if gamma_K <= beta2 * Flip:
        raise ValueError(
            f"E[delta^beta2] diverges: gamma_K={gamma_K} <= beta2*Flip={beta2 * Flip} "
            "(need the large-jump rate condition gamma_K >= 2 beta2 ||F||_Lip)")

    ratio = Flip / (lambda2 + Flip)

    def integrand(s):  # s = t - T
        t = T + s
        log_dl = -lambda2 * t
        if ratio > 0:
            log_dl = np.logaddexp(log_dl, math.log(ratio) + t * Flip)
        return math.exp(beta2 * log_dl + math.log(gamma_K) - gamma_K * s)

    # the e^{-lambda2 t} part lives on a scale 1/lambda2, the rest on 1/(gamma - beta2 Flip)
    split = min(10.0 / lambda2, 50.0 / gamma_K)
    a, _ = integrate.quad(integrand, 0.0, split, epsabs=tol, epsrel=tol, limit=400)
    b, _ = integrate.quad(integrand, split, np.inf, epsabs=tol, epsrel=tol, limit=400)
    return a + b


@dataclass(frozen=True)
class CoupledChainRecord:
    k: int
    s_x: np.ndarray
    s_y: np.ndarray
    gap: float
    coalesced_at_k: bool
    delta_prev: float


@dataclass
class CoupledChain:
    """One realised coupled chain; index 0 is the initial pair."""

    sx: np.ndarray
    sy: np.ndarray
    times: np.ndarray
    coalesced: np.ndarray
    lambda2: float
    Flip: float

    def __post_init__(self):
        self.gaps = np.concatenate(([np.nan], np.diff(self.times)))
        self.delta = np.concatenate(([np.nan], delta_of_gap(self.gaps[1:], self.lambda2, self.Flip)))

    def __len__(self):
        return self.sx.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self) - 1

    @property
    def distance(self) -> np.ndarray:
        # hypot avoids squaring, which underflows for gaps below ~1e-154
        diff = self.sx - self.sy
        return np.hypot(diff[:, 0], diff[:, 1])

    @property
    def size(self) -> np.ndarray:
        return np.hypot(self.sx[:, 0], self.sx[:, 1]) + np.hypot(self.sy[:, 0], self.sy[:, 1])

    def records(self) -> list[CoupledChainRecord]:
        return [CoupledChainRecord(k, self.sx[k].copy(), self.sy[k].copy(), float(self.gaps[k]),
                                   bool(self.coalesced[k]), float(self.delta[k]))
                for k in range(len(self))]

    def to_csv_rows(self):
        for k in range(len(self)):
            yield (k, self.sx[k, 0], self.sx[k, 1], self.sy[k, 0], self.sy[k, 1],
                   self.gaps[k], self.delta[k], int(self.coalesced[k]))


@dataclass
class ChainBatch:
    """Stacked chains from :func:`coupled_chains`."""

    sx: np.ndarray
    sy: np.ndarray
    times: np.ndarray
    coalesced: np.ndarray
    pre_x: np.ndarray
    pre_y: np.ndarray
    lambda2: float
    Flip: float

    def __len__(self):
        return self.sx.shape[0]

    def __getitem__(self, i) -> CoupledChain:
        return CoupledChain(self.sx[i], self.sy[i], self.times[i], self.coalesced[i], self.lambda2, self.Flip)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times, axis=1)

    @property
    def delta(self) -> np.ndarray:
        return delta_of_gap(self.gaps, self.lambda2, self.Flip)


def _coupler(spec):
    def fn(rng, x1, y1):
        out = maximal_couple(spec, x1, y1, rng)
        return out.xi_x, out.xi_y, out.coalesced

    return fn


def _chain_block(config, x, y, n_steps, rngs, mode):
    noises = [realize_noise(config, r, n_sampled=n_steps) for r in rngs]
    x0 = np.stack([np.asarray(x, float), np.asarray(y, float)], axis=-2)
    coupler = _coupler(config.noise) if mode == "maximal" else None
    return simulate_batch(config, x0, noises, coupler=coupler, rngs=rngs, n_slots=n_steps)


def coupled_chain(config: ModelConfig, x, y, n_steps: int, rng: np.random.Generator,
                  mode: str = "maximal") -> CoupledChain:
    """Run ``n_steps`` transitions of the coupled chain from ``(x, y)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    res = _chain_block(config, x, y, n_steps, [rng], mode)
    return CoupledChain(res.chain[0, :, 0], res.chain[0, :, 1], res.chain_times[0], res.coalesced[0],
                        config.lambda2, config.drift.Flip_bound)


def coupled_chains(config: ModelConfig, x, y, n_steps: int, n_trials: int, seed: int,
                   mode: str = "maximal", threads: int = 1, block: int = 512) -> ChainBatch:
    """``n_trials`` independent coupled chains; trial ``i`` uses stream ``(seed, i)``.

    ``x`` and ``y`` may be single points or arrays of shape ``(n_trials, 2)``.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)

    def run(idx):
        xi = x[idx] if x.ndim == 2 else x
        yi = y[idx] if y.ndim == 2 else y
        return _chain_block(config, xi, yi, n_steps, trial_rngs(seed, idx), mode)

    parts = map_blocks(run, n_trials, threads=threads, block=block)
    chain = np.concatenate([p.chain for p in parts])
    pre = np.concatenate([p.pre_jump for p in parts])
    return ChainBatch(chain[:, :, 0], chain[:, :, 1], np.concatenate([p.chain_times for p in parts]),
                      np.concatenate([p.coalesced for p in parts]), pre[:, :, 0], pre[:, :, 1],
                      config.lambda2, config.drift.Flip_bound)
