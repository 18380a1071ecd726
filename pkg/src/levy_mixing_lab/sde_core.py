"""Mild-form integration of ``dX = [AX + F(X)] dt + dZ`` with ``A = diag(-l1, -l2)``.

The integrator is exponential Euler: per coordinate

    X_i(t+h) = exp(-l_i h) X_i(t) + (1 - exp(-l_i h)) / l_i * F_i(X(t)),

so the linear part is exact and a large ``lambda2`` causes no stiffness. The
small-jump increment over the step is added to the first coordinate at the
end of the step. Large jumps are never smeared over a step: every arrival
time is inserted into the grid and applied exactly, ``X(tau) = X(tau-) + eta e_1``.

All Monte Carlo work goes through :func:`simulate_batch`, which advances
``n`` independent trials, each carrying ``c`` copies of the state driven by
the same noise (synchronous coupling), on a common time grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .stable_noise import (
    JumpStream,
    SmallJumpModel,
    StableSpec,
    gamma_K,
    sample_jump_stream,
    sample_jump_stream_steps,
)

__all__ = [
    "DriftSpec",
    "make_drift",
    "ModelConfig",
    "CadlagPath",
    "NoiseRealization",
    "BatchResult",
    "IntegrationError",
    "realize_noise",
    "simulate_batch",
    "integrate",
    "left_limit_at",
    "check_apriori_bound",
    "scheme_slack",
]


class IntegrationError(RuntimeError):
    """Raised when the state stops being finite."""

    def __init__(self, time: float, message: str = ""):
        self.time = float(time)
        super().__init__(message or f"non-finite state at t={self.time:.6g}")


@dataclass(frozen=True)
class DriftSpec:
    """Bounded Lipschitz drift ``F: R^2 -> R^2`` together with its reported norms."""

    name: str
    evaluate: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    F0_bound: float
    Flip_bound: float
    params: dict = field(default_factory=dict, compare=False)

    @property
    def F1_bound(self) -> float:
        return self.F0_bound + self.Flip_bound

    def __call__(self, x):
        return self.evaluate(np.asarray(x, dtype=float))

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


def _sincos(eps: float):
    def f(x):
        out = np.empty_like(x)
        out[..., 0] = eps * np.sin(x[..., 1])
        out[..., 1] = eps * np.cos(x[..., 0])
        return out

    return f


def make_drift(name: str = "sincos", **params) -> DriftSpec:
    """Drift presets.

    ``sincos``: ``eps (sin x2, cos x1)`` with ``||F||_0 = eps sqrt(2)``, ``||F||_Lip = eps``.
    ``zero``: ``F = 0``.
    ``constant``: ``F = (b1, b2)``.
    """
    allowed = {"sincos": {"eps"}, "zero": set(), "constant": {"b1", "b2"}}
    if name not in allowed:
        raise ValueError(f"unknown drift preset {name!r}")
    extra = set(params) - allowed[name]
    if extra:
        raise ValueError(f"drift {name!r} does not take {sorted(extra)}")
    if name == "sincos":
        eps = float(params.get("eps", 0.5))
        return DriftSpec("sincos", _sincos(eps), eps * math.sqrt(2.0), eps, {"eps": eps})
    if name == "zero":
        return DriftSpec("zero", np.zeros_like, 0.0, 0.0, {})
    if name == "constant":
        b1, b2 = float(params.get("b1", 0.0)), float(params.get("b2", 0.0))
        b = np.array([b1, b2])
        return DriftSpec("constant", lambda x: np.broadcast_to(b, np.shape(x)).copy(),
                         float(np.hypot(b1, b2)), 0.0, {"b1": b1, "b2": b2})
    raise ValueError(f"unknown drift preset {name!r}")


@dataclass(frozen=True)
class ModelConfig:
    lambda1: float = 1.0
    lambda2: float = 50.0
    drift: DriftSpec = field(default_factory=make_drift)
    noise: StableSpec = field(default_factory=lambda: StableSpec(1.0, 1.0, 1.0))
    T: float = 1.0
    step_h: float = 0.01
    horizon: float = 50.0
    M: float = 1.0
    d: float = 0.01
    p: float = 0.5
    small_scheme: str = "gaussian"
    eps_inner: float = 0.1

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")
        if self.lambda1 > self.lambda2:
            raise ValueError("expected lambda1 <= lambda2")
        if not (0.0 < self.p < self.noise.alpha):
            raise ValueError(f"p must lie in (0, alpha={self.noise.alpha}), got {self.p}")
        if not self.step_h > 0:
            raise ValueError("step_h must be positive")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if not (self.M > 0 and self.d > 0):
            raise ValueError("M and d must be positive")
        SmallJumpModel(self.noise, self.small_scheme, self.eps_inner)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2])

    @property
    def gamma_K(self) -> float:
        return gamma_K(self.noise)

    @property
    def small_noise(self) -> SmallJumpModel:
        return SmallJumpModel(self.noise, self.small_scheme, self.eps_inner)

    def a4_holds(self, beta2: float = 1.0) -> bool:
        """Enough large jumps: ``gamma_K >= 2 beta2 ||F||_Lip``."""
        return self.gamma_K >= 2.0 * beta2 * self.drift.Flip_bound

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("drift", "noise")}
        out["drift"] = self.drift.to_dict()
        out["noise"] = {"alpha": self.noise.alpha, "c_alpha": self.noise.c_alpha, "K": self.noise.K}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        drift = data.pop("drift", {"name": "sincos", "eps": 0.5})
        if isinstance(drift, dict):
            drift = dict(drift)
            drift = make_drift(drift.pop("name", "sincos"), **drift)
        noise = data.pop("noise", {})
        if isinstance(noise, dict):
            extra = set(noise) - {"alpha", "c_alpha", "K"}
            if extra:
                raise ValueError(f"unknown noise fields: {sorted(extra)}")
            noise = StableSpec(**{"alpha": 1.0, "c_alpha": 1.0, "K": 1.0, **noise})
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(drift=drift, noise=noise, **data)


def scheme_slack(config: ModelConfig, diameter: float) -> float:
    """Additive slack ``10 h (||F||_0 + ||F||_Lip diameter)`` for pathwise bounds."""
    return 10.0 * config.step_h * (config.drift.F0_bound + config.drift.Flip_bound * diameter)


@dataclass
class CadlagPath:
    """One trajectory on a grid containing every jump time."""

    times: np.ndarray
    states: np.ndarray
    jump_marks: np.ndarray
    jump_sizes: np.ndarray
    left_limits: np.ndarray
    convolution: np.ndarray | None = None

    def state_at(self, t: float) -> np.ndarray:
        """Right-continuous value at a grid time."""
        i = np.flatnonzero(self.times == t)
        if i.size == 0:
            raise KeyError(f"{t} is not a grid time")
        return self.states[i[-1]]

    def to_csv_rows(self):
        flags = np.zeros(self.times.size, dtype=int)
        sizes = np.zeros(self.times.size)
        flags[self.jump_marks] = 1
        sizes[self.jump_marks] = self.jump_sizes
        for t, (x1, x2), f, s in zip(self.times, self.states, flags, sizes):
            yield (t, x1, x2, int(f), s)


def left_limit_at(path: CadlagPath, tau: float) -> np.ndarray:
    """Stored pre-jump state ``X(tau-)`` at a marked jump time."""
    hits = np.flatnonzero(path.times[path.jump_marks] == tau)
    if hits.size == 0:
        raise KeyError(f"t={tau} is not a jump time of this path")
    return path.left_limits[hits[0]].copy()


@dataclass
class NoiseRealization:
    """Everything random that drives one trial, drawn up front from its stream."""

    stream: JumpStream
    inner_times: np.ndarray
    inner_sizes: np.ndarray
    normals: np.ndarray
    variance_rate: float

    @property
    def horizon(self) -> float:
        return self.stream.horizon


def realize_noise(config: ModelConfig, rng: np.random.Generator, *, horizon: float | None = None,
                  n_sampled: int | None = None, n_obs: int = 0, large_jumps: bool = True) -> NoiseRealization:
    """Draw the large-jump stream, inner small jumps and the Gaussian normals for one trial.

    Give exactly one of ``horizon`` (Poisson arrivals on ``[0, horizon]``) or
    ``n_sampled`` (arrivals up to the ``n_sampled``-th sampled time).
    """
    if (horizon is None) == (n_sampled is None):
        raise ValueError("pass exactly one of horizon / n_sampled")
    if n_sampled is not None:
        stream = sample_jump_stream_steps(config.noise, config.T, n_sampled, rng)
    else:
        stream = sample_jump_stream(config.noise, config.T, horizon, rng)
    if not large_jumps:
        stream = JumpStream(stream.horizon, np.empty(0), np.empty(0), np.empty(0, np.int64), config.T)
    model = config.small_noise
    inner_t, inner_s = model.sample_inner_jumps(stream.horizon, rng)
    n_normals = int(math.ceil(stream.horizon / config.step_h)) + 2 * (stream.times.size + inner_t.size) + n_obs + 8
    normals = rng.standard_normal(n_normals) if model.variance_rate > 0 else np.zeros(n_normals)
    return NoiseRealization(stream, inner_t, inner_s, normals, model.variance_rate)


_JUMP, _SAMPLED, _OBS = 0, 1, 2


@dataclass
class BatchResult:
    """Output of :func:`simulate_batch`.

    ``chain`` holds the state right after each sampled jump (slot 0 is the
    initial state), ``chain_times`` the sampled times (0 for slot 0) and
    ``coalesced`` whether the coupled jump at that slot made the first
    coordinates equal. ``obs`` holds states at the requested observation times.
    """

    chain: np.ndarray
    chain_times: np.ndarray
    coalesced: np.ndarray
    pre_jump: np.ndarray
    obs: np.ndarray | None
    paths: list | None = None


def _build_events(noise: NoiseRealization, until: float, obs_times):
    s = noise.stream
    sampled = np.zeros(s.times.size, dtype=bool)
    sampled[s.sampled_index] = True
    keep = s.times <= until
    kinds = [np.where(sampled[keep], _SAMPLED, _JUMP)]
    times = [s.times[keep]]
    sizes = [s.sizes[keep]]
    slots = [np.where(sampled[keep], np.cumsum(sampled[keep]), -1)]
    ik = noise.inner_times <= until
    times.append(noise.inner_times[ik])
    sizes.append(noise.inner_sizes[ik])
    kinds.append(np.full(ik.sum(), _JUMP))
    slots.append(np.full(ik.sum(), -1))
    if obs_times is not None and len(obs_times):
        ob = np.asarray(obs_times, dtype=float)
        pos = ob > 0
        times.append(ob[pos])
        sizes.append(np.zeros(pos.sum()))
        kinds.append(np.full(pos.sum(), _OBS))
        slots.append(np.flatnonzero(pos))
    t = np.concatenate(times)
    order = np.argsort(t, kind="stable")
    return (t[order], np.concatenate(kinds)[order], np.concatenate(sizes)[order],
            np.concatenate(slots)[order])


def simulate_batch(config: ModelConfig, x0, noises: list[NoiseRealization], *, until=None,
                   obs_times=None, coupler=None, rngs=None, drift_mask=None,
                   record_path: bool = False, n_slots: int | None = None) -> BatchResult:
    """Advance ``n = len(noises)`` trials of ``c`` synchronously driven copies.

    Parameters
    ----------
    x0 : array, shape (c, 2) or (n, c, 2)
        Initial states.
    noises : list of NoiseRealization
        One realization per trial; every copy of a trial sees the same noise.
    until : float or array, optional
        Per-trial end time, defaults to each stream horizon.
    obs_times : array, optional
        Times at which to store the state; ``t = 0`` stores ``x0``.
    coupler : callable, optional
        ``coupler(rng, x1_hat, y1_hat) -> (xi_x, xi_y, coalesced)`` applied at
        sampled jump times when ``c == 2``. Without it every copy receives the
        stream's own jump mark (purely synchronous coupling).
    rngs : list of Generator
        Per-trial generators handed to ``coupler``.
    drift_mask : array of bool, shape (c,)
        Copies with ``False`` ignore the drift (used for the stochastic convolution).
    record_path : bool
        Keep every grid point (only sensible for a handful of trials).
    """
    n = len(noises)
    x0 = np.asarray(x0, dtype=float)
    states = np.array(np.broadcast_to(x0, (n,) + x0.shape[-2:]), dtype=float)
    c = states.shape[1]
    if until is None:
        until = np.array([nz.horizon for nz in noises])
    until = np.broadcast_to(np.asarray(until, dtype=float), (n,)).copy()
    if coupler is not None and c != 2:
        raise ValueError("maximal coupling needs exactly two copies")

    built = [_build_events(nz, u, obs_times) for nz, u in zip(noises, until)]
    m = max(len(b[0]) for b in built) + 1
    ev_t = np.full((n, m), np.inf)
    ev_k = np.zeros((n, m), dtype=np.int8)
    ev_s = np.zeros((n, m))
    ev_slot = np.full((n, m), -1, dtype=np.int64)
    for i, (t, k, s, sl) in enumerate(built):
        ev_t[i, : t.size], ev_k[i, : t.size], ev_s[i, : t.size], ev_slot[i, : t.size] = t, k, s, sl

    if n_slots is None:
        n_slots = max(int(((nz.stream.sampled_times <= u)).sum()) for nz, u in zip(noises, until))
    chain = np.full((n, n_slots + 1, c, 2), np.nan)
    chain[:, 0] = states
    pre_jump = np.full((n, n_slots + 1, c, 2), np.nan)
    chain_times = np.full((n, n_slots + 1), np.nan)
    chain_times[:, 0] = 0.0
    coalesced = np.zeros((n, n_slots + 1), dtype=bool)
    obs = None
    if obs_times is not None:
        obs = np.full((n, len(obs_times), c, 2), np.nan)
        zero = np.flatnonzero(np.asarray(obs_times) <= 0)
        obs[:, zero] = states[:, None]

    lam = config.lambdas
    drift = config.drift
    dmask = np.ones(c, dtype=bool) if drift_mask is None else np.asarray(drift_mask, dtype=bool)
    use_drift = drift.name != "zero"
    normals = np.zeros((n, max(nz.normals.size for nz in noises)))
    for i, nz in enumerate(noises):
        normals[i, : nz.normals.size] = nz.normals
    sd_rate = np.sqrt(np.array([nz.variance_rate for nz in noises]))
    cursor = np.zeros(n, dtype=np.int64)
    t_cur = np.zeros(n)
    ptr = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)

    if record_path:
        rec = [dict(t=[0.0], x=[states[i].copy()], marks=[], sizes=[], left=[]) for i in range(n)]

    def advance(idx, dt):
        if idx.size == 0:
            return
        x = states[idx]
        e = np.exp(-dt[:, None] * lam)
        # overflow surfaces as a non-finite state below
        with np.errstate(over="ignore", invalid="ignore"):
            new = x * e[:, None, :]
            if use_drift:
                phi = -np.expm1(-dt[:, None] * lam) / lam
                f = drift.evaluate(x)
                if not dmask.all():
                    f[:, ~dmask] = 0.0
                new += f * phi[:, None, :]
            z = normals[idx, cursor[idx]]
            new[:, :, 0] += (sd_rate[idx] * np.sqrt(dt) * z)[:, None]
        cursor[idx] += 1
        if not np.isfinite(new).all():
            bad = ~np.isfinite(new).reshape(idx.size, -1).all(axis=1)
            raise IntegrationError(t_cur[idx][bad].min() + dt[bad].min())
        states[idx] = new
        if record_path:
            for j, i in enumerate(idx):
                if dt[j] > 0:
                    rec[i]["t"].append(t_cur[i] + dt[j])
                    rec[i]["x"].append(new[j].copy())

    n_grid = int(math.ceil(until.max() / config.step_h - 1e-12)) if n else 0
    for j in range(n_grid):
        t_tgt = np.minimum((j + 1) * config.step_h, until)
        while True:
            et = ev_t[rows, ptr]
            due = np.flatnonzero(et <= t_tgt)
            if due.size == 0:
                break
            advance(due, et[due] - t_cur[due])
            t_cur[due] = et[due]
            kinds = ev_k[due, ptr[due]]
            sizes = ev_s[due, ptr[due]]
            slots = ev_slot[due, ptr[due]]

            jmp = kinds != _OBS
            if jmp.any():
                jd = due[jmp]
                pre = states[jd].copy()
                samp = kinds[jmp] == _SAMPLED
                if coupler is not None and samp.any():
                    for i in jd[samp]:
                        k = ptr[i]
                        xx, yy, co = coupler(rngs[i], states[i, 0, 0], states[i, 1, 0])
                        states[i, 0, 0] = xx
                        states[i, 1, 0] = yy
                        coalesced[i, ev_slot[i, k]] = co
                    plain = jd[~samp]
                    states[plain, :, 0] += sizes[jmp][~samp][:, None]
                else:
                    states[jd, :, 0] += sizes[jmp][:, None]
                    if c == 2:
                        sd = jd[samp]
                        coalesced[sd, slots[jmp][samp]] = states[sd, 0, 0] == states[sd, 1, 0]
                sd = jd[samp]
                sl = slots[jmp][samp]
                chain[sd, sl] = states[sd]
                pre_jump[sd, sl] = pre[samp]
                chain_times[sd, sl] = t_cur[sd]
                if record_path:
                    for q, i in enumerate(jd):
                        r = rec[i]
                        if r["t"][-1] != t_cur[i]:
                            r["t"].append(t_cur[i])
                            r["x"].append(pre[q].copy())
                        r["marks"].append(len(r["t"]) - 1)
                        r["left"].append(pre[q].copy())
                        r["sizes"].append(states[i, :, 0] - pre[q][:, 0])
                        r["x"][-1] = states[i].copy()
            ob = ~jmp
            if ob.any():
                od = due[ob]
                obs[od, slots[ob]] = states[od]
            ptr[due] += 1
        act = np.flatnonzero(t_cur < t_tgt)
        advance(act, t_tgt[act] - t_cur[act])
        t_cur[act] = t_tgt[act]

    paths = None
    if record_path:
        paths = []
        for r in rec:
            per_copy = []
            X = np.array(r["x"])
            L = np.array(r["left"]).reshape(-1, c, 2)
            S = np.array(r["sizes"]).reshape(-1, c)
            for q in range(c):
                per_copy.append(CadlagPath(np.array(r["t"]), X[:, q], np.array(r["marks"], dtype=np.int64),
                                           S[:, q], L[:, q]))
            paths.append(per_copy)
    return BatchResult(chain, chain_times, coalesced, pre_jump, obs, paths)


def integrate(config: ModelConfig, x0, stream_or_noise, small_noise=None, until: float | None = None,
              *, with_convolution: bool = True) -> CadlagPath:
    """Integrate one trajectory driven by a realized noise.

    ``stream_or_noise`` is either a full :class:`NoiseRealization` or a bare
    :class:`JumpStream`; in the latter case ``small_noise`` must be a
    ``NoiseRealization`` supplying the small-jump part, or ``None`` for no
    small noise. All large jumps, including those inside waiting windows, are
    applied.

    With ``with_convolution`` the returned path carries ``|C(t)|`` where ``C``
    solves the same equation with ``F = 0`` and ``C(0) = 0``.
    """
    if isinstance(stream_or_noise, NoiseRealization):
        noise = stream_or_noise
    else:
        stream = stream_or_noise
        if small_noise is None:
            noise = NoiseRealization(stream, np.empty(0), np.empty(0),
                                     np.zeros(int(math.ceil(stream.horizon / config.step_h)) + 2 * stream.times.size + 8), 0.0)
        else:
            noise = NoiseRealization(stream, small_noise.inner_times, small_noise.inner_sizes,
                                     small_noise.normals, small_noise.variance_rate)
    if until is None:
        until = noise.horizon
    if until > noise.horizon + 1e-12:
        raise ValueError("until exceeds the noise horizon")
    x0 = np.asarray(x0, dtype=float).reshape(1, 2)
    copies = np.vstack([x0, np.zeros((1, 2))]) if with_convolution else x0
    mask = [True, False] if with_convolution else None
    res = simulate_batch(config, copies, [noise], until=until, drift_mask=mask, record_path=True)
    path = res.paths[0][0]
    if with_convolution:
        path.convolution = np.abs(res.paths[0][1].states[:, 0])
    return path


def check_apriori_bound(path: CadlagPath, config: ModelConfig, conv_bound=None, slack: float = 0.0):
    """Check ``|X(t)| <= e^{-l1 t}|x| + sqrt(2) ||F||_0 (1-e^{-l1 t})/l1 + |C(t)| + slack``.

    Also checks the per-coordinate version
    ``|X_i(t)| <= e^{-l_i t}|x_i| + ||F||_0 (1-e^{-l_i t})/l_i + |C_i(t)| + slack``.

    Returns ``(True, None)`` or ``(False, index_of_first_violation)``.
    """
    conv = path.convolution if conv_bound is None else conv_bound
    conv = np.zeros(path.times.size) if conv is None else np.broadcast_to(np.asarray(conv, float), path.times.shape)
    t = path.times
    x0 = path.states[0]
    l1, l2 = config.lambda1, config.lambda2
    F0 = config.drift.F0_bound
    decay1 = -np.expm1(-l1 * t) / l1
    bound = np.exp(-l1 * t) * math.hypot(x0[0], x0[1]) + math.sqrt(2.0) * F0 * decay1 + conv + slack
    norm = np.hypot(path.states[:, 0], path.states[:, 1])
    ok = norm <= bound * (1 + 1e-12)
    b1 = np.exp(-l1 * t) * abs(x0[0]) + F0 * decay1 + conv + slack
    b2 = np.exp(-l2 * t) * abs(x0[1]) + F0 * (-np.expm1(-l2 * t) / l2) + slack
    ok &= np.abs(path.states[:, 0]) <= b1 * (1 + 1e-12)
    ok &= np.abs(path.states[:, 1]) <= b2 * (1 + 1e-12)
    if ok.all():
        return True, None
    return False, int(np.flatnonzero(~ok)[0])
