"""Command-line runner ``lml``.

Every command writes ``<out>/<command>.json`` (and a CSV where it has tabular
data), prints one verdict line per gate and exits with status 0 only if every
gate passed. Status 1 means a gate failed, 2 a bad configuration or argument,
3 a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .coupling import CouplingError, coupled_chains
from .mixing import check_A1, compute_report, estimate_mixing
from .rng import trial_rng
from .sde_core import IntegrationError, ModelConfig, check_apriori_bound, integrate, realize_noise, scheme_slack
from .stopping import (detect_sigma, detect_sigma_bar, detect_sigma_bar_k, detect_sigma_dagger, detect_sigma_hat,
                       detect_sigma_tilde, moment_recursion_q, tail_and_moment)

COMMANDS = ("check-assumptions", "simulate-path", "couple", "stopping", "mixing", "a1-check")
DEFAULT_TRIALS = {"check-assumptions": 0, "simulate-path": 1, "couple": 1000, "stopping": 10000,
                  "mixing": 10000, "a1-check": 100000}
ENV_PREFIX = "LML_"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- serialization

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload: dict) -> None:
    _atomic_write(path, json.dumps(_clean(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, header, rows, meta: dict) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps(_clean(meta), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------- config

def load_config(path: str | None) -> ModelConfig:
    """Read a JSON config; ``None`` or ``"default"`` gives the shipped preset."""
    if path is None or path == "default":
        text = resources.files("levy_mixing_lab").joinpath("presets/preset-default.json").read_text()
        source = "preset-default.json"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        source = path
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    try:
        return ModelConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _pair(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}")
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return np.array(vals)


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file, or 'default' (env LML_CONFIG)")
    common.add_argument("--seed", type=_seed, help="unsigned 64-bit seed (env LML_SEED, default 0)")
    common.add_argument("--trials", type=int, help="number of Monte Carlo trials (env LML_TRIALS)")
    common.add_argument("--out", help="output directory (env LML_OUT, default ./lml-out)")
    common.add_argument("--threads", type=int, help="worker threads (env LML_THREADS, default 1)")

    parser = argparse.ArgumentParser(prog="lml", description="Coupling and mixing lab for SDEs with degenerate stable noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("check-assumptions", parents=[common], help="assumption constants and thresholds")

    p = sub.add_parser("simulate-path", parents=[common], help="one trajectory as CSV")
    p.add_argument("--x0", type=_pair, default=np.array([1.0, 1.0]))
    p.add_argument("--horizon", type=float, help="end time (default: config horizon)")

    p = sub.add_parser("couple", parents=[common], help="coupled chains as CSV")
    p.add_argument("--x", type=_pair, default=np.array([0.5, 0.0]))
    p.add_argument("--y", type=_pair, default=np.array([-0.3, 0.1]))
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--mode", choices=("maximal", "synchronous"), default="maximal")

    p = sub.add_parser("stopping", parents=[common], help="stopping-time tails and moments")
    p.add_argument("--x", type=_pair, default=np.array([0.5, 0.0]))
    p.add_argument("--y", type=_pair, default=np.array([-0.3, 0.1]))
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--vartheta", type=float, help="exponential-moment parameter (default: half the fitted rate)")
    p.add_argument("--boot", type=int, default=1000)

    p = sub.add_parser("mixing", parents=[common], help="coupling decay D(t) and fitted rate")
    p.add_argument("--x", type=_pair, default=np.array([0.6, 0.3]))
    p.add_argument("--y", type=_pair, default=np.array([-0.4, 0.3]))
    p.add_argument("--t-max", type=float, default=30.0)
    p.add_argument("--t-step", type=float, default=0.5)
    p.add_argument("--coupling", choices=("maximal", "synchronous"), default="maximal")
    p.add_argument("--boot", type=int, default=1000)

    p = sub.add_parser("a1-check", parents=[common], help="stochastic convolution vs closed form")
    p.add_argument("--lam", type=float, help="decay rate (default: config lambda1)")
    p.add_argument("--t-grid", type=_floats, default=np.array([1.0, 2.0, 4.0, 8.0]))
    p.add_argument("--scheme", choices=("gaussian", "gaussian+cp", "none"), default="gaussian+cp")
    return parser


def _resolve(args) -> None:
    env = os.environ
    if args.config is None:
        args.config = env.get(ENV_PREFIX + "CONFIG")
    if args.seed is None:
        args.seed = _seed(env.get(ENV_PREFIX + "SEED", "0"))
    if args.trials is None:
        args.trials = int(env[ENV_PREFIX + "TRIALS"]) if ENV_PREFIX + "TRIALS" in env else DEFAULT_TRIALS[args.command]
    if args.out is None:
        args.out = env.get(ENV_PREFIX + "OUT", "lml-out")
    if args.threads is None:
        args.threads = int(env.get(ENV_PREFIX + "THREADS", "1"))
    if args.trials < 0 or args.threads < 1:
        raise ConfigError("--trials must be >= 0 and --threads >= 1")


def _gate(name: str, ok: bool, detail: str = "") -> dict:
    return {"name": name, "pass": bool(ok), "detail": detail}


# ---------------------------------------------------------------- commands

def cmd_check_assumptions(cfg, args, meta):
    rep = compute_report(cfg)
    gates = [
        _gate("A3: beta0 < 2", not rep.A3_marginal, f"beta0={rep.beta0:.6g}"),
        _gate("A4: gamma_K >= 2 beta2 Flip", rep.A4_holds, f"gamma_K={rep.gamma_K:.6g}"),
        _gate("theta < 1/2", rep.theta_below_half, f"theta={rep.theta:.6g}"),
        _gate("d < d_max", rep.d_ok, f"d={cfg.d:.6g} d_max={rep.d_max:.6g}"),
        _gate("T > T0", rep.T_ok, f"T={cfg.T:.6g} T0={rep.T0:.6g}"),
    ]
    return {"report": rep.to_json()}, gates, None


def cmd_simulate_path(cfg, args, meta):
    horizon = cfg.horizon if args.horizon is None else args.horizon
    rng = trial_rng(args.seed, 0)
    noise = realize_noise(cfg, rng, horizon=max(horizon, cfg.T + cfg.step_h))
    path = integrate(cfg, args.x0, noise, until=horizon)
    slack = scheme_slack(cfg, 0.0)
    ok, idx = check_apriori_bound(path, cfg, slack=slack)
    conv = path.convolution
    rows = [row + (c,) for row, c in zip(path.to_csv_rows(), conv)]
    table = (("time", "x1", "x2", "jump_flag", "jump_size", "conv_abs"), rows)
    gates = [_gate("a priori bound", ok, "all grid points" if ok else f"first violation at t={path.times[idx]:.17g}")]
    return {"n_points": int(path.times.size), "n_jumps": int(path.jump_marks.size), "slack": slack}, gates, table


def cmd_couple(cfg, args, meta):
    batch = coupled_chains(cfg, args.x, args.y, args.steps, args.trials, args.seed, mode=args.mode, threads=args.threads)
    honest = bool(np.all(batch.sx[:, :, 0][batch.coalesced] == batch.sy[:, :, 0][batch.coalesced]))
    gates = [_gate("coalesced flag implies equal first coordinates", honest)]
    if np.array_equal(args.x, args.y):
        gates.append(_gate("x = y: every step coalesced", bool(batch.coalesced[:, 1:].all())))
    rows = []
    for i, ch in enumerate(batch):
        rows.extend((i,) + r for r in ch.to_csv_rows())
    header = ("trial", "k", "s_x1", "s_x2", "s_y1", "s_y2", "gap", "delta", "coalesced")
    summary = {"coalescence_rate_by_step": batch.coalesced[:, 1:].mean(axis=0)}
    return summary, gates, (header, rows)


def cmd_stopping(cfg, args, meta):
    n_steps = args.steps
    batch = coupled_chains(cfg, args.x, args.y, n_steps, args.trials, args.seed, threads=args.threads)
    chains = list(batch)
    names = ["sigma_tilde", "sigma", "sigma_hat", "sigma_dagger", "sigma_bar"]
    det = {
        "sigma_tilde": lambda c: detect_sigma_tilde(c, cfg.M),
        "sigma": lambda c: detect_sigma(c, cfg.d),
        "sigma_hat": lambda c: detect_sigma_hat(c),
        "sigma_dagger": lambda c: detect_sigma_dagger(c, cfg.d),
        "sigma_bar": lambda c: detect_sigma_bar(c, cfg.d, cfg.M),
    }
    samples = {k: np.array([det[k](c) for c in chains]) for k in names}
    for k in range(1, args.k_max + 1):
        samples[f"sigma_bar_{k}"] = np.array([detect_sigma_bar_k(c, cfg.d, cfg.M, k) for c in chains])
    summaries = {}
    for name, s in samples.items():
        summ = tail_and_moment(s, args.vartheta, name, horizon=n_steps, n_boot=args.boot, seed=args.seed)
        summaries[name] = summ.to_json()

    n = len(chains)
    q = moment_recursion_q(cfg.gamma_K, cfg.lambda1, cfg.p, cfg.T)
    gates = []
    for name in ("sigma_tilde", "sigma"):
        s = summaries[name]
        r2, rate = s["r_squared"], s["geom_rate"]
        ok = r2 is not None and rate is not None and r2 >= 0.95 and rate > 0
        gates.append(_gate(f"{name} tail log-linear (R2 >= 0.95, negative slope)", ok, f"rate={rate} R2={r2}"))
    rate = summaries["sigma_tilde"]["geom_rate"]
    gates.append(_gate("sigma_tilde rate >= -log q", rate is not None and rate >= -math.log(q),
                       f"rate={rate} -log q={-math.log(q):.6g} (M={cfg.M})"))
    if np.linalg.norm(args.x - args.y) <= cfg.d:
        p_inf = float(np.isinf(samples["sigma_hat"]).mean())
        sd = math.sqrt(0.25 / n)
        gates.append(_gate("P(sigma_hat not triggered) > 1/2 - 3 sd", p_inf > 0.5 - 3 * sd, f"p={p_inf:.6g}"))
    for k in range(1, args.k_max + 1):
        p = float(np.isfinite(samples[f"sigma_bar_{k}"]).mean())
        bound = 2.0**-k
        sd = math.sqrt(bound * (1 - bound) / n)
        gates.append(_gate(f"P(sigma_bar_{k} < inf) <= 2^-{k} + 3 sd", p <= bound + 3 * sd, f"p={p:.6g}"))
    rows = [(i,) + tuple(samples[k][i] for k in samples) for i in range(n)]
    table = (("trial",) + tuple(samples), rows)
    return {"q": q, "summaries": summaries}, gates, table


def cmd_mixing(cfg, args, meta):
    t_grid = np.arange(0.0, args.t_max + 0.5 * args.t_step, args.t_step)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = estimate_mixing(cfg, args.x, args.y, t_grid, args.trials, seed=args.seed, coupling=args.coupling,
                              threads=args.threads, n_boot=args.boot)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    ci = res.c_ci
    ok = math.isfinite(res.c_hat) and res.c_hat > 0 and math.isfinite(ci[0]) and ci[0] > 0
    gates = [_gate("c_hat > 0 with CI excluding 0", ok, f"c_hat={res.c_hat:.6g} ci=({ci[0]:.6g}, {ci[1]:.6g})")]
    return res.to_json(), gates, (("t", "D", "ci_lo", "ci_hi"), list(res.to_csv_rows()))


def cmd_a1_check(cfg, args, meta):
    lam = cfg.lambda1 if args.lam is None else args.lam
    rep = check_A1(cfg.noise, lam, cfg.p, args.t_grid, args.trials, seed=args.seed, scheme=args.scheme,
                   eps_inner=cfg.eps_inner)
    gates = [
        _gate("characteristic function matches closed form", rep.cf_ok),
        _gate("p-th moments match closed form", rep.moments_ok),
        _gate("p-th moments bounded by stationary value", rep.bounded_ok),
        _gate("no growth trend in p-th moment", rep.slope_ok, f"slope CI={tuple(rep.slope_ci)}"),
    ]
    return rep.to_json(), gates, None


HANDLERS = {"check-assumptions": cmd_check_assumptions, "simulate-path": cmd_simulate_path, "couple": cmd_couple,
            "stopping": cmd_stopping, "mixing": cmd_mixing, "a1-check": cmd_a1_check}
OPS = {"check-assumptions": "mixing_verify.compute_report", "simulate-path": "sde_core.integrate",
       "couple": "coupling.coupled_chains", "stopping": "stopping.tail_and_moment",
       "mixing": "mixing_verify.estimate_mixing", "a1-check": "mixing_verify.check_A1"}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve(args)
        cfg = load_config(args.config)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    meta = {"command": args.command, "seed": args.seed, "trials": args.trials, "config": cfg.to_dict(),
            "params": {k: v for k, v in vars(args).items()
                       if k not in ("command", "seed", "trials", "config", "out", "threads")}}
    try:
        result, gates, table = HANDLERS[args.command](cfg, args, meta)
    except (IntegrationError, CouplingError, FloatingPointError, OverflowError) as exc:
        print(f"error: numeric failure in {OPS[args.command]}: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {OPS[args.command]}: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    stem = args.command.replace("-", "_")
    write_json(out / f"{stem}.json", {**meta, "result": result, "gates": gates})
    if table is not None:
        header, rows = table
        write_csv(out / f"{stem}.csv", header, rows, meta)
    for g in gates:
        line = f"[{'PASS' if g['pass'] else 'FAIL'}] {g['name']}"
        print(line + (f"  ({g['detail']})" if g["detail"] else ""))
    return 0 if all(g["pass"] for g in gates) else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
