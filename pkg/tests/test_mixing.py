import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levy_mixing_lab.coupling import l1_shifted
from levy_mixing_lab.mixing import (
    beta0_search,
    check_A1,
    compute_report,
    convolution_scale,
    estimate_mixing,
    sample_convolution,
    stable_abs_moment,
    stable_abs_moment_quad,
    synchronous_pair_suite,
)
from levy_mixing_lab.sde_core import ModelConfig, make_drift
from levy_mixing_lab.stable_noise import StableSpec


def test_report_at_preset(preset):
    r = compute_report(preset)
    assert r.gamma_K == 2.0 and r.beta1 == 8.0 and r.beta2 == 1.0
    assert r.A4_holds and r.T0 == 0.0 and r.T_ok
    assert r.d_max == pytest.approx(1.0 / (32.0 * math.exp(0.5)), rel=1e-12)
    assert r.d_max == pytest.approx(0.018954, abs=1e-6)
    assert r.kappa == pytest.approx(13.1897701656, rel=1e-10)
    assert r.theta == pytest.approx(0.0198019802, rel=1e-8) and r.theta_below_half
    assert r.beta0 == pytest.approx(1.0, abs=1e-6)
    assert abs(r.beta0_argmax[0]) + abs(r.beta0_argmax[1]) <= preset.M + 1e-12
    assert r.failure_threshold == pytest.approx(0.75, abs=1e-6)
    assert not r.A3_marginal and r.d_ok and r.regime_ok
    assert r.expected_delta == pytest.approx(0.0217652973, rel=1e-8)
    js = r.to_json()
    assert js["regime_ok"] is True and isinstance(js["beta0_argmax"], list)


def test_report_is_deterministic(preset):
    assert compute_report(preset) == compute_report(ModelConfig.from_dict(preset.to_dict()))


def test_report_flags(preset):
    r = compute_report(preset.replace(drift=make_drift("sincos", eps=1.5)))
    assert not r.A4_holds and not r.regime_ok and r.expected_delta > r.theta
    assert compute_report(preset.replace(drift=make_drift("sincos", eps=2.5))).expected_delta is None
    r = compute_report(preset.replace(p=1.5, noise=StableSpec(1.9, 1.0, 1.0)))
    assert r.T0 == pytest.approx(0.5 * math.log(3) / 1.5)
    assert r.T_ok  # T = 1 > T0
    assert not compute_report(preset.replace(d=0.05)).d_ok


@pytest.mark.parametrize("M", [0.5, 0.1, 0.01, 1e-4])
def test_beta0_vanishes_with_ball(cauchy, M):
    b0, _ = beta0_search(cauchy, M)
    assert b0 == pytest.approx(2 * M / (1 + M), rel=1e-6)  # 2 TV at shift M, TV(D) = D/(1+D) for D <= 1
    assert beta0_search(cauchy, 0.0)[0] == 0.0


def test_beta0_below_two_for_large_ball(cauchy):
    b0, _ = beta0_search(cauchy, 5.0)
    assert b0 < 2.0


def test_a2_spot_check(cauchy):
    rng = np.random.default_rng(2)
    z = rng.uniform(-3, 3, size=(1000, 2))
    beta1 = 8.0
    for z1, z2 in z:
        assert l1_shifted(cauchy, z1, z2) <= beta1 * abs(z1 - z2) + 1e-9


# E|X|^p for exp(-s|xi|^alpha), frozen from 50-digit mpmath quadrature
MOMENT_ORACLE = [(1.0, 1.0, 0.5, math.sqrt(2)), (math.pi, 1.0, 0.5, 2.506628274631),
                 (2.0, 1.5, 0.7, 1.693685189446786)]


@pytest.mark.parametrize("scale, alpha, p, expected", MOMENT_ORACLE)
def test_stable_abs_moment_routes(scale, alpha, p, expected):
    assert stable_abs_moment(scale, alpha, p) == pytest.approx(expected, rel=1e-11)
    assert stable_abs_moment_quad(scale, alpha, p) == pytest.approx(expected, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.5, 1.9), st.floats(0.05, 0.95))
def test_stable_abs_moment_formula_matches_quadrature(scale, alpha, frac):
    p = frac * alpha * 0.9
    assert stable_abs_moment(scale, alpha, p) == pytest.approx(stable_abs_moment_quad(scale, alpha, p), rel=1e-6)


def test_convolution_scale_limit(cauchy):
    unit = StableSpec.unit_scale(1.0, 1.0)
    assert convolution_scale(unit, 1.0, 60.0) == pytest.approx(1.0, rel=1e-12)
    assert math.exp(-convolution_scale(unit, 1.0, 60.0)) == pytest.approx(0.367879441171442, rel=1e-12)
    assert convolution_scale(cauchy, 2.0, 0.5) == pytest.approx(math.pi * (1 - math.exp(-1.0)) / 2.0)


def test_convolution_sampler_matches_law(cauchy):
    from scipy import stats

    rng = np.random.default_rng(8)
    y = sample_convolution(cauchy, 1.0, 3.0, 40000, rng, scheme="gaussian+cp", eps_inner=0.05)
    s = convolution_scale(cauchy, 1.0, 3.0)
    # KS against the Cauchy law with scale s; the Gaussian stand-in leaves a small bias
    assert stats.kstest(y, stats.cauchy(scale=s).cdf).statistic < 0.01


def test_check_A1_small_run():
    spec = StableSpec.unit_scale(1.0, 1.0)
    rep = check_A1(spec, 1.0, 0.5, [1.0, 2.0, 4.0], 20000, seed=3)
    assert rep.cf_ok and rep.moments_ok and rep.bounded_ok
    zero = [r for r in rep.cf_table if r["xi"] == 0.0]
    assert all(r["ecf_re"] == 1.0 and r["ecf_im"] == 0.0 and r["cf"] == 1.0 for r in zero)
    assert rep.stationary_moment == pytest.approx(math.sqrt(2), rel=1e-12)
    assert rep.stationary_moment_quad == pytest.approx(rep.stationary_moment, rel=1e-8)
    assert rep.to_json()["ok"] == rep.ok


@pytest.mark.parametrize("kw", [dict(p=1.0), dict(p=0.0), dict(lam=0.0), dict(t=[0.0, 1.0])])
def test_check_A1_validation(cauchy, kw):
    args = dict(lam=1.0, p=0.5, t=[1.0], N=10) | kw
    with pytest.raises(ValueError):
        check_A1(cauchy, args["lam"], args["p"], args["t"], args["N"])


def test_mixing_equal_starts_give_zero(preset):
    res = estimate_mixing(preset, [0.3, 0.1], [0.3, 0.1], np.arange(0, 5.5, 0.5), 64, n_boot=0)
    assert np.all(res.D == 0.0)
    assert math.isnan(res.c_hat)


def test_mixing_linear_oracle(preset):
    cfg = preset.replace(drift=make_drift("zero"))
    x, y = np.array([0.6, 0.3]), np.array([-0.4, 0.3])
    t = np.arange(0, 10.5, 0.5)
    res = estimate_mixing(cfg, x, y, t, 32, coupling="synchronous", n_boot=50)
    exact = np.minimum(1.0, np.exp(-t) * 1.0)
    assert np.allclose(res.D, exact, rtol=1e-10, atol=1e-14)
    assert res.c_hat == pytest.approx(1.0, rel=1e-8)
    assert res.r_squared == pytest.approx(1.0, abs=1e-10)
    rows = list(res.to_csv_rows())
    assert len(rows) == t.size and rows[0][0] == 0.0


def test_mixing_labels_regime_and_warns(preset):
    bad = preset.replace(lambda2=1.0)
    with pytest.warns(RuntimeWarning, match="theta"):
        res = estimate_mixing(bad, [0.6, 0.3], [-0.4, 0.3], [0.0, 1.0, 2.0], 16, n_boot=0)
    assert res.regime["theta_below_half"] is False and res.theta >= 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ok = estimate_mixing(preset, [0.6, 0.3], [-0.4, 0.3], [0.0, 1.0, 2.0], 16, n_boot=0)
    assert ok.regime["regime_ok"] is True
    assert set(ok.to_json()) >= {"c_hat", "c_ci", "theta", "regime", "segment"}
    with pytest.raises(ValueError):
        estimate_mixing(preset, [0, 0], [1, 0], [0.0, 1.0], 4, coupling="reflection")


def test_mixing_deterministic_across_threads(preset):
    t = np.arange(0, 4.5, 0.5)
    a = estimate_mixing(preset, [0.6, 0.3], [-0.4, 0.3], t, 60, block=16, threads=1, n_boot=0)
    b = estimate_mixing(preset, [0.6, 0.3], [-0.4, 0.3], t, 60, block=16, threads=3, n_boot=0)
    assert np.array_equal(a.D, b.D)


def test_pair_suite_noise_free_zero_drift(preset):
    cfg = preset.replace(drift=make_drift("zero"))
    rep = synchronous_pair_suite(cfg, 10, noise=False, slack=0.0)
    assert rep.ok
    # without drift the first two bounds are attained at t = 0 and the margin is zero
    assert rep.worst_margin["gronwall"] == pytest.approx(0.0, abs=1e-12)
    assert rep.worst_margin["dissipative"] == pytest.approx(0.0, abs=1e-12)


def test_pair_suite_preset_and_adversarial(preset):
    assert synchronous_pair_suite(preset, 30, seed=4).ok
    strong = preset.replace(drift=make_drift("sincos", eps=5.0))
    rep = synchronous_pair_suite(strong, 20, horizon=1.0, seed=5)  # t * Lip = 5
    assert rep.ok and rep.violations["gronwall"] == 0


def test_pair_suite_detects_broken_bound(preset):
    # understating the Lipschitz constant must break the drift-sensitive second-coordinate check
    from levy_mixing_lab.sde_core import DriftSpec

    real = make_drift("sincos", eps=5.0)
    liar = DriftSpec("liar", real.evaluate, real.F0_bound, 0.01)
    rep = synchronous_pair_suite(preset.replace(drift=liar), 10, horizon=1.0, noise=False, slack=0.0)
    assert not rep.ok and rep.violations["second_coordinate"] > 0


def test_pair_suite_validation(preset):
    with pytest.raises(ValueError):
        synchronous_pair_suite(preset, 0)
