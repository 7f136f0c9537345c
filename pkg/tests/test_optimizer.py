from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gensemcom.channel import ChannelState, InfeasibleChannelError
from gensemcom.gsm import CoderProfile
from gensemcom.optimizer import (REPORT_COLUMNS, EvalOracle, NoFeasibleProfileError,
                                 OptimizerConfig, effective_penalty, estimate_gradient,
                                 grid_search, optimize_threshold, penalty_objective, report_csv,
                                 select_profile, zo_estimates)

B0 = 1e5
T_MAX = 0.02
PROFILES = [CoderProfile(i, r, p) for i, (r, p) in
            enumerate(zip([1.0, 0.8, 0.6, 0.45, 0.3, 0.2], [40, 37.5, 35, 32.5, 30, 28]))]
ONE = CoderProfile(0, 1.0, 40.0)


def _capacity(budget_bits):
    return budget_bits / T_MAX


def _linear_oracle(size=1, exact=False):
    grads = dict(gvif_grad=lambda p, a: -1.0, bits_grad=lambda p, a: -B0) if exact else {}
    return EvalOracle.analytic(lambda p, a: 1 - a, lambda p, a: B0 * (1 - a), size, **grads)


# name -> (gvif, bits, budget, d0)
FAMILIES = {
    "mid_rate": (lambda p, a: p.shrink_ratio ** 0.5 * (1 - a),
                 lambda p, a: B0 * p.shrink_ratio * (1 - a) + 0.9 * B0 * p.shrink_ratio ** 2,
                 0.5 * B0, None),
    "slack": (lambda p, a: p.shrink_ratio ** 0.5 * (1 - a),
              lambda p, a: B0 * p.shrink_ratio * (1 - a), 2 * B0, None),
    "quadratic": (lambda p, a: p.shrink_ratio ** 0.4 * (1 - a * a),
                  lambda p, a: B0 * p.shrink_ratio * (1 - a) ** 2 + 0.05 * B0, 0.3 * B0, None),
    "distortion_bound": (lambda p, a: p.shrink_ratio ** 0.5 * (1 - a),
                         lambda p, a: B0 * p.shrink_ratio * (1 - a), 0.35 * B0, 34.0),
    "concave_rate": (lambda p, a: p.shrink_ratio ** 0.3 * np.sqrt(1 - a),
                     lambda p, a: B0 * p.shrink_ratio * np.sqrt(1 - a / 1.2), 0.5 * B0, None),
}


class TestConfig:
    def test_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.smoothing, cfg.tol, cfg.max_iters, cfg.batch_size) == (0.01, 1e-3, 200, 8)
        assert cfg.alpha0 == 0.5 and cfg.alpha_th <= 1

    @pytest.mark.parametrize("bad", [dict(step=0), dict(smoothing=-1), dict(alpha_th=1.5),
                                     dict(batch_size=0), dict(estimator="sgd"),
                                     dict(alpha0=0.9, alpha_th=0.8)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


class TestObjective:
    def test_normalized_penalty(self):
        cfg = OptimizerConfig(penalty=100.0, t_max=0.02)
        assert effective_penalty(1e6, cfg) == pytest.approx(100.0 / 2e4 ** 2)
        assert effective_penalty(1e6, replace(cfg, normalize_penalty=False)) == 100.0

    def test_objective_values(self):
        cfg = OptimizerConfig(penalty=100.0, t_max=0.02)
        assert penalty_objective(0.3, 0.7, 1e4, 1e6, cfg) == -0.7
        # 10% over a 20000-bit budget costs 100 * 0.1^2
        assert penalty_objective(0.3, 0.7, 2.2e4, 1e6, cfg) == pytest.approx(-0.7 + 1.0)
        with pytest.raises(InfeasibleChannelError):
            penalty_objective(0.3, 0.7, 1e4, 0.0, cfg)


class TestZeroOrderEstimator:
    def test_constant_function_gives_zero(self):
        m = np.random.default_rng(0).uniform(-1, 1, 1000)
        assert np.all(zo_estimates(lambda a: np.full_like(a, 3.0), 0.4, 0.01, m) == 0.0)

    def test_quadratic_calibration(self):
        m = np.random.default_rng(1).uniform(-1, 1, 100_000)
        mean = zo_estimates(lambda a: a ** 2, 1.0, 1e-4, m).mean()
        assert mean == pytest.approx(2.0 / 3.0, rel=0.02)

    def test_sign_agreement_on_monotone_quadratics(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a, b = rng.uniform(-2, 2), rng.uniform(-2, 2)
            alpha = rng.uniform(0.05, 0.75)
            slope = 2 * a * alpha + b
            if abs(slope) < 0.05:
                continue
            m = rng.uniform(-1, 1, 20_000)
            est = zo_estimates(lambda x: a * x ** 2 + b * x, alpha, 1e-3, m).mean()
            assert np.sign(est) == np.sign(slope)

    def test_batch_estimate_uses_shared_perturbation(self):
        o = _linear_oracle(size=4)
        cfg = OptimizerConfig(smoothing=0.01)
        est = estimate_gradient(0.2, np.arange(4), ONE, o, cfg, 1e9, np.random.default_rng(3))
        m = np.random.default_rng(3).uniform(-1, 1)
        assert est.grad_gvif == pytest.approx(-m * m, rel=1e-9)
        assert est.excess < 0 and est.grad_objective == pytest.approx(m * m, rel=1e-9)

    def test_exact_estimator(self):
        cfg = OptimizerConfig(estimator="exact")
        est = estimate_gradient(0.2, np.arange(1), ONE, _linear_oracle(exact=True), cfg, 1e9,
                                np.random.default_rng(0))
        assert (est.grad_gvif, est.grad_bits) == (-1.0, -B0)
        with pytest.raises(ValueError):
            estimate_gradient(0.2, np.arange(1), ONE, _linear_oracle(), cfg, 1e9,
                              np.random.default_rng(0))


class TestOptimizeThreshold:
    def test_stationary_point(self):
        o = EvalOracle.analytic(lambda p, a: 0.6, lambda p, a: 0.2 * B0)
        res = optimize_threshold(ONE, o, _capacity(B0))
        assert res.alpha == 0.5 and res.converged

    @pytest.mark.parametrize("seed", range(10))
    def test_linear_family_constraint_boundary(self, seed):
        res = optimize_threshold(ONE, _linear_oracle(), _capacity(B0 / 2),
                                 OptimizerConfig(seed=seed))
        assert abs(res.alpha - 0.5) < 0.02

    def test_linear_family_penalized_optimum_exact_gradient(self):
        # curvature of the objective is 1600, so a 1e-3 step is a contraction
        cfg = OptimizerConfig(estimator="exact", step=1e-3, tol=1e-12, max_iters=2000)
        res = optimize_threshold(ONE, _linear_oracle(exact=True), _capacity(B0 / 2), cfg)
        # d/da [-(1 - a) + p (1 - 2a)^2] = 0  ->  a = 1/2 - 1/(8p)
        assert res.alpha == pytest.approx(0.5 - 1 / (8 * cfg.penalty), abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_slack_budget_goes_to_zero(self, seed):
        res = optimize_threshold(ONE, _linear_oracle(), _capacity(2 * B0),
                                 OptimizerConfig(seed=seed))
        assert res.alpha < 0.02

    def test_monotone_trace_with_exact_gradients(self):
        cfg = OptimizerConfig(estimator="exact")
        o = EvalOracle.analytic(lambda p, a: 1 - a ** 0.8, lambda p, a: 3 * B0 * (1 - a / 0.8) ** 2
                                + 0.01 * B0, gvif_grad=lambda p, a: -0.8 * max(a, 1e-9) ** -0.2,
                                bits_grad=lambda p, a: -7.5 * B0 * (1 - a / 0.8))
        res = optimize_threshold(ONE, o, _capacity(B0 / 2), cfg)
        objectives = [t.objective for t in res.trace]
        assert all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 3.0), st.floats(0.1, 3.0), st.integers(0, 1000))
    def test_iterates_stay_in_box(self, budget_frac, exponent, seed):
        o = EvalOracle.analytic(lambda p, a: 1 - min(max(a, 0.0), 1.0) ** exponent,
                                lambda p, a: B0 * (1 - a))
        cfg = OptimizerConfig(seed=seed, max_iters=60)
        res = optimize_threshold(ONE, o, _capacity(budget_frac * B0), cfg)
        assert all(0.0 <= t.alpha <= cfg.alpha_th for t in res.trace)
        assert 0.0 <= res.alpha <= cfg.alpha_th

    def test_zero_capacity(self):
        with pytest.raises(InfeasibleChannelError):
            optimize_threshold(ONE, _linear_oracle(), ChannelState(0.0))

    def test_deterministic(self):
        o = _linear_oracle(size=20)
        a = optimize_threshold(ONE, o, _capacity(B0 / 2), OptimizerConfig(seed=4))
        b = optimize_threshold(ONE, o, _capacity(B0 / 2), OptimizerConfig(seed=4))
        assert a.alpha == b.alpha and a.trace == b.trace


class TestSelectProfile:
    def test_single_profile(self):
        sel = select_profile([ONE], _linear_oracle(), _capacity(B0 / 2))
        assert sel.profile == ONE and abs(sel.alpha - 0.5) < 0.02

    def test_distortion_filter(self):
        low = CoderProfile(1, 0.5, 25.0)
        o = EvalOracle.analytic(lambda p, a: p.shrink_ratio * (1 - a), lambda p, a: 10.0)
        sel = select_profile([low, ONE], o, _capacity(B0), OptimizerConfig(d0=30.0))
        assert sel.profile == ONE
        assert {x.profile_id: x.reason for x in sel.outcomes}[1] == "distortion"

    def test_no_admissible_profile_names_d0(self):
        with pytest.raises(NoFeasibleProfileError, match="D0 = 45"):
            select_profile(PROFILES, _linear_oracle(), _capacity(B0), OptimizerConfig(d0=45.0))

    def test_latency_infeasible(self):
        o = EvalOracle.analytic(lambda p, a: 1 - a, lambda p, a: 10 * B0)
        with pytest.raises(NoFeasibleProfileError) as err:
            select_profile(PROFILES, o, _capacity(B0))
        assert all(not x.feasible for x in err.value.outcomes)

    def test_tie_goes_to_lower_rate(self):
        o = EvalOracle.analytic(lambda p, a: 0.5, lambda p, a: B0 * p.shrink_ratio)
        sel = select_profile(PROFILES, o, _capacity(2 * B0))
        assert sel.profile.id == 5

    @pytest.mark.parametrize("name", sorted(FAMILIES))
    def test_matches_grid_search(self, name):
        gvif, bits, budget, d0 = FAMILIES[name]
        o = EvalOracle.analytic(gvif, bits, size=16)
        cfg = OptimizerConfig(d0=d0, t_max=T_MAX)
        sel = select_profile(PROFILES, o, _capacity(budget), cfg)
        best, alpha, value = grid_search(PROFILES, o, _capacity(budget), cfg)
        assert sel.profile.id == best.id
        assert abs(sel.alpha - alpha) <= 0.02
        assert sel.outcome.expected_gvif == pytest.approx(value, abs=0.01)

    def test_mid_rate_family_excludes_high_rates(self):
        gvif, bits, budget, _ = FAMILIES["mid_rate"]
        for p in PROFILES[:2]:
            assert bits(p, 0.8) > budget
        sel = select_profile(PROFILES, EvalOracle.analytic(gvif, bits), _capacity(budget))
        assert sel.profile.id not in (0, 1, 5)

    def test_report_csv(self):
        sel = select_profile(PROFILES[:2], _linear_oracle(), _capacity(B0 / 2))
        lines = report_csv(sel.outcomes).splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert len(lines) == 3 and lines[1].startswith("0,")
