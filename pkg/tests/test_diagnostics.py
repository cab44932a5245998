import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nltdc import approx
from nltdc.approx import LinearSpec, SpiralSpec
from nltdc.diagnostics import (
    CSV_HEADER,
    RunRecord,
    exact_variance,
    fit_power_law,
    fit_rate,
    nearest_rank,
    read_csv,
    stochastic_updates,
    summarize_ensemble,
    tracking_error,
    variance_estimate,
)
from nltdc.errors import InvalidArgument
from nltdc.mdp import Policy, PolicyPair, TabularMdp, garnet, garnet_policies, make_rng, spiral_mdp
from nltdc.mspbe import ground_truth, td_terms
from nltdc.tdc import StepSchedule, TdcProblem, TdcState, run_ensemble


def record(values, seed=0, t=None):
    v = np.asarray(values, dtype=float)
    t = np.arange(v.size) if t is None else np.asarray(t)
    z = np.zeros(v.size)
    return RunRecord(seed, t, z, v, z, z, z + 0.1, z + 0.2)


def spiral():
    mdp, pair = spiral_mdp()
    return mdp, pair, SpiralSpec(**approx.SPIRAL_SETS[1]), ground_truth(mdp, pair)


def zero_problem():
    base = garnet(4, 2, 3, 2)
    mdp = TabularMdp(base.transition, np.zeros_like(base.reward), base.gamma)
    pair = garnet_policies(4, 2, 2)
    spec = LinearSpec(np.zeros((4, 3)))
    return mdp, pair, spec, ground_truth(mdp, pair)


class TestRecordCsv:
    def test_round_trip(self, tmp_path):
        rec = record([1.5, 2.25, 1e-300], t=[0, 5, 10])
        rec.var_vs_grad = np.array([0.1, 0.2, 0.3])
        rec.var_centered = np.array([0.4, 0.5, 0.6])
        path = tmp_path / "r.csv"
        text = rec.to_csv(path)
        assert text.splitlines()[0] == CSV_HEADER
        assert text.splitlines()[1].split(",") == [
            "t", "J", "grad_norm_sq", "tracking_err_sq", "alpha", "beta", "omega_norm", "var_vs_grad", "var_centered",
        ]
        back = read_csv(path)
        for name, col in rec.columns().items():
            np.testing.assert_array_equal(back[name], col)

    def test_variance_columns_omitted(self):
        assert "var_vs_grad" not in record([1.0]).to_csv()

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,J\n0,1\n")
        with pytest.raises(InvalidArgument):
            read_csv(path)


class TestTrackingError:
    def test_zero_at_solution(self):
        mdp, pair, spec, gt = spiral()
        theta = np.array([0.4])
        omega = td_terms(mdp, pair, spec, theta, gt).omega
        assert tracking_error(TdcState(theta, omega), gt, spec, mdp, pair) <= 1e-20

    def test_zero_family_is_omega_norm(self):
        mdp, pair, spec, gt = zero_problem()
        omega = np.array([0.3, -1.0, 2.0])
        err = tracking_error(TdcState(np.ones(3), omega), gt, spec, mdp, pair)
        assert err == pytest.approx(omega @ omega, rel=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-2, 2))
    def test_zero_iff_at_solution(self, theta, shift):
        mdp, pair, spec, gt = spiral()
        omega = td_terms(mdp, pair, spec, np.array([theta]), gt).omega
        err = tracking_error(TdcState(np.array([theta]), omega + shift), gt, spec, mdp, pair)
        assert err == pytest.approx(shift**2, rel=1e-9, abs=1e-20)


class TestVariance:
    def test_zero_family(self):
        mdp, pair, spec, gt = zero_problem()
        est = variance_estimate(np.ones(3), np.zeros(3), mdp, pair, spec, gt, 50, make_rng(0))
        assert est == 0.0

    def test_single_support(self):
        # one state, one action, self-loop: every draw is the same transition
        mdp = TabularMdp(np.ones((1, 1, 1)), np.full((1, 1, 1), 0.7), 0.5)
        pair = PolicyPair.on_policy(Policy(np.ones((1, 1))))
        spec = LinearSpec(np.array([[1.0, 2.0]]))
        gt = ground_truth(mdp, pair)
        theta = np.array([0.3, -0.1])
        terms = td_terms(mdp, pair, spec, theta, gt)
        G = stochastic_updates(theta, terms.omega, mdp, pair, spec)[0, 0, 0]
        bias = float(np.sum((G - terms.gradient) ** 2))
        for seed in range(3):
            est = variance_estimate(theta, terms.omega, mdp, pair, spec, gt, 7, make_rng(seed))
            assert est == pytest.approx(bias, rel=1e-12)

    def test_mean_of_G_is_half_negative_gradient(self):
        mdp, pair = garnet(4, 2, 3, 5), garnet_policies(4, 2, 5)
        spec = LinearSpec(make_rng(5).standard_normal((4, 3)))
        gt = ground_truth(mdp, pair, eps_reg=0.0)
        theta = make_rng(6).standard_normal(3)
        terms = td_terms(mdp, pair, spec, theta, gt, eps_reg=0.0)
        G = stochastic_updates(theta, terms.omega, mdp, pair, spec)
        mean = np.einsum("sat,sati->i", gt.weights, G)
        np.testing.assert_allclose(mean, -0.5 * terms.gradient, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("centered", [False, True])
    def test_spiral_within_three_sigma(self, centered):
        mdp, pair, spec, gt = spiral()
        theta, omega = np.array([0.8]), np.array([0.05])
        exact = exact_variance(theta, omega, mdp, pair, spec, gt, centered)
        terms = td_terms(mdp, pair, spec, theta, gt)
        target = -0.5 * terms.gradient if centered else terms.gradient
        dev = np.sum((stochastic_updates(theta, omega, mdp, pair, spec) - target) ** 2, axis=-1)
        sd = math.sqrt(float(np.sum(gt.weights * (dev - exact) ** 2)))
        for n in (10, 100, 1000):
            est = variance_estimate(theta, omega, mdp, pair, spec, gt, n, make_rng(n), centered)
            assert abs(est - exact) <= 3 * sd / math.sqrt(n)
        est = variance_estimate(theta, omega, mdp, pair, spec, gt, 500, make_rng(1), centered)
        assert abs(est - exact) <= 3 * sd / math.sqrt(500)

    def test_needs_a_trajectory(self):
        mdp, pair, spec, gt = spiral()
        with pytest.raises(InvalidArgument):
            variance_estimate(np.zeros(1), np.zeros(1), mdp, pair, spec, gt, 0, make_rng(0))


class TestSummary:
    def test_single_record(self):
        s = summarize_ensemble([record([1.0, 3.0])])
        assert s.mean.tolist() == s.p5.tolist() == s.p95.tolist() == [1.0, 3.0]
        assert s.n_seeds == 1

    def test_two_constant_records(self):
        s = summarize_ensemble([record([0.0, 0.0]), record([1.0, 1.0])])
        assert s.mean.tolist() == [0.5, 0.5]
        assert s.p5.tolist() == [0.0, 0.0] and s.p95.tolist() == [1.0, 1.0]

    def test_nearest_rank(self):
        v = np.arange(1.0, 41.0)
        assert nearest_rank(v, 5) == 2.0 and nearest_rank(v, 95) == 38.0
        assert nearest_rank(v, 0) == 1.0 and nearest_rank(v, 100) == 40.0

    def test_grid_mismatch(self):
        with pytest.raises(InvalidArgument):
            summarize_ensemble([record([1.0, 2.0]), record([1.0, 2.0], t=[0, 2])])
        with pytest.raises(InvalidArgument):
            summarize_ensemble([])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_envelope_and_permutation(self, n, seed):
        rng = make_rng(seed)
        recs = [record(rng.exponential(size=6), seed=i) for i in range(n)]
        s = summarize_ensemble(recs)
        assert np.all(s.p5 <= s.mean + 1e-15) and np.all(s.mean <= s.p95 + 1e-15)
        perm = summarize_ensemble([recs[i] for i in rng.permutation(n)])
        np.testing.assert_array_equal(perm.p5, s.p5)
        np.testing.assert_array_equal(perm.p95, s.p95)
        np.testing.assert_allclose(perm.mean, s.mean, rtol=1e-14)

    def test_spiral_ensemble_envelope(self):
        mdp, pair, spec, _ = spiral()
        p = TdcProblem(mdp, pair, spec, StepSchedule("constant", 0.01, 0.05, T=2000), "markov", cadence=50)
        recs = run_ensemble(p, range(40)).records
        s = summarize_ensemble(recs)
        assert s.n_seeds == 40
        assert np.all(s.p5 <= s.mean) and np.all(s.mean <= s.p95)
        assert s.to_csv().splitlines()[1] == "t,mean,p5,p95"


class TestRateFit:
    def test_exact_power_law(self):
        T = np.array([1e3, 4e3, 1.6e4, 1e5])
        fit = fit_power_law(T, 3.7 / np.sqrt(T))
        assert abs(fit.slope + 0.5) <= 1e-12
        assert fit.intercept == pytest.approx(math.log(3.7), abs=1e-10)

    def test_log_factor(self):
        T = np.geomspace(1e3, 1e5, 5)
        fit = fit_power_law(T, np.log(T) / np.sqrt(T))
        assert -0.5 < fit.slope < -0.3

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2, 0), st.floats(0.01, 100))
    def test_recovers_exponent(self, k, c):
        T = np.array([100.0, 1000.0, 5000.0, 2e4])
        assert fit_power_law(T, c * T**k).slope == pytest.approx(k, abs=1e-10)

    @pytest.mark.parametrize(
        "T, v", [([1, 2], [1, 1]), ([1, 3, 2], [1, 1, 1]), ([1, 2, 2], [1, 1, 1]), ([1, 2, 3], [1, 1])]
    )
    def test_invalid(self, T, v):
        with pytest.raises(InvalidArgument):
            fit_power_law(T, v)

    def test_rate_preconditions(self):
        mdp, pair, spec, _ = spiral()
        p = TdcProblem(mdp, pair, spec, StepSchedule("power", 1.0, 5.0, T=10), "iid")
        with pytest.raises(InvalidArgument):
            fit_rate([10, 20], 2, p)
        with pytest.raises(InvalidArgument):
            fit_rate([10, 30, 20], 2, p)
        with pytest.raises(InvalidArgument):
            fit_rate([10, 20, 30], 2, p, estimator="median")
        q = TdcProblem(mdp, pair, spec, StepSchedule("power", 1.0, 5.0, a=0.75, T=10), "iid")
        with pytest.raises(InvalidArgument, match="a = b = 1/2"):
            fit_rate([10, 20, 30], 2, q)

    @pytest.mark.parametrize("estimator", ["averaged", "sampled"])
    def test_rate_runs(self, estimator):
        mdp, pair, spec, _ = spiral()
        p = TdcProblem(mdp, pair, spec, StepSchedule("power", 1.0, 5.0, T=10), "iid")
        fit = fit_rate([50, 100, 200], 4, p, estimator=estimator)
        assert fit.n_success == [4, 4, 4] and fit.flagged == []
        assert math.isfinite(fit.slope)
        assert len(fit.to_csv().splitlines()) == 5
