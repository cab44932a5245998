import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from nltdc import approx
from nltdc.approx import LinearSpec, MLPSpec, SpiralSpec, evaluate
from nltdc.errors import InvalidArgument, NumericalBlowup
from nltdc.mdp import Policy, PolicyPair, TabularMdp, Transition, garnet, garnet_features, garnet_policies, make_rng, spiral_mdp
from nltdc.mspbe import BaseConstants, constants_ledger
from nltdc.tdc import (
    BLOCK,
    StepSchedule,
    TdcProblem,
    TdcState,
    _seed_streams,
    check_feasibility,
    project_ball,
    run_ensemble,
    run_tdc,
    tdc_step,
)


def garnet_problem(T=50, regime="iid", **kw):
    mdp = garnet(5, 2, 5, 0)
    pair = garnet_policies(5, 2, 0)
    spec = MLPSpec((1, 2, 2, 3, 1), garnet_features(5, 0))
    sched = StepSchedule("constant", 0.01, 0.05, T=T)
    return TdcProblem(mdp, pair, spec, sched, regime, **kw)


def step_oracle(theta, omega, tr, spec, pair, gamma, alpha, beta, R, omega_for_theta=None):
    """Plain single-transition update with a dense Hessian."""
    s, a, r, s2 = tr
    b_s, b_n = evaluate(spec, theta, s), evaluate(spec, theta, s2)
    rho = pair.rho[s, a]
    delta = r + gamma * b_n.value - b_s.value
    w = omega if omega_for_theta is None else omega_for_theta
    phi_w = b_s.gradient @ w
    h = (rho * delta - phi_w) * (b_s.hessian @ w)
    omega_new = omega + beta * (-(b_s.gradient @ omega) * b_s.gradient + rho * delta * b_s.gradient)
    n = np.linalg.norm(omega_new)
    if R is not None and n > R:
        omega_new = omega_new * R / n
    theta_new = theta + alpha * (rho * delta * b_s.gradient - gamma * rho * b_n.gradient * phi_w - h)
    return theta_new, omega_new


class TestProjectBall:
    @pytest.mark.parametrize(
        "v, r, out", [((3, 4), 10, (3, 4)), ((3, 4), 5, (3, 4)), ((6, 8), 5, (3, 4))]
    )
    def test_examples(self, v, r, out):
        np.testing.assert_allclose(project_ball(np.array(v, float), r), out, rtol=0, atol=1e-15)

    def test_none_is_identity(self):
        v = np.array([1e6, -2.0])
        assert np.array_equal(project_ball(v, None), v)

    @pytest.mark.parametrize("r", [0.0, -1.0])
    def test_nonpositive_radius(self, r):
        with pytest.raises(InvalidArgument):
            project_ball(np.ones(2), r)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6),
        st.floats(1e-3, 1e3),
    )
    def test_inside_and_idempotent(self, v, r):
        p = project_ball(np.array(v), r)
        assert np.linalg.norm(p) <= r * (1 + 1e-12)
        np.testing.assert_allclose(project_ball(p, r), p, rtol=1e-12, atol=0)
        if np.linalg.norm(v) <= r:
            assert np.array_equal(p, np.array(v))

    def test_batched_rows(self):
        v = np.array([[6.0, 8.0], [0.3, 0.4], [0.0, 0.0]])
        np.testing.assert_allclose(project_ball(v, 5), [[3, 4], [0.3, 0.4], [0, 0]])


class TestSchedule:
    def test_constant(self):
        s = StepSchedule("constant", 0.01, 0.05)
        assert (s.alpha, s.beta) == (0.01, 0.05)

    def test_power_fixed_per_horizon(self):
        s = StepSchedule("power", 1.0, 5.0, a=0.75, b=0.5, T=10_000)
        assert s.alpha == pytest.approx(1e-3, rel=1e-12)
        assert s.beta == pytest.approx(0.05, rel=1e-12)
        assert s.with_horizon(100).alpha == pytest.approx(1.0 / 100**0.75, rel=1e-12)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(kind="linear", alpha0=1, beta0=1),
            dict(kind="constant", alpha0=0, beta0=1),
            dict(kind="constant", alpha0=1, beta0=-1),
            dict(kind="power", alpha0=1, beta0=1, a=0.4, b=0.3),
            dict(kind="power", alpha0=1, beta0=1, a=1.1, b=0.5),
            dict(kind="power", alpha0=1, beta0=1, a=0.5, b=0.6),
            dict(kind="power", alpha0=1, beta0=1, a=0.5, b=0.0),
            dict(kind="constant", alpha0=1, beta0=1, T=0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            StepSchedule(**kw)

    def test_power_needs_horizon(self):
        with pytest.raises(InvalidArgument):
            StepSchedule("power", 1.0, 1.0).alpha


class TestStep:
    def test_zero_fixed_point(self):
        mdp = garnet(4, 2, 3, 1)
        mdp = TabularMdp(mdp.transition, np.zeros_like(mdp.reward), mdp.gamma)
        pair = garnet_policies(4, 2, 1)
        spec = LinearSpec(make_rng(0).standard_normal((4, 3)))
        state = TdcState(np.zeros(3), np.zeros(3))
        out = tdc_step(state, Transition(1, 0, 0.0, 2), spec, pair, 0.1, 0.2, 1.0, mdp.gamma)
        assert np.array_equal(out.theta, state.theta) and np.array_equal(out.omega, state.omega)
        assert out.t == 1 and out.markov_state == 2

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_has_no_curvature_term(self, seed):
        rng = make_rng(seed)
        phi = rng.standard_normal((4, 3))
        pair = garnet_policies(4, 2, seed)
        spec = LinearSpec(phi)
        theta, omega = rng.standard_normal(3), rng.standard_normal(3)
        s, a, s2 = rng.integers(0, 4), rng.integers(0, 2), rng.integers(0, 4)
        r, g, alpha = rng.uniform(), 0.9, 0.05
        out = tdc_step(TdcState(theta, omega), Transition(s, a, r, s2), spec, pair, alpha, 0.1, None, g)
        rho = pair.rho[s, a]
        delta = r + g * phi[s2] @ theta - phi[s] @ theta
        expected = theta + alpha * (rho * delta * phi[s] - g * rho * phi[s2] * (phi[s] @ omega))
        np.testing.assert_allclose(out.theta, expected, rtol=1e-12, atol=1e-14)

    def test_projection_halves(self):
        # phi(s) = (1, 0), omega = 0, beta rho delta = 2 R: pre-projection norm 2R
        spec = LinearSpec(np.array([[1.0, 0.0], [0.0, 1.0]]))
        pair = PolicyPair.on_policy(Policy(np.ones((2, 1))))
        R, beta = 0.5, 0.25
        r = 2 * R / beta
        out = tdc_step(TdcState(np.zeros(2), np.zeros(2)), Transition(0, 0, r, 1), spec, pair, 0.0, beta, R, 0.9)
        assert np.linalg.norm(out.omega) == pytest.approx(R, rel=1e-15)
        np.testing.assert_allclose(out.omega, [R, 0.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_dense_oracle(self, seed):
        rng = make_rng(seed)
        mdp, pair = garnet(5, 2, 5, 0), garnet_policies(5, 2, 0)
        spec = MLPSpec((1, 2, 2, 3, 1), garnet_features(5, 0))
        theta, omega = rng.uniform(-1, 1, 23), rng.uniform(-0.3, 0.3, 23)
        s, a, s2 = int(rng.integers(5)), int(rng.integers(2)), int(rng.integers(5))
        tr = Transition(s, a, float(mdp.reward[s, a, s2]), s2)
        R = float(rng.choice([0.1, 10.0]))
        out = tdc_step(TdcState(theta, omega), tr, spec, pair, 0.3, 0.5, R, mdp.gamma)
        th, om = step_oracle(theta, omega, tr, spec, pair, mdp.gamma, 0.3, 0.5, R)
        np.testing.assert_allclose(out.theta, th, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(out.omega, om, rtol=1e-12, atol=1e-14)

    def test_theta_uses_pre_update_omega(self):
        spec = SpiralSpec(**approx.SPIRAL_SETS[1])
        mdp, pair = spiral_mdp()
        theta, omega = np.array([0.7]), np.array([0.4])
        tr = Transition(0, 0, 0.0, 1)
        out = tdc_step(TdcState(theta, omega), tr, spec, pair, 0.5, 0.9, None, mdp.gamma)
        pre, _ = step_oracle(theta, omega, tr, spec, pair, mdp.gamma, 0.5, 0.9, None)
        _, om_new = step_oracle(theta, omega, tr, spec, pair, mdp.gamma, 0.5, 0.9, None)
        post, _ = step_oracle(theta, omega, tr, spec, pair, mdp.gamma, 0.5, 0.9, None, omega_for_theta=om_new)
        assert abs(pre[0] - post[0]) > 1e-3
        assert out.theta[0] == pytest.approx(pre[0], abs=1e-14)

    def test_nonfinite_raises_with_step(self):
        spec = LinearSpec(np.eye(2))
        pair = PolicyPair.on_policy(Policy(np.ones((2, 1))))
        state = TdcState(np.array([1e308, 1e308]), np.zeros(2), t=17)
        with pytest.raises(NumericalBlowup) as info:
            tdc_step(state, Transition(0, 0, 0.0, 1), spec, pair, 1e10, 0.1, None, 0.9)
        assert info.value.t == 17

    def test_single_step_matches_runner(self):
        problem = garnet_problem(T=1, regime="markov", acknowledge_infeasible=True, R_omega=2.0)
        mdp, pair, spec = problem.mdp, problem.pair, problem.spec
        (rec,) = run_ensemble(problem, [5], mode="full").records
        assert rec.steps_run == 1
        st_ = _seed_streams(5)
        theta0 = st_[1].uniform(-0.5, 0.5, 23)
        mu = problem.ground_truth.mu_b
        s = int(np.searchsorted(np.cumsum(mu), st_[1].random(), side="right"))
        u = st_[2].random((BLOCK, 2))[0]
        a = int(np.searchsorted(pair.behavior.cdf[s], u[0], side="right"))
        s2 = int(np.searchsorted(mdp.next_state_cdf[s, a], u[1], side="right"))
        tr = Transition(s, a, float(mdp.reward[s, a, s2]), s2)
        out = tdc_step(TdcState(theta0, np.zeros(23)), tr, spec, pair, 0.01, 0.05, 2.0, mdp.gamma)
        np.testing.assert_allclose(rec.theta_final, out.theta, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(rec.omega_final, out.omega, rtol=1e-13, atol=1e-15)


class TestRunner:
    def test_horizon_one(self):
        p = garnet_problem(T=1)
        theta, rec = run_tdc(p.mdp, p.pair, p.spec, p.schedule, "iid", 1, seed=3, acknowledge_infeasible=True)
        assert rec.W == 0 and rec.steps_run == 0
        np.testing.assert_array_equal(theta, _seed_streams(3)[1].uniform(-0.5, 0.5, 23))
        assert rec.t.tolist() == [0]

    @pytest.mark.parametrize("regime", ["iid", "markov"])
    def test_randomized_runs_exactly_W(self, regime):
        p = garnet_problem(T=40, regime=regime)
        Ws = []
        for seed in range(30):
            calls = []
            _, rec = run_tdc(
                p.mdp, p.pair, p.spec, p.schedule, regime, 40, seed,
                lambda t, th, om, idx: calls.append(t), acknowledge_infeasible=True,
            )
            assert rec.steps_run == rec.W == len(calls)
            assert 0 <= rec.W <= 39
            assert rec.t[-1] == rec.W
            Ws.append(rec.W)
        assert len(set(Ws)) > 10

    def test_full_mode_runs_T(self):
        rec = run_ensemble(garnet_problem(T=30, cadence=7), [0], mode="full").records[0]
        assert rec.steps_run == 30
        assert rec.t.tolist() == [0, 7, 14, 21, 28, 30]

    def test_determinism(self):
        p = garnet_problem(T=60, cadence=1, variance_samples=5)
        a = run_ensemble(p, [11], mode="randomized").records[0]
        b = run_ensemble(p, [11], mode="randomized").records[0]
        assert a.to_csv() == b.to_csv()
        assert np.array_equal(a.theta_final, b.theta_final)

    def test_batch_independence(self):
        p = garnet_problem(T=60, cadence=3, variance_samples=4)
        batch = run_ensemble(p, [1, 2, 3], mode="randomized").records
        alone = run_ensemble(p, [2], mode="randomized").records[0]
        # batched linear algebra may reorder reductions, so agreement is to rounding
        for name, col in alone.columns().items():
            np.testing.assert_allclose(batch[1].columns()[name], col, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(batch[1].theta_final, alone.theta_final, rtol=1e-9, atol=1e-12)
        assert batch[1].W == alone.W

    def test_omega_bound_every_step(self):
        R = 0.05
        p = garnet_problem()
        p = TdcProblem(p.mdp, p.pair, p.spec, StepSchedule("constant", 0.05, 0.5, T=300), "iid", R_omega=R)
        norms = []
        run_ensemble(p, [0, 1], hook=lambda t, th, om, idx: norms.append(np.linalg.norm(om[idx], axis=1).max()))
        assert max(norms) <= R * (1 + 1e-12)
        assert max(norms) == pytest.approx(R, rel=1e-9)

    def test_blowup_raises(self):
        p = garnet_problem()
        with pytest.raises(NumericalBlowup) as info:
            run_tdc(
                p.mdp, p.pair, p.spec, StepSchedule("constant", 1e150, 1e150), "iid", 200, 0,
                mode="full", acknowledge_infeasible=True,
            )
        assert info.value.seed == 0 and 0 <= info.value.t < 200

    def test_blowup_recorded_in_ensemble(self):
        p = garnet_problem()
        p = TdcProblem(p.mdp, p.pair, p.spec, StepSchedule("constant", 1e150, 1e150, T=200), "iid")
        res = run_ensemble(p, [0, 1], mode="full")
        assert len(res.failures) == 2
        assert all(np.isfinite(r.theta_final).all() for r in res.records)

    def test_markov_iid_equivalent_on_iid_chain(self):
        # every row of P equals mu, so consecutive states are independent draws from mu
        mu = np.array([0.2, 0.5, 0.3])
        P = np.broadcast_to(mu, (3, 2, 3)).copy()
        R = make_rng(4).uniform(0, 1, (3, 2, 3))
        mdp = TabularMdp(P, R, 0.9)
        pair = garnet_policies(3, 2, 4)
        spec = MLPSpec((1, 3, 1), garnet_features(3, 4))
        sched = StepSchedule("constant", 0.05, 0.1, T=300)
        finals = {}
        for regime, seeds in (("iid", range(60)), ("markov", range(1000, 1060))):
            problem = TdcProblem(mdp, pair, spec, sched, regime, cadence=300)
            res = run_ensemble(problem, list(seeds), mode="full")
            finals[regime] = [r.grad_norm_sq[-1] for r in res.records]
        assert stats.ks_2samp(finals["iid"], finals["markov"]).pvalue > 0.01

    def test_spiral_gradient_decreases(self):
        mdp, pair = spiral_mdp()
        spec = SpiralSpec(**approx.SPIRAL_SETS[1])
        sched = StepSchedule("constant", 0.01, 0.05, T=20_000)
        res = run_ensemble(TdcProblem(mdp, pair, spec, sched, "markov", cadence=2000), range(10), mode="full")
        g = np.stack([r.grad_norm_sq for r in res.records])
        assert g[:, -1].mean() < g[:, 0].mean()


class TestFeasibility:
    def ledger(self, lam=0.5, C_phi=1.0):
        return constants_ledger(BaseConstants(1.0, C_phi, 0.0, 0.0, lam, 1.0, 1.0, 0.9))

    def test_beta_condition_passes(self):
        rep = check_feasibility(self.ledger(), StepSchedule("constant", 0.01, 0.1))
        c = rep.get("iid_beta")
        assert c.passed and c.margin == pytest.approx(0.025, abs=1e-15)

    def test_beta_condition_fails(self):
        c = check_feasibility(self.ledger(), StepSchedule("constant", 0.01, 0.2)).get("iid_beta")
        assert not c.passed and c.margin == pytest.approx(-0.075, abs=1e-15)

    def test_markov_mixing_fails(self):
        c = check_feasibility(self.ledger(), StepSchedule("constant", 0.01, 0.1), tau_beta=3).get("markov_mixing")
        assert c.value == pytest.approx(0.3) and c.margin == pytest.approx(-0.05, abs=1e-15)
        assert not c.passed

    def test_markov_mixing_absent_without_tau(self):
        with pytest.raises(KeyError):
            check_feasibility(self.ledger(), StepSchedule("constant", 0.01, 0.1)).get("markov_mixing")

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.floats(0.05, 2.0))
    def test_margin_is_bound_minus_value(self, alpha, beta, lam):
        rep = check_feasibility(self.ledger(lam=lam), StepSchedule("constant", alpha, beta), tau_beta=5)
        for c in rep.conditions:
            assert c.margin == c.bound - c.value
            assert c.passed == (c.margin >= 0)

    def test_validate_markov_alpha_above_beta(self):
        p = garnet_problem(regime="markov")
        bad = TdcProblem(p.mdp, p.pair, p.spec, StepSchedule("constant", 0.1, 0.05, T=10), "markov")
        with pytest.raises(InvalidArgument, match="alpha <= beta"):
            bad.validate()
        TdcProblem(p.mdp, p.pair, p.spec, bad.schedule, "iid").validate()
        TdcProblem(p.mdp, p.pair, p.spec, bad.schedule, "markov", acknowledge_infeasible=True).validate()

    def test_validate_uses_ledger(self):
        p = garnet_problem()
        strict = TdcProblem(p.mdp, p.pair, p.spec, StepSchedule("constant", 0.01, 0.2, T=10), "iid", ledger=self.ledger())
        with pytest.raises(InvalidArgument, match="iid_beta"):
            strict.validate()
        with pytest.raises(InvalidArgument):
            run_ensemble(strict, [0])
