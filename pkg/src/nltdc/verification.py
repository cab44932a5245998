"""Verification suites: finite-difference gradients, constants ledger and mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import approx
from .mdp import (
    estimate_mixing,
    garnet,
    garnet_features,
    garnet_policies,
    make_rng,
    mixing_time,
    spiral_mdp,
    stationary_distribution,
    state_transition_matrix,
)
from .mspbe import (
    BaseConstants,
    constants_ledger,
    estimate_base_constants,
    fd_gradient,
    ground_truth,
    is_finite_ledger,
    lipschitz_probe,
    relative_error,
    td_terms,
)
from .tdc import StepSchedule, check_feasibility

SUITES = ("grad", "constants", "mixing")
MIXING_BETAS = (0.1, 0.05, 0.01)


@dataclass(frozen=True)
class Check:
    """One verified quantity; it passes when ``value <= bound``."""

    suite: str
    case: str
    value: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.value

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.margin >= 0)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "case": self.case,
            "value": self.value,
            "bound": self.bound,
            "margin": self.margin,
            "passed": self.passed,
        }


def format_table(checks) -> str:
    rows = [("suite", "case", "value", "bound", "margin", "status")]
    for c in checks:
        rows.append((c.suite, c.case, f"{c.value:.3e}", f"{c.bound:.3e}", f"{c.margin:.3e}", "ok" if c.passed else "FAIL"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


# --------------------------------------------------------------------------
# test problems


def keystone_problems(seed: int = 0) -> dict:
    """The three families: linear on G(3,2,3), spiral, and the MLP on G(5,2,5)."""
    rng = make_rng([seed, 11])
    lin_mdp = garnet(3, 2, 3, seed)
    lin_spec = approx.LinearSpec(rng.standard_normal((3, 2)))
    sp_mdp, sp_pair = spiral_mdp()
    mlp_mdp = garnet(5, 2, 5, seed)
    mlp_spec = approx.MLPSpec((1, 2, 2, 3, 1), garnet_features(5, seed))
    return {
        "linear/garnet(3,2,3)": (lin_mdp, garnet_policies(3, 2, seed), lin_spec, 1.0),
        "spiral": (sp_mdp, sp_pair, approx.SpiralSpec(**approx.SPIRAL_SETS[1]), 3.0),
        "mlp/garnet(5,2,5)": (mlp_mdp, garnet_policies(5, 2, seed), mlp_spec, 1.0),
    }


def _thetas(rng, spec, scale: float, n: int) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(n, spec.param_dim))


# --------------------------------------------------------------------------
# grad


def approximator_fd_errors(spec, thetas, states, h: float = 1e-5) -> tuple[float, float]:
    """Worst relative errors of the analytic gradient and Hessian of V(s)."""
    worst_g = worst_h = 0.0
    for theta, s in zip(thetas, states):
        _, grads, hess = spec.evaluate_all(theta)
        g_fd = fd_gradient(lambda th: spec.evaluate_all(th).values[s], theta, h)
        h_fd = np.stack(
            [fd_gradient(lambda th, j=j: spec.evaluate_all(th).grads[s, j], theta, h) for j in range(theta.size)]
        )
        worst_g = max(worst_g, relative_error(grads[s], g_fd))
        worst_h = max(worst_h, relative_error(hess[s], h_fd))
    return worst_g, worst_h


def mspbe_fd_error(mdp, pair, spec, thetas, h: float = 1e-5) -> float:
    """Worst relative error between the analytic and finite-difference gradient of J."""
    gt = ground_truth(mdp, pair, eps_reg=0.0)
    worst = 0.0
    for theta in thetas:
        analytic = td_terms(mdp, pair, spec, theta, gt).gradient
        numeric = fd_gradient(lambda th: float(td_terms(mdp, pair, spec, th, gt).J), theta, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def verify_grad(seed: int = 0, n_theta: int = 20, n_points: int = 50) -> list:
    checks = []
    for name, (mdp, pair, spec, scale) in keystone_problems(seed).items():
        rng = make_rng([seed, 12])
        thetas = _thetas(rng, spec, scale, n_points)
        states = rng.integers(0, spec.n_states, n_points)
        g_err, h_err = approximator_fd_errors(spec, thetas, states)
        checks.append(Check("grad", f"{name} dV FD mismatch", g_err, 1e-5))
        checks.append(Check("grad", f"{name} Hess V FD mismatch", h_err, 1e-4))
        checks.append(
            Check("grad", f"{name} grad J FD mismatch", mspbe_fd_error(mdp, pair, spec, thetas[:n_theta]), 1e-4)
        )
    return checks


# --------------------------------------------------------------------------
# constants


def ledger_oracle(base: BaseConstants) -> dict:
    """Second transcription of the smoothness-constant formulas."""
    Cv, Cp, Dv, LV = base.C_v, base.C_phi, base.D_v, base.L_V
    lam, rho, r, g = base.lambda_v, base.rho_max, base.r_max, base.gamma
    td_bound = r + (1 + g) * Cv
    r_plus = r + Cv + g * Cv
    R = rho * Cp / lam * td_bound
    Lw = ((1 + g) * Cp**2 + td_bound * Dv) / lam + 2 * Cp**2 * Dv / lam**2 * td_bound
    Dw = (
        ((Cp * LV + 2 * Dv**2 + Dv * Cp) / lam**2 + 8 * Cp**2 * Dv**2 / lam**3) * Cp * r_plus
        + 4 * Cp * Dv / lam**2 * (Cp**2 * (1 + g) + Dv * td_bound)
        + (3 * Cp * Dv * (1 + g) + LV * td_bound) / lam
    )
    LJ = (
        2 * ((1 + g) * Cp**2 + td_bound * Dv)
        + 2 * g * (Cp**2 * Lw + 2 * Dv * Cp**2 / lam * td_bound)
        + 2 * ((Dv * R + Cp * Lw + (1 + g) * Cp) * Dv * R + (R * LV + Dv * Lw) * (td_bound + Cp * R))
    )
    return {
        "R_omega": R,
        "L_omega": Lw,
        "D_omega": Dw,
        "L_J": LJ,
        "L_g": Dv * (2 * Cp * R + rho * r_plus) + g * rho * Cp**2,
        "C_g": rho * Cp * td_bound + g * rho * R * Cp**2 + Dv * R * (R * Cp + rho * r_plus),
        "b_max": Cp**2 * R + rho * Cp * r_plus,
        "C_g1": (Cp**3 / lam * td_bound + rho * Cp * td_bound) ** 2,
    }


def oracle_parameter_sets(seed: int = 0, n: int = 5) -> list:
    rng = make_rng([seed, 13])
    out = []
    for _ in range(n):
        u = rng.uniform(0.05, 3.0, size=6)
        out.append(
            BaseConstants(
                C_v=u[0], C_phi=u[1], D_v=u[2], L_V=u[3], lambda_v=u[4] / 3,
                rho_max=1.0 + u[5], r_max=float(rng.uniform(0, 1)), gamma=float(rng.uniform(0.5, 0.99)),
            )
        )
    return out


def worked_feasibility_margin() -> float:
    """Margin of the beta condition at lambda_v = 0.5, C_phi = 1, beta = 0.1."""
    base = BaseConstants(C_v=1.0, C_phi=1.0, D_v=0.1, L_V=0.1, lambda_v=0.5, rho_max=1.0, r_max=0.0, gamma=0.9)
    report = check_feasibility(constants_ledger(base), StepSchedule("constant", 0.01, 0.1))
    return report.get("iid_beta").margin


def omega_bound_ratio(mdp, pair, spec, thetas, eps_reg: float = 1e-8) -> tuple[float, int]:
    """Largest ``|omega(theta)| / R_omega`` and the violation count.

    The ledger is estimated over the same probe set the bound is tested on.
    R_omega does not involve L_V, so its pairwise sweep is kept short.
    """
    gt = ground_truth(mdp, pair, eps_reg)
    ledger = constants_ledger(estimate_base_constants(mdp, pair, spec, gt, thetas, lipschitz_points=100))
    norms = np.linalg.norm(td_terms(mdp, pair, spec, thetas, gt).omega, axis=-1)
    return float(norms.max() / ledger.R_omega), int(np.sum(norms > ledger.R_omega))


def verify_constants(seed: int = 0, n_probe: int = 1000, n_pairs: int = 500) -> list:
    checks = []
    for i, base in enumerate(oracle_parameter_sets(seed)):
        got = constants_ledger(base)
        want = ledger_oracle(base)
        mismatched = sum(getattr(got, k) != v for k, v in want.items())
        checks.append(Check("constants", f"duplicate formulas, set {i}: mismatches", float(mismatched), 0.0))
        checks.append(Check("constants", f"ledger finite, set {i}", 0.0 if is_finite_ledger(got) else 1.0, 0.0))
    margin = worked_feasibility_margin()
    checks.append(Check("constants", "worked beta margin vs 0.025", abs(margin - 0.025), 1e-15))
    rng = make_rng([seed, 14])
    for name, (mdp, pair, spec, scale) in keystone_problems(seed).items():
        thetas = approx.sample_ball(rng, spec.param_dim, scale, n_probe)
        ratio, bad = omega_bound_ratio(mdp, pair, spec, thetas)
        checks.append(Check("constants", f"{name} |omega|/R_omega", ratio, 1.0))
        checks.append(Check("constants", f"{name} omega-bound violations", float(bad), 0.0))
    mdp, pair, spec, scale = keystone_problems(seed)["spiral"]
    pairs = rng.uniform(-scale, scale, size=(n_pairs, 2, 1))
    report = lipschitz_probe(spec, mdp, pair, ground_truth(mdp, pair), pairs)
    checks.append(Check("constants", "spiral omega Lipschitz quotient / L_omega", report.max_omega_quotient / report.ledger.L_omega, 1.0))
    checks.append(Check("constants", "spiral grad J Lipschitz quotient / L_J", report.max_grad_quotient / report.ledger.L_J, 1.0))
    return checks


# --------------------------------------------------------------------------
# mixing


def generated_mdps(seed: int = 0) -> dict:
    out = {"spiral": spiral_mdp()}
    for n_s, n_a, b in ((5, 2, 5), (3, 2, 3), (10, 3, 2), (20, 4, 5)):
        out[f"garnet({n_s},{n_a},{b})"] = (garnet(n_s, n_a, b, seed), garnet_policies(n_s, n_a, seed))
    return out


def stationary_residual(mdp, policy) -> float:
    mu = stationary_distribution(mdp, policy)
    return float(np.abs(mu @ state_transition_matrix(mdp, policy) - mu).sum())


def mixing_table(mdp, policy, horizon: int = 200) -> dict:
    est = estimate_mixing(mdp, policy, horizon)
    tv = np.array([v for _, v in est.tv_series])
    t = np.arange(tv.size)
    return {
        "kappa": est.kappa,
        "m": est.m,
        "domination_gap": float(np.max(tv - est.bound(t))),
        "tau": {beta: mixing_time(est, beta) for beta in MIXING_BETAS},
    }


def verify_mixing(seed: int = 0, horizon: int = 200) -> list:
    checks = []
    for name, (mdp, pair) in generated_mdps(seed).items():
        for role, policy in (("behavior", pair.behavior), ("target", pair.target)):
            checks.append(Check("mixing", f"{name} {role} |mu P - mu|_1", stationary_residual(mdp, policy), 1e-10))
    mdp, pair = spiral_mdp()
    mu = stationary_distribution(mdp, pair.behavior)
    checks.append(Check("mixing", "spiral mu vs uniform", float(np.abs(mu - 1 / 3).max()), 1e-12))
    table = mixing_table(mdp, pair.behavior, horizon)
    checks.append(Check("mixing", "spiral kappa < 1", table["kappa"], math.nextafter(1.0, 0.0)))
    checks.append(Check("mixing", "spiral max(TV - m kappa^t), t <= 200", table["domination_gap"], 0.0))
    taus = [table["tau"][b] for b in MIXING_BETAS]
    for beta, tau in zip(MIXING_BETAS, taus):
        checks.append(Check("mixing", f"spiral tau_beta at beta={beta}", float(tau), float("inf")))
    increases = sum(b < a for a, b in zip(taus, taus[1:]))
    checks.append(Check("mixing", "spiral tau_beta order violations", float(increases), 0.0))
    return checks


def run_suite(scope: str = "all", seed: int = 0) -> list:
    scopes = SUITES if scope == "all" else (scope,)
    runners = {"grad": verify_grad, "constants": verify_constants, "mixing": verify_mixing}
    checks = []
    for name in scopes:
        checks.extend(runners[name](seed=seed))
    return checks
