"""Non-linear off-policy TDC: the two time-scale update, schedules and runners.

The runner advances a batch of independent seeds in lockstep. Each seed owns
its generators (stopping index, initialization, samples, variance draws), so a
seed's trajectory does not depend on which other seeds share the batch.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .approx import Approximator
from .diagnostics import RunRecord, _variance_pair, stochastic_updates
from .errors import InvalidArgument, NumericalBlowup
from .mdp import PolicyPair, TabularMdp, Transition, draw, inverse_cdf
from .mspbe import ConstantsLedger, GroundTruth, ground_truth, td_terms

REGIMES = ("iid", "markov")
BLOCK = 4096


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes fixed for a whole run.

    ``constant``: ``alpha = alpha0``, ``beta = beta0``.
    ``power``: ``alpha = alpha0 / T**a``, ``beta = beta0 / T**b`` with
    ``1/2 <= a <= 1`` and ``0 < b <= a``.
    """

    kind: str
    alpha0: float
    beta0: float
    a: float = 0.5
    b: float = 0.5
    T: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise InvalidArgument("alpha0 and beta0 must be positive")
        if self.kind == "power":
            if not 0.5 <= self.a <= 1:
                raise InvalidArgument("power schedule needs 1/2 <= a <= 1")
            if not 0 < self.b <= self.a:
                raise InvalidArgument("power schedule needs 0 < b <= a")
        if self.T is not None and int(self.T) < 1:
            raise InvalidArgument("T must be >= 1")

    def with_horizon(self, T: int) -> "StepSchedule":
        return replace(self, T=int(T))

    def _horizon(self) -> int:
        if self.T is None:
            raise InvalidArgument("a power schedule needs the horizon T")
        return int(self.T)

    @property
    def alpha(self) -> float:
        return self.alpha0 if self.kind == "constant" else self.alpha0 / self._horizon() ** self.a

    @property
    def beta(self) -> float:
        return self.beta0 if self.kind == "constant" else self.beta0 / self._horizon() ** self.b

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha0": self.alpha0, "beta0": self.beta0, "a": self.a, "b": self.b, "T": self.T}


@dataclass
class TdcState:
    theta: np.ndarray
    omega: np.ndarray
    t: int = 0
    markov_state: int | None = None


def project_ball(v, radius):
    """Euclidean projection onto the ball of the given radius (``None``: identity)."""
    v = np.asarray(v, dtype=float)
    if radius is None:
        return v
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(norm > radius, radius / np.where(norm > 0, norm, 1.0), 1.0)
    return v * scale if v.ndim else v


def _update(theta, omega, phi_s, phi_next, hess_omega_s, rd, rho, gamma, alpha, beta, R_omega):
    """Batched TDC update from pre-update ``(theta, omega)``; rows are independent."""
    phi_w = np.einsum("bi,bi->b", phi_s, omega)
    h = (rd - phi_w)[:, None] * hess_omega_s
    omega_new = project_ball(omega + beta * (rd - phi_w)[:, None] * phi_s, R_omega)
    theta_new = theta + alpha * (
        rd[:, None] * phi_s - (gamma * rho * phi_w)[:, None] * phi_next - h
    )
    return theta_new, omega_new


def tdc_step(
    state: TdcState,
    transition: Transition,
    spec: Approximator,
    pair: PolicyPair,
    alpha: float,
    beta: float,
    R_omega: float | None,
    gamma: float,
) -> TdcState:
    """One TDC update on a single transition; raises on a non-finite result."""
    theta = np.asarray(state.theta, dtype=float)
    omega = np.asarray(state.omega, dtype=float)
    s, a, r, s_next = transition
    V, phi, hess_omega = spec.evaluate_hvp(theta, omega)
    rho = pair.rho[s, a]
    rd = rho * (r + gamma * V[s_next] - V[s])
    with np.errstate(over="ignore", invalid="ignore"):
        theta_new, omega_new = _update(
            theta[None], omega[None], phi[None, s], phi[None, s_next], hess_omega[None, s],
            np.array([rd]), np.array([rho]), gamma, alpha, beta, R_omega,
        )
    if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(omega_new))):
        raise NumericalBlowup(state.t, np.linalg.norm(theta), np.linalg.norm(omega))
    return TdcState(theta_new[0], omega_new[0], state.t + 1, s_next)


@dataclass(frozen=True, eq=False)
class TdcProblem:
    """Everything a run needs apart from the seed."""

    mdp: TabularMdp
    pair: PolicyPair
    spec: Approximator
    schedule: StepSchedule
    regime: str = "iid"
    R_omega: float | None = None
    eps_reg: float = 1e-8
    cadence: int | None = None
    variance_samples: int = 0
    ledger: ConstantsLedger | None = None
    tau_beta: int | None = None
    acknowledge_infeasible: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidArgument(f"regime must be one of {REGIMES}")
        if self.schedule.T is None:
            raise InvalidArgument("the schedule must carry the horizon T")
        if self.spec.n_states != self.mdp.n_states:
            raise InvalidArgument("approximator and MDP disagree on the number of states")
        if self.R_omega is not None and not self.R_omega > 0:
            raise InvalidArgument("R_omega must be positive or None")
        if self.cadence is not None and self.cadence < 1:
            raise InvalidArgument("cadence must be >= 1")
        if self.variance_samples < 0:
            raise InvalidArgument("variance_samples must be >= 0")

    @property
    def T(self) -> int:
        return int(self.schedule.T)

    @property
    def record_every(self) -> int:
        return self.cadence or max(1, math.ceil(self.T / 500))

    @cached_property
    def ground_truth(self) -> GroundTruth:
        return ground_truth(self.mdp, self.pair, self.eps_reg)

    def with_horizon(self, T: int) -> "TdcProblem":
        return replace(self, schedule=self.schedule.with_horizon(T))

    def validate(self):
        """Raise unless the schedule is admissible or explicitly acknowledged."""
        if self.acknowledge_infeasible:
            return
        if self.regime == "markov" and self.schedule.alpha > self.schedule.beta:
            raise InvalidArgument("the Markov regime requires alpha <= beta")
        if self.ledger is not None:
            report = check_feasibility(self.ledger, self.schedule, self.tau_beta)
            if not report.passed(self.regime):
                failing = ", ".join(c.name for c in report.failing(self.regime))
                raise InvalidArgument(f"step sizes violate feasibility conditions: {failing}")


class EnsembleResult(NamedTuple):
    seeds: list
    records: list

    @property
    def failures(self) -> list:
        return [(r.seed, r.failure) for r in self.records if r.failure is not None]

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([r.theta_final for r in self.records])


def _seed_streams(seed: int):
    children = np.random.SeedSequence(int(seed)).spawn(4)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def _simulate(problem: TdcProblem, seeds: Sequence[int], mode: str, hook: Callable | None) -> list:
    if mode not in ("randomized", "full"):
        raise InvalidArgument("mode must be 'randomized' or 'full'")
    mdp, pair, spec = problem.mdp, problem.pair, problem.spec
    gt = problem.ground_truth
    T, N, B = problem.T, spec.param_dim, len(seeds)
    alpha, beta, gamma = problem.schedule.alpha, problem.schedule.beta, mdp.gamma
    R = problem.R_omega
    iid = problem.regime == "iid"
    n_u = 3 if iid else 2

    streams = [_seed_streams(s) for s in seeds]
    if mode == "randomized":
        W = np.array([int(st[0].integers(0, T)) for st in streams])
    else:
        W = np.full(B, T)
    mu_cdf = inverse_cdf(gt.mu_b)
    theta = np.empty((B, N))
    state = np.zeros(B, dtype=int)
    for i, st in enumerate(streams):
        theta[i] = st[1].uniform(-0.5, 0.5, N)
        state[i] = int(draw(mu_cdf, np.array(st[1].random())))
    omega = np.zeros((B, N))
    if R is not None:
        omega = project_ball(omega, R)

    cdf_a, cdf_next = pair.behavior.cdf, mdp.next_state_cdf
    every = problem.record_every
    logs = [{k: [] for k in ("t", "J", "g", "z", "w", "vp", "vc")} for _ in range(B)]
    failure = [None] * B
    steps = np.zeros(B, dtype=int)
    end = int(W.max())
    u_block = None

    def record(t, rows):
        terms = td_terms(mdp, pair, spec, theta[rows], gt)
        grad = terms.gradient
        # iterates just before a blow-up may overflow the squared norms to inf
        with np.errstate(over="ignore"):
            tracking = np.sum((omega[rows] - terms.omega) ** 2, axis=-1)
            grad_sq = np.einsum("bi,bi->b", grad, grad)
        if problem.variance_samples:
            G_tables = stochastic_updates(theta[rows], omega[rows], mdp, pair, spec)
        for j, i in enumerate(rows):
            log = logs[i]
            log["t"].append(t)
            log["J"].append(float(terms.J[j]))
            log["g"].append(float(grad_sq[j]))
            log["z"].append(float(tracking[j]))
            log["w"].append(float(np.linalg.norm(omega[i])))
            if problem.variance_samples:
                u = streams[i][3].random((problem.variance_samples, 3))
                est = _variance_pair(G_tables[j], grad[j], mu_cdf, cdf_a, cdf_next, u)
                log["vp"].append(est.vs_grad)
                log["vc"].append(est.centered)

    alive = np.ones(B, dtype=bool)
    for t in range(end + 1):
        due = alive & (t <= W) & ((t % every == 0) | (t == W))
        if due.any():
            record(t, np.flatnonzero(due))
        if t == end:
            break
        if t % BLOCK == 0:
            u_block = np.stack([st[2].random((BLOCK, n_u)) for st in streams])
        idx = np.flatnonzero(alive & (t < W))
        if idx.size == 0:
            break
        u = u_block[idx, t % BLOCK]
        if iid:
            s = draw(mu_cdf, u[:, 0])
            ua, un = u[:, 1], u[:, 2]
        else:
            s = state[idx]
            ua, un = u[:, 0], u[:, 1]
        a = draw(cdf_a[s], ua)
        s_next = draw(cdf_next[s, a], un)

        th, om = theta[idx], omega[idx]
        V, phi, hess_omega = spec.evaluate_hvp(th, om)
        rows = np.arange(idx.size)
        rho = pair.rho[s, a]
        delta = mdp.reward[s, a, s_next] + gamma * V[rows, s_next] - V[rows, s]
        with np.errstate(over="ignore", invalid="ignore"):
            th_new, om_new = _update(
                th, om, phi[rows, s], phi[rows, s_next], hess_omega[rows, s],
                rho * delta, rho, gamma, alpha, beta, R,
            )
        finite = np.isfinite(th_new).all(axis=1) & np.isfinite(om_new).all(axis=1)
        if not finite.all():
            for j in np.flatnonzero(~finite):
                i = idx[j]
                failure[i] = {
                    "t": t,
                    "theta_norm": float(np.linalg.norm(theta[i])),
                    "omega_norm": float(np.linalg.norm(omega[i])),
                }
                alive[i] = False
            idx, th_new, om_new, s_next = idx[finite], th_new[finite], om_new[finite], s_next[finite]
        theta[idx] = th_new
        omega[idx] = om_new
        state[idx] = s_next
        steps[idx] += 1
        if hook is not None:
            hook(t + 1, theta, omega, idx)

    records = []
    for i, seed in enumerate(seeds):
        log = logs[i]
        n = len(log["t"])
        records.append(
            RunRecord(
                seed=int(seed),
                t=np.array(log["t"], dtype=int),
                J=np.array(log["J"]),
                grad_norm_sq=np.array(log["g"]),
                tracking_err_sq=np.array(log["z"]),
                omega_norm=np.array(log["w"]),
                alpha=np.full(n, alpha),
                beta=np.full(n, beta),
                var_vs_grad=np.array(log["vp"]) if problem.variance_samples else None,
                var_centered=np.array(log["vc"]) if problem.variance_samples else None,
                W=int(W[i]),
                steps_run=int(steps[i]),
                theta_final=theta[i].copy(),
                omega_final=omega[i].copy(),
                failure=failure[i],
            )
        )
    return records


def _simulate_chunk(args):
    problem, seeds, mode = args
    return _simulate(problem, seeds, mode, None)


def run_ensemble(
    problem: TdcProblem,
    seeds: Sequence[int],
    mode: str = "full",
    jobs: int = 1,
    hook: Callable | None = None,
) -> EnsembleResult:
    """Run every seed; blow-ups are recorded per seed instead of raised.

    ``mode="randomized"`` stops seed ``i`` after its own ``W_i`` steps;
    ``mode="full"`` runs all ``T`` steps. ``jobs > 1`` spreads seeds over
    worker processes (the hook is only supported in-process).
    """
    problem.validate()
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise InvalidArgument("need at least one seed")
    if jobs <= 1 or len(seeds) == 1 or hook is not None:
        return EnsembleResult(seeds, _simulate(problem, seeds, mode, hook))
    jobs = min(jobs, len(seeds))
    chunks = [seeds[k::jobs] for k in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_simulate_chunk, [(problem, c, mode) for c in chunks]))
    by_seed = {rec.seed: rec for part in parts for rec in part}
    return EnsembleResult(seeds, [by_seed[s] for s in seeds])


def run_tdc(
    mdp: TabularMdp,
    pair: PolicyPair,
    spec: Approximator,
    schedule: StepSchedule,
    regime: str,
    T: int,
    seed: int,
    diagnostics_hook: Callable | None = None,
    *,
    mode: str = "randomized",
    **options,
):
    """Single seeded run; returns ``(theta_W, record)``.

    ``W ~ Uniform{0, ..., T-1}`` is drawn before the loop, which then executes
    exactly ``W`` updates. Extra keyword options are :class:`TdcProblem` fields.
    """
    problem = TdcProblem(mdp, pair, spec, schedule.with_horizon(T), regime, **options)
    problem.validate()
    (record,) = _simulate(problem, [int(seed)], mode, diagnostics_hook)
    if record.failure is not None:
        f = record.failure
        raise NumericalBlowup(f["t"], f["theta_norm"], f["omega_norm"], seed=int(seed))
    return record.theta_final, record


@dataclass(frozen=True)
class Condition:
    name: str
    value: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.value

    @property
    def passed(self) -> bool:
        return self.margin >= 0

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "bound": self.bound, "margin": self.margin, "passed": self.passed}


@dataclass(frozen=True)
class FeasibilityReport:
    conditions: list = field(default_factory=list)

    def get(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def failing(self, regime: str) -> list:
        return [c for c in self.conditions if c.name.startswith(regime) and not c.passed]

    def passed(self, regime: str) -> bool:
        return not self.failing(regime)

    def to_dict(self) -> dict:
        return {"conditions": [c.to_dict() for c in self.conditions]}


def iid_q(ledger: ConstantsLedger, alpha: float, beta: float) -> float:
    """Contraction factor of the tracking-error recursion in the i.i.d. analysis."""
    base = ledger.base
    L_w, L_g, C_g, D_w = ledger.L_omega, ledger.L_g, ledger.C_g, ledger.D_omega
    return (
        2 * beta * base.lambda_v
        - 4 * beta**2 * base.C_phi**2
        - 4 * alpha**2 * L_w**2 * L_g**2
        - 2 * alpha * L_w * L_g
        - alpha * L_w
        - 8 * alpha**2 * C_g * L_g * D_w
    )


def check_feasibility(ledger: ConstantsLedger, schedule: StepSchedule, tau_beta: int | None = None) -> FeasibilityReport:
    """Evaluate the step-size conditions; each margin is ``bound - value``."""
    base = ledger.base
    alpha, beta = schedule.alpha, schedule.beta
    lam, C_phi = base.lambda_v, base.C_phi
    L_w, L_g, C_g, D_w = ledger.L_omega, ledger.L_g, ledger.C_g, ledger.D_omega
    conds = [
        Condition("iid_beta", beta, min(1.0, lam / (4 * C_phi**2))),
        Condition(
            "iid_ratio",
            alpha / beta,
            min(1.0, lam / (4 * L_w**2 * L_g**2 + 2 * L_w * L_g + L_w + 8 * C_g * L_g * D_w)),
        ),
    ]
    q = iid_q(ledger, alpha, beta)
    conds.append(Condition("iid_q_positive", -q, 0.0))
    if tau_beta is not None:
        conds.append(Condition("markov_mixing", beta * tau_beta * C_phi**2, 0.25))
    conds.append(
        Condition(
            "markov_ratio",
            alpha / q if q > 0 else math.inf,
            min(1.0, 1.0 / (4 * L_g**2 * L_w)) if L_g > 0 and L_w > 0 else 1.0,
        )
    )
    return FeasibilityReport(conds)
