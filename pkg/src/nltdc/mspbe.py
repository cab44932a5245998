"""Exact MSPBE quantities over the behavior stationary distribution.

All expectations are finite sums over ``(s, a, s')`` weighted by
``w = mu_b(s) pi_b(a|s) P(s'|s,a)``. Functions accept a single parameter
vector or a batch ``(..., N)``; every returned array carries the same
leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .approx import Approximator, estimate_bounds
from .errors import AssumptionViolation, InvalidArgument
from .mdp import PolicyPair, TabularMdp, stationary_distribution

RANK_TOL = 1e-13


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Behavior-stationary weights plus the reductions the TD terms need."""

    mu_b: np.ndarray
    weights: np.ndarray
    rho: np.ndarray
    gamma: float
    eps_reg: float
    # sum_a w rho, indexed [s, s']
    k_rho: np.ndarray
    # sum_{a,s'} w rho
    m_rho: np.ndarray
    # sum_{a,s'} w rho r
    r_rho: np.ndarray


def ground_truth(mdp: TabularMdp, pair: PolicyPair, eps_reg: float = 1e-8) -> GroundTruth:
    if eps_reg < 0:
        raise InvalidArgument("eps_reg must be nonnegative")
    if pair.target.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidArgument("policy shape does not match the MDP")
    mu = stationary_distribution(mdp, pair.behavior)
    w = mu[:, None, None] * pair.behavior.probs[:, :, None] * mdp.transition
    w_rho = w * pair.rho[:, :, None]
    return GroundTruth(
        mu_b=mu,
        weights=w,
        rho=pair.rho,
        gamma=float(mdp.gamma),
        eps_reg=float(eps_reg),
        k_rho=w_rho.sum(axis=1),
        m_rho=w_rho.sum(axis=(1, 2)),
        r_rho=(w_rho * mdp.reward).sum(axis=(1, 2)),
    )


def _solve(M, y, eps_reg: float, rank_tol: float = RANK_TOL):
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    uy = np.einsum("...si,...s->...i", U, y)
    if eps_reg > 0:
        coef = sv / (sv * sv + eps_reg) * uy
        degenerate = np.zeros(M.shape[:-2], dtype=bool)
    else:
        keep = sv > rank_tol * sv[..., :1]
        coef = np.where(keep, uy / np.where(keep, sv, 1.0), 0.0)
        degenerate = keep.sum(axis=-1) < M.shape[-1]
    omega = np.einsum("...ij,...i->...j", Vt, coef)
    # M omega and b . omega, formed without omega, which can be huge when M is ill conditioned
    fitted = np.einsum("...si,...i->...s", U, sv * coef)
    J = np.einsum("...i,...i->...", sv * coef, uy)
    return omega, degenerate, J, fitted


def solve_omega(M, y, eps_reg: float, rank_tol: float = RANK_TOL):
    """Solve ``(M^T M + eps I) omega = M^T y`` through the SVD of ``M``.

    With ``A = M^T M`` and ``b = M^T y`` this is the (regularized) normal
    equation for ``omega``. Working on ``M`` keeps its conditioning instead of
    squaring it. When ``eps = 0`` singular values below ``rank_tol`` times the
    largest are dropped, giving the minimum-norm solution. Returns
    ``(omega, degenerate)``; ``degenerate`` marks a pseudo-solve with
    ``rank(M) < N``.
    """
    omega, degenerate, _, _ = _solve(np.asarray(M, dtype=float), np.asarray(y, dtype=float), eps_reg, rank_tol)
    return omega, degenerate


def smallest_eigenvalue(M, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Smallest nonzero eigenvalue of ``M^T M``, read off the singular values of ``M``."""
    sv = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    keep = sv > rank_tol * sv[..., :1]
    return np.where(keep, sv * sv, np.inf).min(axis=-1)


@dataclass(frozen=True, eq=False)
class TdTerms:
    values: np.ndarray
    grads: np.ndarray
    # sum_{a,s'} w rho delta, per state
    c: np.ndarray
    expected_rdphi: np.ndarray
    A_theta: np.ndarray
    cross: np.ndarray
    omega: np.ndarray
    degenerate: np.ndarray
    h_bar: np.ndarray
    gamma: float
    eps_reg: float
    # D^{1/2} phi and D^{-1/2} c, so that A = M^T M and b = M^T y
    M: np.ndarray
    y: np.ndarray
    J: np.ndarray
    # phi(s)^T omega per state
    phi_omega: np.ndarray
    cross_omega: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        return -2.0 * (self.expected_rdphi - self.h_bar - self.gamma * self.cross_omega)


def td_terms(
    mdp: TabularMdp,
    pair: PolicyPair,
    spec: Approximator,
    theta,
    gt: GroundTruth,
    eps_reg: float | None = None,
) -> TdTerms:
    """Exact weighted TD quantities at ``theta`` (single or batched)."""
    if spec.n_states != mdp.n_states:
        raise InvalidArgument(f"approximator covers {spec.n_states} states, MDP has {mdp.n_states}")
    eps = gt.eps_reg if eps_reg is None else float(eps_reg)
    V, phi, _ = spec.evaluate_grad(theta)
    c = gt.r_rho + gt.gamma * np.einsum("st,...t->...s", gt.k_rho, V) - gt.m_rho * V
    b = np.einsum("...s,...si->...i", c, phi)
    A = np.einsum("s,...si,...sj->...ij", gt.mu_b, phi, phi)
    cross = np.einsum("st,...ti,...sj->...ij", gt.k_rho, phi, phi)
    root = np.sqrt(gt.mu_b)
    M = root[:, None] * phi
    y = np.divide(c, root, out=np.zeros_like(c), where=root > 0)
    omega, degenerate, J, fitted = _solve(M, y, eps)
    inv_root = np.divide(1.0, root, out=np.zeros_like(root), where=root > 0)
    phi_omega = fitted * inv_root
    # E[(rho delta - phi^T omega) | s] mu_b(s), from the least-squares residual
    residual = root * (y - fitted)
    hess_omega = spec.evaluate_hvp(theta, omega).hessians
    h_bar = np.einsum("...s,...si->...i", residual, hess_omega)
    cross_omega = np.einsum("st,...ti,...s->...i", gt.k_rho, phi, phi_omega)
    return TdTerms(
        V, phi, c, b, A, cross, omega, degenerate, h_bar, gt.gamma, eps,
        M, y, J, phi_omega, cross_omega,
    )


def omega_star(terms: TdTerms, eps_reg: float | None = None):
    """``omega(theta)``; returns ``(omega, degenerate)``."""
    if eps_reg is None or eps_reg == terms.eps_reg:
        return terms.omega, terms.degenerate
    return solve_omega(terms.M, terms.y, eps_reg)


def mspbe_value(terms: TdTerms, eps_reg: float | None = None):
    """``J = b^T omega``, evaluated in the singular basis for stability."""
    if eps_reg is None or eps_reg == terms.eps_reg:
        J = terms.J
    else:
        J = _solve(terms.M, terms.y, eps_reg)[2]
    return float(J) if np.ndim(J) == 0 else J


def mspbe_gradient(mdp, pair, spec, theta, gt: GroundTruth, eps_reg: float | None = None) -> np.ndarray:
    return td_terms(mdp, pair, spec, theta, gt, eps_reg).gradient


@dataclass(frozen=True)
class BaseConstants:
    C_v: float
    C_phi: float
    D_v: float
    L_V: float
    lambda_v: float
    rho_max: float
    r_max: float
    gamma: float


@dataclass(frozen=True)
class ConstantsLedger:
    base: BaseConstants
    R_omega: float
    L_omega: float
    D_omega: float
    L_J: float
    L_g: float
    C_g: float
    b_max: float
    C_g1: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = asdict(self.base)
        return d


def constants_ledger(base: BaseConstants) -> ConstantsLedger:
    C_v, C_phi, D_v, L_V = base.C_v, base.C_phi, base.D_v, base.L_V
    lam, rho, r, g = base.lambda_v, base.rho_max, base.r_max, base.gamma
    if not lam > 0:
        raise AssumptionViolation(f"lambda_v must be positive, got {lam}")
    # bound on |delta|
    G = r + (1 + g) * C_v
    R_omega = rho * C_phi / lam * G
    L_omega = ((1 + g) * C_phi**2 + G * D_v) / lam + 2 * C_phi**2 * D_v / lam**2 * G
    D_omega = (
        ((C_phi * L_V + 2 * D_v**2 + D_v * C_phi) / lam**2 + 8 * C_phi**2 * D_v**2 / lam**3)
        * C_phi * (r + C_v + g * C_v)
        + 4 * C_phi * D_v / lam**2 * (C_phi**2 * (1 + g) + D_v * G)
        + (3 * C_phi * D_v * (1 + g) + L_V * G) / lam
    )
    L_J = (
        2 * ((1 + g) * C_phi**2 + G * D_v)
        + 2 * g * (C_phi**2 * L_omega + 2 * D_v * C_phi**2 / lam * G)
        + 2 * (
            (D_v * R_omega + C_phi * L_omega + (1 + g) * C_phi) * D_v * R_omega
            + (R_omega * L_V + D_v * L_omega) * (G + C_phi * R_omega)
        )
    )
    L_g = D_v * (2 * C_phi * R_omega + rho * (r + C_v + g * C_v)) + g * rho * C_phi**2
    C_g = (
        rho * C_phi * G
        + g * rho * R_omega * C_phi**2
        + D_v * R_omega * (R_omega * C_phi + rho * (r + C_v + g * C_v))
    )
    b_max = C_phi**2 * R_omega + rho * C_phi * (r + C_v + g * C_v)
    C_g1 = (C_phi**3 / lam * G + rho * C_phi * G) ** 2
    return ConstantsLedger(base, R_omega, L_omega, D_omega, L_J, L_g, C_g, b_max, C_g1)


def estimate_base_constants(
    mdp: TabularMdp,
    pair: PolicyPair,
    spec: Approximator,
    gt: GroundTruth,
    thetas,
    lipschitz_points: int | None = None,
) -> BaseConstants:
    """Base constants estimated over a set of parameter vectors."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    bounds = estimate_bounds(spec, thetas, lipschitz_points=lipschitz_points)
    terms = td_terms(mdp, pair, spec, thetas, gt)
    lam = float(smallest_eigenvalue(terms.M).min())
    return BaseConstants(
        C_v=bounds.C_v,
        C_phi=bounds.C_phi,
        D_v=bounds.D_v,
        L_V=bounds.L_V,
        lambda_v=lam,
        rho_max=float(pair.rho_max),
        r_max=float(mdp.r_max),
        gamma=float(mdp.gamma),
    )


class ProbeReport(NamedTuple):
    ledger: ConstantsLedger
    n_pairs: int
    n_skipped: int
    max_omega_quotient: float
    max_grad_quotient: float
    omega_violations: list
    grad_violations: list

    @property
    def ok(self) -> bool:
        return not self.omega_violations and not self.grad_violations

    def to_dict(self) -> dict:
        return {
            "ledger": self.ledger.to_dict(),
            "n_pairs": self.n_pairs,
            "n_skipped": self.n_skipped,
            "max_omega_quotient": self.max_omega_quotient,
            "max_grad_quotient": self.max_grad_quotient,
            "omega_violations": self.omega_violations,
            "grad_violations": self.grad_violations,
        }


def lipschitz_probe(spec, mdp, pair, gt: GroundTruth, pairs_of_theta) -> ProbeReport:
    """Compare empirical Lipschitz quotients of omega and grad J with the ledger.

    Ledger inputs are estimated over the same parameter vectors the pairs use.
    Violations are collected as ``(pair index, quotient)`` rather than raised.
    """
    pairs = np.asarray(pairs_of_theta, dtype=float)
    if pairs.ndim == 2:
        pairs = pairs[..., None]
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise InvalidArgument("pairs_of_theta must have shape (n, 2, N)")
    flat = pairs.reshape(-1, pairs.shape[-1])
    ledger = constants_ledger(estimate_base_constants(mdp, pair, spec, gt, flat))
    terms = td_terms(mdp, pair, spec, pairs, gt)
    dist = np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=-1)
    keep = dist > 0
    d_omega = np.linalg.norm(terms.omega[:, 0] - terms.omega[:, 1], axis=-1)
    grad = terms.gradient
    d_grad = np.linalg.norm(grad[:, 0] - grad[:, 1], axis=-1)
    q_omega = np.where(keep, d_omega / np.where(keep, dist, 1.0), 0.0)
    q_grad = np.where(keep, d_grad / np.where(keep, dist, 1.0), 0.0)
    omega_bad = [(int(i), float(q_omega[i])) for i in np.flatnonzero(keep & (q_omega > ledger.L_omega))]
    grad_bad = [(int(i), float(q_grad[i])) for i in np.flatnonzero(keep & (q_grad > ledger.L_J))]
    return ProbeReport(
        ledger,
        int(keep.sum()),
        int((~keep).sum()),
        float(q_omega.max(initial=0.0)),
        float(q_grad.max(initial=0.0)),
        omega_bad,
        grad_bad,
    )


def fd_gradient(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def relative_error(analytic, reference, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    return float(np.linalg.norm(analytic - reference) / max(np.linalg.norm(analytic), floor))


def is_finite_ledger(ledger: ConstantsLedger) -> bool:
    return all(math.isfinite(v) for k, v in asdict(ledger).items() if k != "base")
