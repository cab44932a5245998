"""Finite MDPs, benchmark generators, stationary distributions and mixing.

Everything here is exact linear algebra on small dense tensors. Transition
tensors are indexed ``[s, a, s']`` and policies ``[s, a]``.

Random streams: every stochastic operation takes an explicit
``numpy.random.Generator``. Generators are PCG64 seeded from a
``numpy.random.SeedSequence`` so that identical seeds give bit-identical
MDPs and sample streams.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateChainError, InvalidArgument, NonMixingError

STOCHASTIC_TOL = 1e-12
STATIONARY_TOL = 1e-10


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator seeded through a SeedSequence (accepts ints or int lists)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


def _inverse_cdf_table(probs: np.ndarray) -> np.ndarray:
    """Cumulative sums along the last axis, pinned to exactly 1.0 at the tail.

    Pinning from the last positive entry onward guarantees that a uniform
    draw in [0, 1) never lands on a zero-probability index.
    """
    cdf = np.cumsum(probs, axis=-1)
    flat = cdf.reshape(-1, cdf.shape[-1])
    pflat = probs.reshape(-1, probs.shape[-1])
    for row, prow in zip(flat, pflat):
        last = np.flatnonzero(prow > 0)
        if last.size:
            row[last[-1]:] = 1.0
    cdf.setflags(write=False)
    return cdf


def _draw(cdf_row: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cdf_row, u, side="right"))


@dataclass(frozen=True)
class TabularMdp:
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float | None = None

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvalidArgument(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape == P.shape[:2]:
            R = _frozen(np.broadcast_to(R[:, :, None], P.shape))
        if R.shape != P.shape:
            raise InvalidArgument(f"reward shape {R.shape} does not match transition {P.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise InvalidArgument("transition rows must be nonnegative and sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {self.gamma}")
        r_max = float(R.max()) if self.r_max is None else float(self.r_max)
        if np.any(R < 0) or np.any(R > r_max):
            raise InvalidArgument("rewards must lie in [0, r_max]")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def next_state_cdf(self) -> np.ndarray:
        return _inverse_cdf_table(self.transition)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(np.asarray(d["transition"]), np.asarray(d["reward"]), d["gamma"], d.get("r_max"))
        if mdp.n_states != d.get("n_states", mdp.n_states) or mdp.n_actions != d.get(
            "n_actions", mdp.n_actions
        ):
            raise InvalidArgument("declared n_states/n_actions disagree with tensors")
        return mdp

    def snapshot_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise InvalidArgument("policy must be a matrix indexed [s, a]")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise InvalidArgument("policy rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @cached_property
    def cdf(self) -> np.ndarray:
        return _inverse_cdf_table(self.probs)

    def to_list(self) -> list:
        return self.probs.tolist()


@dataclass(frozen=True)
class PolicyPair:
    """Target policy pi, behavior policy pi_b and the ratio pi/pi_b."""

    target: Policy
    behavior: Policy
    rho: np.ndarray = field(init=False, repr=False)
    rho_max: float = field(init=False)

    def __post_init__(self):
        pi, pb = self.target.probs, self.behavior.probs
        if pi.shape != pb.shape:
            raise InvalidArgument("target and behavior policies differ in shape")
        if np.any((pb <= 0) & (pi > 0)):
            raise InvalidArgument("target is not absolutely continuous w.r.t. behavior")
        rho = np.divide(pi, pb, out=np.zeros_like(pi), where=pb > 0)
        object.__setattr__(self, "rho", _frozen(rho))
        object.__setattr__(self, "rho_max", float(rho.max()))

    @classmethod
    def on_policy(cls, policy: Policy) -> "PolicyPair":
        return cls(policy, policy)

    def to_dict(self) -> dict:
        return {"target": self.target.to_list(), "behavior": self.behavior.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyPair":
        return cls(Policy(np.asarray(d["target"])), Policy(np.asarray(d["behavior"])))


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


@dataclass(frozen=True)
class MixingEstimate:
    m: float
    kappa: float
    tv_series: list = field(default_factory=list)

    def bound(self, t) -> np.ndarray:
        return self.m * np.power(self.kappa, np.asarray(t, dtype=float))


# --------------------------------------------------------------------------
# generators


def garnet(
    n_states: int,
    n_actions: int,
    branching: int,
    seed,
    gamma: float = 0.95,
    reward_depends_on_next: bool = True,
) -> TabularMdp:
    """Random Garnet MDP G(|S|, |A|, b).

    For every (s, a), ``branching`` successor states are drawn uniformly
    without replacement, their probabilities are uniform(0, 1) draws
    normalized to one, and rewards are uniform(0, 1). With
    ``reward_depends_on_next=False`` the reward is drawn per (s, a) and
    shared across successors.
    """
    if n_states < 1 or n_actions < 1:
        raise InvalidArgument("n_states and n_actions must be positive")
    if not 1 <= branching <= n_states:
        raise InvalidArgument(f"branching must lie in [1, {n_states}], got {branching}")
    rng = make_rng(seed)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            w = rng.uniform(0.0, 1.0, size=branching)
            P[s, a, succ] = w / w.sum()
    if reward_depends_on_next:
        R = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    else:
        R = np.broadcast_to(rng.uniform(0.0, 1.0, size=(n_states, n_actions))[:, :, None], P.shape)
    return TabularMdp(P, R, gamma)


def garnet_policies(n_states: int, n_actions: int, seed, temperature: float = 0.5) -> PolicyPair:
    """Default Garnet policies: uniform behavior, seeded softmax target.

    The target logits are standard normal draws divided by ``temperature``;
    smaller temperatures make the target closer to deterministic.
    """
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    rng = make_rng([seed, 1])
    logits = rng.standard_normal((n_states, n_actions)) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    target = np.exp(logits)
    target /= target.sum(axis=1, keepdims=True)
    return PolicyPair(Policy(target), Policy.uniform(n_states, n_actions))


def garnet_features(n_states: int, seed) -> np.ndarray:
    """One scalar input k(s) ~ uniform(0, 1) per state."""
    return make_rng([seed, 2]).uniform(0.0, 1.0, size=n_states)


def spiral_mdp() -> tuple[TabularMdp, PolicyPair]:
    """Three-state cyclic chain 0 -> 1 -> 2 -> 0, each move or stay w.p. 1/2."""
    P = np.zeros((3, 1, 3))
    for s in range(3):
        P[s, 0, s] = 0.5
        P[s, 0, (s + 1) % 3] = 0.5
    mdp = TabularMdp(P, np.zeros((3, 1, 3)), 0.9, r_max=0.0)
    return mdp, PolicyPair.on_policy(Policy(np.ones((3, 1))))


# --------------------------------------------------------------------------
# chains


def state_transition_matrix(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """P_pi(s'|s) = sum_a pi(a|s) P(s'|s, a)."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def _closed_classes(P: np.ndarray) -> list[list[int]]:
    n, labels = connected_components(P > 0, directed=True, connection="strong")
    closed = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(P.shape[0]), members)
        if not np.any(P[np.ix_(members, outside)] > 0):
            closed.append(members.tolist())
    return closed


def _power_iteration(P: np.ndarray, iters: int = 1_000_000, tol: float = 1e-15) -> np.ndarray:
    mu = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(iters):
        nxt = mu @ P
        if np.abs(nxt - mu).sum() < tol:
            return nxt
        mu = nxt
    return mu


def stationary_distribution_of(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix.

    Solves (P^T - I) mu = 0 with one equation replaced by sum(mu) = 1 using
    a dense LU factorization; falls back to power iteration if the solve
    is inaccurate.
    """
    n = P.shape[0]
    closed = _closed_classes(P)
    if len(closed) > 1:
        raise DegenerateChainError(
            f"chain has {len(closed)} closed classes; absorbing component {closed[0]}",
            component=closed[0],
        )
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        mu = linalg.lu_solve(linalg.lu_factor(M), rhs)
    except (linalg.LinAlgError, ValueError):
        mu = np.full(n, np.nan)
    if not np.all(np.isfinite(mu)) or np.abs(mu @ P - mu).sum() > STATIONARY_TOL or mu.min() < -1e-12:
        mu = _power_iteration(P)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def stationary_distribution(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    return stationary_distribution_of(state_transition_matrix(mdp, policy))


# --------------------------------------------------------------------------
# sampling


def sample_markov(mdp: TabularMdp, pair: PolicyPair, current_state: int, rng) -> Transition:
    """a ~ pi_b(.|s), s' ~ P(.|s, a) from the given state."""
    s = int(current_state)
    if not 0 <= s < mdp.n_states:
        raise InvalidArgument(f"state {s} out of range")
    a = _draw(pair.behavior.cdf[s], rng.random())
    s_next = _draw(mdp.next_state_cdf[s, a], rng.random())
    return Transition(s, a, float(mdp.reward[s, a, s_next]), s_next)


def sample_iid(mdp: TabularMdp, pair: PolicyPair, mu_behavior, rng) -> Transition:
    """s ~ mu_b, then a ~ pi_b(.|s), then s' ~ P(.|s, a), in that order."""
    s = _draw(_inverse_cdf_table(np.asarray(mu_behavior, dtype=float)), rng.random())
    return sample_markov(mdp, pair, s, rng)


def inverse_cdf(probs) -> np.ndarray:
    """Cumulative table usable with :func:`draw` (last axis = outcomes)."""
    return _inverse_cdf_table(np.asarray(probs, dtype=float))


def draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF draw; same convention as the scalar samplers."""
    return np.minimum((cdf_rows <= u[..., None]).sum(axis=-1), cdf_rows.shape[-1] - 1)


# --------------------------------------------------------------------------
# mixing


def tv_series(P: np.ndarray, horizon: int, mu: np.ndarray | None = None) -> np.ndarray:
    """max_s d_TV(P^t(s, .), mu) for t = 0..horizon.

    Powers of the deviation matrix D = P - 1 mu^T are used (D^t = P^t - 1 mu^T
    for t >= 1), so small distances keep their relative precision instead of
    hitting the round-off floor of P^t - mu.
    """
    n = P.shape[0]
    if mu is None:
        mu = stationary_distribution_of(P)
    D = P - np.outer(np.ones(n), mu)
    out = np.empty(horizon + 1)
    out[0] = 0.5 * np.abs(np.eye(n) - mu[None, :]).sum(axis=1).max()
    Dt = np.eye(n)
    for t in range(1, horizon + 1):
        Dt = Dt @ D
        out[t] = 0.5 * np.abs(Dt).sum(axis=1).max()
    return out


def fit_geometric_bound(tv: np.ndarray) -> tuple[float, float]:
    """Fit (m, kappa) with m * kappa^t >= tv[t] for every t.

    kappa comes from a least-squares line through log tv on the tail that
    starts where tv first drops to half its initial value; m is then the
    smallest value making the bound dominate the whole series.
    """
    t = np.arange(tv.size)
    if tv[0] <= 0.0:
        return 1.0, 0.0
    if np.all(tv[1:] <= 0.0):
        return float(tv[0]), 0.0
    t_half = int(np.argmax(tv <= 0.5 * tv[0])) if np.any(tv <= 0.5 * tv[0]) else 0
    tail = (t >= t_half) & (tv > 0.0)
    if tail.sum() >= 2:
        slope = np.polyfit(t[tail], np.log(tv[tail]), 1)[0]
    else:
        slope = math.log(tv[1] / tv[0]) if tv[1] > 0 else -np.inf
    kappa = float(min(max(math.exp(slope), 0.0), 1.0 - 1e-15)) if np.isfinite(slope) else 0.0
    if kappa == 0.0:
        return float(tv[0]), 0.0
    pos = tv > 0.0
    m = float(np.max(tv[pos] / np.power(kappa, t[pos].astype(float))))
    return m * (1.0 + 1e-12), kappa


def estimate_mixing(mdp: TabularMdp, policy: Policy, horizon: int = 200) -> MixingEstimate:
    P = state_transition_matrix(mdp, policy)
    return estimate_mixing_of(P, horizon)


def estimate_mixing_of(P: np.ndarray, horizon: int = 200) -> MixingEstimate:
    tv = tv_series(P, horizon)
    if tv[-1] > 1e-6:
        raise NonMixingError(f"TV distance {tv[-1]:.3g} still above 1e-6 after {horizon} steps")
    m, kappa = fit_geometric_bound(tv)
    return MixingEstimate(m=m, kappa=kappa, tv_series=list(zip(range(tv.size), tv.tolist())))


def mixing_time(estimate: MixingEstimate, beta: float) -> int:
    """Smallest integer t with m * kappa^t <= beta."""
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    m, kappa = estimate.m, estimate.kappa
    if not 0.0 <= kappa < 1.0:
        raise InvalidArgument("kappa must lie in [0, 1)")
    if m <= beta:
        return 0
    if kappa == 0.0:
        return 1
    t = max(0, math.ceil(math.log(beta / m) / math.log(kappa)))
    while m * kappa**t > beta:
        t += 1
    while t > 0 and m * kappa ** (t - 1) <= beta:
        t -= 1
    return t

