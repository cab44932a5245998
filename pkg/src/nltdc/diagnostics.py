"""Diagnostics for TDC runs: records, tracking error, variance, summaries and rate fits."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument
from .mdp import draw, inverse_cdf
from .mspbe import td_terms

CSV_HEADER = "# nltdc-csv v1"
RECORD_COLUMNS = (
    "t",
    "J",
    "grad_norm_sq",
    "tracking_err_sq",
    "alpha",
    "beta",
    "omega_norm",
    "var_vs_grad",
    "var_centered",
)


@dataclass
class RunRecord:
    """Per-checkpoint diagnostics of one seeded trajectory.

    The variance columns are ``None`` unless the variance estimator ran.
    ``failure`` holds ``(t, |theta|, |omega|)`` when the run blew up.
    """

    seed: int
    t: np.ndarray
    J: np.ndarray
    grad_norm_sq: np.ndarray
    tracking_err_sq: np.ndarray
    omega_norm: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    var_vs_grad: np.ndarray | None = None
    var_centered: np.ndarray | None = None
    W: int | None = None
    steps_run: int = 0
    theta_final: np.ndarray | None = None
    omega_final: np.ndarray | None = None
    failure: dict | None = None
    manifest: str | None = None

    def columns(self) -> dict:
        cols = {name: getattr(self, name) for name in RECORD_COLUMNS}
        return {k: v for k, v in cols.items() if v is not None}

    def to_csv(self, path=None) -> str:
        cols = self.columns()
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        buf.write(",".join(cols) + "\n")
        for row in zip(*cols.values()):
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_csv(path) -> dict:
    """Parse a ``nltdc-csv v1`` file into a dict of float arrays."""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_HEADER:
            raise InvalidArgument(f"{path}: missing {CSV_HEADER!r} header")
        names = fh.readline().rstrip("\n").split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(names)))
    return {name: data[:, i] for i, name in enumerate(names)}


def tracking_error(state, ground_truth, spec, mdp, pair) -> float:
    """Squared distance between ``omega_t`` and ``omega(theta_t)``."""
    terms = td_terms(mdp, pair, spec, state.theta, ground_truth)
    return float(np.sum((np.asarray(state.omega) - terms.omega) ** 2))


def stochastic_updates(theta, omega, mdp, pair, spec) -> np.ndarray:
    """The theta-update direction G for every ``(s, a, s')``.

    ``G = rho delta phi(s) - gamma rho phi(s') phi(s)^T omega - (rho delta - phi(s)^T omega) Hess V(s) omega``,
    returned with shape ``(..., S, A, S, N)`` for ``theta`` of shape ``(..., N)``.
    """
    theta = np.asarray(theta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    V, phi, hess_w = spec.evaluate_hvp(theta, omega)
    g = mdp.gamma
    delta = mdp.reward + g * V[..., None, None, :] - V[..., :, None, None]
    rd = pair.rho[:, :, None] * delta
    phi_w = np.einsum("...si,...i->...s", phi, omega)
    # indexed [..., s, a, s', i]
    G = rd[..., None] * phi[..., :, None, None, :]
    G = G - g * (pair.rho[:, :, None] * phi_w[..., :, None, None])[..., None] * phi[..., None, None, :, :]
    G = G - (rd - phi_w[..., :, None, None])[..., None] * hess_w[..., :, None, None, :]
    return G


class VarianceEstimate(NamedTuple):
    vs_grad: float
    centered: float


def _variance_pair(G_table, grad, cdf_s, cdf_a, cdf_next, u) -> VarianceEstimate:
    s = draw(cdf_s, u[:, 0])
    a = draw(cdf_a[s], u[:, 1])
    s_next = draw(cdf_next[s, a], u[:, 2])
    G = G_table[s, a, s_next]
    return VarianceEstimate(
        float(np.mean(np.sum((G - grad) ** 2, axis=-1))),
        float(np.mean(np.sum((G + 0.5 * grad) ** 2, axis=-1))),
    )


def variance_estimate(
    theta_t, omega_t, mdp, pair, spec, ground_truth, n_trajectories: int, rng, centered: bool = False
) -> float:
    """Monte Carlo estimate of ``E|G(theta_t, omega_t) - grad J(theta_t)|^2``.

    ``n_trajectories`` independent transitions are drawn from the behavior
    stationary distribution at the frozen iterate. With ``centered=True`` the
    deviation is taken from ``-grad J / 2``, the actual mean of ``G`` when
    ``omega_t = omega(theta_t)``.
    """
    if n_trajectories < 1:
        raise InvalidArgument("n_trajectories must be >= 1")
    grad = td_terms(mdp, pair, spec, theta_t, ground_truth).gradient
    G_table = stochastic_updates(theta_t, omega_t, mdp, pair, spec)
    u = rng.random((n_trajectories, 3))
    est = _variance_pair(
        G_table, grad, inverse_cdf(ground_truth.mu_b), pair.behavior.cdf, mdp.next_state_cdf, u
    )
    return est.centered if centered else est.vs_grad


def exact_variance(theta_t, omega_t, mdp, pair, spec, ground_truth, centered: bool = False) -> float:
    """The expectation that :func:`variance_estimate` samples, by enumeration."""
    grad = td_terms(mdp, pair, spec, theta_t, ground_truth).gradient
    target = -0.5 * grad if centered else grad
    G_table = stochastic_updates(theta_t, omega_t, mdp, pair, spec)
    dev = np.sum((G_table - target) ** 2, axis=-1)
    return float(np.sum(ground_truth.weights * dev))


@dataclass(frozen=True)
class EnsembleSummary:
    t: np.ndarray
    mean: np.ndarray
    p5: np.ndarray
    p95: np.ndarray
    n_seeds: int
    quantity: str = "grad_norm_sq"

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        buf.write("t,mean,p5,p95\n")
        for row in zip(self.t, self.mean, self.p5, self.p95):
            buf.write(f"{int(row[0])},{row[1]!r},{row[2]!r},{row[3]!r}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def nearest_rank(sorted_values: np.ndarray, p: float) -> np.ndarray:
    """Nearest-rank percentile along axis 0 of an already sorted array."""
    n = sorted_values.shape[0]
    k = max(math.ceil(p / 100.0 * n), 1) - 1
    return sorted_values[k]


def summarize_ensemble(records: Sequence[RunRecord], quantity: str = "grad_norm_sq") -> EnsembleSummary:
    """Pointwise mean and nearest-rank 5th/95th percentiles across seeds."""
    if not records:
        raise InvalidArgument("need at least one record")
    grid = records[0].t
    for rec in records[1:]:
        if rec.t.shape != grid.shape or np.any(rec.t != grid):
            raise InvalidArgument("records do not share a time grid")
    series = [getattr(rec, quantity) for rec in records]
    if any(s is None for s in series):
        raise InvalidArgument(f"quantity {quantity!r} missing from some records")
    stack = np.sort(np.stack(series), axis=0)
    return EnsembleSummary(
        t=np.array(grid),
        mean=stack.mean(axis=0),
        p5=nearest_rank(stack, 5),
        p95=nearest_rank(stack, 95),
        n_seeds=len(records),
        quantity=quantity,
    )


@dataclass
class RateFit:
    horizons: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    residual: float
    flagged: list = field(default_factory=list)
    n_success: list = field(default_factory=list)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        buf.write("T,mean,slope\n")
        for T, v in zip(self.horizons, self.values):
            buf.write(f"{int(T)},{float(v)!r},{self.slope!r}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def fit_power_law(horizons, values, flagged=None) -> RateFit:
    """Least-squares line through ``(log T, log value)``."""
    T = np.asarray(horizons, dtype=float)
    v = np.asarray(values, dtype=float)
    if T.ndim != 1 or T.shape != v.shape:
        raise InvalidArgument("horizons and values must be matching 1-d sequences")
    if T.size < 3:
        raise InvalidArgument("a rate fit needs at least 3 horizons")
    if np.any(np.diff(T) <= 0):
        raise InvalidArgument("horizons must be strictly increasing")
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        raise InvalidArgument("fewer than two usable horizons")
    x, y = np.log(T[ok]), np.log(v[ok])
    X = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(X, y, rcond=None)
    residual = float(np.sqrt(np.mean((X @ np.array([slope, intercept]) - y) ** 2)))
    return RateFit(T, v, float(slope), float(intercept), residual, list(flagged or []))


def fit_rate(horizons, seeds_per_horizon, run_config, jobs: int = 1, estimator: str = "averaged") -> RateFit:
    """Run the ensemble at each horizon and fit ``log E|grad J(theta_W)|^2`` against ``log T``.

    ``run_config`` is a :class:`nltdc.tdc.TdcProblem` whose schedule uses
    ``a = b = 1/2``; ``seeds_per_horizon`` is a count or an explicit seed list.

    ``estimator="sampled"`` draws one ``W`` per run and uses
    ``|grad J(theta_W)|^2``. ``estimator="averaged"`` runs all ``T`` steps and
    averages ``|grad J(theta_t)|^2`` over ``t < T``, which is the exact
    expectation over ``W ~ Uniform{0..T-1}`` for each trajectory and so has the
    same mean with less variance.
    """
    from .tdc import run_ensemble

    if estimator not in ("averaged", "sampled"):
        raise InvalidArgument("estimator must be 'averaged' or 'sampled'")
    horizons = [int(T) for T in horizons]
    if len(horizons) < 3:
        raise InvalidArgument("a rate fit needs at least 3 horizons")
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise InvalidArgument("horizons must be strictly increasing")
    sched = run_config.schedule
    if sched.kind != "power" or sched.a != 0.5 or sched.b != 0.5:
        raise InvalidArgument("the rate check needs a power schedule with a = b = 1/2")
    seeds = (
        list(range(int(seeds_per_horizon)))
        if np.isscalar(seeds_per_horizon)
        else [int(s) for s in seeds_per_horizon]
    )
    values, flagged, counts = [], [], []
    for T in horizons:
        if estimator == "averaged":
            problem = replace(run_config.with_horizon(T), cadence=1, variance_samples=0)
            result = run_ensemble(problem, seeds, mode="full", jobs=jobs)
            finals = [rec.grad_norm_sq[:-1].mean() for rec in result.records if rec.failure is None]
        else:
            result = run_ensemble(run_config.with_horizon(T), seeds, mode="randomized", jobs=jobs)
            finals = [rec.grad_norm_sq[-1] for rec in result.records if rec.failure is None]
        counts.append(len(finals))
        if len(finals) < len(seeds):
            flagged.append(T)
        values.append(float(np.mean(finals)) if finals else float("nan"))
    fit = fit_power_law(horizons, values, flagged)
    fit.n_success = counts
    return fit
