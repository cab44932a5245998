"""Smooth value-function families with exact first and second derivatives.

Three families are provided:

* :class:`MLPSpec` -- fully connected sigmoid network with an affine readout,
  fed one scalar input per state. Derivatives are propagated forward through
  the layers (value, Jacobian and Hessian w.r.t. all weights and biases).
* :class:`SpiralSpec` -- ``V(s) = (a_s cos(k t) + b_s sin(k t)) exp(eps t)``
  with a scalar parameter ``t``.
* :class:`LinearSpec` -- ``V(s) = phi(s)^T theta``.

Every family evaluates all states at once and accepts a batch of parameter
vectors: ``theta`` of shape ``(..., N)`` gives values ``(..., S)``,
gradients ``(..., S, N)`` and Hessians ``(..., S, N, N)``. The TDC update
only needs ``Hess V(s) omega``, which :meth:`Approximator.evaluate_hvp`
returns as ``(..., S, N)``; the MLP computes it in forward mode at O(N)
cost per unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, NamedTuple

import numpy as np

from .errors import InvalidArgument

MAX_PARAMS = 64
# (a, b) vectors of the two spiral value families
SPIRAL_SETS = {
    1: {"a": [0.94, -0.43, 0.18], "b": [0.21, -0.52, 0.76]},
    2: {"a": [0.21, -0.33, 0.29], "b": [0.68, 0.41, 0.82]},
}


class EvalBundle(NamedTuple):
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


class AllStates(NamedTuple):
    values: np.ndarray
    grads: np.ndarray
    hessians: np.ndarray


class Approximator:
    family: ClassVar[str] = ""

    @property
    def n_states(self) -> int:
        raise NotImplementedError

    @property
    def param_dim(self) -> int:
        raise NotImplementedError

    def evaluate_all(self, theta) -> AllStates:
        raise NotImplementedError

    def evaluate_grad(self, theta) -> AllStates:
        """Values and gradients only; the Hessian slot is ``None``."""
        values, grads, _ = self.evaluate_all(theta)
        return AllStates(values, grads, None)

    def evaluate_hvp(self, theta, v) -> AllStates:
        """Values, gradients and Hessian-vector products ``Hess V(s) v``."""
        values, grads, hess = self.evaluate_all(theta)
        return AllStates(values, grads, np.einsum("...sij,...j->...si", hess, np.asarray(v, dtype=float)))

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 0 or theta.shape[-1] != self.param_dim:
            raise InvalidArgument(
                f"theta must have trailing dimension {self.param_dim}, got shape {theta.shape}"
            )
        return theta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class MLPSpec(Approximator):
    """Sigmoid MLP ``widths[0] -> ... -> widths[-1]`` with affine readout.

    Parameters are packed layer by layer as the row-major weight matrix
    ``(out, in)`` followed by the bias vector. ``inputs`` holds the network
    input for each state, shape ``(S,)`` or ``(S, widths[0])``.
    """

    family: ClassVar[str] = "mlp"
    widths: tuple
    inputs: np.ndarray
    _layers: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
            raise InvalidArgument(f"widths must have >= 2 positive entries ending in 1, got {widths}")
        x = np.array(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != widths[0]:
            raise InvalidArgument(f"inputs must have shape (S, {widths[0]}), got {x.shape}")
        x.setflags(write=False)
        layers, offset = [], 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            w_idx = offset + np.arange(n_out * n_in).reshape(n_out, n_in)
            b_idx = offset + n_out * n_in + np.arange(n_out)
            layers.append((n_in, n_out, w_idx, b_idx))
            offset += n_out * n_in + n_out
        if offset > MAX_PARAMS:
            raise InvalidArgument(f"dense Hessians are limited to N <= {MAX_PARAMS}, got {offset}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "_layers", layers)

    @property
    def n_states(self) -> int:
        return self.inputs.shape[0]

    @property
    def param_dim(self) -> int:
        return sum(n_out * n_in + n_out for n_in, n_out, _, _ in self._layers)

    def _affine(self, th, layer, a, Ja):
        """Pre-activation of ``layer`` and its Jacobian, plus weight scatter indices."""
        n_in, n_out, w_idx, b_idx = layer
        W = th[:, w_idx]
        z = np.einsum("boi,bsi->bso", W, a) + th[:, None, b_idx]
        rows = np.repeat(np.arange(n_out), n_in)
        cols = w_idx.ravel()
        src = np.tile(np.arange(n_in), n_out)
        Jz = np.einsum("boi,bsip->bsop", W, Ja)
        Jz[:, :, rows, cols] += a[:, :, src]
        Jz[:, :, np.arange(n_out), b_idx] += 1.0
        return W, z, Jz, (rows, cols, src)

    def _start(self, theta):
        theta = self._check_theta(theta)
        th = theta.reshape(-1, self.param_dim)
        B, n0 = th.shape[0], self.widths[0]
        a = np.broadcast_to(self.inputs, (B, self.n_states, n0))
        return theta.shape[:-1], th, a, np.zeros((B, self.n_states, n0, self.param_dim))

    def _finish(self, lead, a, Ja, second):
        S, N = self.n_states, self.param_dim
        return AllStates(
            a[..., 0].reshape(lead + (S,)),
            Ja[:, :, 0, :].reshape(lead + (S, N)),
            None if second is None else second[:, :, 0].reshape(lead + (S,) + second.shape[3:]),
        )

    def evaluate_all(self, theta) -> AllStates:
        lead, th, a, Ja = self._start(theta)
        N = self.param_dim
        Ha = np.zeros(Ja.shape + (N,))
        for k, layer in enumerate(self._layers):
            W, z, Jz, (rows, cols, src) = self._affine(th, layer, a, Ja)
            # d2 z_i / d W_ij d theta = d a_j / d theta, in both argument orders
            Hz = np.einsum("boi,bsipq->bsopq", W, Ha)
            cross = np.zeros_like(Hz)
            cross[:, :, rows, cols, :] = Ja[:, :, src, :]
            Hz += cross + cross.swapaxes(-1, -2)
            if k == len(self._layers) - 1:
                return self._finish(lead, z, Jz, Hz)
            sig = _sigmoid(z)
            d1 = sig * (1.0 - sig)
            d2 = d1 * (1.0 - 2.0 * sig)
            a = sig
            Ja = d1[..., None] * Jz
            Ha = d2[..., None, None] * Jz[..., :, None] * Jz[..., None, :] + d1[..., None, None] * Hz

    def evaluate_grad(self, theta) -> AllStates:
        lead, th, a, Ja = self._start(theta)
        for k, layer in enumerate(self._layers):
            _, z, Jz, _ = self._affine(th, layer, a, Ja)
            if k == len(self._layers) - 1:
                return self._finish(lead, z, Jz, None)
            a = _sigmoid(z)
            Ja = (a * (1.0 - a))[..., None] * Jz

    def evaluate_hvp(self, theta, v) -> AllStates:
        """Forward-mode ``Hess V(s) v`` without forming the Hessian."""
        lead, th, a, Ja = self._start(theta)
        vv = np.broadcast_to(np.asarray(v, dtype=float), lead + (self.param_dim,)).reshape(th.shape)
        Hv = np.zeros_like(Ja)
        for k, layer in enumerate(self._layers):
            W, z, Jz, (rows, cols, src) = self._affine(th, layer, a, Ja)
            Hz = np.einsum("boi,bsip->bsop", W, Hv)
            Hz += np.einsum("boi,bsip->bsop", vv[:, layer[2]], Ja)
            Hz[:, :, rows, cols] += np.einsum("bsip,bp->bsi", Ja, vv)[:, :, src]
            if k == len(self._layers) - 1:
                return self._finish(lead, z, Jz, Hz)
            sig = _sigmoid(z)
            d1 = sig * (1.0 - sig)
            d2 = d1 * (1.0 - 2.0 * sig)
            a = sig
            Jzv = np.einsum("bsop,bp->bso", Jz, vv)
            Ja = d1[..., None] * Jz
            Hv = (d2 * Jzv)[..., None] * Jz + d1[..., None] * Hz

    def to_dict(self) -> dict:
        return {"family": self.family, "widths": list(self.widths), "inputs": self.inputs.tolist()}


@dataclass(frozen=True)
class SpiralSpec(Approximator):
    family: ClassVar[str] = "spiral"
    a: np.ndarray
    b: np.ndarray
    k: float = 0.866
    eps: float = 0.1

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        b = np.array(self.b, dtype=float)
        if a.shape != (3,) or b.shape != (3,):
            raise InvalidArgument("the spiral family needs a and b of length 3 (|S| = 3)")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_states(self) -> int:
        return 3

    @property
    def param_dim(self) -> int:
        return 1

    def evaluate_all(self, theta) -> AllStates:
        theta = self._check_theta(theta)
        t = theta[..., 0:1]
        k, eps = self.k, self.eps
        c, sn, e = np.cos(k * t), np.sin(k * t), np.exp(eps * t)
        f = self.a * c + self.b * sn
        df = k * (self.b * c - self.a * sn)
        value = f * e
        grad = (df + eps * f) * e
        hess = ((eps * eps - k * k) * f + 2.0 * eps * df) * e
        return AllStates(value, grad[..., None], hess[..., None, None])

    def to_dict(self) -> dict:
        return {"family": self.family, "a": self.a.tolist(), "b": self.b.tolist(), "k": self.k, "eps": self.eps}


@dataclass(frozen=True)
class LinearSpec(Approximator):
    family: ClassVar[str] = "linear"
    features: np.ndarray

    def __post_init__(self):
        phi = np.array(self.features, dtype=float)
        if phi.ndim != 2:
            raise InvalidArgument("features must be a matrix indexed [s, i]")
        if phi.shape[1] > MAX_PARAMS:
            raise InvalidArgument(f"at most {MAX_PARAMS} features are supported")
        phi.setflags(write=False)
        object.__setattr__(self, "features", phi)

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    @property
    def param_dim(self) -> int:
        return self.features.shape[1]

    def evaluate_all(self, theta) -> AllStates:
        theta = self._check_theta(theta)
        lead = theta.shape[:-1]
        S, N = self.features.shape
        return AllStates(
            theta @ self.features.T,
            np.broadcast_to(self.features, lead + (S, N)).copy(),
            np.zeros(lead + (S, N, N)),
        )

    def to_dict(self) -> dict:
        return {"family": self.family, "features": self.features.tolist()}


FAMILIES = {cls.family: cls for cls in (MLPSpec, SpiralSpec, LinearSpec)}


def from_dict(d: dict) -> Approximator:
    d = dict(d)
    family = d.pop("family", None)
    if family not in FAMILIES:
        raise InvalidArgument(f"unknown approximator family {family!r}")
    return FAMILIES[family](**d)


def param_count(spec: Approximator) -> int:
    return spec.param_dim


def evaluate_all(spec: Approximator, theta) -> AllStates:
    return spec.evaluate_all(theta)


def evaluate(spec: Approximator, theta, s: int) -> EvalBundle:
    """Value, gradient and Hessian of ``V_theta(s)`` for a single state."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.param_dim,):
        raise InvalidArgument(f"theta must have shape ({spec.param_dim},), got {theta.shape}")
    if not 0 <= s < spec.n_states:
        raise InvalidArgument(f"state {s} out of range for {spec.n_states} states")
    values, grads, hess = spec.evaluate_all(theta)
    return EvalBundle(float(values[s]), grads[s].copy(), hess[s].copy())


class BoundEstimates(NamedTuple):
    """Empirical lower bounds on the smoothness constants of a family."""

    C_v: float
    C_phi: float
    D_v: float
    L_V: float
    n_samples: int


def sample_ball(rng, dim: int, radius: float, n: int, center=None) -> np.ndarray:
    """``n`` points uniform in the Euclidean ball of the given radius."""
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    pts = direction * r[:, None]
    return pts if center is None else pts + np.asarray(center, dtype=float)


def estimate_bounds(
    spec: Approximator, theta_samples, states=None, lipschitz_points: int | None = None
) -> BoundEstimates:
    """Maxima of |V|, |phi|, |Hess V|_2 and the Hessian Lipschitz quotient.

    The Lipschitz quotient is taken over every pair among the first
    ``lipschitz_points`` samples (all by default), so the estimates can only
    grow when the sample set grows.
    """
    thetas = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    if thetas.shape[0] == 0:
        raise InvalidArgument("theta_samples must be nonempty")
    idx = np.arange(spec.n_states) if states is None else np.asarray(states, dtype=int)
    values, grads, hess = spec.evaluate_all(thetas)
    values, grads, hess = values[:, idx], grads[:, idx], hess[:, idx]
    C_v = float(np.abs(values).max())
    C_phi = float(np.linalg.norm(grads, axis=-1).max())
    D_v = float(np.abs(np.linalg.eigvalsh(hess)).max())
    L_V = 0.0
    n_lip = thetas.shape[0] if lipschitz_points is None else min(int(lipschitz_points), thetas.shape[0])
    for i in range(n_lip - 1):
        dist = np.linalg.norm(thetas[i + 1:n_lip] - thetas[i], axis=1)
        keep = dist > 0
        if not keep.any():
            continue
        diff = hess[i + 1:n_lip][keep] - hess[i]
        spec_norm = np.abs(np.linalg.eigvalsh(diff)).max(axis=(-1, -2))
        L_V = max(L_V, float(np.max(spec_norm / dist[keep])))
    return BoundEstimates(C_v, C_phi, D_v, L_V, thetas.shape[0])
