"""Desk-scale deep-equilibrium layer with dense weights and group norm.

The layer map is

    f(z, x) = gn3(relu(z + gn2(x + W2 @ gn1(relu(W1 @ z)))))

evaluated row-wise over a state batch.  Besides the forward pass, the layer
exposes analytic vector-Jacobian products with respect to the state, the
input, and the flattened parameter vector; these feed the adjoint solve of
the implicit-gradient module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .solvers import as_state_batch

__all__ = [
    "GroupNormSpec",
    "DeqParams",
    "DeqLayer",
    "group_norm",
    "group_norm_vjp",
    "relu",
    "deq_forward",
    "init_params",
    "flatten_params",
    "unflatten_params",
    "save_params",
    "load_params",
]


@dataclass
class GroupNormSpec:
    """Per-channel affine group normalization parameters."""

    channels: int
    groups: int
    gamma: np.ndarray
    beta_shift: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.groups < 1 or self.channels % self.groups != 0:
            raise InputError(
                f"groups ({self.groups}) must divide channels ({self.channels})"
            )
        if self.epsilon <= 0:
            raise InputError(f"epsilon must be positive, got {self.epsilon}")
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta_shift = np.asarray(self.beta_shift, dtype=np.float64)
        if self.gamma.shape != (self.channels,) or self.beta_shift.shape != (self.channels,):
            raise InputError("gamma/beta_shift must have one entry per channel")

    @classmethod
    def default(cls, channels, groups, epsilon=1e-5):
        return cls(channels, groups, np.ones(channels), np.zeros(channels), epsilon)


@dataclass
class DeqParams:
    """Weights and normalization parameters of the equilibrium layer."""

    w1: np.ndarray  # (hidden, d)
    w2: np.ndarray  # (d, hidden)
    norm1: GroupNormSpec  # over hidden channels
    norm2: GroupNormSpec  # over d channels
    norm3: GroupNormSpec  # over d channels

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        hidden, d = self.w1.shape
        if self.w2.shape != (d, hidden):
            raise InputError(
                f"w2 must be {(d, hidden)} to match w1 {self.w1.shape}, got {self.w2.shape}"
            )
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.w2))):
            raise InputError("weights contain non-finite entries")
        if self.norm1.channels != hidden:
            raise InputError("norm1 must span the hidden channels")
        if self.norm2.channels != d or self.norm3.channels != d:
            raise InputError("norm2/norm3 must span the state channels")

    @property
    def state_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]


def relu(v):
    return np.maximum(v, 0.0)


def _group_stats(v, spec):
    b = v.shape[0]
    g = v.reshape(b, spec.groups, -1)
    mu = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)  # population variance
    return g, mu, var


def group_norm(v, spec: GroupNormSpec) -> np.ndarray:
    """Normalize each channel group to zero mean / unit variance, then affine."""
    v = as_state_batch(v)
    if v.shape[1] != spec.channels:
        raise InputError(f"expected {spec.channels} channels, got {v.shape[1]}")
    g, mu, var = _group_stats(v, spec)
    xhat = ((g - mu) / np.sqrt(var + spec.epsilon)).reshape(v.shape)
    return spec.gamma * xhat + spec.beta_shift


def group_norm_vjp(v, spec: GroupNormSpec, upstream):
    """Backward pass of ``group_norm`` at input ``v``.

    Returns ``(d_v, d_gamma, d_beta)`` with the parameter gradients summed
    over the batch.
    """
    v = as_state_batch(v)
    upstream = as_state_batch(upstream)
    b = v.shape[0]
    g, mu, var = _group_stats(v, spec)
    inv = 1.0 / np.sqrt(var + spec.epsilon)
    xhat = ((g - mu) * inv).reshape(v.shape)
    d_gamma = np.sum(upstream * xhat, axis=0)
    d_beta = np.sum(upstream, axis=0)
    gg = (upstream * spec.gamma).reshape(b, spec.groups, -1)
    xh = xhat.reshape(b, spec.groups, -1)
    d_v = inv * (gg - gg.mean(axis=2, keepdims=True)
                 - xh * (gg * xh).mean(axis=2, keepdims=True))
    return d_v.reshape(v.shape), d_gamma, d_beta


def _forward_cache(params: DeqParams, z, x):
    """Evaluate the layer, keeping every intermediate for the backward pass."""
    a = z @ params.w1.T
    r1 = relu(a)
    g1 = group_norm(r1, params.norm1)
    s = x + g1 @ params.w2.T
    g2 = group_norm(s, params.norm2)
    t = z + g2
    r2 = relu(t)
    out = group_norm(r2, params.norm3)
    return {"a": a, "r1": r1, "g1": g1, "s": s, "t": t, "r2": r2, "out": out}


def deq_forward(params: DeqParams, z, x) -> np.ndarray:
    """One application of the equilibrium layer to a state batch."""
    z = as_state_batch(z)
    x = as_state_batch(x)
    d = params.state_dim
    if z.shape[1] != d or x.shape[1] != d or z.shape[0] != x.shape[0]:
        raise InputError(
            f"z {z.shape} and x {x.shape} must both be (b, {d})"
        )
    return _forward_cache(params, z, x)["out"]


def _backward(params: DeqParams, z, x, v, want_params):
    """Shared chain rule through the layer; returns (d_z, d_x, d_theta|None)."""
    cache = _forward_cache(params, z, x)
    d_r2, dg3, db3 = group_norm_vjp(cache["r2"], params.norm3, v)
    d_t = d_r2 * (cache["t"] > 0)
    d_g2 = d_t
    d_s, dg2, db2 = group_norm_vjp(cache["s"], params.norm2, d_g2)
    d_x = d_s
    d_g1 = d_s @ params.w2
    d_r1, dg1, db1 = group_norm_vjp(cache["r1"], params.norm1, d_g1)
    d_a = d_r1 * (cache["a"] > 0)
    d_z = d_t + d_a @ params.w1
    if not want_params:
        return d_z, d_x, None
    d_w1 = d_a.T @ z
    d_w2 = d_s.T @ cache["g1"]
    d_theta = np.concatenate([
        d_w1.ravel(), d_w2.ravel(),
        dg1, db1, dg2, db2, dg3, db3,
    ])
    return d_z, d_x, d_theta


class DeqLayer:
    """FixedPointMap view of a parameter set, with analytic VJPs."""

    def __init__(self, params: DeqParams):
        self.params = params
        self.state_dim = params.state_dim

    def eval(self, z, x):
        return deq_forward(self.params, z, x)

    def vjp_state(self, z, x, v):
        """``v^T @ df/dz`` evaluated at (z, x), batched row-wise."""
        return _backward(self.params, as_state_batch(z), as_state_batch(x),
                         as_state_batch(v), want_params=False)[0]

    def vjp_input(self, z, x, v):
        """``v^T @ df/dx`` evaluated at (z, x), batched row-wise."""
        return _backward(self.params, as_state_batch(z), as_state_batch(x),
                         as_state_batch(v), want_params=False)[1]

    def vjp_params(self, z, x, v):
        """``v^T @ df/dtheta`` summed over the batch, in flat ordering."""
        return _backward(self.params, as_state_batch(z), as_state_batch(x),
                         as_state_batch(v), want_params=True)[2]

    @property
    def n_params(self) -> int:
        return flatten_params(self.params).shape[0]


def init_params(d, hidden, groups, seed) -> DeqParams:
    """Seeded Gaussian weights scaled by 1/sqrt(fan-in); identity norms."""
    if groups < 1 or d % groups != 0 or hidden % groups != 0:
        raise InputError(
            f"groups ({groups}) must divide both d ({d}) and hidden ({hidden})"
        )
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((hidden, d)) / np.sqrt(d)
    w2 = rng.standard_normal((d, hidden)) / np.sqrt(hidden)
    return DeqParams(
        w1=w1,
        w2=w2,
        norm1=GroupNormSpec.default(hidden, groups),
        norm2=GroupNormSpec.default(d, groups),
        norm3=GroupNormSpec.default(d, groups),
    )


# Flat parameter ordering: w1 row-major, w2 row-major, then (gamma, shift)
# for norm1, norm2, norm3.  Gradients from DeqLayer.vjp_params match it.

def flatten_params(params: DeqParams) -> np.ndarray:
    return np.concatenate([
        params.w1.ravel(), params.w2.ravel(),
        params.norm1.gamma, params.norm1.beta_shift,
        params.norm2.gamma, params.norm2.beta_shift,
        params.norm3.gamma, params.norm3.beta_shift,
    ])


def unflatten_params(flat, template: DeqParams) -> DeqParams:
    flat = np.asarray(flat, dtype=np.float64)
    hidden, d = template.w1.shape
    sizes = [hidden * d, d * hidden, hidden, hidden, d, d, d, d]
    if flat.shape != (sum(sizes),):
        raise InputError(f"expected {sum(sizes)} parameters, got {flat.shape}")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return DeqParams(
        w1=parts[0].reshape(hidden, d),
        w2=parts[1].reshape(d, hidden),
        norm1=GroupNormSpec(hidden, template.norm1.groups, parts[2], parts[3],
                            template.norm1.epsilon),
        norm2=GroupNormSpec(d, template.norm2.groups, parts[4], parts[5],
                            template.norm2.epsilon),
        norm3=GroupNormSpec(d, template.norm3.groups, parts[6], parts[7],
                            template.norm3.epsilon),
    )


def _norm_to_dict(spec):
    return {
        "channels": spec.channels,
        "groups": spec.groups,
        "gamma": spec.gamma.tolist(),
        "beta_shift": spec.beta_shift.tolist(),
        "epsilon": spec.epsilon,
    }


def _norm_from_dict(doc):
    return GroupNormSpec(doc["channels"], doc["groups"],
                         np.array(doc["gamma"]), np.array(doc["beta_shift"]),
                         doc["epsilon"])


def save_params(params: DeqParams, path):
    """Write parameters as a flat JSON document (shapes + row-major values)."""
    doc = {
        "d": params.state_dim,
        "hidden": params.hidden_dim,
        "w1": params.w1.ravel().tolist(),
        "w2": params.w2.ravel().tolist(),
        "norm1": _norm_to_dict(params.norm1),
        "norm2": _norm_to_dict(params.norm2),
        "norm3": _norm_to_dict(params.norm3),
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> DeqParams:
    doc = json.loads(Path(path).read_text())
    d, hidden = doc["d"], doc["hidden"]
    return DeqParams(
        w1=np.array(doc["w1"]).reshape(hidden, d),
        w2=np.array(doc["w2"]).reshape(d, hidden),
        norm1=_norm_from_dict(doc["norm1"]),
        norm2=_norm_from_dict(doc["norm2"]),
        norm3=_norm_from_dict(doc["norm3"]),
    )
