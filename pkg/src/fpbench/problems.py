"""Analytic fixed-point problems with known solutions.

These are the oracle instruments: seeded linear contractions with an exact
spectral-radius bound by construction, a tanh-activated single-layer
equilibrium map, and a handful of scalar probes for fast unit tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError, SingularSystemError
from .solvers import CallableMap, FixedPointMap, as_state_batch

__all__ = [
    "LinearContraction",
    "SimpleDeq",
    "Probe",
    "make_linear_contraction",
    "analytic_fixed_point",
    "linear_map",
    "make_simple_deq",
    "simple_deq_map",
    "scalar_probe_suite",
]


@dataclass
class LinearContraction:
    """Affine map z <- A z + b with rho(A) <= spectral_radius_bound."""

    A: np.ndarray
    b: np.ndarray
    spectral_radius_bound: float

    def to_config(self, seed=None):
        """Problem spec in the benchmark config format."""
        doc = {"kind": "linear_contraction", "d": int(self.A.shape[0]),
               "rho": self.spectral_radius_bound}
        if seed is not None:
            doc["seed"] = seed
        return doc


@dataclass
class SimpleDeq:
    """Single-layer equilibrium map z* = tanh(W z* + U x + b)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray


def make_linear_contraction(d, rho, seed) -> LinearContraction:
    """Seeded A = rho * Q diag(s) Q^T with s in [0.3, 1.0], so rho(A) <= rho."""
    if not 0.0 < rho < 1.0:
        raise InputError(f"target spectral radius must lie in (0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    s = rng.uniform(0.3, 1.0, size=d)
    a = rho * (q * s) @ q.T
    b = rng.standard_normal(d)
    return LinearContraction(A=a, b=b, spectral_radius_bound=rho)


def analytic_fixed_point(p: LinearContraction) -> np.ndarray:
    """Dense solve of (I - A) z = b; valid because rho(A) < 1."""
    d = p.A.shape[0]
    m = np.eye(d) - p.A
    try:
        z = np.linalg.solve(m, p.b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"I - A is singular: {exc}") from exc
    return z


def linear_map(p: LinearContraction) -> FixedPointMap:
    def fn(z, _x):
        return z @ p.A.T + p.b
    return CallableMap(fn, state_dim=p.A.shape[0])


def make_simple_deq(d, dx, seed, contraction=0.9) -> SimpleDeq:
    """Seeded instance with ||W||_2 scaled to ``contraction`` so the tanh map
    is a contraction (|tanh'| <= 1 everywhere)."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d, d))
    w *= contraction / np.linalg.norm(w, 2)
    u = rng.standard_normal((d, dx)) / np.sqrt(dx)
    b = rng.standard_normal(d) * 0.1
    return SimpleDeq(W=w, U=u, b=b)


def simple_deq_map(p: SimpleDeq) -> FixedPointMap:
    d, dx = p.U.shape

    def fn(z, x):
        z = as_state_batch(z)
        x = as_state_batch(x)
        if z.shape[1] != d or x.shape[1] != dx:
            raise InputError(
                f"expected z (b, {d}) and x (b, {dx}), got {z.shape} and {x.shape}"
            )
        return np.tanh(z @ p.W.T + x @ p.U.T + p.b)

    return CallableMap(fn, state_dim=d)


@dataclass
class Probe:
    """A scalar-or-small test map with its documented fixed point."""

    name: str
    map: FixedPointMap
    fixed_point: np.ndarray


def scalar_probe_suite() -> list[Probe]:
    """Deterministic fast maps for unit tests, each with a known fixed point."""
    probes = []

    probes.append(Probe(
        name="affine-half",
        map=CallableMap(lambda z, _x: 0.5 * z + 1.0, state_dim=1),
        fixed_point=np.array([2.0]),
    ))

    # tanh(0.8 z): slope 0.8 at the origin, globally attracting z* = 0.
    probes.append(Probe(
        name="tanh-damped",
        map=CallableMap(lambda z, _x: np.tanh(0.8 * z), state_dim=1),
        fixed_point=np.array([0.0]),
    ))

    theta = np.pi / 6.0
    rot = 0.8 * np.array([[np.cos(theta), -np.sin(theta)],
                          [np.sin(theta), np.cos(theta)]])
    shift = np.array([1.0, -0.5])
    z_star = np.linalg.solve(np.eye(2) - rot, shift)
    probes.append(Probe(
        name="rotation-contraction",
        map=CallableMap(lambda z, _x: z @ rot.T + shift, state_dim=2),
        fixed_point=z_star,
    ))

    return probes
