"""Gradients through the equilibrium state via the implicit function theorem.

At a fixed point z* = f(z*, x) the loss gradient pulls back through
``u^T = v^T + u^T @ df/dz``, itself a fixed-point problem in u that the
same solvers handle.  With u in hand, ``dl/dx = u^T @ df/dx`` and
``dl/dtheta = u^T @ df/dtheta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InputError
from .solvers import (AndersonConfig, CallableMap, SolverTrace, anderson_iterate,
                      as_state_batch, forward_iterate, relative_residual,
                      wall_clock)

__all__ = [
    "GradResult",
    "jacobian_fd",
    "adjoint_solve",
    "truncated_adjoint",
    "grad_input",
    "grad_params",
    "equilibrium_gradients",
]

FD_STEP = 1e-5  # central-difference step on 64-bit values


@dataclass
class GradResult:
    """Input and parameter gradients plus the adjoint solver trace."""

    grad_x: np.ndarray
    grad_params: np.ndarray
    adjoint_trace: SolverTrace


def jacobian_fd(f, z, x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian df/dz at (z, x) for a single-row batch.

    Desk-scale oracle only: costs 2*d map evaluations.
    """
    z = as_state_batch(z)
    if z.shape[0] != 1:
        raise InputError("jacobian_fd expects a single-row state batch")
    if h <= 0:
        raise InputError(f"step h must be positive, got {h}")
    d = z.shape[1]
    jac = np.empty((d, d))
    for j in range(d):
        dz = np.zeros_like(z)
        dz[0, j] = h
        plus = f.eval(z + dz, x)
        minus = f.eval(z - dz, x)
        jac[:, j] = (plus[0] - minus[0]) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        raise DivergenceError("non-finite Jacobian entries")
    return jac


def _solve(map_, x, z0, cfg, method, label):
    if method == "anderson":
        return anderson_iterate(map_, x, z0, cfg, label=label)
    if method == "forward":
        return forward_iterate(map_, x, z0, tol=cfg.tol, max_iter=cfg.max_iter,
                               lam=cfg.lam, label=label)
    raise InputError(f"unknown solver method {method!r}")


def adjoint_solve(vjp: Callable, z_star, x, v, cfg: AndersonConfig,
                  method: str = "anderson"):
    """Solve ``u^T = v^T + u^T @ df/dz`` at (z_star, x) by fixed-point iteration.

    ``vjp(z, x, u)`` must return ``u^T @ df/dz``.  The returned u satisfies
    ``||u^T (I - J) - v^T|| / (||v|| + lam) < cfg.tol`` batch-mean; the inner
    solver tolerance is tightened until that holds.

    Returns ``(u, trace)`` where trace is the last inner solver trace.
    """
    v = as_state_batch(v)
    z_star = as_state_batch(z_star)
    adj_map = CallableMap(lambda u, _x: v + vjp(z_star, x, u), state_dim=v.shape[1])
    den = np.linalg.norm(v, axis=1) + cfg.lam
    u = v.copy()
    tol = cfg.tol
    trace = None
    for _ in range(10):
        inner = AndersonConfig(m=cfg.m, lam=cfg.lam, beta=cfg.beta, tol=tol,
                               max_iter=cfg.max_iter)
        trace = _solve(adj_map, None, u, inner, method, label="adjoint")
        u = trace.final_state
        # Residual against ||v||, stricter than the solver's own metric.
        num = np.linalg.norm(v + vjp(z_star, x, u) - u, axis=1)
        if float(np.mean(num / den)) < cfg.tol:
            trace.converged = True
            return u, trace
        # Restart from the improved state with a tighter inner tolerance;
        # the fresh window also rescues a stalled extrapolation.
        if trace.converged:
            tol /= 10.0
    raise DivergenceError("adjoint residual failed to reach tolerance",
                          iteration=trace.rows[-1].k)


def truncated_adjoint(vjp: Callable, z_star, x, v, cfg: AndersonConfig,
                      method: str = "anderson"):
    """Adjoint solve judged by the solver's own residual metric only.

    Unlike :func:`adjoint_solve`, the best iterate seen is kept even when
    the tolerance is never reached.  This is the loose-tolerance backward
    pass used during training, where the Jacobian at the equilibrium can
    have expansive rows and gradient noise is acceptable: the plain
    iteration is cut off once its residual stops improving instead of
    being allowed to overflow.
    """
    v = as_state_batch(v)
    z_star = as_state_batch(z_star)
    adj_map = CallableMap(lambda u, _x: v + vjp(z_star, x, u), state_dim=v.shape[1])
    if method == "anderson":
        trace = _solve(adj_map, None, v.copy(), cfg, method, label="adjoint")
        return trace.final_state, trace
    if method != "forward":
        raise InputError(f"unknown solver method {method!r}")
    trace = SolverTrace(label="adjoint")
    t0 = wall_clock()
    u = v.copy()
    best_u, best_res = u, np.inf
    # The relative residual is scale invariant, so a growing iterate must
    # be caught by magnitude as well.
    cap = 1e6 * (float(np.linalg.norm(v)) + 1.0)
    for k in range(cfg.max_iter):
        fu = v + vjp(z_star, x, u)
        if not np.all(np.isfinite(fu)) or float(np.linalg.norm(fu)) > cap:
            trace.record(k, np.inf, wall_clock() - t0, k + 1)
            break
        res = relative_residual(fu, u, cfg.lam)
        trace.record(k, res, wall_clock() - t0, k + 1)
        if np.isfinite(res) and res < best_res:
            best_u, best_res = fu, res
        if res < cfg.tol:
            trace.converged = True
            best_u = fu
            break
        # Expansive rows make the residual grow again; keep the best
        # iterate instead of following the iteration into overflow.
        if not np.isfinite(res) or res > 10.0 * best_res:
            break
        u = fu
    trace.final_state = best_u
    return best_u, trace


def grad_input(vjp_state: Callable, vjp_input: Callable, x, z_star,
               loss_grad, cfg: AndersonConfig, method: str = "anderson") -> np.ndarray:
    """``dl/dx`` through the equilibrium: adjoint solve, then pull back to x."""
    u, _ = adjoint_solve(vjp_state, z_star, x, loss_grad, cfg, method=method)
    return vjp_input(z_star, x, u)


def grad_params(vjp_state: Callable, vjp_params: Callable, x, z_star,
                loss_grad, cfg: AndersonConfig, method: str = "anderson") -> np.ndarray:
    """``dl/dtheta`` through the equilibrium, in the layer's flat ordering."""
    u, _ = adjoint_solve(vjp_state, z_star, x, loss_grad, cfg, method=method)
    return vjp_params(z_star, x, u)


def equilibrium_gradients(layer, x, z_star, loss_grad, cfg: AndersonConfig,
                          method: str = "anderson", want_input: bool = True,
                          strict: bool = True) -> GradResult:
    """Single adjoint solve yielding both dl/dx and dl/dtheta for a layer
    exposing ``vjp_state`` / ``vjp_input`` / ``vjp_params``.

    ``strict=False`` switches to the truncated adjoint of
    :func:`truncated_adjoint`.
    """
    solve_fn = adjoint_solve if strict else truncated_adjoint
    u, trace = solve_fn(layer.vjp_state, z_star, x, loss_grad, cfg,
                        method=method)
    gx = layer.vjp_input(z_star, x, u) if want_input else None
    gp = layer.vjp_params(z_star, x, u)
    return GradResult(grad_x=gx, grad_params=gp, adjoint_trace=trace)
