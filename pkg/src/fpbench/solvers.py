"""Forward iteration and windowed Anderson extrapolation.

Both solvers operate on state batches: (b, d) float64 arrays whose rows are
independent fixed-point problems sharing one map.  The Anderson window is a
ring buffer of the last m iterates and their images; each step solves one
small bordered system per batch row and blends old iterates with their
images through the mixing parameter beta.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import DivergenceError, InputError
from .linalg import solve_bordered

__all__ = [
    "FixedPointMap",
    "CallableMap",
    "AndersonConfig",
    "SolverTrace",
    "TraceRow",
    "History",
    "relative_residual",
    "forward_iterate",
    "anderson_step",
    "anderson_iterate",
    "wall_clock",
    "as_state_batch",
]


def wall_clock() -> float:
    """Monotonic timestamp in seconds."""
    return time.perf_counter()


def as_state_batch(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InputError(f"state batch must be (b, d) with d > 0, got {arr.shape}")
    return arr


class FixedPointMap(Protocol):
    """Contract for maps f(z, x) iterated toward z* = f(z*, x)."""

    state_dim: int

    def eval(self, z: np.ndarray, x: Optional[np.ndarray]) -> np.ndarray: ...


class CallableMap:
    """Wrap a plain function ``fn(z, x) -> z'`` as a FixedPointMap."""

    def __init__(self, fn: Callable, state_dim: int):
        self._fn = fn
        self.state_dim = state_dim

    def eval(self, z, x):
        return self._fn(z, x)


@dataclass(frozen=True)
class AndersonConfig:
    """Hyperparameters of the extrapolated solver.

    Defaults follow the standard recipe: window m=5, regularization
    lambda=1e-5, beta=1.0, tolerance 1e-2, cap of 1000 iterations.
    """

    m: int = 5
    lam: float = 1e-5
    beta: float = 1.0
    tol: float = 1e-2
    max_iter: int = 1000

    def __post_init__(self):
        if self.m < 1:
            raise InputError(f"window size m must be >= 1, got {self.m}")
        if self.lam < 0:
            raise InputError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 < self.beta <= 1.0:
            raise InputError(f"beta must lie in (0, 1], got {self.beta}")
        if self.tol <= 0:
            raise InputError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 2:
            raise InputError(f"max_iter must be >= 2, got {self.max_iter}")


@dataclass(frozen=True)
class TraceRow:
    k: int
    residual: float
    elapsed_seconds: float
    fevals: int


@dataclass
class SolverTrace:
    """Instrumented run: one row per map evaluation, newest state attached."""

    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False
    final_state: Optional[np.ndarray] = None
    label: str = ""
    states: Optional[list[np.ndarray]] = None

    def record(self, k, residual, elapsed, fevals, state=None):
        self.rows.append(TraceRow(k, float(residual), float(elapsed), int(fevals)))
        if self.states is not None and state is not None:
            self.states.append(state.copy())

    @property
    def residuals(self) -> np.ndarray:
        return np.array([r.residual for r in self.rows])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.elapsed_seconds for r in self.rows])

    @property
    def fevals(self) -> np.ndarray:
        return np.array([r.fevals for r in self.rows], dtype=int)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.k for r in self.rows], dtype=int)


@dataclass
class History:
    """Ring buffer of past iterates X and their images F, shape (b, d, m)."""

    X: np.ndarray
    F: np.ndarray
    count: int = 0
    write_slot: int = 0

    @property
    def window(self) -> int:
        return self.X.shape[2]

    def push(self, z, fz, k):
        slot = k % self.window
        self.X[:, :, slot] = z
        self.F[:, :, slot] = fz
        self.count = min(self.count + 1, self.window)
        self.write_slot = slot


def relative_residual(fz, z, lam: float) -> float:
    """Batch-mean of ``||f(z) - z|| / (||f(z)|| + lam)`` per row.

    Rows at an exact fixed point contribute 0; with lam = 0 a row with
    ``f(z) = 0`` but ``z != 0`` contributes +inf.
    """
    fz = as_state_batch(fz)
    z = as_state_batch(z)
    if fz.shape != z.shape:
        raise InputError(f"shape mismatch: {fz.shape} vs {z.shape}")
    num = np.linalg.norm(fz - z, axis=1)
    den = np.linalg.norm(fz, axis=1) + lam
    out = np.where(num == 0.0, 0.0, np.divide(num, den, out=np.full_like(num, np.inf), where=den > 0))
    return float(np.mean(out))


def _check_finite(z, k):
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite state", iteration=k)


def forward_iterate(f: FixedPointMap, x, z0, tol=1e-2, max_iter=1000, lam=1e-5,
                    label="forward", record_states=False) -> SolverTrace:
    """Plain fixed-point iteration z <- f(z, x) with one evaluation per step."""
    z = as_state_batch(z0).copy()
    trace = SolverTrace(label=label, states=[] if record_states else None)
    t0 = wall_clock()
    fevals = 0
    for k in range(max_iter):
        fz = f.eval(z, x)
        fevals += 1
        _check_finite(fz, k)
        res = relative_residual(fz, z, lam)
        trace.record(k, res, wall_clock() - t0, fevals, state=fz)
        z = fz
        if res < tol:
            trace.converged = True
            break
    trace.final_state = z
    return trace


def anderson_step(history: History, n: int, lam: float, beta: float, step=None):
    """One extrapolation step from n populated history columns.

    Builds G = F - X over the window, solves the bordered system per batch
    row, and blends: ``z_next = (1-beta) * X @ alpha + beta * F @ alpha``.
    Returns ``(z_next, alpha)`` with alpha of shape (b, n) in storage order.
    """
    if n < 1 or n > history.count:
        raise InputError(f"window n={n} outside populated history ({history.count})")
    X = history.X[:, :, :n]
    F = history.F[:, :, :n]
    G = F - X
    b = X.shape[0]
    # Stacked bordered systems, one per batch row; LAPACK's partial-pivot
    # factorization solves them in one call.  Semantics match solve_bordered.
    h = np.einsum("bdn,bdk->bnk", G, G)
    h = 0.5 * (h + h.transpose(0, 2, 1))
    h[:, np.arange(n), np.arange(n)] += lam
    bordered = np.zeros((b, n + 1, n + 1))
    bordered[:, 0, 1:] = 1.0
    bordered[:, 1:, 0] = 1.0
    bordered[:, 1:, 1:] = h
    rhs = np.zeros((b, n + 1, 1))
    rhs[:, 0, 0] = 1.0
    try:
        alpha = np.linalg.solve(bordered, rhs)[:, 1:, 0]
    except np.linalg.LinAlgError:
        # Re-solve row by row so the error points at the offending system.
        alpha = np.empty((b, n))
        for i in range(b):
            alpha[i] = solve_bordered(h[i], step=step).alpha
    z_next = np.einsum("bn,bdn->bd", alpha, (1.0 - beta) * X + beta * F)
    return z_next, alpha


def anderson_iterate(f: FixedPointMap, x, z0, cfg: AndersonConfig,
                     label="anderson", record_states=False) -> SolverTrace:
    """Windowed Anderson extrapolation over ``f`` from ``z0``.

    Initialization evaluates the map twice (z0 and f(z0)); every loop
    iteration evaluates it exactly once.  The run stops as soon as the
    relative residual of the newest iterate drops below cfg.tol.
    """
    z0 = as_state_batch(z0)
    b, d = z0.shape
    hist = History(X=np.zeros((b, d, cfg.m)), F=np.zeros((b, d, cfg.m)))
    trace = SolverTrace(label=label, states=[] if record_states else None)
    t0 = wall_clock()
    fevals = 0

    # Seed the window: X[:,0] = z0, F[:,0] = f(z0), X[:,1] = F[:,0], ...
    z = z0.copy()
    for k in (0, 1):
        fz = f.eval(z, x)
        fevals += 1
        _check_finite(fz, k)
        hist.push(z, fz, k)
        res = relative_residual(fz, z, cfg.lam)
        trace.record(k, res, wall_clock() - t0, fevals, state=fz)
        if res < cfg.tol:
            trace.converged = True
            trace.final_state = fz
            return trace
        z = fz

    for k in range(2, cfg.max_iter):
        n = min(k, cfg.m)
        z, _ = anderson_step(hist, n, cfg.lam, cfg.beta, step=k)
        _check_finite(z, k)
        fz = f.eval(z, x)
        fevals += 1
        _check_finite(fz, k)
        hist.push(z, fz, k)
        res = relative_residual(fz, z, cfg.lam)
        trace.record(k, res, wall_clock() - t0, fevals, state=fz)
        if res < cfg.tol:
            trace.converged = True
            break
    trace.final_state = hist.F[:, :, hist.write_slot].copy()
    return trace
