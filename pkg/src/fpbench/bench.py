"""Benchmark harness: config-driven solver comparisons and trace analysis.

Traces are exchanged as CSV files with the stable schema
``k,fevals,residual,elapsed_seconds`` (residual in scientific notation with
12 significant digits).  Cross-trace comparisons interpolate piecewise
linearly in log-residual against wall-clock time, since the two solvers
sample different time points.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .deq import DeqLayer, init_params
from .errors import ConfigError, DivergenceError, InputError, NotReachedError
from .problems import linear_map, make_linear_contraction, make_simple_deq, simple_deq_map
from .solvers import AndersonConfig, SolverTrace, anderson_iterate, forward_iterate

__all__ = [
    "SolverSpec",
    "BenchConfig",
    "CrossoverReport",
    "TraceData",
    "load_config",
    "build_problem",
    "write_trace_csv",
    "read_trace_csv",
    "time_to_tol",
    "fevals_to_tol",
    "detect_crossover",
    "speedup",
    "run",
]

TRACE_HEADER = ["k", "fevals", "residual", "elapsed_seconds"]

# Floor for log-interpolation; residuals of exactly zero clamp here.
_RES_FLOOR = 1e-300


@dataclass(frozen=True)
class SolverSpec:
    kind: str  # "forward" | "anderson"
    cfg: AndersonConfig
    label: str


@dataclass
class BenchConfig:
    problem: dict
    solvers: list[SolverSpec]
    repetitions: int = 1
    tol_grid: list[float] = field(default_factory=list)
    out_dir: Optional[Path] = None


@dataclass
class CrossoverReport:
    """Crossover time, pre-crossover mixing penalty, and per-tol speedups."""

    crossover_time_seconds: Optional[float]
    mixing_penalty_ratio: Optional[float]
    speedup_to_tol: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "crossover_time_seconds": self.crossover_time_seconds,
            "mixing_penalty_ratio": self.mixing_penalty_ratio,
            "speedup_to_tol": {str(k): v for k, v in self.speedup_to_tol.items()},
        }


@dataclass
class TraceData:
    """A trace round-tripped through CSV; mirrors SolverTrace's accessors."""

    iterations: np.ndarray
    fevals: np.ndarray
    residuals: np.ndarray
    times: np.ndarray
    label: str = ""


def _solver_spec_from_dict(doc, index):
    if not isinstance(doc, dict):
        raise ConfigError("solver entry must be an object", field=f"solvers[{index}]")
    kind = doc.get("kind")
    if kind not in ("forward", "anderson"):
        raise ConfigError(f"kind must be 'forward' or 'anderson', got {kind!r}",
                          field=f"solvers[{index}].kind")
    try:
        cfg = AndersonConfig(
            m=int(doc.get("m", 5)),
            lam=float(doc.get("lambda", 1e-5)),
            beta=float(doc.get("beta", 1.0)),
            tol=float(doc.get("tol", 1e-2)),
            max_iter=int(doc.get("max_iter", 1000)),
        )
    except (InputError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=f"solvers[{index}]") from exc
    return SolverSpec(kind=kind, cfg=cfg, label=doc.get("label", kind))


def load_config(path) -> BenchConfig:
    """Parse and validate a benchmark config; paths resolve relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be an object")
    problem = doc.get("problem")
    if not isinstance(problem, dict) or "kind" not in problem:
        raise ConfigError("missing problem kind", field="problem.kind")
    solvers_doc = doc.get("solvers")
    if not isinstance(solvers_doc, list) or not solvers_doc:
        raise ConfigError("at least one solver spec required", field="solvers")
    solvers = [_solver_spec_from_dict(s, i) for i, s in enumerate(solvers_doc)]
    labels = [s.label for s in solvers]
    if len(set(labels)) != len(labels):
        solvers = [
            SolverSpec(s.kind, s.cfg, f"{s.label}_{i}")
            for i, s in enumerate(solvers)
        ]
    repetitions = int(doc.get("repetitions", 1))
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1", field="repetitions")
    tol_grid = [float(t) for t in doc.get("tol_grid", [])]
    out_dir = doc.get("out_dir")
    if out_dir is not None:
        out_dir = (path.parent / out_dir).resolve()
    return BenchConfig(problem=problem, solvers=solvers,
                       repetitions=repetitions, tol_grid=tol_grid,
                       out_dir=out_dir)


def build_problem(problem: dict):
    """Instantiate (map, x, z0) from a problem spec dictionary."""
    kind = problem.get("kind")
    seed = int(problem.get("seed", 0))
    batch = int(problem.get("batch", 1))
    if kind == "linear_contraction":
        d = int(problem.get("d", 50))
        rho = float(problem.get("rho", 0.9))
        p = make_linear_contraction(d, rho, seed)
        z0 = np.zeros((batch, d))
        return linear_map(p), None, z0
    if kind == "simple_deq":
        d = int(problem.get("d", 8))
        dx = int(problem.get("dx", d))
        p = make_simple_deq(d, dx, seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((batch, dx))
        return simple_deq_map(p), x, np.zeros((batch, d))
    if kind == "deq":
        d = int(problem.get("d", 32))
        hidden = int(problem.get("hidden", 2 * d))
        groups = int(problem.get("groups", 4))
        params = init_params(d, hidden, groups, seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((batch, d))
        return DeqLayer(params), x, np.zeros((batch, d))
    raise ConfigError(f"unknown problem kind {kind!r}", field="problem.kind")


def run_solver(spec: SolverSpec, fmap, x, z0) -> SolverTrace:
    if spec.kind == "anderson":
        return anderson_iterate(fmap, x, z0, spec.cfg, label=spec.label)
    return forward_iterate(fmap, x, z0, tol=spec.cfg.tol,
                           max_iter=spec.cfg.max_iter, lam=spec.cfg.lam,
                           label=spec.label)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for k, fe, res, t in zip(trace.iterations, trace.fevals,
                                 trace.residuals, trace.times):
            writer.writerow([int(k), int(fe), f"{res:.12e}", f"{t:.9e}"])


def read_trace_csv(path) -> TraceData:
    path = Path(path)
    ks, fes, ress, ts = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rownum, row in enumerate(reader):
            if rownum == 0:
                if row != TRACE_HEADER:
                    raise InputError(
                        f"{path}: row 1: expected header {TRACE_HEADER}, got {row}")
                continue
            try:
                ks.append(int(row[0]))
                fes.append(int(row[1]))
                ress.append(float(row[2]))
                ts.append(float(row[3]))
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}: row {rownum + 1}: {exc}") from exc
    if not ks:
        raise InputError(f"{path}: trace has no data rows")
    return TraceData(iterations=np.array(ks, dtype=int),
                     fevals=np.array(fes, dtype=int),
                     residuals=np.array(ress), times=np.array(ts),
                     label=path.stem)


def _log_res(r):
    return math.log(max(float(r), _RES_FLOOR))


def residual_at_time(trace, t: float) -> float:
    """Log-linear interpolation of the residual curve at time t (clamped to
    the recorded range)."""
    times = trace.times
    logres = np.array([_log_res(r) for r in trace.residuals])
    return float(math.exp(np.interp(t, times, logres)))


def time_to_tol(trace, tol: float) -> float:
    """Interpolated first time the residual drops below tol."""
    res = trace.residuals
    below = np.nonzero(res < tol)[0]
    if below.size == 0:
        raise NotReachedError(trace.label or "trace", tol)
    i = int(below[0])
    if i == 0:
        return float(trace.times[0])
    t0, t1 = trace.times[i - 1], trace.times[i]
    r0, r1 = _log_res(res[i - 1]), _log_res(res[i])
    target = _log_res(tol)
    if r1 == r0:
        return float(t1)
    frac = (r0 - target) / (r0 - r1)
    return float(t0 + frac * (t1 - t0))


def fevals_to_tol(trace, tol: float) -> int:
    """Function evaluations spent when the residual first drops below tol."""
    below = np.nonzero(trace.residuals < tol)[0]
    if below.size == 0:
        raise NotReachedError(trace.label or "trace", tol)
    return int(trace.fevals[int(below[0])])


def detect_crossover(trace_forward, trace_anderson) -> CrossoverReport:
    """Earliest recorded time where the accelerated residual is at or below
    the baseline's and stays there for every later recorded time.

    The mixing penalty is the worst accelerated/baseline residual ratio over
    recorded times strictly before the crossover (1.0 if it crosses
    immediately).  Both fields are None when no crossover occurs inside the
    overlapping time range.
    """
    for tr, name in ((trace_forward, "forward"), (trace_anderson, "anderson")):
        if len(tr.times) == 0:
            raise InputError(f"{name} trace is empty")
    lo = max(trace_forward.times[0], trace_anderson.times[0])
    hi = min(trace_forward.times[-1], trace_anderson.times[-1])
    grid = np.unique(np.concatenate([trace_forward.times, trace_anderson.times]))
    grid = grid[(grid >= lo) & (grid <= hi)]
    if grid.size == 0:
        return CrossoverReport(None, None)
    rf = np.array([residual_at_time(trace_forward, t) for t in grid])
    ra = np.array([residual_at_time(trace_anderson, t) for t in grid])
    below = ra <= rf
    # Suffix scan: earliest index from which 'below' holds everywhere.
    cross_idx = None
    for i in range(grid.size - 1, -1, -1):
        if below[i]:
            cross_idx = i
        else:
            break
    if cross_idx is None:
        return CrossoverReport(None, None)
    if cross_idx == 0:
        penalty = 1.0
    else:
        penalty = float(np.max(ra[:cross_idx] / rf[:cross_idx]))
    return CrossoverReport(crossover_time_seconds=float(grid[cross_idx]),
                           mixing_penalty_ratio=penalty)


def speedup(trace_a, trace_b, tol: float) -> float:
    """Time-to-tol of trace_b divided by that of trace_a (>1 means a faster)."""
    return time_to_tol(trace_b, tol) / time_to_tol(trace_a, tol)


def _median_trace(traces: list[SolverTrace], timed: list[bool]) -> TraceData:
    """Residuals from run 1, elapsed-time column medianed across timed runs."""
    first = traces[0]
    rows = len(first.rows)
    stacks = [tr.times for tr, ok in zip(traces, timed)
              if ok and len(tr.rows) == rows]
    if not stacks:
        stacks = [first.times]
    med = np.median(np.stack(stacks), axis=0)
    return TraceData(iterations=first.iterations, fevals=first.fevals,
                     residuals=first.residuals, times=med, label=first.label)


def run(config_path, out_dir=None, parallel=False):
    """Execute a benchmark config end to end.

    Writes one CSV per (solver, repetition), a median CSV per solver, SVG
    plots, and ``summary.json``.  Returns ``(summary dict, diverged flag)``.
    """
    cfg = load_config(config_path)
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    if out is None:
        out = Path(config_path).resolve().parent / "bench_out"
    out.mkdir(parents=True, exist_ok=True)

    summary = {"config": json.loads(Path(config_path).read_text()),
               "solvers": {}, "trace_files": {}}
    diverged = False
    median_traces = {}
    for spec in cfg.solvers:
        fmap, x, z0 = build_problem(cfg.problem)
        try:
            first = run_solver(spec, fmap, x, z0)
        except DivergenceError as exc:
            diverged = True
            summary["solvers"][spec.label] = {
                "converged": False, "error": str(exc),
            }
            continue

        def _rerun(_i):
            m, xx, zz = build_problem(cfg.problem)
            return run_solver(spec, m, xx, zz)

        reps = [first]
        extra = range(1, cfg.repetitions)
        if parallel and cfg.repetitions > 1:
            with ThreadPoolExecutor() as pool:
                reps += list(pool.map(_rerun, extra))
            timed = [True] + [False] * (cfg.repetitions - 1)
        else:
            reps += [_rerun(i) for i in extra]
            timed = [True] * cfg.repetitions

        files = []
        for i, tr in enumerate(reps, start=1):
            fname = out / f"trace_{spec.label}_rep{i}.csv"
            write_trace_csv(tr, fname)
            files.append(str(fname))
        med = _median_trace(reps, timed)
        med_file = out / f"trace_{spec.label}.csv"
        write_trace_csv(med, med_file)
        files.append(str(med_file))

        median_traces[spec.label] = med
        summary["trace_files"][spec.label] = files
        summary["solvers"][spec.label] = {
            "converged": bool(first.converged),
            "final_residual": float(first.residuals[-1]),
            "fevals": int(first.fevals[-1]),
            "elapsed_seconds": float(med.times[-1]),
        }

    forward_specs = [s for s in cfg.solvers if s.kind == "forward"
                     and s.label in median_traces]
    anderson_specs = [s for s in cfg.solvers if s.kind == "anderson"
                      and s.label in median_traces]
    if forward_specs and anderson_specs:
        fwd = median_traces[forward_specs[0].label]
        acc = median_traces[anderson_specs[0].label]
        report = detect_crossover(fwd, acc)
        for tol in cfg.tol_grid:
            try:
                report.speedup_to_tol[tol] = speedup(acc, fwd, tol)
            except NotReachedError as exc:
                report.speedup_to_tol[tol] = None
                summary.setdefault("notes", []).append(str(exc))
        summary["crossover"] = report.to_dict()

        from .plots import plot_traces  # deferred: matplotlib is heavy
        svg = out / "residuals.svg"
        plot_traces([fwd, acc], svg, crossover=report)
        summary["plot"] = str(svg)

    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    summary["summary_file"] = str(out / "summary.json")
    return summary, diverged
