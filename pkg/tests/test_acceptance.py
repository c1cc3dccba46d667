"""Acceptance gate: one test per release criterion.

Each test prints a PASS line with the measured quantity so a `pytest -v -s`
run doubles as the release report.
"""

import json

import numpy as np
import pytest

from fpbench import (
    AndersonConfig,
    DeqLayer,
    anderson_iterate,
    anderson_step,
    forward_iterate,
    grad_input,
    grad_params,
    init_params,
)
from fpbench.bench import detect_crossover, fevals_to_tol, read_trace_csv, run
from fpbench.deq import flatten_params, unflatten_params
from fpbench.linalg import gram, solve_bordered
from fpbench.problems import (
    linear_map,
    make_linear_contraction,
    scalar_probe_suite,
)
from fpbench.solvers import CallableMap, History
from fpbench.training import generate_blobs, train


def test_criterion_1_alpha_constraint():
    # 1000 seeded extrapolation steps on random histories: every alpha row
    # must satisfy the sum-to-one constraint to 1e-8.
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        b = int(rng.integers(1, 4))
        d = int(rng.integers(2, 21))
        m = int(rng.integers(1, 6))
        hist = History(X=rng.standard_normal((b, d, m)),
                       F=rng.standard_normal((b, d, m)))
        hist.count = m
        n = int(rng.integers(1, m + 1))
        _, alpha = anderson_step(hist, n, lam=1e-5, beta=1.0)
        worst = max(worst, float(np.max(np.abs(alpha.sum(axis=1) - 1.0))))
    assert worst <= 1e-8
    print(f"\nPASS criterion 1: max |sum(alpha)-1| = {worst:.3e} <= 1e-8")


def constraint_elimination_alpha(h):
    # Independent oracle: parametrize alpha = e1 + N b with N spanning the
    # sum-zero subspace, minimize the quadratic form, undo the substitution.
    n = h.shape[0]
    if n == 1:
        return np.array([1.0])
    nullbasis = np.zeros((n, n - 1))
    nullbasis[0, :] = -1.0
    nullbasis[1:, :] = np.eye(n - 1)
    e1 = np.zeros(n)
    e1[0] = 1.0
    a = nullbasis.T @ h @ nullbasis
    rhs = -nullbasis.T @ h @ e1
    return e1 + nullbasis @ np.linalg.solve(a, rhs)


def test_criterion_2_bordered_solver_matches_oracle():
    rng = np.random.default_rng(1)
    lams = [0.0, 1e-5, 1e-2]
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(n, 21))
        g = rng.standard_normal((d, n))
        h = gram(g, lams[i % 3])
        alpha = solve_bordered(h).alpha
        ref = constraint_elimination_alpha(h)
        worst = max(worst, float(np.linalg.norm(alpha - ref)
                                 / np.linalg.norm(ref)))
    assert worst <= 1e-8
    print(f"\nPASS criterion 2: max relative alpha error = {worst:.3e} <= 1e-8")


def test_criterion_3_m1_degenerates_to_forward():
    cfg = AndersonConfig(m=1, beta=1.0, tol=1e-10, max_iter=200)
    worst = 0.0
    for probe in scalar_probe_suite():
        z0 = np.zeros((1, probe.map.state_dim))
        fwd = forward_iterate(probe.map, None, z0, tol=1e-10, max_iter=200,
                              record_states=True)
        acc = anderson_iterate(probe.map, None, z0, cfg, record_states=True)
        n = min(len(fwd.states), len(acc.states))
        for a, b in zip(fwd.states[:n], acc.states[:n]):
            worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst <= 1e-12
    print(f"\nPASS criterion 3: max iterate gap = {worst:.3e} <= 1e-12")


def test_criterion_4_not_slower_on_contractions():
    cfg = AndersonConfig(m=5, lam=1e-5, beta=1.0, tol=1e-2, max_iter=1000)
    savings = []
    for seed in range(20):
        p = make_linear_contraction(50, 0.9, seed)
        fmap = linear_map(p)
        z0 = np.zeros((1, 50))
        fwd = forward_iterate(fmap, None, z0, tol=1e-2, max_iter=1000)
        acc = anderson_iterate(fmap, None, z0, cfg)
        assert fwd.converged and acc.converged
        fe_f = int(fwd.fevals[-1])
        fe_a = int(acc.fevals[-1])
        assert fe_a <= fe_f, f"seed {seed}: anderson {fe_a} > forward {fe_f}"
        savings.append(1.0 - fe_a / fe_f)
    med = float(np.median(savings))
    assert med >= 0.30
    print(f"\nPASS criterion 4: anderson <= forward on 20/20 seeds, "
          f"median savings {med:.1%} >= 30%")


def test_criterion_5_linear_exactness():
    # Two iterates of z <- 0.5 z + 1: X = [0, 1], F = [1, 1.5]. One
    # unregularized step must land on the fixed point z* = 2.
    hist = History(X=np.array([[[0.0, 1.0]]]), F=np.array([[[1.0, 1.5]]]))
    hist.count = 2
    z_next, alpha = anderson_step(hist, 2, lam=0.0, beta=1.0)
    err = abs(float(z_next[0, 0]) - 2.0)
    assert err <= 1e-12
    assert abs(float(alpha.sum()) - 1.0) <= 1e-12
    print(f"\nPASS criterion 5: |z_next - 2| = {err:.3e} <= 1e-12")


def _tight_solve(layer, x, tol=1e-10):
    trace = forward_iterate(layer, x, np.zeros_like(x), tol=tol,
                            max_iter=20000)
    assert trace.converged
    return trace.final_state


def _oracle_solve(layer, x):
    # The finite-difference oracle needs a solve well below the measurement
    # noise floor; 1e-10 in the solve would alias into the h=1e-5 quotient.
    return _tight_solve(layer, x, tol=1e-12)


def test_criterion_6_gradient_correctness():
    layer = DeqLayer(init_params(8, 16, 2, seed=2))
    rng = np.random.default_rng(52)
    x = rng.standard_normal((1, 8))
    w = rng.standard_normal(8)  # loss l(z) = w . z*
    cfg = AndersonConfig(tol=1e-10, max_iter=5000)
    z_star = _tight_solve(layer, x)
    h = 1e-5

    gx = grad_input(layer.vjp_state, layer.vjp_input, x, z_star,
                    w[None, :], cfg)
    worst_x = 0.0
    for j in range(8):
        dx = np.zeros_like(x)
        dx[0, j] = h
        fd = float((_oracle_solve(layer, x + dx) @ w
                    - _oracle_solve(layer, x - dx) @ w).item() / (2 * h))
        worst_x = max(worst_x, abs(gx[0, j] - fd) / max(abs(fd), 1e-8))
    assert worst_x < 1e-4

    gp = grad_params(layer.vjp_state, layer.vjp_params, x, z_star,
                     w[None, :], cfg)
    theta0 = flatten_params(layer.params)
    scale = max(np.max(np.abs(gp)), 1e-8)
    idx = np.random.default_rng(0).choice(theta0.size, 50, replace=False)
    worst_p = 0.0
    for j in idx:
        tp, tm = theta0.copy(), theta0.copy()
        tp[j] += h
        tm[j] -= h
        lp = DeqLayer(unflatten_params(tp, layer.params))
        lm = DeqLayer(unflatten_params(tm, layer.params))
        fd = float((_oracle_solve(lp, x) @ w
                    - _oracle_solve(lm, x) @ w).item() / (2 * h))
        worst_p = max(worst_p, abs(gp[j] - fd) / max(abs(fd), 1e-3 * scale))
    assert worst_p < 1e-3
    print(f"\nPASS criterion 6: input rel err {worst_x:.3e} < 1e-4, "
          f"param rel err {worst_p:.3e} < 1e-3 (50 coordinates)")


def test_criterion_7_deq_benchmark(tmp_path):
    doc = {
        "problem": {"kind": "deq", "d": 32, "hidden": 64, "groups": 4,
                    "seed": 3, "batch": 1},
        "solvers": [
            {"kind": "forward", "tol": 1e-4, "max_iter": 2000,
             "label": "forward"},
            {"kind": "anderson", "tol": 1e-4, "max_iter": 2000,
             "label": "anderson"},
        ],
        "tol_grid": [1e-4],
    }
    cfg_path = tmp_path / "deq.json"
    cfg_path.write_text(json.dumps(doc))
    summary, diverged = run(cfg_path, out_dir=tmp_path / "out")
    assert not diverged
    fwd = read_trace_csv(tmp_path / "out" / "trace_forward.csv")
    acc = read_trace_csv(tmp_path / "out" / "trace_anderson.csv")
    fe_f = fevals_to_tol(fwd, 1e-4)
    fe_a = fevals_to_tol(acc, 1e-4)
    assert fe_a < fe_f
    t_cross = summary["crossover"]["crossover_time_seconds"]
    assert t_cross is not None and np.isfinite(t_cross)
    print(f"\nPASS criterion 7: anderson {fe_a} < forward {fe_f} fevals to "
          f"1e-4; crossover at {t_cross:.2e} s")


def test_criterion_8_training_demo():
    # Demo configuration matches the train-demo CLI defaults.
    ds = generate_blobs(400, d=8, classes=2, separation=2.0, seed=1)
    cfg = AndersonConfig()
    adjoint = AndersonConfig(max_iter=50)
    rows = {}
    for solver in ("anderson", "forward"):
        rep = train(ds, epochs=200, lr=0.1, solver=solver, cfg=cfg, seed=1,
                    groups=1, adjoint_cfg=adjoint)
        row = rep.epoch_at_accuracy(0.95)
        assert row is not None, f"{solver} never reached 95% in 200 epochs"
        rows[solver] = row
    fe_a = rows["anderson"].cumulative_fevals
    fe_f = rows["forward"].cumulative_fevals
    assert fe_a < fe_f
    ratio = fe_f / fe_a
    assert 1.2 <= ratio <= 20.0
    print(f"\nPASS criterion 8: 95% at epoch {rows['anderson'].epoch} "
          f"(anderson, {fe_a} fevals) vs epoch {rows['forward'].epoch} "
          f"(forward, {fe_f} fevals); speedup {ratio:.2f} in [1.2, 20]")


def test_criterion_9_cli_reproducibility(tmp_path):
    doc = {
        "problem": {"kind": "linear_contraction", "d": 50, "rho": 0.9,
                    "seed": 7},
        "solvers": [
            {"kind": "forward", "tol": 1e-8, "label": "forward"},
            {"kind": "anderson", "tol": 1e-8, "label": "anderson"},
        ],
        "tol_grid": [1e-6],
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(doc))
    summaries = []
    for name in ("run1", "run2"):
        summary, diverged = run(cfg_path, out_dir=tmp_path / name)
        assert not diverged
        summaries.append(json.loads(
            (tmp_path / name / "summary.json").read_text()))
    for label in ("forward", "anderson"):
        res1 = [line.split(",")[2] for line in
                (tmp_path / "run1" / f"trace_{label}.csv")
                .read_text().splitlines()[1:]]
        res2 = [line.split(",")[2] for line in
                (tmp_path / "run2" / f"trace_{label}.csv")
                .read_text().splitlines()[1:]]
        assert res1 == res2
    for label in ("forward", "anderson"):
        s1 = dict(summaries[0]["solvers"][label])
        s2 = dict(summaries[1]["solvers"][label])
        s1.pop("elapsed_seconds")
        s2.pop("elapsed_seconds")
        assert s1 == s2  # everything but the timing column is deterministic

    def trace(times, residuals):
        from fpbench.bench import TraceData
        n = len(times)
        return TraceData(iterations=np.arange(n),
                         fevals=np.arange(1, n + 1),
                         residuals=np.array(residuals),
                         times=np.array(times, dtype=float))

    rep = detect_crossover(trace([1, 2, 3], [0.9, 0.8, 0.7]),
                           trace([1, 2, 3], [1.0, 0.6, 0.3]))
    assert rep.crossover_time_seconds == 2.0
    assert rep.mixing_penalty_ratio == pytest.approx(1.0 / 0.9)
    print("\nPASS criterion 9: byte-identical residual columns, valid "
          "summary JSON, crossover_time = 2 exactly")
