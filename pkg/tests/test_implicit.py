import numpy as np
import pytest

from fpbench import (AndersonConfig, CallableMap, DeqLayer, InputError,
                     adjoint_solve, anderson_iterate, equilibrium_gradients,
                     forward_iterate, grad_input, grad_params, init_params,
                     jacobian_fd)
from fpbench.deq import flatten_params, unflatten_params
from fpbench.implicit import truncated_adjoint

TIGHT = AndersonConfig(tol=1e-10, max_iter=5000)


def contractive_layer(seed=2):
    # A seeded instance whose equilibrium map is contractive, so both
    # solvers and the adjoint iteration converge, and whose input gradient
    # is far from zero (degenerate instances drown finite differences in
    # rounding noise).
    return DeqLayer(init_params(8, 16, 2, seed=seed))


def solve_equilibrium(layer, x):
    # Forward iteration: on a contractive map the tight solve is smooth in
    # its inputs, which keeps the finite-difference oracle noise-free.
    z0 = np.zeros_like(x)
    trace = forward_iterate(layer, x, z0, tol=1e-12, max_iter=20000)
    assert trace.converged
    return trace.final_state


class TestJacobianFd:
    def test_linear_map_recovered(self):
        a = np.array([[0.5, 0.2], [0.0, 0.3]])
        f = CallableMap(lambda z, _x: z @ a.T, state_dim=2)
        jac = jacobian_fd(f, np.array([[1.0, -2.0]]), None)
        assert np.allclose(jac, a, atol=1e-8)

    def test_single_row_required(self):
        f = CallableMap(lambda z, _x: z, state_dim=2)
        with pytest.raises(InputError):
            jacobian_fd(f, np.zeros((2, 2)), None)

    def test_bad_step_rejected(self):
        f = CallableMap(lambda z, _x: z, state_dim=2)
        with pytest.raises(InputError):
            jacobian_fd(f, np.zeros((1, 2)), None, h=0.0)

    def test_deq_vjp_state_matches_fd(self):
        layer = contractive_layer()
        rng = np.random.default_rng(0)
        z = rng.standard_normal((1, 8))
        x = rng.standard_normal((1, 8))
        v = rng.standard_normal((1, 8))
        jac = jacobian_fd(layer, z, x)
        assert np.allclose(layer.vjp_state(z, x, v), v @ jac, atol=1e-4)


class TestAdjointSolve:
    def test_linear_adjoint_exact(self):
        # For f(z) = Az + b the adjoint solves u (I - A^T)^... i.e.
        # u = v (I - A)^{-1}.
        rng = np.random.default_rng(1)
        a = 0.6 * np.eye(4) + 0.05 * rng.standard_normal((4, 4))
        v = rng.standard_normal((1, 4))
        vjp = lambda z, x, u: u @ a
        z_star = np.zeros((1, 4))
        u, trace = adjoint_solve(vjp, z_star, None, v,
                                 AndersonConfig(tol=1e-10, max_iter=2000))
        assert trace.converged
        expected = v @ np.linalg.inv(np.eye(4) - a)
        assert np.allclose(u, expected, atol=1e-6)

    def test_residual_contract(self):
        layer = contractive_layer()
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 8))
        z_star = solve_equilibrium(layer, x)
        v = rng.standard_normal((2, 8))
        cfg = AndersonConfig(tol=1e-8, max_iter=2000)
        u, trace = adjoint_solve(layer.vjp_state, z_star, x, v, cfg)
        num = np.linalg.norm(v + layer.vjp_state(z_star, x, u) - u, axis=1)
        den = np.linalg.norm(v, axis=1) + cfg.lam
        assert float(np.mean(num / den)) < cfg.tol


class TestTruncatedAdjoint:
    def test_matches_strict_on_contractive_map(self):
        rng = np.random.default_rng(3)
        a = 0.5 * np.eye(3)
        vjp = lambda z, x, u: u @ a
        v = rng.standard_normal((1, 3))
        z_star = np.zeros((1, 3))
        cfg = AndersonConfig(tol=1e-9, max_iter=1000)
        for method in ("anderson", "forward"):
            u, trace = truncated_adjoint(vjp, z_star, None, v, cfg,
                                         method=method)
            assert trace.converged
            assert np.allclose(u, v @ np.linalg.inv(np.eye(3) - a), atol=1e-6)

    def test_forward_method_survives_expansive_rows(self):
        # An expansive Jacobian makes plain iteration grow; the truncation
        # must stop at a finite iterate instead of overflowing.
        a = 1.5 * np.eye(2)
        vjp = lambda z, x, u: u @ a
        v = np.ones((1, 2))
        cfg = AndersonConfig(tol=1e-6, max_iter=1000)
        u, trace = truncated_adjoint(vjp, np.zeros((1, 2)), None, v, cfg,
                                     method="forward")
        assert np.all(np.isfinite(u))
        assert not trace.converged
        assert trace.rows[-1].fevals < 1000


class TestEndToEndGradients:
    def test_grad_input_matches_fd(self):
        layer = contractive_layer()
        rng = np.random.default_rng(52)
        x = rng.standard_normal((1, 8))
        w = rng.standard_normal(8)  # loss l(z) = w . z*
        z_star = solve_equilibrium(layer, x)
        gx = grad_input(layer.vjp_state, layer.vjp_input, x, z_star,
                        w[None, :], TIGHT)
        h = 1e-5
        for j in range(8):
            dx = np.zeros_like(x)
            dx[0, j] = h
            zp = solve_equilibrium(layer, x + dx)
            zm = solve_equilibrium(layer, x - dx)
            fd = float((zp @ w - zm @ w).item() / (2 * h))
            rel = abs(gx[0, j] - fd) / max(abs(fd), 1e-8)
            assert rel < 1e-4

    def test_grad_params_matches_fd_on_seeded_coordinates(self):
        layer = contractive_layer()
        rng = np.random.default_rng(52)
        x = rng.standard_normal((1, 8))
        w = rng.standard_normal(8)
        z_star = solve_equilibrium(layer, x)
        gp = grad_params(layer.vjp_state, layer.vjp_params, x, z_star,
                         w[None, :], TIGHT)
        theta0 = flatten_params(layer.params)
        scale = max(np.max(np.abs(gp)), 1e-8)
        h = 1e-5
        idx = rng.choice(theta0.size, 20, replace=False)
        for j in idx:
            tp, tm = theta0.copy(), theta0.copy()
            tp[j] += h
            tm[j] -= h
            lp = DeqLayer(unflatten_params(tp, layer.params))
            lm = DeqLayer(unflatten_params(tm, layer.params))
            fd = float((solve_equilibrium(lp, x) @ w
                        - solve_equilibrium(lm, x) @ w).item() / (2 * h))
            rel = abs(gp[j] - fd) / max(abs(fd), 1e-3 * scale)
            assert rel < 1e-3, f"coordinate {j}"

    def test_equilibrium_gradients_bundles_both(self):
        layer = contractive_layer()
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 8))
        z_star = solve_equilibrium(layer, x)
        v = rng.standard_normal((2, 8))
        res = equilibrium_gradients(layer, x, z_star, v, TIGHT)
        assert res.grad_x.shape == (2, 8)
        assert res.grad_params.shape == (layer.n_params,)
        assert res.adjoint_trace.converged
        only_params = equilibrium_gradients(layer, x, z_star, v, TIGHT,
                                            want_input=False)
        assert only_params.grad_x is None
        assert np.allclose(only_params.grad_params, res.grad_params)

    def test_method_forward_agrees_with_anderson(self):
        layer = contractive_layer()
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 8))
        z_star = solve_equilibrium(layer, x)
        v = rng.standard_normal((1, 8))
        ga = equilibrium_gradients(layer, x, z_star, v, TIGHT,
                                   method="anderson")
        gf = equilibrium_gradients(layer, x, z_star, v, TIGHT,
                                   method="forward")
        assert np.allclose(ga.grad_params, gf.grad_params, atol=1e-6)
        assert np.allclose(ga.grad_x, gf.grad_x, atol=1e-6)
