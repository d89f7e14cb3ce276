import logging

import numpy as np
import pytest

from kbse.agent import Transition
from kbse.barrier import BarrierModel
from kbse.shield import LocalLinearModel, fit_local_dynamics, safe_action


def _linear_data(rng, p, q, n, P0, Q0):
    out = []
    for _ in range(n):
        s, a = rng.normal(size=p), rng.normal(size=q)
        out.append(Transition(s, a, 0.0, P0 @ s + Q0 @ a))
    return out


def test_recovers_linear_dynamics():
    rng = np.random.default_rng(0)
    P0, Q0 = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))
    dyn = fit_local_dynamics(_linear_data(rng, 2, 1, 10, P0, Q0), 500)
    assert np.max(np.abs(dyn.P - P0)) < 1e-8
    assert np.max(np.abs(dyn.Q - Q0)) < 1e-8
    assert dyn.residual < 1e-8


def test_single_transition_min_norm_fit():
    t = Transition([1.0, 2.0], [0.5], 0.0, [3.0, -1.0])
    dyn = fit_local_dynamics([t], 500)
    assert np.max(np.abs(dyn.predict(t.s, t.a) - t.s_plus)) < 1e-8
    x = np.array([1.0, 2.0, 0.5])
    # minimum-norm solution lies in the row space of the single regressor
    theta = np.hstack([dyn.P, dyn.Q])
    assert np.allclose(theta, np.outer(t.s_plus, x) / (x @ x), atol=1e-10)


def test_window_uses_most_recent():
    rng = np.random.default_rng(1)
    old = _linear_data(rng, 2, 1, 50, np.eye(2), np.ones((2, 1)))
    P0, Q0 = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))
    new = _linear_data(rng, 2, 1, 20, P0, Q0)
    dyn = fit_local_dynamics(old + new, 20)
    assert dyn.window_H == 20
    assert np.max(np.abs(dyn.P - P0)) < 1e-8


def test_empty_window_rejected():
    with pytest.raises(ValueError):
        fit_local_dynamics([], 10)


def _barrier(centers, alpha, bw, nu):
    return BarrierModel(centers=np.atleast_2d(centers), alpha=np.asarray(alpha, float),
                        bandwidth=bw, eta=0.0, nu=nu, valid=True, horizon_T=10)


def _one_d():
    # one center far to the right: B is smooth and monotone near the query
    b = _barrier([[10.0]], [1.0], 3.0, nu=0.025)
    dyn = LocalLinearModel(P=np.eye(1), Q=np.eye(1), window_H=1, residual=0.0)
    return b, dyn


def test_projection_matches_half_space_oracle():
    b, dyn = _one_d()
    s, a = np.array([0.5]), np.array([1.5])
    s_hat = s + a
    val = b(s_hat[None, :])[0]
    target = 0.95 * b.nu
    assert val > target
    g = b.gradient(s_hat)[0]
    # closest point on {x : val + g (x - a) <= target}
    oracle = a[0] - (val - target) / g
    out = safe_action(b, dyn, s, a, (np.array([-10.0]), np.array([10.0])))
    assert out[0] == pytest.approx(oracle, abs=1e-6)
    assert b(dyn.predict(s, out)[None, :])[0] <= b.nu


def test_inactive_constraint_returns_action_and_is_idempotent():
    b, dyn = _one_d()
    box = (np.array([-10.0]), np.array([10.0]))
    a = np.array([-2.0])
    assert np.array_equal(safe_action(b, dyn, np.array([0.0]), a, box), a)
    out = safe_action(b, dyn, np.array([0.0]), a, box)
    assert np.array_equal(safe_action(b, dyn, np.array([0.0]), out, box), out)


def test_uncontrollable_action_falls_back(caplog):
    b, _ = _one_d()
    dyn = LocalLinearModel(P=np.eye(1), Q=np.zeros((1, 1)), window_H=1, residual=0.0)
    box = (np.array([-2.0]), np.array([2.0]))
    with caplog.at_level(logging.INFO, logger="kbse.shield"):
        out = safe_action(b, dyn, np.array([9.0]), np.array([1.0]), box, rng=np.random.default_rng(0))
    assert -2.0 <= out[0] <= 2.0
    assert "degenerate" in caplog.text


def test_result_always_in_box():
    rng = np.random.default_rng(2)
    for _ in range(50):
        b = _barrier(rng.normal(size=(5, 2)), rng.uniform(0, 1, 5), 1.0, nu=0.05)
        dyn = LocalLinearModel(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), 1, 0.0)
        out = safe_action(b, dyn, rng.normal(size=2), rng.uniform(-1, 1, 2),
                          (-np.ones(2), np.ones(2)), rng=rng)
        assert np.all(out >= -1) and np.all(out <= 1)


def _linear_instance(rng):
    centers = rng.normal(size=(3, 2)) * 0.5 + np.array([4.0, 0.0])
    b = _barrier(centers, rng.uniform(0.5, 1.0, 3), 2.5, nu=1.0)
    dyn = LocalLinearModel(np.eye(2), rng.normal(size=(2, 2)) * 0.5 + np.eye(2), 1, 0.0)
    s = rng.uniform(-1, 1, size=2)
    a = rng.uniform(-1, 1, size=2)
    b_hat = b(dyn.predict(s, a)[None, :])[0]
    b = BarrierModel(**{**b.__dict__, "nu": b_hat / 0.95 * rng.uniform(0.9, 0.99)})
    return b, dyn, s, a


def test_grid_minimality():
    rng = np.random.default_rng(3)
    low, high = -np.ones(2) * 2, np.ones(2) * 2
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 50), np.linspace(-2, 2, 50)), -1).reshape(-1, 2)
    cell = np.sqrt(2) * 4 / 49
    for _ in range(50):
        b, dyn, s, a = _linear_instance(rng)
        out = safe_action(b, dyn, s, a, (low, high), rng=rng)
        s_hat = dyn.predict(s, a)
        val = b(s_hat[None, :])[0]
        g = dyn.Q.T @ b.gradient(s_hat)
        feasible = grid[val + (grid - a) @ g <= 0.95 * b.nu]
        best = np.min(np.linalg.norm(feasible - a, axis=1))
        assert np.linalg.norm(out - a) <= best + cell
