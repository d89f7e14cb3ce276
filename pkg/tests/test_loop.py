import json

import numpy as np
import pytest

from kbse.agent import PolicyParams, Transition
from kbse.barrier import BarrierModel
from kbse.envs import make_env
from kbse.loop import (
    RunConfig,
    RunMetrics,
    _Run,
    initial_rollout,
    run_kbse,
    run_kbse_full,
    update_epsilon,
    update_upper_bound,
)

SHORT = dict(training_horizon=1200, epoch_length=600, barrier_sample_size=150, seed=3)


@pytest.fixture(scope="module")
def short_run():
    return run_kbse_full(RunConfig(**SHORT))


def test_zero_horizon_returns_initial_objects():
    policy, barrier, metrics = run_kbse(RunConfig(training_horizon=0, barrier_sample_size=200))
    fresh, _, _ = run_kbse(RunConfig(training_horizon=0, barrier_sample_size=200))
    assert np.array_equal(policy.theta, fresh.theta)
    assert barrier is not None and barrier.valid
    assert metrics.episodes == [] and metrics.total_violations == 0
    assert [e["step"] for e in metrics.epochs] == [0]


def test_initial_rollout_counts():
    env = make_env("pendulum", 0.01)
    pol = PolicyParams(3, 1, env.action_low, env.action_high)
    rng = np.random.default_rng(0)
    assert initial_rollout(env, pol, 0, rng) == []
    out = initial_rollout(env, pol, 500, rng)
    assert len(out) >= 500
    states = np.array([t.s for t in out])
    assert np.all(np.isfinite(states))
    assert np.all(states >= env.state_low) and np.all(states <= env.state_high)
    # episodes restart every 200 steps: transition 200 starts from a fresh reset
    assert not np.array_equal(out[199].s_plus, out[200].s)


def test_update_epsilon_and_upper_bound():
    assert update_epsilon(100, 1e-5) == pytest.approx(0.57985, abs=1e-4)
    # the coefficient is 1 + sqrt(2 ln 1e5) ~= 5.80, not the 1 + sqrt(10) shorthand
    assert update_epsilon(1, 1e-5) == pytest.approx(5.7985, abs=1e-3)
    zero = BarrierModel(centers=np.zeros((3, 1)) + [[0.0], [1.0], [2.0]], alpha=np.zeros(3), bandwidth=1.0)
    assert update_upper_bound(zero) == 0.0
    assert update_upper_bound(None) == 0.0


def test_config_validation():
    with pytest.raises(ValueError, match="multiple"):
        RunConfig(epoch_length=1000, episode_length=300).validate()
    with pytest.raises(ValueError):
        RunConfig(zeta=1.0).validate()
    with pytest.raises(ValueError):
        RunConfig(c_mode="other").validate()


def test_violation_count_matches_episode_costs(short_run):
    _, _, metrics, buffer = short_run
    assert metrics.total_violations == sum(e["cost"] for e in metrics.episodes)
    env = make_env("pendulum")
    # every training step after the initial rollout is in the buffer, in order
    steps = buffer.transitions[-SHORT["training_horizon"]:]
    unsafe = [t for t, tr in enumerate(steps) if env.is_unsafe(tr.s)]
    assert unsafe == metrics.violation_steps
    assert metrics.shield_interventions <= metrics.total_violations


def test_episode_and_epoch_records(short_run):
    _, barrier, metrics, _ = short_run
    assert len(metrics.episodes) == SHORT["training_horizon"] // 200
    assert all(e["length"] == 200 for e in metrics.episodes)
    assert [e["step"] for e in metrics.epochs] == [0, 600, 1200]
    eps = [e["epsilon"] for e in metrics.epochs if "epsilon" in e]
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    if barrier is not None:
        assert barrier.valid


def test_percentile_metric():
    m = RunMetrics(violation_steps=list(range(10)), training_horizon=100)
    assert m.violation_percentile(90) == 9.0
    assert RunMetrics(training_horizon=100).violation_percentile() is None


def test_runs_are_deterministic(short_run):
    p2, b2, m2, _ = run_kbse_full(RunConfig(**SHORT))
    p1, b1, m1, _ = short_run
    assert json.dumps(m1.episodes) == json.dumps(m2.episodes)
    assert json.dumps(m1.epochs) == json.dumps(m2.epochs)
    assert m1.violation_steps == m2.violation_steps
    assert np.array_equal(p1.theta, p2.theta)
    assert (b1 is None and b2 is None) or b1.delta == b2.delta


def test_fit_deferred_without_unsafe_samples():
    run = _Run(RunConfig(**SHORT))
    safe = [Transition(np.array([1.0, 0.0, 0.0]), np.array([0.0]), 0.0, np.array([1.0, 0.0, 0.0]))] * 5
    run.refit_barrier(safe, 0, 0)
    assert run.barrier is None
    assert run.metrics.epochs[-1]["status"] == "deferred"
