"""Acceptance suite: one check per criterion, each reported as a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed in the "acceptance criteria" section at the end of the session.
"""

import json
import time

import numpy as np
import pytest

from conftest import record
from kbse.agent import DDPG, PolicyParams, Transition
from kbse.barrier import BarrierContext, BarrierModel, compute_bc
from kbse.cli import main
from kbse.cme import epsilon_bound, expected_value, fit_cme_arrays, zeta_bound
from kbse.kernels import KernelSpec, gram_matrix, median_bandwidth
from kbse.safety import Constraint, SafetySpec
from kbse.shield import LocalLinearModel, fit_local_dynamics, safe_action


# 1. CME oracle equivalence ---------------------------------------------------

def test_criterion_1_cme_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        n, p, q = int(rng.integers(1, 51)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
        s, a, sp = rng.normal(size=(n, p)), rng.normal(size=(n, q)), rng.normal(size=(n, p))
        bw, lam = float(rng.uniform(0.3, 3.0)), float(10 ** rng.uniform(-4, -1))
        model = fit_cme_arrays(s, a, sp, KernelSpec(1.0, bw, lam))
        f = rng.normal(size=n)
        qs, qa = rng.normal(size=p), rng.normal(size=q)
        x = np.hstack([s, a])
        kv = np.exp(-np.sum((x - np.concatenate([qs, qa])) ** 2, axis=1) / (2 * bw**2))
        oracle = kv @ np.linalg.inv(gram_matrix(x, bw) + lam * n * np.eye(n)) @ f
        worst = max(worst, abs(expected_value(model, f, qs, qa) - oracle))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10
    record(1, ok, f"max |error| {worst:.2e} (< 1e-9), {elapsed:.2f}s (< 10s)")
    assert ok


# 2. MMD radius ------------------------------------------------------------------

def test_criterion_2_epsilon_bound():
    eps = epsilon_bound(100, 1.0, 1e-5)
    vals = np.array([epsilon_bound(n, 1.0, 1e-5) for n in range(10, 10_001)])
    decreasing = bool(np.all(np.diff(vals) < 0))
    rng = np.random.default_rng(102)
    consistent = 0
    for _ in range(1000):
        n = int(rng.integers(1, 100_000))
        z = float(10 ** rng.uniform(-12, -0.01))
        consistent += zeta_bound(epsilon_bound(n, 1.0, z), n, 1.0) <= z + 1e-12
    ok = abs(eps - 0.57985) <= 1e-4 and decreasing and consistent == 1000
    record(2, ok, f"eps(100,1,1e-5)={eps:.5f}, strictly decreasing={decreasing}, "
                  f"consistent {consistent}/1000")
    assert ok


# 3. CME Monte-Carlo convergence --------------------------------------------------

def _bump(x):
    return np.exp(-((x - 0.3) ** 2) / 0.5)


def _cme_error(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 1))
    a = rng.uniform(-1, 1, size=(n, 1))
    sp = 0.9 * s + 0.1 * a + 0.05 * rng.standard_normal((n, 1))
    bw = median_bandwidth(np.hstack([s, a]), rng)
    model = fit_cme_arrays(s, a, sp, KernelSpec(1.0, bw, 1e-4))
    f = _bump(sp[:, 0])
    qrng = np.random.default_rng(10_000 + seed)
    qs, qa = qrng.uniform(-0.8, 0.8, size=(20, 1)), qrng.uniform(-0.8, 0.8, size=(20, 1))
    est = model.expected_batch(f, qs, qa)
    noise = qrng.standard_normal(100_000)
    truth = np.array([_bump(0.9 * x + 0.1 * u + 0.05 * noise).mean() for x, u in zip(qs[:, 0], qa[:, 0])])
    return float(np.mean(np.abs(est - truth)))


def test_criterion_3_cme_convergence():
    t0 = time.perf_counter()
    small = np.mean([_cme_error(100, seed) for seed in range(20)])
    large = np.mean([_cme_error(1000, seed) for seed in range(20)])
    elapsed = time.perf_counter() - t0
    ok = large < small and elapsed < 120
    record(3, ok, f"mean |err| N=100: {small:.4g}, N=1000: {large:.4g}, {elapsed:.1f}s (< 120s)")
    assert ok


# 4. Certificate soundness on a 1-D random walk -----------------------------------

WALK_T = 20
WALK_SIGMA = 0.3
WALK_SPEC = SafetySpec((Constraint(0, "lt", 1.0, label="x"),), WALK_T)
WALK_ZETA = 0.05  # 19 of 20 trials is the 1 - zeta = 0.95 confidence level


def _walk_policy(states):
    return np.clip(-0.2 * np.asarray(states)[:, :1], -0.5, 0.5)


def _walk_step(s, a, rng):
    return np.clip(s + a + WALK_SIGMA * rng.standard_normal(s.shape), -2.0, 2.0)


def _walk_trial(seed, n=300, rollouts=10_000):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.5, 1.5, size=(n, 1))
    a = np.clip(_walk_policy(s) + 0.2 * rng.standard_normal((n, 1)), -0.5, 0.5)
    sp = _walk_step(s, a, rng)
    data = [Transition(s[i], a[i], 0.0, sp[i]) for i in range(n)]
    init = rng.uniform(0.0, 0.4, size=(64, 1))
    ctx = BarrierContext(
        initial_states=init, action_low=np.array([-0.5]), action_high=np.array([0.5]),
        state_sampler=lambda r, m: r.uniform(-2.0, 2.0, size=(m, 1)), horizon_T=WALK_T,
        zeta=WALK_ZETA, policy=_walk_policy, ridge_lambda=1e-3,
    )
    bw = median_bandwidth(s, rng)
    kernel = KernelSpec(bw, median_bandwidth(np.hstack([s, a]), rng), 1e-3)
    model = compute_bc(data, WALK_SPEC, kernel, epsilon_bound(n, 1.0, WALK_ZETA), ctx=ctx, rng=rng)

    x = rng.uniform(0.0, 0.4, size=(rollouts, 1))
    hit = x[:, 0] >= 1.0
    for _ in range(WALK_T):
        x = _walk_step(x, _walk_policy(x), rng)
        hit |= x[:, 0] > 1.0
    return model, float(hit.mean())


def test_criterion_4_soundness():
    t0 = time.perf_counter()
    trials, seed = [], 400
    while len(trials) < 20 and seed < 460:
        model, freq = _walk_trial(seed)
        seed += 1
        if model.valid:
            trials.append((model.delta, model.delta_raw, freq))
    elapsed = time.perf_counter() - t0
    holds = sum(d >= f for d, _, f in trials)
    vacuous = sum(d >= 1.0 for d, _, _ in trials)
    freqs = [f for _, _, f in trials]
    ok = len(trials) == 20 and holds >= 19 and elapsed < 300
    record(4, ok, f"delta >= empirical frequency in {holds}/{len(trials)} valid barriers "
                  f"(frequency {min(freqs):.3f}-{max(freqs):.3f}; {vacuous} certificates vacuous, "
                  f"unclamped (eta + cT)/nu >= {min(r for _, r, _ in trials):.1f}), "
                  f"{elapsed:.1f}s (< 300s)")
    assert ok


# 5. Shield correctness ------------------------------------------------------------

def _barrier(centers, alpha, bw, nu):
    return BarrierModel(centers=np.atleast_2d(centers), alpha=np.asarray(alpha, float),
                        bandwidth=bw, eta=0.0, nu=nu, valid=True, horizon_T=10)


def test_criterion_5_shield():
    b = _barrier([[10.0]], [1.0], 3.0, nu=0.025)
    dyn = LocalLinearModel(np.eye(1), np.eye(1), 1, 0.0)
    s, a = np.array([0.5]), np.array([1.5])
    s_hat = s + a
    val, g = b(s_hat[None, :])[0], b.gradient(s_hat)[0]
    oracle = a[0] - (val - 0.95 * b.nu) / g
    got = safe_action(b, dyn, s, a, (np.array([-10.0]), np.array([10.0])))[0]
    proj_err = abs(got - oracle)

    rng = np.random.default_rng(105)
    low, high = -2 * np.ones(2), 2 * np.ones(2)
    axis = np.linspace(-2, 2, 50)
    grid = np.stack(np.meshgrid(axis, axis), -1).reshape(-1, 2)
    cell = np.sqrt(2) * (axis[1] - axis[0])
    minimal = 0
    for _ in range(50):
        centers = rng.normal(size=(3, 2)) * 0.5 + np.array([4.0, 0.0])
        bm = _barrier(centers, rng.uniform(0.5, 1.0, 3), 2.5, nu=1.0)
        d = LocalLinearModel(np.eye(2), rng.normal(size=(2, 2)) * 0.5 + np.eye(2), 1, 0.0)
        st, at = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        pred = bm(d.predict(st, at)[None, :])[0]
        bm = _barrier(centers, bm.alpha, 2.5, nu=pred / 0.95 * rng.uniform(0.9, 0.99))
        out = safe_action(bm, d, st, at, (low, high), rng=rng)
        gq = d.Q.T @ bm.gradient(d.predict(st, at))
        feasible = grid[pred + (grid - at) @ gq <= 0.95 * bm.nu]
        best = np.min(np.linalg.norm(feasible - at, axis=1))
        minimal += np.linalg.norm(out - at) <= best + cell
    ok = proj_err < 1e-6 and minimal == 50
    record(5, ok, f"half-space projection error {proj_err:.2e} (< 1e-6), grid-minimal {minimal}/50")
    assert ok


# 6. Local dynamics recovery -----------------------------------------------------

def test_criterion_6_local_dynamics():
    rng = np.random.default_rng(106)
    worst = 0.0
    for _ in range(100):
        p, q = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        P0, Q0 = rng.normal(size=(p, p)), rng.normal(size=(p, q))
        n = int(rng.integers(p + q, 60))
        data = []
        for _ in range(n):
            s, a = rng.normal(size=p), rng.normal(size=q)
            data.append(Transition(s, a, 0.0, P0 @ s + Q0 @ a))
        dyn = fit_local_dynamics(data, 500)
        worst = max(worst, np.max(np.abs(dyn.P - P0)), np.max(np.abs(dyn.Q - Q0)))
    ok = worst < 1e-8
    record(6, ok, f"max entrywise error {worst:.2e} (< 1e-8) over 100 instances")
    assert ok


# 7. Gradient checks ------------------------------------------------------------

def _fd(fun, theta, h=1e-6):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return g


def _rel(g, fd):
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-5)))


def test_criterion_7_gradients():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pol = PolicyParams(2, 1, np.array([-1.0]), np.array([1.0]), hidden=(3, 2))
        learner = DDPG(pol, rng)
        assert 10 <= pol.net.n_params <= 100 and 10 <= learner.critic.size <= 100
        batch = {"s": rng.normal(size=(8, 2)), "a": rng.uniform(-1, 1, (8, 1)),
                 "r": rng.normal(size=8), "s_plus": rng.normal(size=(8, 2)), "done": np.zeros(8, bool)}
        y = learner.td_target(batch)
        _, gc = learner.critic_loss_and_grad(batch, y)
        worst = max(worst, _rel(gc, _fd(lambda th: learner.critic_loss_and_grad(batch, y, th)[0], learner.critic)))
        _, ga = learner.actor_loss_and_grad(batch["s"])
        worst = max(worst, _rel(ga, _fd(lambda th: learner.actor_loss_and_grad(batch["s"], th)[0], pol.theta)))
    ok = worst < 1e-4
    record(7, ok, f"max relative error {worst:.2e} (< 1e-4) over 20 seeds")
    assert ok


# 8 and 9. Pendulum desk run and determinism -----------------------------------------

PENDULUM_INI = """\
[env]
name = pendulum

[run]
training_horizon = 50000
epoch_length = 10000
barrier_sample_size = 500
zeta = 1e-5
seed = 0
"""


@pytest.fixture(scope="module")
def pendulum_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pendulum")
    cfg = root / "pendulum.ini"
    cfg.write_text(PENDULUM_INI)
    t0 = time.perf_counter()
    code = main(["train", "--config", str(cfg), "--out", str(root / "run")])
    elapsed = time.perf_counter() - t0
    return root, cfg, code, elapsed


def test_criterion_8_pendulum(pendulum_run, capsys):
    root, _, code, elapsed = pendulum_run
    summary = json.loads((root / "run" / "summary.json").read_text())
    capsys.readouterr()
    eval_code = main(["eval", "--run", str(root / "run"), "--episodes", "100", "--out", str(root / "eval")])
    report = json.loads((root / "eval" / "eval.json").read_text())
    delta = summary["delta"]
    checks = {
        "completed": code == 0 and eval_code == 0,
        "< 30 min": elapsed < 1800,
        "delta < 1": delta is not None and delta < 1.0,
        "reward >= -400": report["mean_reward"] >= -400,
        "unsafe freq <= delta + 0.05": delta is not None and report["unsafe_episode_frequency"] <= delta + 0.05,
        "p90 emitted": "violation_p90_pct" in summary,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(8, ok,
           f"train {elapsed:.0f}s; delta={delta} (delta_minmax={summary['delta_minmax']}); "
           f"eval reward {report['mean_reward']:.1f}, cost {report['mean_cost']:.2f}, "
           f"unsafe-episode freq {report['unsafe_episode_frequency']:.2f}; "
           f"violations {summary['total_violations']}, p90 {summary['violation_p90_pct']}% "
           f"(published: 81.60%)" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, f"failed checks: {failed}"


def test_criterion_9_determinism(pendulum_run):
    root, cfg, _, _ = pendulum_run
    code = main(["train", "--config", str(cfg), "--out", str(root / "run2")])
    names = ("metrics.jsonl", "epochs.jsonl", "violations.csv")
    same = {n: (root / "run" / n).read_bytes() == (root / "run2" / n).read_bytes() for n in names}
    ok = code == 0 and all(same.values())
    record(9, ok, "byte-identical: " + ", ".join(f"{n}={v}" for n, v in same.items()))
    assert ok
