"""End-to-end training loop: explore, shield, learn the policy, refit the barrier."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import DDPG, PolicyParams, ReplayBuffer, Transition, act, sample_data
from .barrier import (
    BarrierContext,
    BarrierModel,
    NoSafeSamples,
    NoUnsafeSamples,
    compute_bc,
)
from .cme import epsilon_bound
from .envs import EnvModel, make_env
from .kernels import KernelSpec, median_bandwidth, rkhs_norm
from .shield import DEFAULT_MARGIN, DEFAULT_WINDOW, fit_local_dynamics, safe_action

log = logging.getLogger(__name__)

KERNEL_C = 1.0


@dataclass
class RunConfig:
    env: str = "pendulum"
    noise_sigma: float = 0.01
    training_horizon: int = 50000
    epoch_length: int = 10000
    episode_length: int | None = None
    barrier_sample_size: int = 500
    zeta: float = 1e-5
    bandwidth_state: float | None = None
    bandwidth_state_action: float | None = None
    regularization_lambda: float = 1e-3
    ridge_lambda: float = 1e-3
    c_mode: str = "closed_loop"
    shield_window: int = DEFAULT_WINDOW
    shield_margin: float = DEFAULT_MARGIN
    preemptive_shield: bool = False
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    learning_rate: float = 1e-3
    critic_learning_rate: float = 1e-3
    tau: float = 0.005
    discount_gamma: float = 0.99
    exploration_sigma: float = 0.2
    warmup_steps: int = 0
    seed: int = 0

    def validate(self, env: EnvModel | None = None) -> None:
        ep = self.episode_length if self.episode_length is not None else (
            env.episode_length if env is not None else None)
        if self.training_horizon < 0:
            raise ValueError("training_horizon must be non-negative")
        if self.barrier_sample_size < 1:
            raise ValueError("barrier_sample_size must be positive")
        if ep is not None and (ep < 1 or self.epoch_length % ep != 0):
            raise ValueError(f"epoch_length {self.epoch_length} must be a multiple of episode_length {ep}")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.c_mode not in ("closed_loop", "minmax"):
            raise ValueError("c_mode must be 'closed_loop' or 'minmax'")


@dataclass
class RunMetrics:
    episodes: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    violation_steps: list[int] = field(default_factory=list)
    shield_interventions: int = 0
    training_horizon: int = 0
    wall_clock_s: float = 0.0
    interrupted: bool = False

    @property
    def total_violations(self) -> int:
        return len(self.violation_steps)

    def violation_percentile(self, q: float = 90.0) -> float | None:
        """Step by which ``q`` % of violations had occurred, as % of the horizon."""
        if not self.violation_steps or self.training_horizon <= 0:
            return None
        steps = np.sort(np.asarray(self.violation_steps))
        k = max(1, math.ceil(q / 100.0 * steps.size))
        return 100.0 * float(steps[k - 1] + 1) / self.training_horizon


def update_epsilon(n: int, zeta: float, C: float = KERNEL_C) -> float:
    return epsilon_bound(n, C, zeta)


def update_upper_bound(barrier: BarrierModel | None, sample=None) -> float:
    """RKHS norm of the current barrier on its own centers."""
    if barrier is None:
        return 0.0
    return rkhs_norm(barrier.alpha, barrier.center_gram())


def initial_rollout(env: EnvModel, policy: PolicyParams, min_transitions: int,
                    rng: np.random.Generator, episode_length: int | None = None) -> list[Transition]:
    """Run the (random) policy with exploration until enough transitions exist."""
    ep_len = episode_length or env.episode_length
    out: list[Transition] = []
    s = env.reset(rng)
    t_ep = 0
    while len(out) < min_transitions:
        a = act(policy, s, True, rng)
        s_plus, r = env.step(s, a, rng)
        t_ep += 1
        done = env.terminal(s_plus)
        out.append(Transition(s, a, r, s_plus, done))
        if done or t_ep >= ep_len:
            s, t_ep = env.reset(rng), 0
        else:
            s = s_plus
    return out


def _kernel_for(sample: list[Transition], cfg: RunConfig, rng) -> KernelSpec:
    states = np.array([t.s for t in sample])
    sa = np.hstack([states, np.array([t.a for t in sample])])
    bw_s = cfg.bandwidth_state or median_bandwidth(states, rng)
    bw_sa = cfg.bandwidth_state_action or median_bandwidth(sa, rng)
    return KernelSpec(bw_s, bw_sa, cfg.regularization_lambda, KERNEL_C)


class _Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.env = make_env(cfg.env, cfg.noise_sigma, cfg.seed)
        cfg.validate(self.env)
        self.ep_len = cfg.episode_length or self.env.episode_length
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.env_rng, self.agent_rng, self.buf_rng, self.bc_rng, self.shield_rng = (
            np.random.default_rng(s) for s in seeds)
        self.policy = PolicyParams(
            state_dim=self.env.state_dim, action_dim=self.env.action_dim,
            action_low=self.env.action_low, action_high=self.env.action_high,
            hidden=cfg.hidden, exploration_sigma=cfg.exploration_sigma,
            learning_rate=cfg.learning_rate, discount_gamma=cfg.discount_gamma,
        )
        self.learner = DDPG(self.policy, self.agent_rng, batch_size=cfg.batch_size,
                            tau=cfg.tau, critic_learning_rate=cfg.critic_learning_rate)
        self.buffer = ReplayBuffer(rng_seed=None)
        self.buffer.rng = self.buf_rng
        self.barrier: BarrierModel | None = None
        self.epsilon = update_epsilon(cfg.barrier_sample_size, cfg.zeta)
        self.b_bar = 0.0
        self.metrics = RunMetrics(training_horizon=cfg.training_horizon)
        self.initial_states = np.array([self.env.reset(self.bc_rng) for _ in range(64)])

    def sample(self) -> list[Transition]:
        return sample_data(self.buffer, self.cfg.barrier_sample_size, self.buf_rng)

    def refit_barrier(self, sample: list[Transition], step: int, epoch: int) -> None:
        cfg = self.cfg
        ctx = BarrierContext(
            initial_states=self.initial_states,
            action_low=self.env.action_low,
            action_high=self.env.action_high,
            state_sampler=self.env.sample_states,
            horizon_T=self.env.spec.horizon_T,
            zeta=cfg.zeta,
            policy=self.policy,
            ridge_lambda=cfg.ridge_lambda,
            c_mode=cfg.c_mode,
            resample=self.sample if len(self.buffer) else None,
        )
        try:
            kernel = _kernel_for(sample, cfg, self.bc_rng)
            model = compute_bc(sample, self.env.spec, kernel, self.epsilon, self.b_bar,
                               ctx=ctx, rng=self.bc_rng)
        except (NoUnsafeSamples, NoSafeSamples) as exc:
            log.warning("barrier fit deferred at step %d: %s", step, exc)
            self.metrics.epochs.append({"type": "epoch", "epoch": epoch, "step": step,
                                        "status": "deferred", "reason": str(exc)})
            return
        status = "accepted" if model.valid else "rejected"
        if model.valid:
            self.barrier = model
            self.b_bar = model.b_bar
        else:
            log.warning("barrier at step %d is invalid; keeping the previous one", step)
        self.metrics.epochs.append({
            "type": "epoch", "epoch": epoch, "step": step, "status": status,
            "eta": model.eta, "nu": model.nu, "c": model.c, "c_minmax": model.c_minmax,
            "b_bar": model.b_bar, "epsilon": model.epsilon, "delta": model.delta,
            "delta_minmax": model.delta_minmax, "valid": model.valid,
        })

    def shield(self, s, a):
        dyn = fit_local_dynamics(self.buffer.recent(self.cfg.shield_window), self.cfg.shield_window)
        return safe_action(self.barrier, dyn, s, a, self.env.action_box,
                           margin=self.cfg.shield_margin, rng=self.shield_rng)

    def predicted_violation(self, s, a) -> bool:
        dyn = fit_local_dynamics(self.buffer.recent(self.cfg.shield_window), self.cfg.shield_window)
        return float(self.barrier(dyn.predict(s, a)[None, :])[0]) > self.barrier.nu

    def run(self):
        cfg, env, m = self.cfg, self.env, self.metrics
        w = initial_rollout(env, self.policy, cfg.barrier_sample_size, self.env_rng, self.ep_len)
        self.buffer.extend(w)
        self.refit_barrier(self.sample(), 0, 0)

        s = env.reset(self.env_rng)
        ep = {"reward": 0.0, "cost": 0, "length": 0, "shielded": 0, "start": 0}
        epoch = 0
        for t in range(cfg.training_horizon):
            if t < cfg.warmup_steps:
                a = self.env_rng.uniform(env.action_low, env.action_high)
            else:
                a = act(self.policy, s, True, self.env_rng)
            unsafe = env.is_unsafe(s)
            if unsafe:
                m.violation_steps.append(t)
                ep["cost"] += 1
            if self.barrier is not None and self.barrier.valid and (
                    unsafe or (cfg.preemptive_shield and self.predicted_violation(s, a))):
                a = self.shield(s, a)
                ep["shielded"] += 1
                m.shield_interventions += 1
            s_plus, r = env.step(s, a, self.env_rng)
            ep["reward"] += r
            ep["length"] += 1
            done = env.terminal(s_plus)
            self.buffer.add(Transition(s, a, r, s_plus, done))
            if len(self.buffer) >= cfg.batch_size:
                self.learner.update(self.buffer.sample_batch(cfg.batch_size, self.buf_rng))

            if done or ep["length"] >= self.ep_len:
                w = self.sample()
                self.b_bar = update_upper_bound(self.barrier, w)
                self.epsilon = update_epsilon(len(w), cfg.zeta)
                m.episodes.append({
                    "type": "episode", "episode": len(m.episodes), "start_step": ep["start"],
                    "reward": ep["reward"], "cost": ep["cost"], "length": ep["length"],
                    "shielded": ep["shielded"], "epsilon": self.epsilon, "b_bar": self.b_bar,
                })
                s = env.reset(self.env_rng)
                ep = {"reward": 0.0, "cost": 0, "length": 0, "shielded": 0, "start": t + 1}
            else:
                s = s_plus

            if (t + 1) % cfg.epoch_length == 0:
                epoch += 1
                self.refit_barrier(self.sample(), t + 1, epoch)


def run_kbse(config: RunConfig):
    """Train a policy and a barrier; returns ``(policy, barrier, metrics)``.

    ``barrier`` is ``None`` when no valid barrier could ever be fitted.
    A KeyboardInterrupt stops the loop early and marks the metrics as
    interrupted instead of propagating.
    """
    policy, barrier, metrics, _ = run_kbse_full(config)
    return policy, barrier, metrics


def run_kbse_full(config: RunConfig):
    """Like :func:`run_kbse` but also returns the replay buffer."""
    run = _Run(config)
    t0 = time.perf_counter()
    try:
        run.run()
    except KeyboardInterrupt:
        log.warning("interrupted; returning partial results")
        run.metrics.interrupted = True
    run.metrics.wall_clock_s = time.perf_counter() - t0
    return run.policy, run.barrier, run.metrics, run.buffer


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
