"""Replay buffer and a small deterministic actor-critic learner in plain numpy.

Both networks are two-hidden-layer tanh MLPs whose parameters live in one
flat vector; gradients come from explicit backpropagation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

POLICY_VERSION = 1


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_plus: np.ndarray
    done: bool = False

    def to_dict(self) -> dict:
        return {
            "s": [float(x) for x in self.s],
            "a": [float(x) for x in self.a],
            "r": float(self.r),
            "s_plus": [float(x) for x in self.s_plus],
            "done": bool(self.done),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(
            s=np.asarray(d["s"], dtype=float),
            a=np.asarray(d["a"], dtype=float),
            r=float(d["r"]),
            s_plus=np.asarray(d["s_plus"], dtype=float),
            done=bool(d.get("done", False)),
        )


class ReplayBuffer:
    """Insertion-ordered transition store with uniform sampling."""

    def __init__(self, capacity: int | None = None, rng_seed: int | None = 0):
        self.capacity = capacity
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.transitions: list[Transition] = []
        self._arrays: dict[str, np.ndarray] | None = None
        self._n_cached = 0

    def __len__(self) -> int:
        return len(self.transitions)

    def add(self, t: Transition) -> None:
        if not (np.all(np.isfinite(t.s)) and np.all(np.isfinite(t.a))
                and np.all(np.isfinite(t.s_plus)) and math.isfinite(t.r)):
            raise ValueError("transition contains non-finite values")
        self.transitions.append(t)
        if self.capacity is not None and len(self.transitions) > self.capacity:
            del self.transitions[0]
            self._arrays = None
        elif self._arrays is not None:
            self._append_arrays(t)

    def extend(self, items) -> None:
        for t in items:
            self.add(t)

    def recent(self, n: int) -> list[Transition]:
        return self.transitions[-n:] if n > 0 else []

    def _append_arrays(self, t: Transition) -> None:
        arr = self._arrays
        if self._n_cached == arr["r"].shape[0]:
            for key, val in arr.items():
                grown = np.empty((2 * val.shape[0],) + val.shape[1:], dtype=val.dtype)
                grown[: self._n_cached] = val[: self._n_cached]
                arr[key] = grown
        i = self._n_cached
        arr["s"][i], arr["a"][i], arr["r"][i] = t.s, t.a, t.r
        arr["s_plus"][i], arr["done"][i] = t.s_plus, t.done
        self._n_cached += 1

    def arrays(self) -> dict[str, np.ndarray]:
        """Column views over the stored transitions."""
        n = len(self.transitions)
        if self._arrays is None or self._n_cached != n:
            cap = max(16, 2 * n)
            first = self.transitions[0] if n else None
            p = first.s.size if first else 0
            q = first.a.size if first else 0
            self._arrays = {
                "s": np.empty((cap, p)),
                "a": np.empty((cap, q)),
                "r": np.empty(cap),
                "s_plus": np.empty((cap, p)),
                "done": np.empty(cap, dtype=bool),
            }
            self._n_cached = 0
            for t in self.transitions:
                self._append_arrays(t)
        return {k: v[:n] for k, v in self._arrays.items()}

    def sample_indices(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        size = len(self.transitions)
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return np.empty(0, dtype=np.int64)
        if size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if n <= size:
            return rng.choice(size, size=n, replace=False)
        extra = rng.integers(0, size, size=n - size)
        return np.concatenate([rng.permutation(size), extra])

    def sample_batch(self, n: int, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
        idx = self.sample_indices(n, rng)
        return {k: v[idx] for k, v in self.arrays().items()}

    # checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        """Write one JSON object per transition (floats round-trip exactly)."""
        with open(path, "w") as fh:
            for t in self.transitions:
                fh.write(json.dumps(t.to_dict()) + "\n")

    @classmethod
    def load(cls, path, capacity: int | None = None, rng_seed: int | None = 0) -> "ReplayBuffer":
        buf = cls(capacity=capacity, rng_seed=rng_seed)
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    buf.add(Transition.from_dict(json.loads(line)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad transition record ({exc})") from None
        return buf


def sample_data(buffer: ReplayBuffer, n: int, rng: np.random.Generator | None = None) -> list[Transition]:
    """Uniform draw of ``n`` transitions, without replacement when possible."""
    if n == 0:
        return []
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty buffer")
    return [buffer.transitions[i] for i in buffer.sample_indices(n, rng)]


# networks ----------------------------------------------------------------

class MLP:
    """tanh MLP with a linear output layer; parameters are a flat vector."""

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes.append((fan_out, fan_in))
            self.shapes.append((fan_out,))
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(theta[i:i + size].reshape(shape))
            i += size
        return out

    def init(self, rng: np.random.Generator, final_scale: float = 3e-3) -> np.ndarray:
        theta = np.empty(self.n_params)
        parts = self.unpack(theta)
        n_layers = len(parts) // 2
        for k in range(n_layers):
            w, b = parts[2 * k], parts[2 * k + 1]
            if k == n_layers - 1:
                w[...] = rng.uniform(-final_scale, final_scale, size=w.shape)
                b[...] = rng.uniform(-final_scale, final_scale, size=b.shape)
            else:
                lim = 1.0 / math.sqrt(w.shape[1])
                w[...] = rng.uniform(-lim, lim, size=w.shape)
                b[...] = rng.uniform(-lim, lim, size=b.shape)
        return theta

    def forward(self, theta: np.ndarray, x: np.ndarray):
        parts = self.unpack(theta)
        acts = [x]
        h = x
        n_layers = len(parts) // 2
        for k in range(n_layers):
            w, b = parts[2 * k], parts[2 * k + 1]
            z = h @ w.T + b
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, theta: np.ndarray, acts, grad_out: np.ndarray):
        """Return (d loss / d theta, d loss / d input) given d loss / d output."""
        parts = self.unpack(theta)
        grad = np.empty(self.n_params)
        gparts = self.unpack(grad)
        n_layers = len(parts) // 2
        g = grad_out
        for k in range(n_layers - 1, -1, -1):
            if k < n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            gparts[2 * k][...] = g.T @ acts[k]
            gparts[2 * k + 1][...] = g.sum(axis=0)
            g = g @ parts[2 * k]
        return grad, g


class Adam:
    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class PolicyParams:
    """Deterministic tanh-squashed policy network plus exploration settings."""

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    theta: np.ndarray = field(default=None, repr=False)
    hidden: tuple[int, ...] = (64, 64)
    exploration_sigma: float = 0.1
    learning_rate: float = 1e-3
    discount_gamma: float = 0.99

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=float)
        self.action_high = np.asarray(self.action_high, dtype=float)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.discount_gamma < 1.0:
            raise ValueError("discount_gamma must lie in [0, 1)")
        if self.theta is None:
            self.theta = np.zeros(self.net.n_params)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.size != self.net.n_params:
            raise ValueError(f"theta has {self.theta.size} entries, network needs {self.net.n_params}")

    @property
    def net(self) -> MLP:
        return MLP((self.state_dim, *self.hidden, self.action_dim))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.action_high + self.action_low)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)

    def forward(self, states, theta=None):
        """Batched deterministic actions, plus the cache needed for backprop."""
        theta = self.theta if theta is None else theta
        out, acts = self.net.forward(theta, np.atleast_2d(states))
        squashed = np.tanh(out)
        return self.center + self.half_range * squashed, (acts, squashed)

    def __call__(self, states) -> np.ndarray:
        return self.forward(states)[0]

    def to_dict(self) -> dict:
        return {
            "version": POLICY_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "hidden": list(self.hidden),
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "exploration_sigma": self.exploration_sigma,
            "learning_rate": self.learning_rate,
            "discount_gamma": self.discount_gamma,
            "theta": self.theta.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        if not isinstance(d, dict):
            raise ValueError("policy checkpoint field '<root>': expected a JSON object")
        if d.get("version") != POLICY_VERSION:
            raise ValueError(f"policy checkpoint field 'version': unsupported value {d.get('version')!r}")
        kwargs = {}
        for key in ("state_dim", "action_dim", "hidden", "action_low", "action_high",
                    "exploration_sigma", "learning_rate", "discount_gamma", "theta"):
            if key not in d:
                raise ValueError(f"policy checkpoint field {key!r}: missing")
            kwargs[key] = d[key]
        for key in ("state_dim", "action_dim"):
            v = kwargs[key]
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"policy checkpoint field {key!r}: expected a positive integer, got {v!r}")
        hidden = kwargs["hidden"]
        if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
            raise ValueError("policy checkpoint field 'hidden': expected a list of positive integers")
        kwargs["hidden"] = tuple(hidden)
        for key in ("action_low", "action_high"):
            try:
                arr = np.asarray(kwargs[key], dtype=float).ravel()
            except (TypeError, ValueError):
                arr = None
            if arr is None or arr.size != kwargs["action_dim"] or not np.all(np.isfinite(arr)):
                raise ValueError(f"policy checkpoint field {key!r}: expected {kwargs['action_dim']} finite numbers")
            kwargs[key] = arr
        for key in ("exploration_sigma", "learning_rate", "discount_gamma"):
            v = kwargs[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ValueError(f"policy checkpoint field {key!r}: expected a number, got {v!r}")
        try:
            theta = np.asarray(kwargs["theta"], dtype=float)
        except (TypeError, ValueError):
            raise ValueError("policy checkpoint field 'theta': not a list of numbers") from None
        if theta.ndim != 1 or not np.all(np.isfinite(theta)):
            raise ValueError("policy checkpoint field 'theta': expected a finite flat vector")
        kwargs["theta"] = theta
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"policy checkpoint field 'theta': {exc}") from None

    @classmethod
    def load(cls, path) -> "PolicyParams":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"policy checkpoint field '<root>': not valid JSON ({exc})") from None
        return cls.from_dict(d)


def act(policy: PolicyParams, s, explore: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    """Policy action at one state, with optional Gaussian exploration noise."""
    a = policy(np.asarray(s, dtype=float)[None, :])[0]
    if explore and policy.exploration_sigma > 0:
        a = a + policy.exploration_sigma * rng.standard_normal(policy.action_dim)
    return np.clip(a, policy.action_low, policy.action_high)


class DDPG:
    """Actor, critic, their Polyak-averaged targets and the Adam optimizers."""

    def __init__(self, policy: PolicyParams, rng: np.random.Generator,
                 batch_size: int = 128, tau: float = 0.005,
                 critic_learning_rate: float | None = None, init: bool = True):
        self.policy = policy
        self.batch_size = batch_size
        self.tau = tau
        self.critic_net = MLP((policy.state_dim + policy.action_dim, *policy.hidden, 1))
        if init:
            policy.theta = policy.net.init(rng)
        self.critic = self.critic_net.init(rng)
        self.actor_target = policy.theta.copy()
        self.critic_target = self.critic.copy()
        clr = policy.learning_rate if critic_learning_rate is None else critic_learning_rate
        self.actor_opt = Adam(policy.net.n_params, policy.learning_rate)
        self.critic_opt = Adam(self.critic_net.n_params, clr)
        self.skipped_updates = 0

    def q_value(self, states, actions, theta=None) -> np.ndarray:
        theta = self.critic if theta is None else theta
        out, _ = self.critic_net.forward(theta, np.hstack([states, actions]))
        return out[:, 0]

    def td_target(self, batch: dict) -> np.ndarray:
        a_next, _ = self.policy.forward(batch["s_plus"], self.actor_target)
        q_next = self.q_value(batch["s_plus"], a_next, self.critic_target)
        not_done = 1.0 - batch["done"].astype(float)
        return batch["r"] + self.policy.discount_gamma * not_done * q_next

    def critic_loss_and_grad(self, batch: dict, target=None, theta=None):
        """Mean squared TD error and its gradient w.r.t. the critic parameters."""
        theta = self.critic if theta is None else theta
        y = self.td_target(batch) if target is None else target
        x = np.hstack([batch["s"], batch["a"]])
        out, acts = self.critic_net.forward(theta, x)
        err = out[:, 0] - y
        n = err.size
        loss = float(np.mean(err**2))
        grad, _ = self.critic_net.backward(theta, acts, (2.0 / n) * err[:, None])
        return loss, grad

    def actor_loss_and_grad(self, states, theta=None):
        """-mean Q(s, pi(s)) and its gradient w.r.t. the actor parameters."""
        theta = self.policy.theta if theta is None else theta
        states = np.atleast_2d(states)
        actions, (acts, squashed) = self.policy.forward(states, theta)
        x = np.hstack([states, actions])
        q, cacts = self.critic_net.forward(self.critic, x)
        n = states.shape[0]
        _, dx = self.critic_net.backward(self.critic, cacts, np.full((n, 1), -1.0 / n))
        da = dx[:, self.policy.state_dim:]
        dout = da * self.policy.half_range * (1.0 - squashed**2)
        grad, _ = self.policy.net.backward(theta, acts, dout)
        return float(-np.mean(q)), grad

    def update(self, batch: dict) -> bool:
        """One critic step, one actor step, then Polyak target tracking.

        Returns False when a non-finite gradient made the step get skipped.
        """
        if batch["r"].size == 0:
            raise ValueError("update needs a non-empty batch")
        with np.errstate(invalid="ignore", over="ignore"):
            _, gc = self.critic_loss_and_grad(batch)
        if not np.all(np.isfinite(gc)):
            self.skipped_updates += 1
            log.warning("non-finite critic gradient, update skipped")
            return False
        if self.critic_opt.lr > 0:
            self.critic = self.critic_opt.step(self.critic, gc)
        _, ga = self.actor_loss_and_grad(batch["s"])
        if not np.all(np.isfinite(ga)):
            self.skipped_updates += 1
            log.warning("non-finite actor gradient, update skipped")
            return False
        if self.actor_opt.lr > 0:
            self.policy.theta = self.actor_opt.step(self.policy.theta, ga)
        self.actor_target += self.tau * (self.policy.theta - self.actor_target)
        self.critic_target += self.tau * (self.critic - self.critic_target)
        return True


def batch_from_transitions(batch) -> dict[str, np.ndarray]:
    batch = list(batch)
    return {
        "s": np.array([t.s for t in batch], dtype=float),
        "a": np.array([t.a for t in batch], dtype=float),
        "r": np.array([t.r for t in batch], dtype=float),
        "s_plus": np.array([t.s_plus for t in batch], dtype=float),
        "done": np.array([t.done for t in batch], dtype=bool),
    }


def update_policy(learner: DDPG, batch) -> PolicyParams:
    """One actor-critic step on ``batch`` (a list of transitions or column dict)."""
    if not isinstance(batch, dict):
        batch = list(batch)
        if not batch:
            raise ValueError("update_policy needs a non-empty batch")
        batch = batch_from_transitions(batch)
    learner.update(batch)
    return learner.policy
