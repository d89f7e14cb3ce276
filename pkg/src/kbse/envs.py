"""Stochastic classical-control benchmarks with safety specifications.

Dynamics are documented in ``docs/dynamics.md``. Every environment adds
Gaussian noise of scale ``noise_sigma`` to the deterministic successor and
clips the result to the state box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .safety import Constraint, SafetySpec, is_unsafe

__all__ = ["EnvModel", "ENV_NAMES", "make_env", "step", "is_unsafe"]


@dataclass(frozen=True)
class EnvModel:
    name: str
    state_dim: int
    action_dim: int
    state_low: np.ndarray = field(repr=False)
    state_high: np.ndarray = field(repr=False)
    action_low: np.ndarray = field(repr=False)
    action_high: np.ndarray = field(repr=False)
    noise_sigma: np.ndarray = field(repr=False)
    episode_length: int
    spec: SafetySpec
    _dynamics: Callable = field(repr=False)
    _reward: Callable = field(repr=False)
    _reset: Callable = field(repr=False)
    _sample_states: Callable = field(repr=False)
    _terminal: Callable = field(repr=False)

    @property
    def state_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.state_low, self.state_high

    @property
    def action_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.action_low, self.action_high

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.clip(self._reset(rng), self.state_low, self.state_high)

    def step(self, s, a, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        s = np.asarray(s, dtype=float).ravel()
        a = np.asarray(a, dtype=float).ravel()
        if s.size != self.state_dim or a.size != self.action_dim:
            raise ValueError(f"{self.name}: expected state/action dims "
                             f"({self.state_dim}, {self.action_dim}), got ({s.size}, {a.size})")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
            raise ValueError(f"{self.name}: non-finite state or action")
        a = np.clip(a, self.action_low, self.action_high)
        reward = float(self._reward(s, a))
        nxt = self._dynamics(s, a)
        if np.any(self.noise_sigma > 0):
            nxt = nxt + self.noise_sigma * rng.standard_normal(self.state_dim)
        return np.clip(nxt, self.state_low, self.state_high), reward

    def terminal(self, s) -> bool:
        return bool(self._terminal(np.asarray(s, dtype=float)))

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform draws over the physical state box."""
        return np.clip(self._sample_states(rng, n), self.state_low, self.state_high)

    def is_unsafe(self, s) -> bool:
        return self.spec.is_unsafe(s)


def step(env: EnvModel, s, a, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    return env.step(s, a, rng)


def _angle_normalize(x):
    return ((x + math.pi) % (2 * math.pi)) - math.pi


def _never(_s) -> bool:
    return False


# pendulum ----------------------------------------------------------------

_PEND_G, _PEND_M, _PEND_L, _PEND_DT = 10.0, 1.0, 1.0, 0.05
_PEND_MAX_SPEED, _PEND_MAX_TORQUE = 8.0, 2.0


def _pendulum_angle(s) -> float:
    return math.atan2(s[1], s[0])


def _pendulum_dynamics(s, a):
    th, thdot = _pendulum_angle(s), s[2]
    u = a[0]
    thdot = thdot + (3 * _PEND_G / (2 * _PEND_L) * math.sin(th) + 3.0 / (_PEND_M * _PEND_L**2) * u) * _PEND_DT
    thdot = min(max(thdot, -_PEND_MAX_SPEED), _PEND_MAX_SPEED)
    th = th + thdot * _PEND_DT
    return np.array([math.cos(th), math.sin(th), thdot])


def _pendulum_reward(s, a):
    th = _angle_normalize(_pendulum_angle(s))
    return -(th**2 + 0.1 * s[2] ** 2 + 0.001 * a[0] ** 2)


def _pendulum_reset(rng):
    th = rng.uniform(-0.6, 0.6)
    thdot = rng.uniform(-0.5, 0.5)
    return np.array([math.cos(th), math.sin(th), thdot])


def _pendulum_sample(rng, n):
    th = rng.uniform(-math.pi, math.pi, size=n)
    thdot = rng.uniform(-_PEND_MAX_SPEED, _PEND_MAX_SPEED, size=n)
    return np.column_stack([np.cos(th), np.sin(th), thdot])


# mountain car ------------------------------------------------------------

_MC_MIN_POS, _MC_MAX_POS, _MC_MAX_SPEED = -1.2, 0.6, 0.07
_MC_GOAL, _MC_POWER = 0.45, 0.0015


def _mcar_dynamics(s, a):
    pos, vel = s
    force = min(max(a[0], -1.0), 1.0)
    vel = vel + force * _MC_POWER - 0.0025 * math.cos(3 * pos)
    vel = min(max(vel, -_MC_MAX_SPEED), _MC_MAX_SPEED)
    pos = min(max(pos + vel, _MC_MIN_POS), _MC_MAX_POS)
    if pos == _MC_MIN_POS and vel < 0:
        vel = 0.0
    return np.array([pos, vel])


def _mcar_reward(s, a):
    # reward is attached to the successor in the canonical task; the goal
    # bonus is granted by the first step that lands on the goal
    nxt = _mcar_dynamics(s, a)
    bonus = 100.0 if nxt[0] >= _MC_GOAL else 0.0
    return bonus - 0.1 * a[0] ** 2


def _mcar_reset(rng):
    return np.array([rng.uniform(-0.6, -0.4), 0.0])


def _mcar_sample(rng, n):
    return np.column_stack([
        rng.uniform(_MC_MIN_POS, _MC_MAX_POS, size=n),
        rng.uniform(-_MC_MAX_SPEED, _MC_MAX_SPEED, size=n),
    ])


# inverted pendulum on a cart ---------------------------------------------

_CP_G, _CP_MC, _CP_MP, _CP_L, _CP_DT = 9.8, 1.0, 0.1, 0.5, 0.02
_CP_FORCE_PER_UNIT = 10.0 / 3.0
_CP_MAX_ANGLE = 0.2


def _cartpole_dynamics(s, a):
    x, th, xdot, thdot = s
    force = _CP_FORCE_PER_UNIT * a[0]
    total = _CP_MC + _CP_MP
    cos, sin = math.cos(th), math.sin(th)
    temp = (force + _CP_MP * _CP_L * thdot**2 * sin) / total
    thacc = (_CP_G * sin - cos * temp) / (_CP_L * (4.0 / 3.0 - _CP_MP * cos**2 / total))
    xacc = temp - _CP_MP * _CP_L * thacc * cos / total
    x = x + _CP_DT * xdot
    xdot = xdot + _CP_DT * xacc
    th = th + _CP_DT * thdot
    thdot = thdot + _CP_DT * thacc
    return np.array([x, th, xdot, thdot])


def _cartpole_reward(s, a):
    return 1.0


def _cartpole_reset(rng):
    return rng.uniform(-0.01, 0.01, size=4)


def _cartpole_terminal(s):
    return abs(s[1]) > _CP_MAX_ANGLE


def _cartpole_sample(rng, n):
    return np.column_stack([
        rng.uniform(-1.0, 1.0, size=n),
        rng.uniform(-_CP_MAX_ANGLE, _CP_MAX_ANGLE, size=n),
        rng.uniform(-2.0, 2.0, size=n),
        rng.uniform(-2.0, 2.0, size=n),
    ])


def _noise(noise_sigma, dim) -> np.ndarray:
    sigma = np.broadcast_to(np.asarray(noise_sigma, dtype=float), (dim,)).copy()
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("noise_sigma must be finite and non-negative")
    return sigma


def make_env(name: str, noise_sigma=0.01, seed: int | None = None) -> EnvModel:
    """Build one of ``pendulum``, ``mountain_car``, ``inverted_pendulum``.

    Environments are stateless values; ``seed`` is accepted for call-site
    symmetry, randomness flows through the generator passed to ``step``.
    """
    del seed
    if name == "pendulum":
        return EnvModel(
            name=name, state_dim=3, action_dim=1,
            state_low=np.array([-1.0, -1.0, -_PEND_MAX_SPEED]),
            state_high=np.array([1.0, 1.0, _PEND_MAX_SPEED]),
            action_low=np.array([-_PEND_MAX_TORQUE]),
            action_high=np.array([_PEND_MAX_TORQUE]),
            noise_sigma=_noise(noise_sigma, 3),
            episode_length=200,
            spec=SafetySpec((Constraint(0, "gt", -0.8, sin_index=1, label="theta"),), 200),
            _dynamics=_pendulum_dynamics, _reward=_pendulum_reward,
            _reset=_pendulum_reset, _sample_states=_pendulum_sample, _terminal=_never,
        )
    if name == "mountain_car":
        return EnvModel(
            name=name, state_dim=2, action_dim=1,
            state_low=np.array([_MC_MIN_POS, -_MC_MAX_SPEED]),
            state_high=np.array([_MC_MAX_POS, _MC_MAX_SPEED]),
            action_low=np.array([-1.0]), action_high=np.array([1.0]),
            noise_sigma=_noise(noise_sigma, 2),
            episode_length=1000,
            spec=SafetySpec((Constraint(0, "gt", -1.0, label="position"),), 1000),
            _dynamics=_mcar_dynamics, _reward=_mcar_reward,
            _reset=_mcar_reset, _sample_states=_mcar_sample,
            _terminal=lambda s: s[0] >= _MC_GOAL,
        )
    if name == "inverted_pendulum":
        return EnvModel(
            name=name, state_dim=4, action_dim=1,
            state_low=np.array([-2.4, -1.0, -10.0, -10.0]),
            state_high=np.array([2.4, 1.0, 10.0, 10.0]),
            action_low=np.array([-3.0]), action_high=np.array([3.0]),
            noise_sigma=_noise(noise_sigma, 4),
            episode_length=1000,
            spec=SafetySpec((Constraint(0, "abs_lt", 0.3, label="position"),), 1000),
            _dynamics=_cartpole_dynamics, _reward=_cartpole_reward,
            _reset=_cartpole_reset, _sample_states=_cartpole_sample,
            _terminal=_cartpole_terminal,
        )
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


ENV_NAMES = ("pendulum", "mountain_car", "inverted_pendulum")
