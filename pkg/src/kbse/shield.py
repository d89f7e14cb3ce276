"""Action shield: local linear dynamics plus a projection onto the barrier sublevel set."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .barrier import BarrierModel

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 500
DAMPING = 1e-8
DEFAULT_MARGIN = 0.05
BACKTRACK_STEPS = 8
FALLBACK_SAMPLES = 128
REFINE_STEPS = 2


class DegenerateGradient(ArithmeticError):
    """The action has no first-order effect on the barrier at the predicted successor."""


@dataclass(frozen=True)
class LocalLinearModel:
    """s+ ~= P s + Q a, fitted on a window of recent transitions."""

    P: np.ndarray
    Q: np.ndarray
    window_H: int
    residual: float

    def predict(self, s, a) -> np.ndarray:
        return self.P @ np.asarray(s, dtype=float) + self.Q @ np.asarray(a, dtype=float)


def fit_local_dynamics(recent, H: int = DEFAULT_WINDOW) -> LocalLinearModel:
    """Least-squares fit of P, Q on the last ``min(H, len(recent))`` transitions.

    Full-rank windows use damped normal equations followed by iterative
    refinement; rank-deficient ones get the minimum-norm solution.
    """
    recent = list(recent)
    if H < 1:
        raise ValueError("H must be a positive integer")
    window = recent[-H:]
    if not window:
        raise ValueError("fit_local_dynamics needs at least one transition")
    S = np.array([np.ravel(t.s) for t in window], dtype=float)
    A = np.array([np.ravel(t.a) for t in window], dtype=float)
    Y = np.array([np.ravel(t.s_plus) for t in window], dtype=float)
    X = np.hstack([S, A])
    p = S.shape[1]

    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        theta = np.linalg.lstsq(X, Y, rcond=None)[0]
    else:
        gram = X.T @ X
        gram[np.diag_indices_from(gram)] += DAMPING
        factor = linalg.cho_factor(gram)
        theta = linalg.cho_solve(factor, X.T @ Y)
        # refinement against the undamped residual removes the damping bias
        for _ in range(REFINE_STEPS):
            theta = theta + linalg.cho_solve(factor, X.T @ (Y - X @ theta))
    P = theta[:p].T
    Q = theta[p:].T
    resid = Y - X @ theta
    rms = float(np.sqrt(np.mean(resid**2)))
    return LocalLinearModel(P=P, Q=Q, window_H=len(window), residual=rms)


def _predicted_barrier(barrier: BarrierModel, dyn: LocalLinearModel, s, actions) -> np.ndarray:
    actions = np.atleast_2d(actions)
    succ = (dyn.P @ s)[None, :] + actions @ dyn.Q.T
    return barrier(succ)


def safe_action(barrier: BarrierModel, dyn: LocalLinearModel, s, a, action_box,
                margin: float = DEFAULT_MARGIN, rng: np.random.Generator | None = None) -> np.ndarray:
    """Closest action whose predicted successor keeps B below nu.

    The constraint B(P s + Q a') <= nu (1 - margin) is linearized at the
    nominal successor and solved in closed form; the result is checked
    against B <= nu, backtracked by doubling the step up to 8 times, and
    finally replaced by the best of 128 random box actions.
    """
    low, high = (np.asarray(b, dtype=float) for b in action_box)
    s = np.asarray(s, dtype=float).ravel()
    a = np.clip(np.asarray(a, dtype=float).ravel(), low, high)
    target = barrier.nu * (1.0 - margin)

    s_hat = dyn.predict(s, a)
    b_hat = float(barrier(s_hat[None, :])[0])
    if b_hat <= target:
        return a

    try:
        g = barrier.gradient(s_hat)
        direction = dyn.Q.T @ g
        norm2 = float(direction @ direction)
        if norm2 < 1e-20:
            raise DegenerateGradient(f"|Q^T grad B| = {np.sqrt(norm2):.3g}")
        step = -direction * (b_hat - target) / norm2
        for k in range(BACKTRACK_STEPS + 1):
            cand = np.clip(a + (2.0**k) * step, low, high)
            if _predicted_barrier(barrier, dyn, s, cand)[0] <= barrier.nu:
                return cand
        log.debug("shield: backtracking exhausted, sampling fallback")
    except DegenerateGradient as exc:
        log.info("shield: degenerate gradient (%s), sampling fallback", exc)

    rng = np.random.default_rng(0) if rng is None else rng
    samples = rng.uniform(low, high, size=(FALLBACK_SAMPLES, low.size))
    values = _predicted_barrier(barrier, dyn, s, samples)
    return samples[int(np.argmin(values))]
