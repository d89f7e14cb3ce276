"""Empirical conditional mean embedding of an unknown transition kernel.

The embedding of the successor distribution at a query (s, a) is the
weighted sum ``sum_i W_i(s, a) k_S(., s_i^+)`` with

    W(s, a) = (K_SA + lambda N I)^{-1} k_SA(s, a),

so the conditional expectation of any function known on the stored
successors reduces to ``W(s, a) @ f(S^+)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import GramFactor, KernelSpec, factorize, gram_matrix, rbf_cross


@dataclass(frozen=True)
class CmeModel:
    states: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    successors: np.ndarray = field(repr=False)
    factor: GramFactor = field(repr=False)
    kernel: KernelSpec

    def __post_init__(self):
        n = self.states.shape[0]
        if n < 1 or self.actions.shape[0] != n or self.successors.shape[0] != n:
            raise ValueError("inputs and successors must have equal, non-zero length")
        if self.factor.n != n:
            raise ValueError("factor dimension does not match sample count")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        """Stacked (state, action) rows used by the state-action kernel."""
        return np.hstack([self.states, self.actions])

    def kernel_vectors(self, s, a) -> np.ndarray:
        """k_SA between query rows and the stored inputs; shape (m, N)."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if s.shape[1] != self.states.shape[1] or a.shape[1] != self.actions.shape[1]:
            raise ValueError(
                f"query dims ({s.shape[1]}, {a.shape[1]}) do not match model "
                f"({self.states.shape[1]}, {self.actions.shape[1]})"
            )
        if s.shape[0] != a.shape[0]:
            raise ValueError("state and action query counts differ")
        return rbf_cross(np.hstack([s, a]), self.inputs, self.kernel.bandwidth_state_action)

    def dual_coefficients(self, f_on_successors) -> np.ndarray:
        """(K_SA + lambda N I)^{-1} f(S^+), reusable across many queries."""
        f = np.asarray(f_on_successors, dtype=float).ravel()
        if f.size != self.n:
            raise ValueError(f"expected {self.n} successor values, got {f.size}")
        return self.factor.solve(f)

    def expected_batch(self, f_on_successors, s, a) -> np.ndarray:
        """Vectorised :func:`expected_value` over rows of ``s`` and ``a``."""
        beta = self.dual_coefficients(f_on_successors)
        return self.kernel_vectors(s, a) @ beta


def _stack(rows, name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a list of vectors")
    return arr


def fit_cme(sample, kernel: KernelSpec) -> CmeModel:
    """Fit the empirical CME on a list of transitions.

    ``sample`` items need ``s``, ``a`` and ``s_plus`` attributes
    (:class:`kbse.agent.Transition` works).
    """
    sample = list(sample)
    if not sample:
        raise ValueError("fit_cme needs at least one transition")
    states = _stack([t.s for t in sample], "states")
    actions = _stack([t.a for t in sample], "actions")
    successors = _stack([t.s_plus for t in sample], "successors")
    return fit_cme_arrays(states, actions, successors, kernel)


def fit_cme_arrays(states, actions, successors, kernel: KernelSpec) -> CmeModel:
    states = _stack(states, "states")
    actions = _stack(actions, "actions")
    successors = _stack(successors, "successors")
    n = states.shape[0]
    if n == 0:
        raise ValueError("fit_cme needs at least one transition")
    gram = gram_matrix(np.hstack([states, actions]), kernel.bandwidth_state_action)
    factor = factorize(gram, kernel.regularization_lambda, n)
    return CmeModel(states, actions, successors, factor, kernel)


def cme_weights(model: CmeModel, s, a) -> np.ndarray:
    """Weight vector W(s, a) of length N."""
    kvec = model.kernel_vectors(s, a)[0]
    return model.factor.solve(kvec)


def expected_value(model: CmeModel, f_on_successors, s, a) -> float:
    """Empirical estimate of E[f(s+) | s, a] given f evaluated on the stored successors."""
    f = np.asarray(f_on_successors, dtype=float).ravel()
    if f.size != model.n:
        raise ValueError(f"expected {model.n} successor values, got {f.size}")
    return float(cme_weights(model, s, a) @ f)


@dataclass(frozen=True)
class MmdBounds:
    epsilon: float
    zeta: float
    sample_count: int
    kernel_bound_C: float = 1.0

    @classmethod
    def compute(cls, n: int, zeta: float, C: float = 1.0) -> "MmdBounds":
        return cls(epsilon_bound(n, C, zeta), zeta, n, C)


def epsilon_bound(n: int, C: float, zeta: float) -> float:
    """MMD radius sqrt(C / n) * (1 + sqrt(2 ln(1 / zeta)))."""
    if not 0.0 < zeta < 1.0:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    if n < 1:
        raise ValueError("n must be at least 1")
    if C <= 0:
        raise ValueError("C must be positive")
    return math.sqrt(C / n) * (1.0 + math.sqrt(2.0 * math.log(1.0 / zeta)))


def zeta_bound(epsilon: float, n: int, C: float) -> float:
    """Confidence level implied by a fixed radius: exp(-(eps sqrt(n / C) - 1)^2 / 2).

    Returns 1.0 in the vacuous regime eps sqrt(n / C) <= 1 and never returns
    exactly zero (underflow reports the smallest positive double).
    """
    x = epsilon * math.sqrt(n / C)
    if x <= 1.0:
        return 1.0
    z = math.exp(-0.5 * (x - 1.0) ** 2)
    return min(1.0, max(z, np.finfo(float).tiny))
