"""Kernel barrier functions: fitting, validation and the safety certificate.

A barrier is the kernel expansion ``B(s) = sum_i alpha_i k_S(s, c_i)``.
It is fitted by ridge regression on unsafe (1) / safe (0) labels, then
validated against three constants:

* ``eta``: upper level on initial states,
* ``nu``: lower level on unsafe states,
* ``c``: worst expected one-step increase, robustified against an MMD
  ball of radius ``epsilon`` around the empirical transition embedding.

A valid barrier (``nu > eta >= 0``, ``c >= 0``) bounds the probability of
entering the unsafe set within ``T`` steps by ``(eta + c T) / nu``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cme import CmeModel, fit_cme
from .kernels import (
    KernelSpec,
    factorize,
    gram_matrix,
    rbf_cross,
    rkhs_norm,
)
from .safety import SafetySpec

log = logging.getLogger(__name__)

JSON_VERSION = 1
C_MODES = ("closed_loop", "minmax")
MAX_ATTEMPTS = 5
_CHUNK = 4096


class BarrierError(ValueError):
    pass


class NoUnsafeSamples(BarrierError):
    """No unsafe state is available, so the unsafe level cannot be set."""


class NoSafeSamples(BarrierError):
    pass


class InvalidBarrier(BarrierError):
    """The levels violate nu > eta >= 0."""


class CorruptBarrierFile(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"barrier file field {field_name!r}: {reason}")
        self.field = field_name


@dataclass(frozen=True)
class BarrierModel:
    centers: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    bandwidth: float
    eta: float = 0.0
    nu: float = 0.0
    c: float = 0.0
    b_bar: float = 0.0
    epsilon: float = 0.0
    zeta: float = 1e-5
    horizon_T: int = 1
    delta: float = 1.0
    valid: bool = False
    regularization_lambda: float = 0.0
    ridge_lambda: float = 0.0
    c_minmax: float = 0.0
    delta_minmax: float = 1.0
    c_mode: str = "closed_loop"
    min_raw: float = 0.0

    @property
    def state_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def delta_raw(self) -> float:
        """Unclamped (eta + c T) / nu; infinite for an invalid ordering."""
        if self.nu <= 0 or self.nu <= self.eta:
            return float("inf")
        return (self.eta + self.c * self.horizon_T) / self.nu

    def raw(self, states) -> np.ndarray:
        """Unclamped kernel expansion at each row of ``states``."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != self.state_dim:
            raise ValueError(f"state has dimension {states.shape[1]}, barrier expects {self.state_dim}")
        out = np.empty(states.shape[0])
        for lo in range(0, states.shape[0], _CHUNK):
            k = rbf_cross(states[lo:lo + _CHUNK], self.centers, self.bandwidth)
            out[lo:lo + _CHUNK] = k @ self.alpha
        return out

    def __call__(self, states) -> np.ndarray:
        return np.maximum(self.raw(states), 0.0)

    def gradient(self, s) -> np.ndarray:
        """Gradient of the unclamped expansion at a single state."""
        s = np.asarray(s, dtype=float).ravel()
        if s.size != self.state_dim:
            raise ValueError(f"state has dimension {s.size}, barrier expects {self.state_dim}")
        k = rbf_cross(s[None, :], self.centers, self.bandwidth)[0]
        return ((k * self.alpha) @ (self.centers - s)) / self.bandwidth**2

    def center_gram(self) -> np.ndarray:
        return gram_matrix(self.centers, self.bandwidth)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": JSON_VERSION,
            "kernel": {
                "bandwidth": float(self.bandwidth),
                "lambda": float(self.regularization_lambda),
                "ridge_lambda": float(self.ridge_lambda),
            },
            "centers": self.centers.tolist(),
            "alpha": self.alpha.tolist(),
            "eta": float(self.eta),
            "nu": float(self.nu),
            "c": float(self.c),
            "c_minmax": float(self.c_minmax),
            "c_mode": self.c_mode,
            "b_bar": float(self.b_bar),
            "epsilon": float(self.epsilon),
            "zeta": float(self.zeta),
            "horizon_T": int(self.horizon_T),
            "delta": float(self.delta),
            "delta_minmax": float(self.delta_minmax),
            "min_raw": float(self.min_raw),
            "valid": bool(self.valid),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "BarrierModel":
        if not isinstance(doc, dict):
            raise CorruptBarrierFile("<root>", "expected a JSON object")
        if doc.get("version") != JSON_VERSION:
            raise CorruptBarrierFile("version", f"unsupported value {doc.get('version')!r}")

        def num(name, src=doc, kind=float):
            if name not in src:
                raise CorruptBarrierFile(name, "missing")
            val = src[name]
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise CorruptBarrierFile(name, f"expected a number, got {val!r}")
            if not np.isfinite(val):
                raise CorruptBarrierFile(name, "not finite")
            return kind(val)

        kern = doc.get("kernel")
        if not isinstance(kern, dict):
            raise CorruptBarrierFile("kernel", "missing or not an object")
        try:
            centers = np.asarray(doc["centers"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptBarrierFile("centers", str(exc) or "missing") from None
        if centers.ndim != 2 or centers.shape[0] == 0:
            raise CorruptBarrierFile("centers", "expected a non-empty list of equal-length vectors")
        try:
            alpha = np.asarray(doc["alpha"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptBarrierFile("alpha", str(exc) or "missing") from None
        if alpha.shape != (centers.shape[0],):
            raise CorruptBarrierFile("alpha", f"length {alpha.size} does not match {centers.shape[0]} centers")
        if "valid" not in doc or not isinstance(doc["valid"], bool):
            raise CorruptBarrierFile("valid", "missing or not a boolean")
        bandwidth = num("bandwidth", kern)
        if bandwidth <= 0:
            raise CorruptBarrierFile("kernel.bandwidth", "must be positive")
        c_mode = doc.get("c_mode", "closed_loop")
        if c_mode not in C_MODES:
            raise CorruptBarrierFile("c_mode", f"unknown mode {c_mode!r}")
        horizon = num("horizon_T", kind=int)
        if horizon < 1:
            raise CorruptBarrierFile("horizon_T", "must be a positive integer")
        return cls(
            centers=centers,
            alpha=alpha,
            bandwidth=bandwidth,
            eta=num("eta"),
            nu=num("nu"),
            c=num("c"),
            b_bar=num("b_bar"),
            epsilon=num("epsilon"),
            zeta=num("zeta"),
            horizon_T=horizon,
            delta=num("delta"),
            valid=doc["valid"],
            regularization_lambda=num("lambda", kern),
            ridge_lambda=float(kern.get("ridge_lambda", 0.0)),
            c_minmax=float(doc.get("c_minmax", doc["c"])),
            delta_minmax=float(doc.get("delta_minmax", doc["delta"])),
            c_mode=c_mode,
            min_raw=float(doc.get("min_raw", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "BarrierModel":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptBarrierFile("<root>", f"not valid JSON ({exc})") from None
        return cls.from_dict(doc)


def fit_barrier(sample, labels, kernel: KernelSpec, ridge_lambda: float):
    """Ridge regression of the labels on the state Gram matrix.

    Minimizes ``||K alpha - Y||^2 + ridge_lambda ||alpha||^2`` with the sample
    states as centers. Returns ``(centers, alpha)``.
    """
    centers = np.atleast_2d(np.asarray(sample, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if centers.shape[0] == 0:
        raise ValueError("fit_barrier needs a non-empty sample")
    if y.size != centers.shape[0]:
        raise ValueError("labels and sample lengths differ")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 (safe) or 1 (unsafe)")
    if not np.any(y == 1.0):
        raise NoUnsafeSamples("sample contains no unsafe states")
    if not np.any(y == 0.0):
        raise NoSafeSamples("sample contains no safe states")
    if ridge_lambda <= 0:
        raise ValueError("ridge_lambda must be positive")
    k = gram_matrix(centers, kernel.bandwidth_state)
    normal = k.T @ k
    normal = 0.5 * (normal + normal.T)
    fac = factorize(normal, ridge_lambda, 1)
    alpha = fac.solve(k.T @ y)
    return centers, alpha


def eval_barrier(model: BarrierModel, s) -> float:
    """max(0, B(s)) at a single state."""
    s = np.asarray(s, dtype=float).ravel()
    return float(model(s[None, :])[0])


def compute_levels(model: BarrierModel, initial_states, unsafe_samples) -> tuple[float, float]:
    """(eta, nu): max of B over initial states, min of B over unsafe samples."""
    unsafe = np.atleast_2d(np.asarray(unsafe_samples, dtype=float))
    if unsafe.size == 0:
        raise NoUnsafeSamples("no unsafe samples to set the unsafe level")
    init = np.atleast_2d(np.asarray(initial_states, dtype=float))
    if init.size == 0:
        raise ValueError("need at least one initial state")
    return float(np.max(model(init))), float(np.min(model(unsafe)))


@dataclass(frozen=True)
class DecreaseBound:
    """Outcome of :func:`compute_c`."""

    c: float
    c_minmax: float
    worst_state: int
    raw_closed_loop: float
    raw_minmax: float


def decrease_terms(model: BarrierModel, cme: CmeModel, states, actions) -> np.ndarray:
    """W(s,a)^T B(S+) - B(s) + eps sqrt(k_SA((s,a),(s,a))) B_bar for paired rows."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    beta = cme.dual_coefficients(model.raw(cme.successors))
    out = np.empty(states.shape[0])
    for lo in range(0, states.shape[0], _CHUNK):
        hi = lo + _CHUNK
        out[lo:hi] = cme.kernel_vectors(states[lo:hi], actions[lo:hi]) @ beta
    # the RBF self-kernel is 1, so the robustness penalty is eps * B_bar
    self_k = 1.0
    return out - model.raw(states) + model.epsilon * np.sqrt(self_k) * model.b_bar


def compute_c(model: BarrierModel, cme: CmeModel, candidate_states, candidate_actions,
              policy_actions=None) -> DecreaseBound:
    """Decrease constant of the barrier on a finite candidate grid.

    The certified ``c`` is the per-state maximum at the action the policy
    takes (``policy_actions``, aligned with ``candidate_states``); without a
    policy the maximum over every candidate action is used. ``c_minmax`` is
    the min over states of the max over actions. Both are clamped at 0.
    """
    states = np.atleast_2d(np.asarray(candidate_states, dtype=float))
    actions = np.atleast_2d(np.asarray(candidate_actions, dtype=float))
    if states.shape[0] == 0 or actions.shape[0] == 0 or states.size == 0 or actions.size == 0:
        raise ValueError("compute_c needs non-empty candidate sets")
    n_s, n_a = states.shape[0], actions.shape[0]

    grid_s = np.repeat(states, n_a, axis=0)
    grid_a = np.tile(actions, (n_s, 1))
    per_action = decrease_terms(model, cme, grid_s, grid_a).reshape(n_s, n_a)
    worst_action = per_action.max(axis=1)

    if policy_actions is not None:
        pol = np.atleast_2d(np.asarray(policy_actions, dtype=float))
        if pol.shape[0] != n_s:
            raise ValueError("policy_actions must align with candidate_states")
        closed = decrease_terms(model, cme, states, pol)
        worst_action = np.maximum(worst_action, closed)
    else:
        closed = worst_action

    i = int(np.argmax(closed))
    raw_closed = float(closed[i])
    raw_minmax = float(worst_action.min())
    return DecreaseBound(
        c=max(0.0, raw_closed),
        c_minmax=max(0.0, raw_minmax),
        worst_state=i,
        raw_closed_loop=raw_closed,
        raw_minmax=raw_minmax,
    )


def certify(model: BarrierModel | None = None, *, eta=None, nu=None, c=None, horizon_T=None) -> float:
    """delta = min(1, (eta + c T) / nu) for a valid barrier.

    Either pass a model or the four constants as keywords (keywords win).
    """
    eta = model.eta if eta is None else eta
    nu = model.nu if nu is None else nu
    c = model.c if c is None else c
    horizon_T = model.horizon_T if horizon_T is None else horizon_T
    if nu <= 0 or nu <= eta:
        raise InvalidBarrier(f"need nu > eta >= 0, got eta={eta:.6g}, nu={nu:.6g}")
    if eta < 0 or c < 0:
        raise InvalidBarrier("eta and c must be non-negative")
    return min(1.0, (eta + c * horizon_T) / nu)


@dataclass
class BarrierContext:
    """Environment-side inputs that compute_bc needs besides the data."""

    initial_states: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    state_sampler: Callable[[np.random.Generator, int], np.ndarray]
    horizon_T: int
    zeta: float = 1e-5
    policy: Callable[[np.ndarray], np.ndarray] | None = None
    ridge_lambda: float = 1e-3
    c_mode: str = "closed_loop"
    n_box_states: int = 512
    n_actions: int = 64
    n_boundary: int = 256
    resample: Callable[[], list] | None = None


def _attempt(states, labels, unsafe_extra, sample, spec, kernel, ridge_lambda,
             epsilon, ctx: BarrierContext, cand_states, cand_actions) -> BarrierModel:
    centers, alpha = fit_barrier(states, labels, kernel, ridge_lambda)
    model = BarrierModel(
        centers=centers,
        alpha=alpha,
        bandwidth=kernel.bandwidth_state,
        epsilon=float(epsilon),
        zeta=ctx.zeta,
        horizon_T=ctx.horizon_T,
        regularization_lambda=kernel.regularization_lambda,
        ridge_lambda=ridge_lambda,
        c_mode=ctx.c_mode,
    )
    unsafe = np.vstack([states[labels == 1.0], unsafe_extra])
    eta, nu = compute_levels(model, ctx.initial_states, unsafe)
    b_bar = rkhs_norm(alpha, model.center_gram())
    model = replace(model, eta=eta, nu=nu, b_bar=b_bar,
                    min_raw=float(np.min(model.raw(np.vstack([states, cand_states])))))

    cme = fit_cme(sample, kernel)
    all_states = np.vstack([states, cand_states])
    pol = None if ctx.policy is None else ctx.policy(all_states)
    bound = compute_c(model, cme, all_states, cand_actions, pol)
    model = replace(model, c=bound.c, c_minmax=bound.c_minmax)

    valid = nu > eta >= 0.0 and nu > 0.0
    if not valid:
        return replace(model, valid=False, delta=1.0, delta_minmax=1.0)
    d_closed = certify(model, c=bound.c)
    d_minmax = certify(model, c=bound.c_minmax)
    if ctx.c_mode == "minmax":
        model = replace(model, c=bound.c_minmax, c_minmax=bound.c_minmax)
        delta = d_minmax
    else:
        delta = d_closed
    return replace(model, valid=True, delta=delta, delta_minmax=d_minmax)


def compute_bc(sample, spec: SafetySpec, kernel: KernelSpec, epsilon: float,
               b_bar_hint: float | None = None, *, ctx: BarrierContext,
               rng: np.random.Generator) -> BarrierModel:
    """Fit and validate a barrier on a transition sample, retrying on failure.

    Retry schedule, each relative to the first attempt: ridge_lambda / 10,
    bandwidth * 0.5, bandwidth * 2, freshly resampled data. The first valid
    model with ``delta < 1`` is returned; otherwise the valid model with the
    smallest unclamped ratio, or the last attempt flagged invalid.

    Raises :class:`NoUnsafeSamples` / :class:`NoSafeSamples` when the sample
    cannot be labelled both ways.
    """
    sample = list(sample)
    if not sample:
        raise ValueError("compute_bc needs a non-empty sample")
    if ctx.c_mode not in C_MODES:
        raise ValueError(f"c_mode must be one of {C_MODES}")

    cand_states = np.atleast_2d(ctx.state_sampler(rng, ctx.n_box_states))
    low = np.asarray(ctx.action_low, dtype=float)
    high = np.asarray(ctx.action_high, dtype=float)
    cand_actions = rng.uniform(low, high, size=(ctx.n_actions, low.size))
    boundary = spec.boundary_samples(ctx.state_sampler(rng, ctx.n_boundary), rng)

    schedule = [
        ("base", 1.0, 1.0, False),
        ("ridge/10", 0.1, 1.0, False),
        ("bandwidth*0.5", 1.0, 0.5, False),
        ("bandwidth*2", 1.0, 2.0, False),
        ("resample", 1.0, 1.0, True),
    ]
    best: BarrierModel | None = None
    last: BarrierModel | None = None
    for name, ridge_scale, bw_scale, resample in schedule[:MAX_ATTEMPTS]:
        data = sample
        if resample:
            if ctx.resample is None:
                continue
            data = list(ctx.resample())
        states = np.array([t.s for t in data], dtype=float)
        labels = spec.labels(states)
        k = kernel.replace(
            bandwidth_state=kernel.bandwidth_state * bw_scale,
            bandwidth_state_action=kernel.bandwidth_state_action * bw_scale,
        )
        model = _attempt(states, labels, boundary, data, spec, k,
                         ctx.ridge_lambda * ridge_scale, epsilon, ctx,
                         cand_states, cand_actions)
        log.debug("compute_bc attempt %s: valid=%s eta=%.4g nu=%.4g c=%.4g delta=%.4g",
                  name, model.valid, model.eta, model.nu, model.c, model.delta)
        last = model
        if model.valid and (best is None or model.delta_raw < best.delta_raw):
            best = model
        if best is not None and best.delta < 1.0:
            break

    if b_bar_hint is not None and best is not None and b_bar_hint < best.b_bar - 1e-9:
        log.debug("B_bar hint %.4g is below the fitted RKHS norm %.4g", b_bar_hint, best.b_bar)
    if best is not None:
        return best
    log.warning("compute_bc: no valid barrier after %d attempts", MAX_ATTEMPTS)
    return last


def barrier_summary(model: BarrierModel) -> dict:
    d = model.to_dict()
    for key in ("centers", "alpha"):
        d.pop(key)
    return d


__all__ = [
    "BarrierContext",
    "BarrierModel",
    "CorruptBarrierFile",
    "DecreaseBound",
    "InvalidBarrier",
    "NoSafeSamples",
    "NoUnsafeSamples",
    "barrier_summary",
    "certify",
    "compute_bc",
    "compute_c",
    "compute_levels",
    "decrease_terms",
    "eval_barrier",
    "fit_barrier",
]

