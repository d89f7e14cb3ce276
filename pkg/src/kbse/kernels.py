"""RBF kernels, Gram matrices and regularized Cholesky solves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

JITTER_START = 1e-10
JITTER_CAP = 1e-4
MEDIAN_MAX_PAIRS = 1000


class KernelNumericError(ArithmeticError):
    """Raised when a regularized Gram matrix cannot be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    """Parameters shared by the state kernel and the state-action kernel.

    ``kernel_bound_C`` is sup k(s, s); it is 1 for the RBF kernel.
    """

    bandwidth_state: float = 1.0
    bandwidth_state_action: float = 1.0
    regularization_lambda: float = 1e-3
    kernel_bound_C: float = 1.0

    def __post_init__(self):
        if not (self.bandwidth_state > 0 and self.bandwidth_state_action > 0):
            raise ValueError("kernel bandwidths must be positive")
        if self.regularization_lambda < 0:
            raise ValueError("regularization_lambda must be non-negative")
        if self.kernel_bound_C <= 0:
            raise ValueError("kernel_bound_C must be positive")

    def replace(self, **changes) -> "KernelSpec":
        values = {
            "bandwidth_state": self.bandwidth_state,
            "bandwidth_state_action": self.bandwidth_state_action,
            "regularization_lambda": self.regularization_lambda,
            "kernel_bound_C": self.kernel_bound_C,
        }
        values.update(changes)
        return KernelSpec(**values)


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected a list of vectors, got shape {arr.shape}")
    return arr


def rbf_eval(x, y, bandwidth: float) -> float:
    """k(x, y) = exp(-||x - y||^2 / (2 bandwidth^2))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    d = x - y
    return float(np.exp(-np.dot(d, d) / (2.0 * bandwidth**2)))


def sq_distances(a, b) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def rbf_cross(a, b, bandwidth: float) -> np.ndarray:
    """Kernel matrix with entry (i, j) = k(a_i, b_j)."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return np.exp(-sq_distances(a, b) / (2.0 * bandwidth**2))


def gram_matrix(points, bandwidth: float) -> np.ndarray:
    """Symmetric Gram matrix of ``points`` with an exact unit diagonal."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("gram_matrix needs at least one point")
    k = rbf_cross(pts, pts, bandwidth)
    # enforce exact symmetry and diagonal structurally
    k = np.triu(k, 1)
    k = k + k.T
    np.fill_diagonal(k, 1.0)
    return k


@dataclass(frozen=True)
class GramFactor:
    """Cholesky factor of ``gram + lambda * n * I + jitter * I``."""

    n: int
    gram: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    shift: float
    jitter_used: float = 0.0

    def solve(self, b) -> np.ndarray:
        """Solve (gram + shift I + jitter I) x = b."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {self.n}")
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    def regularized(self) -> np.ndarray:
        return self.gram + (self.shift + self.jitter_used) * np.eye(self.n)


def factorize(gram, lam: float, n: int | None = None) -> GramFactor:
    """Factor ``gram + lam * n * I``, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 and doubles up to 1e-4.
    """
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError(f"gram must be square, got shape {gram.shape}")
    if not np.array_equal(gram, gram.T):
        if not np.allclose(gram, gram.T, rtol=0, atol=1e-12):
            raise ValueError("gram must be symmetric")
        gram = 0.5 * (gram + gram.T)
    m = gram.shape[0]
    n = m if n is None else int(n)
    shift = float(lam) * n
    base = gram + shift * np.eye(m)

    jitter = 0.0
    while True:
        mat = base if jitter == 0.0 else base + jitter * np.eye(m)
        try:
            chol = linalg.cholesky(mat, lower=True, check_finite=False)
        except linalg.LinAlgError:
            chol = None
        if chol is not None and np.all(np.isfinite(chol)) and np.all(np.diag(chol) > 0):
            return GramFactor(n=m, gram=gram, chol=chol, shift=shift, jitter_used=jitter)
        if jitter >= JITTER_CAP:
            break
        jitter = JITTER_START if jitter == 0.0 else min(2.0 * jitter, JITTER_CAP)

    cond = np.linalg.cond(base)
    raise KernelNumericError(
        f"Cholesky failed at jitter cap {JITTER_CAP:g}; condition estimate {cond:.3e}"
    )


def rkhs_norm(alpha, gram) -> float:
    """sqrt(alpha^T K alpha), the RKHS norm of sum_i alpha_i k(., x_i)."""
    alpha = np.asarray(alpha, dtype=float).ravel()
    gram = np.asarray(gram, dtype=float)
    if gram.shape != (alpha.size, alpha.size):
        raise ValueError(f"alpha has length {alpha.size}, gram has shape {gram.shape}")
    return float(np.sqrt(max(0.0, alpha @ gram @ alpha)))


def median_bandwidth(points, rng=None, max_pairs: int = MEDIAN_MAX_PAIRS) -> float:
    """Median pairwise Euclidean distance, over at most ``max_pairs`` pairs.

    Falls back to 1.0 when every sampled pair coincides.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("median_bandwidth needs at least two points")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, 1)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        flat = rng.choice(n_pairs, size=max_pairs, replace=False)
        i, j = _unrank_pairs(flat, n)
    dists = np.linalg.norm(pts[i] - pts[j], axis=1)
    med = float(np.median(dists))
    return med if med > 0 else 1.0


def _unrank_pairs(flat: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # row-major order of the strict upper triangle
    flat = np.asarray(flat, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(np.arange(n - 1, 0, -1))])
    i = np.searchsorted(starts, flat, side="right") - 1
    j = flat - starts[i] + i + 1
    return i, j
