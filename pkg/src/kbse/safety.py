"""Safety specifications: an unsafe set given by constraint predicates plus a horizon."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("gt", "lt", "abs_lt")


@dataclass(frozen=True)
class Constraint:
    """A predicate that must hold for a state to be safe.

    ``kind`` is ``"gt"`` (feature > bound), ``"lt"`` (feature < bound) or
    ``"abs_lt"`` (|feature| < bound). The feature is state coordinate
    ``index``, or, when ``sin_index`` is set, the angle
    ``atan2(s[sin_index], s[index])`` of a (cos, sin) pair.

    Constraints are inclusive on the safe side: a feature sitting exactly on
    the bound counts as safe.
    """

    index: int
    kind: str
    bound: float
    sin_index: int | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "abs_lt" and self.bound < 0:
            raise ValueError("abs_lt bound must be non-negative")

    def feature(self, s) -> float:
        if self.sin_index is None:
            return float(s[self.index])
        return math.atan2(float(s[self.sin_index]), float(s[self.index]))

    def violated(self, s) -> bool:
        x = self.feature(s)
        if self.kind == "gt":
            return x < self.bound
        if self.kind == "lt":
            return x > self.bound
        return abs(x) > self.bound

    def place_on_boundary(self, s: np.ndarray, rng: np.random.Generator, nudge: float = 1e-6) -> None:
        """Move ``s`` in place onto the boundary, ``nudge`` into the unsafe side."""
        if self.kind == "gt":
            x = self.bound - nudge
        elif self.kind == "lt":
            x = self.bound + nudge
        else:
            x = (self.bound + nudge) * (1.0 if rng.random() < 0.5 else -1.0)
        if self.sin_index is None:
            s[self.index] = x
        else:
            s[self.index] = math.cos(x)
            s[self.sin_index] = math.sin(x)

    def describe(self) -> str:
        name = self.label or (
            f"s[{self.index}]" if self.sin_index is None
            else f"atan2(s[{self.sin_index}], s[{self.index}])"
        )
        if self.kind == "gt":
            return f"{name} > {self.bound:g}"
        if self.kind == "lt":
            return f"{name} < {self.bound:g}"
        return f"|{name}| < {self.bound:g}"


@dataclass(frozen=True)
class SafetySpec:
    constraints: tuple[Constraint, ...]
    horizon_T: int

    def __post_init__(self):
        if self.horizon_T < 1:
            raise ValueError("horizon_T must be a positive integer")
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def is_unsafe(self, s) -> bool:
        return any(c.violated(s) for c in self.constraints)

    def labels(self, states) -> np.ndarray:
        """1.0 for unsafe rows, 0.0 for safe rows."""
        return np.array([1.0 if self.is_unsafe(s) else 0.0 for s in states])

    def boundary_samples(self, base_states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Project each base state onto the boundary of a randomly chosen constraint.

        The returned states sit just inside the unsafe set.
        """
        out = np.array(base_states, dtype=float, copy=True)
        for row in out:
            c = self.constraints[rng.integers(len(self.constraints))]
            c.place_on_boundary(row, rng)
        return out

    def describe(self) -> str:
        return " and ".join(c.describe() for c in self.constraints)


def is_unsafe(spec: SafetySpec, s) -> bool:
    return spec.is_unsafe(s)
