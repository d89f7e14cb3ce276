import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from kbse.envs import make_env
from kbse.safety import Constraint, SafetySpec, is_unsafe


def _pend(theta, thdot=0.0):
    return np.array([math.cos(theta), math.sin(theta), thdot])


def test_table_examples():
    pend = make_env("pendulum", 0.0).spec
    assert is_unsafe(pend, _pend(-0.9))
    assert not is_unsafe(pend, _pend(0.3))
    mc = make_env("mountain_car", 0.0).spec
    assert not is_unsafe(mc, [-0.5, 0.0])
    assert is_unsafe(mc, [-1.1, 0.0])
    ip = make_env("inverted_pendulum", 0.0).spec
    assert is_unsafe(ip, [0.31, 0, 0, 0]) and is_unsafe(ip, [-0.31, 0, 0, 0])
    assert not is_unsafe(ip, [0.29, 0, 0, 0])


def test_boundary_counts_as_safe():
    spec = SafetySpec((Constraint(0, "gt", -0.8),), 5)
    assert not is_unsafe(spec, [-0.8])
    assert not is_unsafe(SafetySpec((Constraint(0, "abs_lt", 0.3),), 5), [0.3])
    angle = SafetySpec((Constraint(0, "gt", -0.8, sin_index=1),), 5)
    s = _pend(-0.8)
    # atan2 round trip may move the angle by an ulp; the feature decides
    assert is_unsafe(angle, s) == (math.atan2(s[1], s[0]) < -0.8)


def _direct(constraints, s):
    for idx, kind, bound in constraints:
        x = s[idx]
        if (kind == "gt" and not x > bound) and x != bound:
            return True
        if (kind == "lt" and not x < bound) and x != bound:
            return True
        if kind == "abs_lt" and abs(x) > bound:
            return True
    return False


@given(
    s=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    cons=st.lists(st.tuples(st.integers(0, 2), st.sampled_from(["gt", "lt", "abs_lt"]),
                            st.floats(0, 4)), min_size=1, max_size=4),
)
def test_matches_direct_predicate(s, cons):
    spec = SafetySpec(tuple(Constraint(i, k, b) for i, k, b in cons), 3)
    assert spec.is_unsafe(s) == _direct(cons, s)
    assert spec.is_unsafe(s) == spec.is_unsafe(list(s))  # pure


def test_boundary_samples_are_just_unsafe():
    rng = np.random.default_rng(0)
    env = make_env("pendulum", 0.0)
    pts = env.spec.boundary_samples(env.sample_states(rng, 50), rng)
    for p in pts:
        assert env.spec.is_unsafe(p)
        assert abs(math.atan2(p[1], p[0]) + 0.8) < 1e-5


def test_labels_and_describe():
    spec = SafetySpec((Constraint(0, "gt", 0.0, label="x"),), 2)
    assert list(spec.labels([[1.0], [-1.0]])) == [0.0, 1.0]
    assert spec.describe() == "x > 0"
