import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcx.smooth import (
    beta_threshold,
    disk_constraints,
    lse_combine,
    lse_gradient,
    lse_reduce,
    sandwich_check,
    smooth_max,
)

finite = st.floats(-50.0, 50.0, allow_nan=False)
betas = st.floats(1.0, 1000.0)


def test_single_value():
    assert lse_combine([0.3], 7.0) == pytest.approx(2.1, abs=1e-12)


def test_two_value_example():
    assert lse_combine([0.0, -2.0], 1.0) == pytest.approx(math.log(1.0 + math.exp(-2.0)), abs=1e-15)


def test_identical_terms():
    assert lse_combine([0.25] * 8, 4.0) == pytest.approx(1.0 + math.log(8), abs=1e-12)


def test_input_errors():
    with pytest.raises(ValueError):
        lse_combine([], 1.0)
    with pytest.raises(ValueError):
        lse_combine([1.0], 0.0)
    with pytest.raises(ValueError):
        lse_combine([np.nan], 1.0)


def test_huge_arguments_do_not_overflow():
    assert lse_combine([1e6, 0.0], 1.0) == 1e6
    assert lse_combine([-1e6, -1e6], 1.0) == pytest.approx(-1e6 + math.log(2), abs=1e-9)


def test_translation_identity_past_overflow():
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, size=10)
    c = 800.0
    with np.errstate(over="ignore"):
        assert not np.isfinite(np.log(np.exp(v + c).sum()))
    assert abs(lse_combine(v + c, 1.0) - (lse_combine(v, 1.0) + c)) <= 1e-10


def test_gradient_single_member():
    g = np.array([[1.5, -2.0, 0.5]])
    assert np.array_equal(lse_gradient([0.4], g, 3.0), 3.0 * g[0])


def test_gradient_symmetric_members():
    G = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.allclose(lse_gradient([0.2, 0.2], G, 5.0), 5.0 * (G[0] + G[1]) / 2, atol=1e-15)


def test_gradient_matches_finite_differences():
    # members v_j(x) = a_j . x + b_j |x|^2
    rng = np.random.default_rng(1)
    A, b = rng.normal(size=(5, 3)), rng.normal(size=5)
    x, beta, h = rng.normal(size=3), 2.5, 1e-6

    def members(z):
        return A @ z + b * (z @ z)

    grads = A + 2.0 * b[:, None] * x[None, :]
    analytic = lse_gradient(members(x), grads, beta)
    numeric = np.array([(lse_combine(members(x + h * e), beta) - lse_combine(members(x - h * e), beta)) / (2 * h)
                        for e in np.eye(3)])
    assert np.max(np.abs(analytic - numeric)) <= 1e-6 * np.max(np.abs(analytic))


def test_gradient_shape_checked():
    with pytest.raises(ValueError):
        lse_gradient([0.0, 1.0], np.ones((3, 2)), 1.0)


def test_sandwich_single_member():
    s = sandwich_check([-0.7], 3.0)
    assert s.gap == 0.0 and s.holds
    assert s.scaled == pytest.approx(-0.7, abs=1e-15)


def test_sandwich_three_values():
    s = sandwich_check([0.0, -1.0, -2.0], 10.0)
    assert s.holds
    assert 0.0 <= s.scaled <= math.log(3) / 10


def test_sandwich_gap_halves_with_doubled_beta():
    v = [0.1, -0.3, 0.05, -1.0]
    assert sandwich_check(v, 20.0).gap == pytest.approx(sandwich_check(v, 10.0).gap / 2, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=64), betas)
def test_sandwich_property(values, beta):
    assert sandwich_check(values, beta).holds


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5.0, -1e-3), min_size=1, max_size=64))
def test_beta_threshold_certifies_feasibility(values):
    b = beta_threshold(values)
    if len(values) == 1:
        assert b == 0.0  # any positive beta works for a single member
        b = 1.0
    for scale in (1.0, 2.0, 10.0):
        assert lse_combine(values, b * scale) <= 1e-9


def test_beta_threshold_infinite_when_violated():
    assert beta_threshold([-1.0, 0.0]) == math.inf


def test_inner_containment_sampled():
    rng = np.random.default_rng(2)
    centers = rng.uniform(-1, 1, size=(6, 2))
    radii = rng.uniform(0.8, 1.5, size=6)
    pts = rng.uniform(-2, 2, size=(5000, 2))
    vals = disk_constraints(pts, centers, radii)
    inside = np.array([lse_combine(v, 5.0) <= 0 for v in vals])
    assert inside.any()
    assert np.all(vals[inside] <= 0)


def test_reduce_matches_direct_and_is_worker_invariant():
    v = np.random.default_rng(3).normal(size=5000)
    one = lse_reduce(v, 50.0, workers=1)
    assert one == pytest.approx(lse_combine(v, 50.0), rel=1e-14)
    for w in (2, 4, 7):
        assert lse_reduce(v, 50.0, workers=w) == one


def test_reduce_small_leaves():
    v = np.arange(11, dtype=float) / 10
    assert lse_reduce(v, 3.0, leaf_size=2) == pytest.approx(lse_combine(v, 3.0), rel=1e-14)


def test_smooth_max_modes():
    v = [0.5, -1.0, 0.2]
    assert smooth_max(v, 50.0, "lse") >= 0.5
    assert np.mean(v) <= smooth_max(v, 50.0, "mellowmax") <= 0.5
    assert smooth_max([-1.0, -2.0], 4.0, "pnorm") == 0.0
    assert smooth_max(v, 200.0, "pnorm") == pytest.approx(0.5, rel=1e-2)
    with pytest.raises(ValueError):
        smooth_max(v, 1.0, "bogus")


def test_disk_constraints_sign():
    vals = disk_constraints([[0.0, 0.0], [3.0, 0.0]], np.zeros((1, 2)), [1.0])
    assert vals[0, 0] == -1.0 and vals[1, 0] == 8.0
    assert np.array_equal(disk_constraints([[3.0, 0.0]], np.zeros((1, 2)), [1.0], keep_in=False), [[-8.0]])
