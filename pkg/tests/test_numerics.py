import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from evcs_forecast.numerics import (AdamState, DomainError, RngStream, ShapeError, adam_init,
                                    adam_step, normal_cdf, normal_inv_cdf, rng_gaussian, softplus)


def quad_cdf(z):
    # independent oracle: integrate the density directly
    pdf = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    if z < 0:
        return integrate.quad(pdf, -np.inf, z, epsabs=1e-14, epsrel=1e-13)[0]
    return 0.5 + integrate.quad(pdf, 0, z, epsabs=1e-14, epsrel=1e-13)[0]


def bisect_inv(p):
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if quad_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---- Adam ----

def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = adam_init(p)
    state.first_moment["w"] = np.array([0.5, 0.5])
    state.second_moment["w"] = np.array([0.2, 0.2])
    state = AdamState(state.first_moment, state.second_moment, 3)
    new, s2 = adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
    # the update is nonzero only through old moments; with zero old moments it is exactly zero
    fresh, s3 = adam_step(p, {"w": np.zeros(2)}, adam_init(p), 1e-3)
    assert np.array_equal(fresh["w"], p["w"])
    assert np.all(np.abs(s2.first_moment["w"]) < np.abs(state.first_moment["w"]))
    assert np.all(s2.second_moment["w"] < state.second_moment["w"])


def test_adam_first_step_hand_value():
    p = {"x": np.array(0.0)}
    new, state = adam_step(p, {"x": np.array(1.0)}, adam_init(p), 0.001)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert new["x"] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)
    assert state.step_count == 1


def test_adam_deterministic_and_shape_preserving():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    s = adam_init(p)
    r1 = adam_step(p, g, s, 0.01)
    r2 = adam_step(p, g, s, 0.01)
    for k in p:
        assert np.array_equal(r1[0][k], r2[0][k])
        assert r1[0][k].shape == p[k].shape


def test_adam_step_count_increments():
    p = {"a": np.zeros(2)}
    s = adam_init(p)
    for n in range(1, 4):
        p, s = adam_step(p, {"a": np.ones(2)}, s, 0.1)
        assert s.step_count == n


def test_adam_errors():
    p = {"a": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(p, {"a": np.zeros(3)}, adam_init(p), 0.1)
    with pytest.raises(ShapeError):
        adam_step(p, {"zz": np.zeros(2)}, adam_init(p), 0.1)
    with pytest.raises(DomainError):
        adam_step(p, {"a": np.zeros(2)}, adam_init(p), 0.0)


# ---- normal distribution ----

@pytest.mark.parametrize("z,expected", [(0.0, 0.5), (1.96, 0.9750021), (-3.0, 0.0013499)])
def test_normal_cdf_values(z, expected):
    assert normal_cdf(z) == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("z", [-8.0, -5.5, -3.0, -1.0, -0.1, 0.3, 1.96, 4.0, 7.5])
def test_normal_cdf_against_quadrature(z):
    assert abs(normal_cdf(z) - quad_cdf(z)) <= 1e-7


@pytest.mark.parametrize("p,expected", [(0.5, 0.0), (0.975, 1.959964), (0.05, -1.644854)])
def test_normal_inv_cdf_values(p, expected):
    assert normal_inv_cdf(p) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("p", [0.975, 0.05, 0.3])
def test_normal_inv_cdf_against_bisection(p):
    assert normal_inv_cdf(p) == pytest.approx(bisect_inv(p), abs=1e-7)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_normal_inv_cdf_domain(p):
    with pytest.raises(DomainError):
        normal_inv_cdf(p)


@given(st.floats(-30, 30))
def test_cdf_symmetry(z):
    assert abs(normal_cdf(z) + normal_cdf(-z) - 1.0) <= 1e-9


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_cdf_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert normal_cdf(lo) <= normal_cdf(hi)


@given(st.floats(-6, 6))
def test_inv_cdf_roundtrip(z):
    assert abs(normal_inv_cdf(normal_cdf(z)) - z) <= 1e-6


@given(st.floats(1e-12, 1 - 1e-12))
def test_inv_cdf_residual(p):
    assert abs(normal_cdf(normal_inv_cdf(p)) - p) <= 1e-9


# ---- RNG ----

def test_rng_gaussian_zero_std_returns_mean():
    v, _ = rng_gaussian(RngStream(3), 2.5, 0.0)
    assert v == 2.5


def test_rng_gaussian_replay_and_advance():
    s = RngStream(11, 4)
    a, s1 = rng_gaussian(s, 0, 1)
    b, _ = rng_gaussian(s, 0, 1)
    c, _ = rng_gaussian(s1, 0, 1)
    assert a == b
    assert s1.counter == s.counter + 1
    assert c != a


def test_rng_gaussian_moments():
    s = RngStream(2024)
    draws = np.empty(100_000)
    for k in range(len(draws)):
        draws[k], s = rng_gaussian(s, 0.0, 1.0)
    assert abs(draws.mean()) <= 0.02
    assert abs(draws.var() - 1.0) <= 0.02


def test_rng_gaussian_negative_std():
    with pytest.raises(DomainError):
        rng_gaussian(RngStream(0), 0, -1)


def test_streams_identical_and_distinct():
    a = RngStream(5, 1).generator().random(8)
    b = RngStream(5, 1).generator().random(8)
    c = RngStream(5, 2).generator().random(8)
    d = RngStream(6, 1).generator().random(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    # distinct streams should look uncorrelated
    x = RngStream(5, 1).generator().standard_normal(20000)
    y = RngStream(5, 2).generator().standard_normal(20000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_split_streams_are_deterministic_and_distinct():
    s = RngStream(9, 3)
    assert s.split(0) == s.split(0)
    assert s.split(0) != s.split(1)


def test_softplus_large_inputs():
    assert softplus(800.0) == 800.0
    assert softplus(-800.0) == 0.0
    assert softplus(0.0) == pytest.approx(math.log(2))
