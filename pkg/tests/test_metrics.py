import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evcs_forecast.metrics import (PINBALL_GRID, GaussianForecast, crps_ensemble, crps_gaussian,
                                   crps_gaussian_array, crps_oracle, pi_bounds, pi_quantiles,
                                   pinball, pinball_array, pinball_loss, winkler, winkler_from_band)
from evcs_forecast.numerics import DomainError


def bisect_quantile(q, lo=-40.0, hi=40.0):
    """Standard normal quantile by bisection on the erf-based CDF."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_crps_reference_values():
    assert crps_gaussian(GaussianForecast(0, 1), 0) == pytest.approx(0.233695, abs=1e-6)
    assert crps_gaussian(GaussianForecast(2, 0.5), 3) == pytest.approx(0.726396, abs=1e-6)
    assert crps_oracle(GaussianForecast(0, 1), 0) == pytest.approx(0.233695, abs=1e-6)
    assert crps_oracle(GaussianForecast(2, 0.5), 3) == pytest.approx(0.726396, abs=1e-6)


def test_crps_degenerate_limit():
    assert crps_gaussian(GaussianForecast(1, 1e-8), 4) == pytest.approx(3, abs=1e-6)


def test_crps_rejects_bad_scale():
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(DomainError):
            GaussianForecast(0, bad)


def test_crps_matches_quadrature_on_grid():
    for mu, d, y in itertools.product(np.linspace(-2, 2, 5), np.linspace(0.1, 5, 5), np.linspace(-5, 5, 5)):
        f = GaussianForecast(mu, d)
        assert abs(crps_gaussian(f, y) - crps_oracle(f, y)) <= 1e-6


def test_crps_array_matches_scalar():
    rng = np.random.default_rng(0)
    mu, d, y = rng.normal(size=50), rng.uniform(0.1, 3, 50), rng.normal(size=50)
    arr = crps_gaussian_array(mu, d, y)
    assert all(arr[k] == pytest.approx(crps_gaussian(GaussianForecast(mu[k], d[k]), y[k]), abs=1e-14)
               for k in range(50))


def test_crps_ensemble_matches_brute_force_and_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 40))
    y = np.array([0.0, 1.0, -2.0])
    brute = np.abs(x - y[:, None]).mean(axis=1) - 0.5 * np.abs(x[:, :, None] - x[:, None, :]).mean(axis=(1, 2))
    np.testing.assert_allclose(crps_ensemble(x, y), brute, atol=1e-12)
    big = rng.normal(2.0, 0.5, size=(1, 200000))
    assert crps_ensemble(big, np.array([3.0]))[0] == pytest.approx(0.726396, abs=3e-3)


@given(st.floats(-5, 5), st.floats(0.05, 5), st.floats(0, 5))
def test_crps_symmetry(mu, d, off):
    f = GaussianForecast(mu, d)
    assert abs(crps_gaussian(f, mu + off) - crps_gaussian(f, mu - off)) <= 1e-9
    assert abs(crps_oracle(f, mu + off) - crps_oracle(f, mu - off)) <= 1e-9


@given(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-10, 10))
def test_crps_scale_covariance(mu, d, y, a, b):
    lhs = crps_gaussian(GaussianForecast(a * mu + b, a * d), a * y + b)
    rhs = a * crps_gaussian(GaussianForecast(mu, d), y)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(rhs))


def test_crps_minimized_at_truth_and_interior_scale():
    mus = np.linspace(-3, 3, 601)
    vals = crps_gaussian_array(mus, 1.0, 0.7)
    assert mus[np.argmin(vals)] == pytest.approx(0.7, abs=0.01)
    ds = np.linspace(0.01, 10, 2000)
    vals = crps_gaussian_array(0.0, ds, 2.0)
    k = int(np.argmin(vals))
    assert 0 < k < len(ds) - 1  # the best scale sits strictly inside the search range


def test_winkler_hand_values():
    assert winkler_from_band(5, 9, 7) == 1.0
    assert winkler_from_band(5, 9, 4) == pytest.approx(21.0)
    assert winkler_from_band(1, 5, 7) == pytest.approx(41.0)
    f = GaussianForecast(0, 1)
    assert winkler(f, 0.3, 90) == 1.0
    # inside the band the literal form ignores width
    assert winkler(GaussianForecast(0, 10), 0.3, 90) == winkler(f, 0.3, 90)
    assert winkler(f, 0.3, 90, conventional=True) == pytest.approx(2 * 1.6448536, abs=1e-6)


def test_pinball_hand_values():
    assert pinball_loss(12.0, 10.0, 0.9) == pytest.approx(0.2)
    assert pinball_loss(10.0, 10.0, 0.3) == 0.0
    vals, _ = pinball(GaussianForecast(3, 2), 3, (0.5,))
    assert vals[0.5] == 0.0
    vals, avg = pinball(GaussianForecast(3, 2), 7.5, (0.5,))
    assert vals[0.5] == pytest.approx(0.5 * 4.5) and avg == vals[0.5]
    with pytest.raises(DomainError):
        pinball(GaussianForecast(0, 1), 0, (1.0,))


def test_pinball_array_matches_scalar():
    _, avg = pinball(GaussianForecast(1, 2), 0.4)
    assert pinball_array(1.0, 2.0, 0.4, PINBALL_GRID) == pytest.approx(avg, abs=1e-14)


def test_pi_bounds():
    for p in (30, 60, 90, 99):
        band = pi_bounds(GaussianForecast(0, 1), p)
        q = bisect_quantile((1 + p / 100) / 2)
        assert band.upper == pytest.approx(q, abs=1e-9) and band.lower == pytest.approx(-q, abs=1e-9)
    band = pi_bounds(GaussianForecast(0, 1), 90)
    assert (round(band.lower, 6), round(band.upper, 6)) == (-1.644854, 1.644854)
    tiny = pi_bounds(GaussianForecast(3, 2), 1e-9)
    assert tiny.lower == pytest.approx(3) and tiny.upper == pytest.approx(3)
    wide, narrow = pi_bounds(GaussianForecast(1, 2), 60), pi_bounds(GaussianForecast(0, 1), 60)
    assert wide.upper - 1 == pytest.approx(2 * narrow.upper) and wide.lower - 1 == pytest.approx(2 * narrow.lower)
    assert pi_quantiles(90) == pytest.approx((0.05, 0.95))
    for bad in (0, 100, -5):
        with pytest.raises(DomainError):
            pi_bounds(GaussianForecast(0, 1), bad)


def test_band_widens_with_probability():
    f = GaussianForecast(2, 1.5)
    widths = [pi_bounds(f, p).upper - pi_bounds(f, p).lower for p in (10, 30, 60, 90, 99)]
    assert widths == sorted(widths)


@pytest.mark.parametrize("p", [30, 60, 90])
def test_empirical_coverage(p):
    n = 100_000
    y = np.random.default_rng(p).normal(1.0, 2.0, n)
    band = pi_bounds(GaussianForecast(1.0, 2.0), p)
    cover = np.mean((y >= band.lower) & (y <= band.upper))
    assert abs(cover - p / 100) <= 3 * math.sqrt(p * (100 - p) / 100 ** 2 / n)
