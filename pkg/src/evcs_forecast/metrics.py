"""Scoring rules for Gaussian forecasts: CRPS, Winkler, Pinball, PI bounds.

Throughout, ``delta`` is the standardizing scale of the forecast, i.e. the
standard deviation: the closed-form CRPS divides ``y - mu`` by it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .numerics import DomainError, normal_cdf, normal_inv_cdf, normal_pdf

WINKLER_ALPHA = 0.1
WINKLER_DELTA = 1.0
PINBALL_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
DEFAULT_PIS = (30, 60, 90)

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


@dataclass(frozen=True)
class GaussianForecast:
    mu: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.delta)):
            raise DomainError(f"forecast must be finite, got mu={self.mu}, delta={self.delta}")
        if self.delta <= 0:
            raise DomainError(f"forecast scale must be positive, got {self.delta}")


@dataclass(frozen=True)
class PiBand:
    p: float
    lower: float
    upper: float


def crps_gaussian(f: GaussianForecast, y: float) -> float:
    return float(crps_gaussian_array(f.mu, f.delta, y))


def crps_gaussian_array(mu, delta, y):
    """Vectorized closed-form CRPS of N(mu, delta^2) against ``y``."""
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise DomainError("forecast scale must be positive")
    z = (np.asarray(y, dtype=float) - mu) / delta
    return delta * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - _INV_SQRT_PI)


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def crps_oracle(f: GaussianForecast, y: float) -> float:
    """CRPS by adaptive quadrature of its defining integral.

    The integrand is effectively zero outside ``[mu - 10 delta, mu + 10 delta]``
    except for the stretch between that interval and ``y``, which is included.
    """
    mu, d = f.mu, f.delta
    lo = min(mu - 10.0 * d, y)
    hi = max(mu + 10.0 * d, y)

    def below(x):
        return _phi((x - mu) / d) ** 2

    def above(x):
        return (1.0 - _phi((x - mu) / d)) ** 2

    opts = dict(epsabs=1e-12, epsrel=1e-12, limit=200)
    left = integrate.quad(below, lo, y, points=[mu] if lo < mu < y else None, **opts)[0] if y > lo else 0.0
    right = integrate.quad(above, y, hi, points=[mu] if y < mu < hi else None, **opts)[0] if hi > y else 0.0
    return left + right


def pi_bounds(f: GaussianForecast, p: float) -> PiBand:
    if not 0 < p < 100:
        raise DomainError(f"PI probability must lie in (0, 100), got {p}")
    lo, hi = pi_bounds_array(f.mu, f.delta, p)
    return PiBand(p, float(lo), float(hi))


def pi_bounds_array(mu, delta, p):
    if not 0 < p < 100:
        raise DomainError(f"PI probability must lie in (0, 100), got {p}")
    q = p / 100.0
    lo = mu + delta * normal_inv_cdf((1.0 - q) / 2.0)
    hi = mu + delta * normal_inv_cdf((1.0 + q) / 2.0)
    return lo, hi


def winkler_from_band(lower, upper, y, alpha=WINKLER_ALPHA, delta_param=WINKLER_DELTA,
                      conventional=False):
    """Piecewise interval score.

    Default form: a constant ``delta_param`` inside the band, plus ``2 * miss /
    alpha`` outside. ``conventional=True`` swaps the constant for the band width.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(y, dtype=float)
    base = (upper - lower) if conventional else np.full(np.broadcast(lower, upper, y).shape, float(delta_param))
    out = np.where(y < lower, 2.0 * (lower - y) / alpha + base,
                   np.where(y > upper, 2.0 * (y - upper) / alpha + base, base))
    return float(out) if out.ndim == 0 else out


def winkler(f: GaussianForecast, y: float, p: float, alpha: float = WINKLER_ALPHA,
            delta_param: float = WINKLER_DELTA, conventional: bool = False) -> float:
    band = pi_bounds(f, p)
    if conventional:
        alpha = 1.0 - p / 100.0
    return winkler_from_band(band.lower, band.upper, y, alpha, delta_param, conventional)


def pinball_loss(y_q, y, q):
    """Quantile loss of prediction ``y_q`` at level ``q``."""
    y_q = np.asarray(y_q, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.where(y_q < y, (y - y_q) * q, (y_q - y) * (1.0 - q))
    return float(out) if out.ndim == 0 else out


def pinball(f: GaussianForecast, y: float, quantiles=PINBALL_GRID) -> tuple[dict[float, float], float]:
    values = {}
    for q in quantiles:
        if not 0.0 < q < 1.0:
            raise DomainError(f"quantile level must lie in (0, 1), got {q}")
        values[q] = pinball_loss(f.mu + f.delta * normal_inv_cdf(q), y, q)
    return values, sum(values.values()) / len(values)


def pi_quantiles(p: float) -> tuple[float, float]:
    """The two quantile levels bounding a central ``p`` percent interval."""
    return (1.0 - p / 100.0) / 2.0, (1.0 + p / 100.0) / 2.0


def pinball_array(mu, delta, y, quantiles) -> np.ndarray:
    """Average pinball over ``quantiles`` for each row; returns one value per row."""
    mu = np.asarray(mu, dtype=float)
    total = np.zeros(np.broadcast(mu, delta, y).shape)
    for q in quantiles:
        total = total + pinball_loss(mu + np.asarray(delta) * normal_inv_cdf(q), y, q)
    return total / len(quantiles)


def crps_ensemble(samples, y) -> np.ndarray:
    """Sample-based CRPS ``E|X - y| - E|X - X'| / 2`` per row.

    ``samples`` has shape (n_rows, m); ``y`` has n_rows entries. The pair term
    uses the sorted-sample identity, so the cost is O(m log m) per row.
    """
    x = np.sort(np.asarray(samples, dtype=float), axis=-1)
    y = np.asarray(y, dtype=float)
    m = x.shape[-1]
    first = np.abs(x - y[..., None]).mean(axis=-1)
    w = 2.0 * np.arange(1, m + 1) - m - 1
    pair = (x * w).sum(axis=-1) * 2.0 / (m * m)
    return first - 0.5 * pair
