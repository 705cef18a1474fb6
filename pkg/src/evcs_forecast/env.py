"""Decision process on top of a frozen LSTM.

The state is the LSTM cell vector at the decision hour, the action is a raw
real mapped to the forecast scale, and the reward is the negative shrunk
CRPS of ``N(y_hat, delta^2)`` against the realized next-hour value. All
quantities are in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import GaussianForecast, crps_gaussian, crps_gaussian_array
from .numerics import DomainError, softplus

ZETA = 0.75
DELTA_FLOOR = 1e-3
EPISODE_HOURS = 168


def delta_from_raw(a_raw):
    """Map a raw action to a positive forecast scale: ``softplus(a) + floor``."""
    out = softplus(np.asarray(a_raw, dtype=float)) + DELTA_FLOOR
    return float(out) if out.ndim == 0 else out


def raw_from_delta(delta):
    """Inverse of :func:`delta_from_raw` for ``delta > floor``."""
    d = np.asarray(delta, dtype=float) - DELTA_FLOOR
    return d + np.log(-np.expm1(-d))


def reward_array(y_hat, y, a_raw):
    """Broadcast reward ``-zeta * CRPS(N(y_hat, delta(a)^2), y)``."""
    return -ZETA * crps_gaussian_array(y_hat, delta_from_raw(a_raw), y)


@dataclass
class Series:
    """Aligned decision records: cell vectors, forecasts and realized targets."""

    states: np.ndarray  # (n, H)
    y_hat: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    t: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.y_hat = np.asarray(self.y_hat, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (len(self.states) == len(self.y_hat) == len(self.y)):
            raise ValueError("states, y_hat and y must have equal length")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.y_hat))
                and np.all(np.isfinite(self.y))):
            raise ValueError("records must be finite")

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_records(cls, records, targets) -> "Series":
        return cls(np.array([r.c for r in records]), np.array([r.y_hat for r in records]),
                   np.asarray(targets, dtype=float), np.array([r.t for r in records]))

    def reward(self, index, a_raw):
        """Reward for taking ``a_raw`` at record ``index``; no episode state involved."""
        return reward_array(self.y_hat[index], self.y[index], a_raw)

    def episode_starts(self, horizon: int = EPISODE_HOURS) -> list[int]:
        return list(range(0, len(self) - horizon + 1, horizon))


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


@dataclass
class Episode:
    series: Series
    start: int
    horizon: int
    cursor: int = 0

    @property
    def done(self) -> bool:
        return self.cursor >= self.horizon

    @property
    def index(self) -> int:
        return self.start + self.cursor

    def state(self) -> np.ndarray:
        return self.series.states[min(self.index, len(self.series) - 1)]

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.horizon)


def env_reset(series: Series, start: int, horizon: int = EPISODE_HOURS) -> tuple[Episode, np.ndarray]:
    if horizon < 1 or start < 0 or start + horizon > len(series):
        raise DomainError(f"episode [{start}, {start + horizon}) overruns {len(series)} records")
    ep = Episode(series, start, horizon)
    return ep, series.states[start]


def env_step(ep: Episode, a_raw: float) -> StepResult:
    if ep.done:
        raise RuntimeError("step called on a finished episode")
    k = ep.index
    s = ep.series
    f = GaussianForecast(float(s.y_hat[k]), delta_from_raw(a_raw))
    reward = -ZETA * crps_gaussian(f, float(s.y[k]))
    ep.cursor += 1
    return StepResult(ep.state(), reward, ep.done)


def env_digest(series: Series) -> str:
    import hashlib
    h = hashlib.sha256()
    for arr in (series.states, series.y_hat, series.y):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
