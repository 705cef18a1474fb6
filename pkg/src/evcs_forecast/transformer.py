"""Turn charging sessions into an hourly feature series and supervised windows.

Each session is split into the hours it touches. Per hour it contributes
delivered energy, occupied charger-time and the share of the requested
energy delivered (percent). Station-level features are the sums over
sessions, giving the row ``x_t = [E_t, T_t, D_t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .numerics import DomainError
from .sessions import ChargingSession

N_FEATURES = 3
DEFAULT_WINDOW = 12


class HourFeatures(NamedTuple):
    energy: float
    util: float
    demand_pct: float


class FeatureFrame(NamedTuple):
    t: int
    E: float
    T: float
    D: float


@dataclass
class FrameSeries:
    """Contiguous hourly frames: ``t`` (n,) int hours and ``values`` (n, 3)."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, N_FEATURES)
        if len(self.t) != len(self.values):
            raise ValueError("t and values must have the same length")

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[FeatureFrame]:
        for t, (e, u, d) in zip(self.t, self.values):
            yield FeatureFrame(int(t), float(e), float(u), float(d))

    def __getitem__(self, idx) -> "FrameSeries":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1 if idx != -1 else None)
        return FrameSeries(self.t[idx], self.values[idx])

    @property
    def E(self) -> np.ndarray:
        return self.values[:, 0]

    def is_contiguous(self) -> bool:
        return bool(np.all(np.diff(self.t) == 1))


def session_hours(s: ChargingSession) -> range:
    """Hour labels whose interval ``(t-1, t]`` overlaps the stay."""
    return range(math.floor(s.t_arr) + 1, math.ceil(s.t_de) + 1)


def session_features(s: ChargingSession, strict: bool = False) -> dict[int, HourFeatures]:
    """Split one session into per-hour features.

    Default mode conserves energy: the hour holding ``t_dc`` receives the
    residual ``e_dc - e_{t-1}`` and the departure hour receives its occupied
    fraction ``t_de - (t-1)``. ``strict=True`` applies the three-branch energy
    rule and two-branch utilization rule literally, so the done-charging hour
    gets zero energy and the departure hour gets zero utilization.
    """
    denom = s.e_user - s.e_arr
    if not denom > 0:
        raise DomainError(f"e_user ({s.e_user}) must exceed e_arr ({s.e_arr})")
    out = {}
    for t in session_hours(s):
        if strict:
            energy, util = _strict_hour(s, t)
        else:
            start = s.e_arr if t - 1 <= s.t_arr else s.energy_at(t - 1)
            end = s.energy_at(t) if t < s.t_de else s.e_dc
            energy = end - start
            util = min(t, s.t_de) - max(t - 1, s.t_arr)
        out[t] = HourFeatures(energy, util, energy / denom * 100.0)
    return out


def _strict_hour(s: ChargingSession, t: int) -> tuple[float, float]:
    if t >= s.t_de:
        return 0.0, 0.0
    if s.t_arr < t < s.t_arr + 1:
        return s.energy_at(t) - s.e_arr, t - s.t_arr
    if t < s.t_dc:
        return s.energy_at(t) - s.energy_at(t - 1), 1.0
    return 0.0, 1.0


def aggregate_frames(sessions, hours: range | tuple[int, int] | None = None,
                     strict: bool = False) -> FrameSeries:
    """Sum per-session features over chargers for every hour in ``hours``.

    ``hours`` is a ``range`` or an inclusive ``(first, last)`` pair; by default
    it spans every hour touched by any session. Idle hours give zero rows.
    """
    per_session = [session_features(s, strict) for s in sessions]
    if hours is None:
        touched = [t for feats in per_session for t in feats]
        if not touched:
            raise DomainError("no sessions and no hour range given")
        hours = range(min(touched), max(touched) + 1)
    elif isinstance(hours, tuple):
        hours = range(hours[0], hours[1] + 1)
    first = hours.start
    values = np.zeros((len(hours), N_FEATURES))
    for feats in per_session:
        for t, f in feats.items():
            if t in hours:
                values[t - first] += f
    return FrameSeries(np.arange(hours.start, hours.stop), values)


# --------------------------------------------------------------------------
# Windows and normalization
# --------------------------------------------------------------------------

@dataclass
class WindowedSample:
    X: np.ndarray  # (N_h, N_f), hours i-N_h .. i-1
    target: float  # E at hour i
    t_target: int


def make_windows(frames: FrameSeries, n_hist: int = DEFAULT_WINDOW) -> list[WindowedSample]:
    if len(frames) <= n_hist:
        raise DomainError(f"need more than {n_hist} frames, got {len(frames)}")
    v = frames.values
    return [WindowedSample(v[i - n_hist:i], float(v[i, 0]), int(frames.t[i]))
            for i in range(n_hist, len(frames))]


class NormalizerError(ValueError):
    pass


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values.values if isinstance(values, FrameSeries) else values, dtype=float)
        mean = v.mean(axis=0)
        std = v.std(axis=0)
        bad = [i for i in range(v.shape[1]) if not std[i] > 1e-12]
        if bad:
            raise NormalizerError(f"feature(s) {bad} are constant on the training split")
        return cls(mean, std)

    def forward(self, v):
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def inverse(self, v):
        return np.asarray(v, dtype=float) * self.std + self.mean

    # the target is E, so it shares feature 0's statistics
    def target_forward(self, y):
        return (y - self.mean[0]) / self.std[0]

    def target_inverse(self, y):
        return y * self.std[0] + self.mean[0]

    def scale_inverse(self, delta):
        return delta * self.std[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def normalize(data, n: Normalizer, direction: str = "forward"):
    """Apply or undo the z-score map on frames, samples, or raw arrays."""
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    fwd = direction == "forward"
    if isinstance(data, FrameSeries):
        return FrameSeries(data.t, n.forward(data.values) if fwd else n.inverse(data.values))
    if isinstance(data, WindowedSample):
        return WindowedSample(n.forward(data.X) if fwd else n.inverse(data.X),
                              n.target_forward(data.target) if fwd else n.target_inverse(data.target),
                              data.t_target)
    if isinstance(data, list):
        return [normalize(d, n, direction) for d in data]
    return n.forward(data) if fwd else n.inverse(data)


def frames_to_csv(frames: FrameSeries) -> str:
    lines = ["t,E,T,D"]
    for f in frames:
        lines.append(f"{f.t},{f.E!r},{f.T!r},{f.D!r}")
    return "\n".join(lines) + "\n"


def frames_from_csv(text: str) -> FrameSeries:
    rows = [ln.split(",") for ln in text.strip().splitlines()]
    if not rows or [h.strip() for h in rows[0]] != ["t", "E", "T", "D"]:
        raise ValueError("frames CSV must start with header t,E,T,D")
    body = rows[1:]
    return FrameSeries([int(r[0]) for r in body], [[float(x) for x in r[1:4]] for r in body])
