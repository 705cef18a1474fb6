"""End-to-end training, forecasting and evaluation.

Training runs in stages: hourly frames, a normalizer fit on the training
split, the LSTM point forecaster, cell-state extraction and the scale
policy. Evaluation rolls one-step forecasts over the held-out tail.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .aeppo import AeppoConfig, AeppoResult, policy_delta, train_aeppo
from .env import DELTA_FLOOR, EPISODE_HOURS, ZETA, Series
from .lstm import (LstmParams, TrainConfig, extract_cell_states, params_from_dict, params_to_dict,
                   predict_window, train_lstm)
from .metrics import (DEFAULT_PIS, PINBALL_GRID, GaussianForecast, crps_ensemble, crps_gaussian_array,
                      pi_bounds_array, pi_quantiles, pinball_array, winkler_from_band)
from .numerics import DomainError, NumericError, RngStream
from .ppo import PpoConfig
from .pso import PsoConfig
from .sessions import ChargingSession
from .transformer import FrameSeries, Normalizer, aggregate_frames, make_windows

BUNDLE_FORMAT = "evcs-bundle"
BUNDLE_VERSION = 1
REPORT_HEADER = ("season", "PI", "winkler", "pinball")
SUMMARY_HEADER = ("crps", "coverage30", "coverage60", "coverage90", "pinball_grid", "n", "aggregation")
BANDS_HEADER = ("t", "y", "mu", "lower30", "upper30", "lower60", "upper60", "lower90", "upper90")


class ValidationError(ValueError):
    pass


class StageError(RuntimeError):
    """A training stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    n_hist: int = 12
    hidden: int = 32
    lstm_lr: float = 1e-3
    lstm_epochs: int = 200
    lstm_patience: int = 20
    train_frac: float = 0.8
    valid_frac: float = 0.1
    iterations: int = 10000
    mode: str = "aeppo"
    episode_hours: int = EPISODE_HOURS
    n_actions: int = 32
    state_batch: int = 16
    clip: float = 0.1
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    gamma: float = 0.99
    update_epochs: int = 4
    advantage: str = "return"
    critic_target: str = "return"
    literal_returns: bool = False
    pso_population: int = 20
    pso_iterations: int = 100
    pso_cognitive: float = 2.0
    pso_social: float = 2.0
    pso_inertia: float = 0.7
    pis: tuple = DEFAULT_PIS
    seed: int = 0
    strict_transform: bool = False
    strict_lstm: bool = False

    def __post_init__(self):
        self.pis = tuple(int(p) for p in self.pis)

    def validate(self):
        if self.mode not in ("aeppo", "ppo"):
            raise ValidationError(f"mode must be 'aeppo' or 'ppo', got {self.mode!r}")
        if not (0 < self.train_frac < 1 and 0 < self.valid_frac < 1 and self.train_frac + self.valid_frac < 1):
            raise ValidationError("train_frac and valid_frac must be in (0, 1) and sum below 1")
        if self.n_hist < 1 or self.hidden < 1:
            raise ValidationError("n_hist and hidden must be positive")
        if any(not 0 < p < 100 for p in self.pis):
            raise ValidationError(f"PIs must lie in (0, 100), got {self.pis}")
        if self.lstm_epochs < 0 or self.iterations < 0:
            raise ValidationError("epoch and iteration counts must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pis"] = list(self.pis)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return _sha(self.to_dict())

    def lstm_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lstm_lr, epochs=self.lstm_epochs, seed=self.seed, hidden=self.hidden,
                           train_frac=self.train_frac, valid_frac=self.valid_frac,
                           test_frac=1.0 - self.train_frac - self.valid_frac,
                           patience=self.lstm_patience, strict=self.strict_lstm)

    def aeppo_config(self) -> AeppoConfig:
        return AeppoConfig(
            iterations=self.iterations, mode=self.mode, seed=self.seed, episode_hours=self.episode_hours,
            state_batch=self.state_batch, n_actions=self.n_actions,
            ppo=PpoConfig(clip_eps=self.clip, lr_actor=self.lr_actor, lr_critic=self.lr_critic,
                          gamma=self.gamma, epochs=self.update_epochs, critic_target=self.critic_target,
                          advantage=self.advantage, literal_returns=self.literal_returns),
            pso=PsoConfig(self.pso_population, self.pso_iterations, self.pso_cognitive,
                          self.pso_social, self.pso_inertia))


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# Splits and bundle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    """Frame index boundaries: train ``[0, train_end)``, valid ``[train_end, valid_end)``, test after."""

    first_hour: int
    n_frames: int
    train_end: int
    valid_end: int

    @classmethod
    def chronological(cls, frames: FrameSeries, train_frac: float, valid_frac: float) -> "Split":
        n = len(frames)
        train_end = int(math.floor(n * train_frac))
        valid_end = train_end + int(math.floor(n * valid_frac))
        return cls(int(frames.t[0]), n, train_end, valid_end)

    @property
    def last_train_hour(self) -> int:
        return self.first_hour + self.train_end - 1

    @property
    def test_start_hour(self) -> int:
        return self.first_hour + self.valid_end


@dataclass
class ModelBundle:
    lstm: LstmParams
    normalizer: Normalizer
    actor: dict
    critic: dict
    config: PipelineConfig
    split: Split
    tag: str = "lstm-aeppo"

    @property
    def n_hist(self) -> int:
        return self.config.n_hist

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "tag": self.tag,
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "split": asdict(self.split),
            "normalizer": self.normalizer.to_dict(),
            "lstm": params_to_dict(self.lstm),
            "actor": {k: v.tolist() for k, v in sorted(self.actor.items())},
            "critic": {k: v.tolist() for k, v in sorted(self.critic.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("format") != BUNDLE_FORMAT or d.get("version") != BUNDLE_VERSION:
            raise ValidationError(f"not a {BUNDLE_FORMAT} v{BUNDLE_VERSION} file")
        cfg = PipelineConfig.from_dict(d["config"])
        if cfg.digest() != d["config_digest"]:
            raise ValidationError("config digest does not match the stored config")
        return cls(params_from_dict(d["lstm"]), Normalizer.from_dict(d["normalizer"]),
                   {k: np.asarray(v, dtype=float) for k, v in d["actor"].items()},
                   {k: np.asarray(v, dtype=float) for k, v in d["critic"].items()},
                   cfg, Split(**d["split"]), d["tag"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class TrainingRun:
    bundle: ModelBundle
    lstm_history: list[dict]
    aeppo: AeppoResult
    train_series: Series


def frames_from_source(source, strict: bool = False) -> FrameSeries:
    if isinstance(source, FrameSeries):
        return source
    sessions = list(source)
    if sessions and not isinstance(sessions[0], ChargingSession):
        raise ValidationError("expected charging sessions or a FrameSeries")
    return aggregate_frames(sessions, strict=strict)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValidationError, StageError):
        raise
    except (ValueError, ArithmeticError) as e:
        raise StageError(name, e) from e


def train_forecaster(frames: FrameSeries, cfg: PipelineConfig):
    """Split, normalize and fit the LSTM. Returns ``(params, normalizer, split, history, norm_values)``."""
    if not frames.is_contiguous():
        raise ValidationError("frames must be hourly contiguous")
    split = Split.chronological(frames, cfg.train_frac, cfg.valid_frac)
    if split.train_end < cfg.n_hist + cfg.episode_hours + 1:
        raise ValidationError(f"{len(frames)} frames are too few: the training split needs more than "
                              f"n_hist + episode_hours = {cfg.n_hist + cfg.episode_hours} hours")
    if split.valid_end - split.train_end < 2 or split.n_frames - split.valid_end < 1:
        raise ValidationError("validation and test splits are empty")
    norm = _stage("normalize", Normalizer.fit, frames.values[:split.train_end])
    values = norm.forward(frames.values[:split.valid_end])
    samples = make_windows(FrameSeries(frames.t[:split.valid_end], values), cfg.n_hist)
    # sample j targets frame n_hist + j
    n_train = split.train_end - cfg.n_hist
    result = _stage("train-lstm", train_lstm, samples[:n_train], cfg.lstm_config(), valid=samples[n_train:])
    return result.params, norm, split, result.history, values


def training_series(params: LstmParams, values: np.ndarray, t: np.ndarray, train_end: int,
                    n_hist: int) -> Series:
    """Decision records whose targets fall inside the training split."""
    records = extract_cell_states(params, values[:train_end], n_hist, t[:train_end])
    targets = values[n_hist:train_end, 0]
    return Series.from_records(records, targets)


def run_training(source, cfg: PipelineConfig = PipelineConfig(), progress=None) -> TrainingRun:
    cfg.validate()
    frames = frames_from_source(source, cfg.strict_transform)
    params, norm, split, history, values = train_forecaster(frames, cfg)
    series = training_series(params, values, frames.t, split.train_end, cfg.n_hist)
    agent = _stage("train-aeppo", train_aeppo, series, cfg.aeppo_config(), progress=progress)
    tag = "lstm-aeppo" if cfg.mode == "aeppo" else "lstm-ppo"
    bundle = ModelBundle(params, norm, agent.actor, agent.critic, cfg, split, tag)
    return TrainingRun(bundle, history, agent, series)


# --------------------------------------------------------------------------
# Forecasting and evaluation
# --------------------------------------------------------------------------

def forecast_normalized(bundle: ModelBundle, window: np.ndarray) -> tuple[float, float]:
    """``(y_hat, delta)`` in normalized units for one normalized window."""
    y_hat, state, _ = predict_window(bundle.lstm, window)
    delta = float(policy_delta(bundle.actor, state.c[None, :])[0])
    return y_hat, delta


def forecast_next(bundle: ModelBundle, frames: FrameSeries) -> GaussianForecast:
    """Forecast the hour after the last frame from the trailing ``n_hist`` frames."""
    if len(frames) < bundle.n_hist:
        raise DomainError(f"need at least {bundle.n_hist} frames, got {len(frames)}")
    recent = frames[len(frames) - bundle.n_hist:]
    if not recent.is_contiguous():
        raise DomainError("frames have a gap in the trailing window")
    y_hat, delta = forecast_normalized(bundle, bundle.normalizer.forward(recent.values))
    n = bundle.normalizer
    return GaussianForecast(float(n.target_inverse(y_hat)), float(n.scale_inverse(delta)))


def rolling_forecasts(bundle: ModelBundle, frames: FrameSeries, start_hour: int | None = None):
    """One-step forecasts for every frame at or after ``start_hour`` (default: the test split).

    Returns ``(t, y, mu, delta)`` arrays in original units.
    """
    start_hour = bundle.split.test_start_hour if start_hour is None else start_hour
    if start_hour <= bundle.split.last_train_hour:
        raise ValidationError(f"evaluation from hour {start_hour} overlaps the training range "
                              f"(last training hour {bundle.split.last_train_hour})")
    if not frames.is_contiguous():
        raise ValidationError("frames must be hourly contiguous")
    first = int(np.searchsorted(frames.t, start_hour))
    if first < bundle.n_hist:
        raise ValidationError(f"need {bundle.n_hist} frames of history before hour {start_hour}")
    if first >= len(frames):
        raise ValidationError(f"no frames at or after hour {start_hour}")
    norm = bundle.normalizer
    values = norm.forward(frames.values)
    idx = np.arange(first, len(frames))
    y_hat = np.empty(len(idx))
    cells = np.empty((len(idx), bundle.lstm.hidden))
    for k, i in enumerate(idx):
        y_hat[k], state, _ = predict_window(bundle.lstm, values[i - bundle.n_hist:i])
        cells[k] = state.c
    delta = policy_delta(bundle.actor, cells)
    return (frames.t[idx], frames.values[idx, 0], norm.target_inverse(y_hat), norm.scale_inverse(delta))


METEO_SEASONS = {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
                 6: "summer", 7: "summer", 8: "summer", 9: "autumn", 10: "autumn", 11: "autumn"}


def season_labels(t: np.ndarray, origin: datetime | None = None) -> list[str]:
    """Meteorological season of each hour ``(t-1, t]``; ``"all"`` without a calendar origin."""
    if origin is None:
        return ["all"] * len(t)
    return [METEO_SEASONS[(origin + timedelta(hours=int(h) - 1)).month] for h in t]


@dataclass
class MetricsReport:
    rows: list[dict]  # season, PI, winkler, pinball
    crps: float
    coverage: dict[int, float]
    pinball_grid: float
    n: int
    t: np.ndarray = field(repr=False, default=None)
    y: np.ndarray = field(repr=False, default=None)
    mu: np.ndarray = field(repr=False, default=None)
    delta: np.ndarray = field(repr=False, default=None)

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r["season"], r["PI"], repr(r["winkler"]), repr(r["pinball"])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerow([repr(self.crps)] + [repr(self.coverage.get(p, float("nan"))) for p in (30, 60, 90)]
                   + [repr(self.pinball_grid), self.n, "hourly"])
        return buf.getvalue()


def score_forecasts(t, y, mu, delta, pis=DEFAULT_PIS, seasons=None) -> MetricsReport:
    """Score aligned forecast rows; ``seasons`` groups rows (default one group ``all``)."""
    t, y, mu, delta = (np.asarray(a) for a in (t, y, mu, delta))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(delta)) and np.all(delta > 0)):
        raise NumericError("forecasts must be finite with positive scale")
    seasons = np.asarray(seasons if seasons is not None else ["all"] * len(y))
    rows, coverage = [], {}
    for p in pis:
        lower, upper = pi_bounds_array(mu, delta, p)
        coverage[p] = float(np.mean((y >= lower) & (y <= upper)))
        wink = winkler_from_band(lower, upper, y)
        pin = pinball_array(mu, delta, y, pi_quantiles(p))
        for s in dict.fromkeys(seasons.tolist()):
            m = seasons == s
            rows.append({"season": s, "PI": p, "winkler": float(np.mean(wink[m])),
                         "pinball": float(np.mean(pin[m]))})
    crps = float(np.mean(crps_gaussian_array(mu, delta, y)))
    grid = float(np.mean(pinball_array(mu, delta, y, PINBALL_GRID)))
    return MetricsReport(rows, crps, coverage, grid, len(y), t, y, mu, delta)


def evaluate(bundle: ModelBundle, frames: FrameSeries, pis=None, start_hour: int | None = None,
             origin: datetime | None = None) -> MetricsReport:
    pis = tuple(pis) if pis is not None else bundle.config.pis
    t, y, mu, delta = rolling_forecasts(bundle, frames, start_hour)
    return score_forecasts(t, y, mu, delta, pis, season_labels(t, origin))


def bands_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BANDS_HEADER)
    bounds = [pi_bounds_array(report.mu, report.delta, p) for p in (30, 60, 90)]
    for k in range(report.n):
        row = [int(report.t[k]), repr(float(report.y[k])), repr(float(report.mu[k]))]
        for lo, hi in bounds:
            row += [repr(float(lo[k])), repr(float(hi[k]))]
        w.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Synthetic calibration data
# --------------------------------------------------------------------------

@dataclass
class CalibrationSeries:
    frames: FrameSeries
    mean: np.ndarray  # true conditional mean of E per hour
    sigma: np.ndarray  # true noise scale of E per hour


def calibration_series(hours: int = 2000, seed: int = 0, sigma_low: float = 0.05,
                       sigma_high: float = 0.3, level: float = 3.0) -> CalibrationSeries:
    """Hourly load ``level + sin(2 pi t / 24) + sigma(t) eps`` with a two-regime noise scale.

    The noisy regime covers hours 8..19 of each day. Occupancy rises in the
    noisy regime and the delivered-share column tracks the load, so both
    companion features vary.
    """
    gen = RngStream(seed, 0xCA1B).generator()
    t = np.arange(1, hours + 1)
    hod = (t - 1) % 24
    busy = (hod >= 8) & (hod < 20)
    sigma = np.where(busy, sigma_high, sigma_low)
    mean = level + np.sin(2.0 * np.pi * t / 24.0)
    E = mean + sigma * gen.standard_normal(hours)
    T = 0.4 * E + 0.8 * busy + 0.05 * gen.standard_normal(hours)
    D = 100.0 * E / (E + 5.0)
    return CalibrationSeries(FrameSeries(t, np.column_stack([E, T, D])), mean, sigma)


def oracle_crps(mean, sigma, y, n_samples: int = 2000, seed: int = 0) -> np.ndarray:
    """Monte Carlo CRPS of the true generative distribution ``N(mean, sigma^2)`` per row."""
    gen = RngStream(seed, 0x0AC1E).generator()
    mean = np.asarray(mean, dtype=float)
    draws = mean[:, None] + np.asarray(sigma, dtype=float)[:, None] * gen.standard_normal((len(mean), n_samples))
    return crps_ensemble(draws, y)
