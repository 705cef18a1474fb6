"""Adaptive exploration for PPO.

Each training iteration picks one sampling variance for the rollout. A
particle swarm searches it by trading off the mean and the spread of the
rewards that actions drawn at that variance would earn. Early on the
weights favour spread (explore). Later they favour mean reward (exploit).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .env import EPISODE_HOURS, Series, delta_from_raw, env_reset, reward_array
from .numerics import DomainError, NumericError, RngStream, as_generator
from .ppo import (PpoConfig, PpoOptim, actor_heads, collect_rollout, init_mlp, ppo_update,
                  returns_and_advantages)
from .pso import PsoConfig, pso_minimize

VAR_FLOOR = 1e-4
N_ACTIONS = 32
STATE_BATCH = 16


@dataclass(frozen=True)
class BPair:
    b1: float  # weight on mean reward
    b2: float  # weight on reward spread


def b_schedule(k: int, n_iter: int) -> BPair:
    """Linear ramp of ``b1`` with ``b2`` on the quarter circle ``(b1-1)^2 + (b2-1)^2 = 1``."""
    if not 0 <= k <= n_iter:
        raise DomainError(f"iteration {k} outside [0, {n_iter}]")
    b1 = k / n_iter if n_iter > 0 else 0.0
    b2 = 1.0 - math.sqrt(max(0.0, 1.0 - (b1 - 1.0) ** 2))
    return BPair(b1, b2)


@dataclass(frozen=True)
class MomentEstimate:
    r_mean: float
    r_var: float
    n_samples: int


def exploration_fitness(b: BPair, m: MomentEstimate) -> float:
    return b.b1 * m.r_mean + b.b2 * m.r_var


def _moments(rewards: np.ndarray):
    # population variance over the last axis
    mean = rewards.mean(axis=-1)
    return mean, ((rewards - mean[..., None]) ** 2).mean(axis=-1)


def reward_moments(series: Series, index: int, a_mean: float, var: float,
                   n_actions: int = N_ACTIONS, rng=0, z: np.ndarray | None = None) -> MomentEstimate:
    """Mean and variance of rewards for ``n_actions`` draws from ``N(a_mean, var)`` at one record.

    Rewards are read from ``series`` directly, so no episode moves.
    ``z`` supplies pre-drawn standard normals.
    """
    if n_actions < 2:
        raise DomainError("need at least two sampled actions")
    if not var > 0:
        raise DomainError("variance must be positive")
    if z is None:
        z = as_generator(rng).standard_normal(n_actions)
    a = a_mean + math.sqrt(var) * np.asarray(z, dtype=float)
    r = series.reward(index, a)
    mean, spread = _moments(r)
    return MomentEstimate(float(mean), float(spread), len(a))


def var_upper_bound(series: Series) -> float:
    return max((2.0 * float(np.std(series.y))) ** 2, 10 * VAR_FLOOR)


def optimize_exploration(series: Series, indices, actor, k: int, n_iter: int,
                         pso_cfg: PsoConfig = PsoConfig(), rng=0, n_actions: int = N_ACTIONS,
                         var_max: float | None = None, b: BPair | None = None) -> float:
    """Search the sampling variance that maximizes batch-mean fitness.

    The standard normals are drawn once per call, so the objective is a
    smooth deterministic function of the variance and repeated positions
    (particles pinned at a bound) are served from a cache.
    """
    indices = np.asarray(indices, dtype=int)
    if len(indices) == 0:
        raise ValueError("empty state batch")
    gen = as_generator(rng)
    b = b if b is not None else b_schedule(k, n_iter)
    var_max = var_max if var_max is not None else var_upper_bound(series)
    a_mean = actor_heads(actor, series.states[indices])[0]
    z = gen.standard_normal((len(indices), n_actions))
    y_hat = series.y_hat[indices][:, None]
    y = series.y[indices][:, None]
    cache: dict[float, float] = {}

    def neg_fitness(X):
        v = X[:, 0]
        todo = np.array(sorted({float(x) for x in v if float(x) not in cache}))
        if len(todo):
            a = a_mean[None, :, None] + np.sqrt(todo)[:, None, None] * z[None]
            r = reward_array(y_hat[None], y[None], a)
            mean, spread = _moments(r)
            fit = (b.b1 * mean + b.b2 * spread).mean(axis=1)
            cache.update(zip(todo.tolist(), (-fit).tolist()))
        return np.array([cache[float(x)] for x in v])

    res = pso_minimize(neg_fitness, [(VAR_FLOOR, var_max)], pso_cfg, gen, vectorized=True)
    return float(res.x[0])


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclass
class AeppoConfig:
    iterations: int = 2000
    mode: str = "aeppo"  # or "ppo" for the plain comparator
    seed: int = 0
    episode_hours: int = EPISODE_HOURS
    episodes_per_iter: int = 1
    state_batch: int = STATE_BATCH
    n_actions: int = N_ACTIONS
    ppo: PpoConfig = field(default_factory=PpoConfig)
    pso: PsoConfig = field(default_factory=PsoConfig)

    def validate(self):
        if self.mode not in ("aeppo", "ppo"):
            raise ValueError(f"mode must be 'aeppo' or 'ppo', got {self.mode!r}")
        if self.iterations < 0 or self.episodes_per_iter < 1 or self.state_batch < 1:
            raise ValueError("iterations >= 0, episodes_per_iter >= 1 and state_batch >= 1 required")
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")


LOG_FIELDS = ("k", "b1", "b2", "var", "mean_reward", "actor_loss", "critic_loss")


@dataclass
class AeppoResult:
    actor: dict
    critic: dict
    history: list[dict]

    def rewards(self) -> np.ndarray:
        return np.array([h["mean_reward"] for h in self.history])

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.history)
        return buf.getvalue()


def init_agent(n_state: int, seed: int = 0):
    return (init_mlp(n_state, 2, RngStream(seed, 0xAC7).generator()),
            init_mlp(n_state, 1, RngStream(seed, 0xC217).generator()))


def train_aeppo(series: Series, cfg: AeppoConfig = AeppoConfig(), actor=None, critic=None,
                progress=None) -> AeppoResult:
    """Train the scale policy on aligned ``(c, y_hat, y)`` records.

    Each iteration draws episodes, picks the exploration variance (AePPO
    mode only), rolls out, and runs one PPO update. ``history`` logs the
    total episode reward per iteration.
    """
    cfg.validate()
    starts = series.episode_starts(cfg.episode_hours)
    if not starts:
        raise DomainError(f"series of {len(series)} records is shorter than one episode "
                          f"({cfg.episode_hours})")
    if actor is None or critic is None:
        a0, c0 = init_agent(series.states.shape[1], cfg.seed)
        actor = a0 if actor is None else actor
        critic = c0 if critic is None else critic
    var_max = var_upper_bound(series)
    gen = RngStream(cfg.seed, 0xAE).generator()
    optim = PpoOptim()
    n_ep = min(cfg.episodes_per_iter, len(starts))
    history = []
    for k in range(cfg.iterations):
        chosen = gen.choice(len(starts), size=n_ep, replace=False)
        episodes = [env_reset(series, starts[i], cfg.episode_hours)[0] for i in sorted(chosen)]
        if cfg.mode == "aeppo":
            b = b_schedule(k, cfg.iterations)
            pool = np.concatenate([ep.indices() for ep in episodes])
            batch = gen.choice(pool, size=min(cfg.state_batch, len(pool)), replace=False)
            var = optimize_exploration(series, batch, actor, k, cfg.iterations, cfg.pso, gen,
                                       cfg.n_actions, var_max, b)
            traj = collect_rollout(episodes, actor, var, gen)
        else:
            b = BPair(float("nan"), float("nan"))
            var = float("nan")
            traj = collect_rollout(episodes, actor, "actor", gen)
        traj = returns_and_advantages(traj, critic, cfg.ppo.gamma, cfg.ppo.literal_returns,
                                      cfg.ppo.advantage)
        try:
            actor, critic, stats = ppo_update(actor, critic, traj, cfg.ppo, optim)
        except NumericError as e:
            raise NumericError(f"iteration {k}: {e}") from e
        row = {"k": k, "b1": b.b1, "b2": b.b2, "var": var,
               "mean_reward": float(traj.episode_rewards().mean()),
               "actor_loss": stats["actor_loss"], "critic_loss": stats["critic_loss"]}
        history.append(row)
        if progress is not None:
            progress(row)
    return AeppoResult(actor, critic, history)


def policy_delta(actor, states) -> np.ndarray:
    """Inference scale (normalized units): the deterministic map of the actor mean."""
    return np.atleast_1d(delta_from_raw(actor_heads(actor, np.atleast_2d(states))[0]))
