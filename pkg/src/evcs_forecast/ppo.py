"""Actor-critic PPO with a Gaussian policy over the raw scale action.

Networks are small tanh MLPs ``[H -> 64 -> 64 -> out]`` with hand-written
backpropagation. The actor emits ``(a_mean, raw_scale)``; its policy scale
is ``softplus(raw_scale) + 1e-6``. When an external exploration variance is
supplied, actions are drawn from ``N(a_mean, var)`` instead and only the
mean head receives policy gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import Episode, env_step
from .numerics import (AdamState, DomainError, NumericError, adam_init, adam_step, as_generator,
                       sigmoid, softplus)

HIDDEN_UNITS = (64, 64)
SCALE_FLOOR = 1e-6
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

def init_mlp(n_in: int, n_out: int, rng, hidden=HIDDEN_UNITS, out_scale: float = 0.01) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) layers; the output layer is shrunk by ``out_scale``."""
    gen = as_generator(rng)
    sizes = (n_in,) + tuple(hidden) + (n_out,)
    p = {}
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        bound = 1.0 / math.sqrt(sizes[k])
        scale = out_scale if k == n_layers - 1 else 1.0
        p[f"W{k}"] = gen.uniform(-bound, bound, size=(sizes[k + 1], sizes[k])) * scale
        p[f"b{k}"] = np.zeros(sizes[k + 1])
    return p


def _n_layers(p) -> int:
    return len(p) // 2


def mlp_forward_batch(p: dict[str, np.ndarray], S: np.ndarray):
    """Forward a batch ``S`` of shape (N, n_in); returns raw outputs and a cache."""
    acts = [np.asarray(S, dtype=float)]
    L = _n_layers(p)
    for k in range(L):
        z = acts[-1] @ p[f"W{k}"].T + p[f"b{k}"]
        acts.append(np.tanh(z) if k < L - 1 else z)
    out = acts[-1]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite network output")
    return out, acts


def mlp_backward(p: dict[str, np.ndarray], acts, d_out: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    delta = d_out
    L = _n_layers(p)
    for k in range(L - 1, -1, -1):
        grads[f"W{k}"] = delta.T @ acts[k]
        grads[f"b{k}"] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ p[f"W{k}"]) * (1.0 - acts[k] ** 2)
    return grads


def mlp_forward(p: dict[str, np.ndarray], s: np.ndarray, head: str | None = None) -> np.ndarray:
    """Single-state forward pass.

    ``head="actor"`` maps the second output through softplus to the policy
    scale, returning ``(a_mean, a_var)``; otherwise raw outputs are returned.
    """
    out, _ = mlp_forward_batch(p, np.asarray(s, dtype=float)[None, :])
    out = out[0]
    if head == "actor":
        return np.array([out[0], softplus(out[1]) + SCALE_FLOOR])
    return out


def actor_heads(actor, S):
    out, acts = mlp_forward_batch(actor, S)
    return out[:, 0], softplus(out[:, 1]) + SCALE_FLOOR, out, acts


# --------------------------------------------------------------------------
# Gaussian policy
# --------------------------------------------------------------------------

def gaussian_log_prob(a, a_mean, a_var):
    a_var = np.asarray(a_var, dtype=float)
    if np.any(a_var <= 0):
        raise DomainError("policy scale must be positive")
    u = (a - a_mean) / a_var
    return -0.5 * u * u - np.log(a_var) - LOG_SQRT_2PI


def gaussian_log_prob_grad(a, a_mean, a_var):
    """Log-density of ``N(a_mean, a_var^2)`` at ``a`` and its mean derivative."""
    logp = gaussian_log_prob(a, a_mean, a_var)
    return logp, (a - a_mean) / (a_var * a_var)


def gaussian_log_prob_scale_grad(a, a_mean, a_var):
    return ((a - a_mean) ** 2 - a_var * a_var) / (a_var ** 3)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------

@dataclass
class Experience:
    s: np.ndarray
    a_raw: float
    r: float
    s_next: np.ndarray
    logp_old: float
    done: bool


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    logp_old: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    exploration_std: float | None = None  # fixed sampling scale; None = actor's own scale
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    def experiences(self) -> list[Experience]:
        return [Experience(self.states[k], float(self.actions[k]), float(self.rewards[k]),
                           self.next_states[k], float(self.logp_old[k]), bool(self.dones[k]))
                for k in range(len(self))]

    def episode_rewards(self) -> np.ndarray:
        ids = np.unique(self.episode_ids)
        return np.array([self.rewards[self.episode_ids == e].sum() for e in ids])


def collect_rollout(episodes: list[Episode], actor, exploration_var="actor", rng=0) -> Trajectory:
    """Play each episode to the end, sampling ``a ~ N(a_mean, scale^2)``.

    ``exploration_var="actor"`` samples with the actor's own scale (vanilla
    PPO); a positive float is used as the sampling variance instead.
    """
    if not episodes:
        raise ValueError("need at least one episode")
    gen = as_generator(rng)
    fixed = exploration_var != "actor"
    if fixed and not exploration_var > 0:
        raise DomainError("exploration variance must be positive")
    std = math.sqrt(exploration_var) if fixed else None
    cols = {k: [] for k in ("s", "a", "r", "s2", "logp", "done", "ep")}
    for e_id, ep in enumerate(episodes):
        S = ep.series.states[ep.indices()[ep.cursor:]]
        mean, scale, _, _ = actor_heads(actor, S)
        if fixed:
            scale = np.full_like(mean, std)
        z = gen.standard_normal(len(mean))
        a = mean + scale * z
        logp = gaussian_log_prob(a, mean, scale)
        for k in range(len(a)):
            s = ep.state()
            res = env_step(ep, float(a[k]))
            cols["s"].append(s)
            cols["a"].append(a[k])
            cols["r"].append(res.reward)
            cols["s2"].append(res.next_state)
            cols["logp"].append(logp[k])
            cols["done"].append(res.done)
            cols["ep"].append(e_id)
    return Trajectory(np.array(cols["s"]), np.array(cols["a"]), np.array(cols["r"]),
                      np.array(cols["s2"]), np.array(cols["logp"]), np.array(cols["done"]),
                      np.array(cols["ep"]), std)


def discounted_returns(rewards, episode_ids, gamma: float) -> np.ndarray:
    """Reward-to-go ``sum_{i >= k} gamma^(i-k) r_i`` inside each episode."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        if k == len(rewards) - 1 or episode_ids[k + 1] != episode_ids[k]:
            acc = 0.0
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def literal_backward_returns(rewards, episode_ids, gamma: float) -> np.ndarray:
    """``r_k + sum_{i=1..k} gamma^(T-i) r_{k-i}`` within each episode (past rewards)."""
    out = np.zeros(len(rewards))
    for e in np.unique(episode_ids):
        idx = np.flatnonzero(episode_ids == e)
        r = np.asarray(rewards)[idx]
        T = len(r)
        for k in range(T):
            past = sum(gamma ** (T - i) * r[k - i] for i in range(1, k + 1))
            out[idx[k]] = r[k] + past
    return out


def returns_and_advantages(traj: Trajectory, critic, gamma: float = 0.99,
                           literal: bool = False, advantage: str = "return") -> Trajectory:
    """Fill returns and standardized advantages.

    ``advantage="return"`` uses ``U_k - V(s_k)``; ``"td"`` uses the one-step
    estimate ``r_k + gamma V(s_{k+1}) - V(s_k)`` (zero bootstrap at episode end).
    """
    rewards = traj.rewards
    if literal:
        returns = literal_backward_returns(rewards, traj.episode_ids, gamma)
    else:
        returns = discounted_returns(rewards, traj.episode_ids, gamma)
    values = mlp_forward_batch(critic, traj.states)[0][:, 0]
    if advantage == "td":
        v_next = mlp_forward_batch(critic, traj.next_states)[0][:, 0]
        adv = rewards + gamma * v_next * (~traj.dones) - values
    elif advantage == "return":
        adv = returns - values
    else:
        raise ValueError(f"advantage must be 'return' or 'td', got {advantage!r}")
    adv = adv - adv.mean()
    sd = adv.std()
    if sd > 1e-12:
        adv = adv / sd
    traj.returns = returns
    traj.advantages = adv
    return traj


# --------------------------------------------------------------------------
# Losses and update
# --------------------------------------------------------------------------

def clipped_objective(ratio, adv, clip_eps):
    """Per-step ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _policy_terms(actor, traj: Trajectory):
    mean, scale, out, acts = actor_heads(actor, traj.states)
    if traj.exploration_std is not None:
        scale = np.full_like(mean, traj.exploration_std)
    logp = gaussian_log_prob(traj.actions, mean, scale)
    return mean, scale, logp, out, acts


def surrogate_loss(actor, traj: Trajectory, clip_eps: float = 0.1) -> float:
    """Negative mean clipped objective (the quantity the actor minimizes)."""
    _, _, logp, _, _ = _policy_terms(actor, traj)
    ratio = np.exp(logp - traj.logp_old)
    return float(-np.mean(clipped_objective(ratio, traj.advantages, clip_eps)))


def actor_gradient(actor, traj: Trajectory, clip_eps: float = 0.1):
    """Analytic gradient of :func:`surrogate_loss` plus diagnostics."""
    mean, scale, logp, out, acts = _policy_terms(actor, traj)
    adv = traj.advantages
    ratio = np.exp(logp - traj.logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    active = unclipped <= clipped  # gradient flows only where the unclipped term is the min
    n = len(adv)
    d_logp = np.where(active, -unclipped / n, 0.0)
    d_out = np.zeros_like(out)
    d_out[:, 0] = d_logp * (traj.actions - mean) / (scale * scale)
    if traj.exploration_std is None:
        d_scale = d_logp * gaussian_log_prob_scale_grad(traj.actions, mean, scale)
        d_out[:, 1] = d_scale * sigmoid(out[:, 1])
    grads = mlp_backward(actor, acts, d_out)
    stats = {
        "actor_loss": float(-np.mean(np.minimum(unclipped, clipped))),
        "clip_frac": float(np.mean(~active)),
        "ratio_mean": float(ratio.mean()),
    }
    return grads, stats


def critic_loss_and_grad(critic, traj: Trajectory, gamma: float = 0.99, target: str = "return"):
    """Squared error of ``V(s)`` against returns, or the one-step TD target."""
    V, acts = mlp_forward_batch(critic, traj.states)
    V = V[:, 0]
    if target == "td":
        V_next = mlp_forward_batch(critic, traj.next_states)[0][:, 0]
        goal = traj.rewards + gamma * V_next * (~traj.dones)
    else:
        goal = traj.returns
    err = V - goal
    grads = mlp_backward(critic, acts, (2.0 * err / len(err))[:, None])
    return float(np.mean(err ** 2)), grads


@dataclass
class PpoOptim:
    actor: AdamState | None = None
    critic: AdamState | None = None


@dataclass
class PpoConfig:
    clip_eps: float = 0.1
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    gamma: float = 0.99
    epochs: int = 4
    critic_target: str = "return"
    advantage: str = "return"
    literal_returns: bool = False


def ppo_update(actor, critic, traj: Trajectory, cfg: PpoConfig = PpoConfig(),
               optim: PpoOptim | None = None):
    """Whole-batch clipped-surrogate and critic regression steps.

    ``optim`` carries the Adam states across calls and is updated in place.
    Returns ``(actor, critic, stats)``.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if traj.advantages is None:
        raise ValueError("call returns_and_advantages first")
    optim = optim if optim is not None else PpoOptim()
    if optim.actor is None:
        optim.actor = adam_init(actor)
    if optim.critic is None:
        optim.critic = adam_init(critic)
    stats = {}
    for _ in range(cfg.epochs):
        g_a, a_stats = actor_gradient(actor, traj, cfg.clip_eps)
        c_loss, g_c = critic_loss_and_grad(critic, traj, cfg.gamma, cfg.critic_target)
        if not (math.isfinite(a_stats["actor_loss"]) and math.isfinite(c_loss)):
            raise NumericError(f"non-finite PPO loss: actor={a_stats['actor_loss']}, critic={c_loss}")
        actor, optim.actor = adam_step(actor, g_a, optim.actor, cfg.lr_actor)
        critic, optim.critic = adam_step(critic, g_c, optim.critic, cfg.lr_critic)
        stats = dict(a_stats, critic_loss=c_loss)
    return actor, critic, stats
