"""Small deterministic numerical kernel shared by every other module.

Affine maps, a functional Adam optimizer, counter-based seeded random streams
and the standard-normal distribution functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when parameter and gradient tensors do not line up."""


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of a function."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | float) -> np.ndarray:
    return W @ x + b


def sigmoid(z):
    return special.expit(z)


def softplus(z):
    # log(1 + e^z) without overflow for large z
    return np.logaddexp(0.0, z)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_init(params: dict[str, np.ndarray], **kwargs) -> AdamState:
    return AdamState(
        first_moment={k: np.zeros_like(v, dtype=float) for k, v in params.items()},
        second_moment={k: np.zeros_like(v, dtype=float) for k, v in params.items()},
        **kwargs,
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Returns new parameter and state objects; the inputs are left untouched.
    Parameters with no entry in ``grads`` are copied through unchanged.
    """
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if k not in params:
            raise ShapeError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ShapeError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        if k not in grads:
            new_params[k] = p
            continue
        g = grads[k]
        m = state.first_moment.get(k)
        v = state.second_moment.get(k)
        if m is None:
            m = np.zeros_like(p, dtype=float)
            v = np.zeros_like(p, dtype=float)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        m_new[k] = m
        v_new[k] = v
    first = dict(state.first_moment)
    second = dict(state.second_moment)
    first.update(m_new)
    second.update(v_new)
    return new_params, replace(state, first_moment=first, second_moment=second, step_count=t)


# --------------------------------------------------------------------------
# Standard normal
# --------------------------------------------------------------------------

def normal_pdf(z):
    return np.exp(-0.5 * np.square(z)) / math.sqrt(2.0 * math.pi)


def normal_cdf(z):
    """Standard normal CDF, accurate to double precision in both tails."""
    out = special.ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def normal_inv_cdf(p):
    """Quantile function of N(0, 1) with one Newton polish step."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0.0) & (p_arr < 1.0))):
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    z = special.ndtri(p_arr)
    z = z - (special.ndtr(z) - p_arr) / normal_pdf(z)
    return float(z) if z.ndim == 0 else z


# --------------------------------------------------------------------------
# Counter-based random streams
# --------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Splittable random stream identified by ``(seed, stream_id)``.

    Draw ``n`` of a stream is a pure function of ``(seed, stream_id, n)``: it
    is produced by a Philox generator keyed on the pair and positioned at a
    counter derived from ``n``. ``counter`` is the number of scalar draws
    already consumed through :func:`rng_gaussian`.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _key(self) -> np.ndarray:
        ss = np.random.SeedSequence(self.seed & _MASK64, spawn_key=(self.stream_id & _MASK64,))
        return ss.generate_state(2, dtype=np.uint64)

    def split(self, index: int) -> "RngStream":
        child = _splitmix64(_splitmix64(self.stream_id & _MASK64) ^ (index + 1))
        return RngStream(self.seed, child, 0)

    def generator(self) -> np.random.Generator:
        """Stateful numpy generator for bulk draws, starting at this stream's position."""
        return np.random.Generator(np.random.Philox(key=self._key(), counter=[0, self.counter, 0, 1]))


def rng_gaussian(stream: RngStream, mean: float, stddev: float) -> tuple[float, RngStream]:
    if stddev < 0:
        raise DomainError(f"stddev must be nonnegative, got {stddev}")
    bg = np.random.Philox(key=stream._key(), counter=[0, stream.counter, 0, 0])
    z = np.random.Generator(bg).standard_normal()
    return mean + stddev * float(z), replace(stream, counter=stream.counter + 1)


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng)).generator()
