"""Global-best particle swarm minimizer with clamped positions and velocities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError, as_generator


@dataclass(frozen=True)
class PsoConfig:
    population: int = 20
    iterations: int = 100
    cognitive: float = 2.0
    social: float = 2.0
    inertia: float = 0.7
    vmax_frac: float = 0.2  # velocity clamp as a fraction of each dimension's range


@dataclass
class PsoResult:
    x: np.ndarray
    value: float
    trace: list[float] = field(default_factory=list)  # gbest value after init and after each iteration
    evaluations: int = 0
    points: list[np.ndarray] = field(default_factory=list)


def pso_minimize(f, bounds, cfg: PsoConfig = PsoConfig(), rng=0, vectorized: bool = False,
                 record_points: bool = False) -> PsoResult:
    """Minimize ``f`` over the box ``bounds = [(lo, hi), ...]``.

    ``f`` takes one position vector, or with ``vectorized=True`` the whole
    ``(population, dim)`` array and returns one value per row. Exactly
    ``population * (iterations + 1)`` points are evaluated.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not (np.all(np.isfinite(bounds)) and np.all(lo < hi)):
        raise ValueError(f"bounds must be finite with lower < upper, got {bounds.tolist()}")
    gen = as_generator(rng)
    n, d = cfg.population, len(lo)
    vmax = cfg.vmax_frac * (hi - lo)
    points = []

    def evaluate(X):
        if record_points:
            points.extend(X.copy())
        vals = np.asarray(f(X) if vectorized else [f(x) for x in X], dtype=float).reshape(n)
        bad = ~np.isfinite(vals)
        if bad.any():
            k = int(np.argmax(bad))
            raise NumericError(f"objective returned {vals[k]} at x={X[k].tolist()}")
        return vals

    x = lo + gen.random((n, d)) * (hi - lo)
    v = (gen.random((n, d)) * 2.0 - 1.0) * vmax
    fx = evaluate(x)
    pbest, pbest_val = x.copy(), fx.copy()
    g = int(np.argmin(pbest_val))  # argmin takes the lowest index on ties
    gbest, gbest_val = pbest[g].copy(), float(pbest_val[g])
    trace = [gbest_val]
    for _ in range(cfg.iterations):
        r1 = gen.random((n, d))
        r2 = gen.random((n, d))
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        fx = evaluate(x)
        improved = fx < pbest_val
        pbest[improved] = x[improved]
        pbest_val[improved] = fx[improved]
        g = int(np.argmin(pbest_val))
        if pbest_val[g] < gbest_val:
            gbest, gbest_val = pbest[g].copy(), float(pbest_val[g])
        trace.append(gbest_val)
    return PsoResult(gbest, gbest_val, trace, n * (cfg.iterations + 1), points)
