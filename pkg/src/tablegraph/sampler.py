"""Class-balanced Monte Carlo pair sampling.

For each vertex, half of the sampling mass is spread uniformly over the
vertices it is adjacent to and half over those it is not, so that on average
both classes are drawn equally often however sparse the graph is.
"""
from __future__ import annotations

import numpy as np


def balanced_distribution(adj) -> np.ndarray:
    """Row-stochastic ``(v, v)`` sampling matrix for a reflexive adjacency.

    A row without class-0 entries puts all of its mass on class 1.
    """
    a = np.asarray(adj, dtype=np.float64)
    neg = 1.0 - a
    n_pos = a.sum(axis=1, keepdims=True)
    n_neg = neg.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 0.5 * neg / n_neg + 0.5 * a / n_pos
        only_pos = a / n_pos
    return np.where(n_neg > 0, p, only_pos)


def draw(p: np.ndarray, s: int, rng: np.random.Generator) -> np.ndarray:
    """``s`` independent draws (with replacement) from each row of ``p``."""
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    p = np.asarray(p, dtype=np.float64)
    v = p.shape[0]
    cdf = np.cumsum(p, axis=1)
    u = rng.random((v, s))
    out = np.empty((v, s), dtype=np.int64)
    for i in range(v):
        idx = np.searchsorted(cdf[i], u[i] * cdf[i, -1], side="right")
        # floating round-off at the top end must land on a positive-mass entry
        last = np.flatnonzero(p[i] > 0)[-1]
        out[i] = np.minimum(idx, last)
    return out


def pair_sampling(adj, s: int, rng: np.random.Generator) -> np.ndarray:
    return draw(balanced_distribution(adj), s, rng)


def full_pairing(v: int) -> np.ndarray:
    """Every vertex paired with every vertex, itself included."""
    if v < 1:
        raise ValueError(f"v must be >= 1, got {v}")
    return np.tile(np.arange(v, dtype=np.int64), (v, 1))
