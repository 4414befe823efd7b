"""Smooth aggregation of many constraints ``v_j <= 0`` into one.

The combined constraint is ``log sum_j exp(beta * v_j) <= 0``. Any point
satisfying it satisfies every member (inner approximation), and the gap
to the hard maximum is at most ``log(M) / beta``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

DEFAULT_BETA = 50.0
MODES = ("lse", "mellowmax", "pnorm")
LEAF_SIZE = 256


def _check(values, beta):
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("need at least one constraint value")
    if not np.all(np.isfinite(v)):
        raise ValueError("constraint values must be finite")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return v


def lse_combine(values, beta: float = DEFAULT_BETA) -> float:
    """``log sum exp(beta * v)`` evaluated with the max-shift trick."""
    v = _check(values, beta)
    m = v.max()
    return float(beta * m + math.log(np.exp(beta * (v - m)).sum()))


def lse_gradient(values, member_grads, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Gradient of ``lse_combine`` given the gradient of each member.

    ``member_grads`` has one row per member; the result is
    ``beta * softmax(beta * v) @ member_grads``.
    """
    v = _check(values, beta)
    G = np.asarray(member_grads, dtype=float)
    if G.ndim != 2 or G.shape[0] != v.size:
        raise ValueError(f"member_grads must have shape ({v.size}, d), got {G.shape}")
    w = np.exp(beta * (v - v.max()))
    w /= w.sum()
    return beta * (w @ G)


class Sandwich(NamedTuple):
    lower: float
    upper: float
    scaled: float
    gap: float
    holds: bool


def sandwich_check(values, beta: float = DEFAULT_BETA, slack: float = 1e-9) -> Sandwich:
    """Check ``max v <= lse_combine / beta <= max v + log(M) / beta``."""
    v = _check(values, beta)
    lower = float(v.max())
    gap = math.log(v.size) / beta
    scaled = lse_combine(v, beta) / beta
    holds = lower - slack <= scaled <= lower + gap + slack
    return Sandwich(lower, lower + gap, scaled, gap, bool(holds))


def beta_threshold(values) -> float:
    """Smallest beta from which the combined constraint is certified <= 0.

    Infinite when some member is not strictly satisfied.
    """
    v = _check(values, 1.0)
    top = v.max()
    if top >= 0.0:
        return math.inf
    return math.log(v.size) / -top


# --- deterministic parallel reduction ------------------------------------


def _leaf(chunk, beta):
    m = chunk.max()
    return m, float(np.exp(beta * (chunk - m)).sum())


def _merge(a, b, beta):
    (m1, s1), (m2, s2) = a, b
    m = max(m1, m2)
    return m, s1 * math.exp(beta * (m1 - m)) + s2 * math.exp(beta * (m2 - m))


def lse_reduce(values, beta: float = DEFAULT_BETA, workers: int = 1,
               leaf_size: int = LEAF_SIZE) -> float:
    """Log-sum-exp via fixed leaves and a fixed pairwise tree.

    Leaves may be evaluated on a thread pool; the leaf boundaries and
    merge order never depend on ``workers``, so the result is bit-identical
    for every worker count.
    """
    v = _check(values, beta)
    chunks = [v[i:i + leaf_size] for i in range(0, v.size, leaf_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            level = list(pool.map(lambda c: _leaf(c, beta), chunks))
    else:
        level = [_leaf(c, beta) for c in chunks]
    while len(level) > 1:
        nxt = [_merge(level[i], level[i + 1], beta) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    m, s = level[0]
    return float(beta * m + math.log(s))


# --- alternative aggregators ---------------------------------------------


def smooth_max(values, beta: float = DEFAULT_BETA, mode: str = "lse") -> float:
    """Smooth surrogate of ``max v`` in the units of ``v``.

    ``lse``       lse_combine / beta, an upper bound on the max
    ``mellowmax`` log-mean-exp, between the mean and the max
    ``pnorm``     p-norm (p = beta) of the positive parts, zero iff all v <= 0
    """
    v = _check(values, beta)
    if mode == "lse":
        return lse_combine(v, beta) / beta
    if mode == "mellowmax":
        return (lse_combine(v, beta) - math.log(v.size)) / beta
    if mode == "pnorm":
        pos = np.maximum(v, 0.0)
        top = pos.max()
        if top == 0.0:
            return 0.0
        return float(top * (((pos / top) ** beta).sum()) ** (1.0 / beta))
    raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")


# --- demo constraint set -------------------------------------------------


def disk_constraints(points, centers, radii, keep_in: bool = True) -> np.ndarray:
    """Nonlinear members ``|x - c|^2 / r^2 - 1`` (inside) or its negation."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = ((P[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1)
    vals = d2 / np.asarray(radii) ** 2 - 1.0
    return vals if keep_in else -vals
