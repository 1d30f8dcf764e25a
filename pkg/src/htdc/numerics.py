"""Numerically stable kernels shared by every other module.

All kernels operate on 1-D float64 arrays ("score vectors"). Entries must
be finite or -inf; -inf is the engine-wide mask sentinel for tokens that
carry no support. Trace files may hold float32 rows, but they are widened
to float64 on load, so these functions always see doubles.

Conventions that callers rely on:
  * ``log_sum_exp`` of an all ``-inf`` vector is ``-inf`` (empty support
    aggregates to no support), while an empty vector is an error.
  * ``softmax_tempered`` maps ``-inf`` logits to exactly 0.0 probability.
  * ``cosine_distance`` treats any vector with norm below 1e-12 as "no
    update" and returns 0.0, so a vanishing layer update never reads as
    hesitation.

Every function is pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

NEG_INF = float("-inf")

_ZERO_NORM_EPS = 1e-12


def as_score_vector(values: Sequence[float] | np.ndarray, name: str = "scores") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting NaN and +inf entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")
    if np.isposinf(arr).any():
        raise ValueError(f"{name} contains +inf")
    return arr


def log_sum_exp(values: Sequence[float] | np.ndarray) -> float:
    """log(sum(exp(values))) with the usual max-shift for stability.

    Returns -inf when every entry is -inf. Raises on an empty input, which
    would otherwise silently aggregate nothing.
    """
    arr = as_score_vector(values)
    if arr.size == 0:
        raise ValueError("empty aggregation set")
    shift = float(np.max(arr))
    if shift == NEG_INF:
        return NEG_INF
    return shift + math.log(float(np.sum(np.exp(arr - shift))))


def softmax_tempered(logits: Sequence[float] | np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax; -inf logits come out as exactly 0.0."""
    if not temperature > 0:
        raise ConfigurationError(f"softmax temperature must be > 0, got {temperature}")
    arr = as_score_vector(logits, name="logits")
    if arr.size == 0 or not np.isfinite(arr).any():
        raise ValueError("softmax requires at least one finite logit")
    scaled = arr / temperature
    exps = np.exp(scaled - np.max(scaled))
    return exps / exps.sum()


def log_softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Log-probabilities over the whole vector; -inf passes through."""
    arr = as_score_vector(logits, name="logits")
    if arr.size == 0 or not np.isfinite(arr).any():
        raise ValueError("empty support")
    return arr - log_sum_exp(arr)


def cosine_distance(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """1 - cos(a, b), clamped to [0, 2].

    Either vector having norm below 1e-12 yields 0.0 by convention.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"cosine_distance shapes differ: {va.shape} vs {vb.shape}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a < _ZERO_NORM_EPS or norm_b < _ZERO_NORM_EPS:
        return 0.0
    cos = float(np.dot(va, vb) / (norm_a * norm_b))
    return float(min(2.0, max(0.0, 1.0 - cos)))


def sigmoid(x: float) -> float:
    """Logistic function, stable on both tails."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def ema_update(prev: np.ndarray, current: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * prev + (1 - alpha) * current, elementwise.

    The result moves toward ``current`` by a factor of alpha, which is what
    makes the smoothed layer-update momentum a contraction.
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigurationError(f"ema smoothing factor must be in [0, 1), got {alpha}")
    p = np.asarray(prev, dtype=np.float64)
    c = np.asarray(current, dtype=np.float64)
    if p.shape != c.shape:
        raise ValueError(f"ema_update shapes differ: {p.shape} vs {c.shape}")
    return alpha * p + (1.0 - alpha) * c
