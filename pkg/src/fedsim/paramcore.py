"""Flat parameter-vector arithmetic shared by every other module.

Parameter vectors are plain 1-D ``float64`` numpy arrays. The helpers here
add the checks (matching lengths, finite scores) that the federated code
relies on, and fix the summation order so reductions are reproducible.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

ParamVector = np.ndarray


def as_param_vector(values) -> ParamVector:
    """Copy ``values`` into a fresh 1-D float64 array."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    return vec


def zeros(n: int) -> ParamVector:
    return np.zeros(int(n), dtype=np.float64)


def _check_same_length(a: ParamVector, b: ParamVector) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"dimension mismatch: vector lengths {a.shape[0]} and {b.shape[0]}"
        )


def dot(a: ParamVector, b: ParamVector) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    _check_same_length(a, b)
    return float(np.dot(a, b))


def combine(coeffs: Sequence[float], vecs: Sequence[ParamVector]) -> ParamVector:
    """Return ``sum_j coeffs[j] * vecs[j]``, accumulated in list order.

    The fixed left-to-right accumulation keeps results bit-identical for
    equal inputs; callers that need an order-independent reduction sort
    their inputs first (the engine always passes ascending client ids).
    """
    if len(coeffs) == 0 or len(vecs) == 0:
        raise ValueError("combine needs at least one vector")
    if len(coeffs) != len(vecs):
        raise ValueError(
            f"got {len(coeffs)} coefficients for {len(vecs)} vectors"
        )
    first = np.asarray(vecs[0], dtype=np.float64).reshape(-1)
    out = float(coeffs[0]) * first
    for c, v in zip(coeffs[1:], vecs[1:]):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        _check_same_length(first, v)
        out += float(c) * v
    return out


def mean(vecs: Sequence[ParamVector]) -> ParamVector:
    """Uniform average through :func:`combine` (same rounding everywhere)."""
    n = len(vecs)
    if n == 0:
        raise ValueError("mean of an empty vector list")
    return combine([1.0 / n] * n, vecs)


def softmax_stable(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("softmax of an empty score list")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    e = np.exp(s - s.max())
    # fsum is exactly rounded, so the normaliser ignores score order
    return e / math.fsum(e)
