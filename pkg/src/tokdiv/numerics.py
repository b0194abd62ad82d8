"""Small dense-numerics helpers shared by every other module.

All metric math runs in float64. Conventions that downstream reports rely on:
argmax ties break to the lowest index, and quantiles use lower interpolation
on the sorted sample.
"""

from __future__ import annotations

import numpy as np


def require_finite(a: np.ndarray, what: str = "input") -> None:
    """Raise ValueError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """log(softmax(logits)) without intermediate underflow."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_row(m: np.ndarray, i: int) -> np.ndarray:
    """Probability vector for row `i` of a 2-D score matrix."""
    row = np.asarray(m, dtype=np.float64)[i]
    require_finite(row, "logit row")
    return softmax(row)


def argmax_row(m: np.ndarray, i: int) -> int:
    """Index of the row maximum; ties break to the lowest index."""
    row = np.asarray(m)[i]
    if row.size == 0:
        raise ValueError("argmax of an empty row")
    # np.argmax already returns the first (lowest) index among ties.
    return int(np.argmax(row))


def quantile(values, q: float) -> float:
    """Empirical quantile with lower interpolation on the sorted sample.

    quantile(v, q) = sorted(v)[floor(q * (len(v) - 1))], so quantile(v, 0) is
    the minimum and quantile(v, 1) the maximum.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must be in [0, 1], got {q}")
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    idx = int(np.floor(q * (v.size - 1)))
    return float(v[idx])
