"""Finite-sample conformal quantiles shared by every calibration stage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

NEG_INF = -math.inf
POS_INF = math.inf

# guards floor/ceil against representation error, e.g. 0.29 * 100 = 28.999999999999996
_INDEX_EPS = 1e-9


@dataclass(frozen=True)
class Threshold:
    """A calibrated cut-off, possibly one of the infinite sentinels.

    ``level`` is the error level it was calibrated at and ``n`` the number of
    calibration scores.
    """

    value: float
    level: float
    n: int

    @property
    def is_neg_inf(self) -> bool:
        return self.value == NEG_INF

    @property
    def is_pos_inf(self) -> bool:
        return self.value == POS_INF

    def admits(self, score: float) -> bool:
        """Inclusive test ``score >= value``; NEG_INF admits all, POS_INF none."""
        if self.is_pos_inf:
            return False
        return score >= self.value

    def exceeded_by(self, score: float) -> bool:
        """Strict test ``score > value``."""
        return score > self.value

    def to_dict(self) -> dict[str, Any]:
        if self.is_neg_inf:
            value: Any = "NEG_INF"
        elif self.is_pos_inf:
            value = "POS_INF"
        else:
            value = self.value
        return {"value": value, "level": self.level, "n": self.n}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> Threshold:
        value = obj["value"]
        if value == "NEG_INF":
            value = NEG_INF
        elif value == "POS_INF":
            value = POS_INF
        return cls(float(value), float(obj["level"]), int(obj["n"]))


def _as_scores(scores: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot take a conformal quantile of an empty score list")
    if not np.all(np.isfinite(arr)):
        raise ValueError("conformal scores must be finite")
    return arr.ravel()


def lower_index(n: int, alpha: float) -> int:
    return math.floor(alpha * (n + 1) + _INDEX_EPS)


def upper_index(n: int, alpha: float) -> int:
    return math.ceil((n + 1) * (1.0 - alpha) - _INDEX_EPS)


def lower_quantile(scores: Iterable[float], alpha: float) -> Threshold:
    """k-th smallest score with ``k = floor(alpha * (n + 1))``.

    For an exchangeable new score ``s``, ``P(s < threshold) <= alpha``.
    Returns NEG_INF when ``k < 1``.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    arr = _as_scores(scores)
    n = arr.size
    k = lower_index(n, alpha)
    if k < 1:
        return Threshold(NEG_INF, alpha, n)
    return Threshold(float(np.sort(arr, kind="stable")[k - 1]), alpha, n)


def upper_quantile(scores: Iterable[float], alpha: float) -> Threshold:
    """k-th smallest score with ``k = ceil((n + 1) * (1 - alpha))``.

    Returns POS_INF when ``k > n`` (always the case for ``alpha = 0``) and
    NEG_INF when ``k < 1``. For an exchangeable new score ``s``,
    ``P(s > threshold) <= alpha``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    arr = _as_scores(scores)
    n = arr.size
    k = upper_index(n, alpha)
    if k > n:
        return Threshold(POS_INF, alpha, n)
    if k < 1:
        return Threshold(NEG_INF, alpha, n)
    return Threshold(float(np.sort(arr, kind="stable")[k - 1]), alpha, n)
