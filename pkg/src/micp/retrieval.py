"""Retrieval filtering: calibrate a relevance cut-off on retrievable gold passages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .conformal import Threshold, lower_quantile
from .trajectory import PassageHit, TrajectoryRecord, TurnLog


@dataclass(frozen=True)
class RetrievalArtifact:
    q_ret: Threshold
    alpha_ret: float
    n_gold_scores: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "q_ret": self.q_ret.to_dict(),
            "alpha_ret": self.alpha_ret,
            "n_gold_scores": self.n_gold_scores,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> RetrievalArtifact:
        return cls(Threshold.from_dict(obj["q_ret"]), float(obj["alpha_ret"]), int(obj["n_gold_scores"]))


def optimistic_score(occurrences: Sequence[tuple[int, float]]) -> float:
    """Best relevance score a gold passage achieved over the turns it was retrieved."""
    if not occurrences:
        raise ValueError("passage was never retrieved; it has no optimistic score")
    return max(score for _, score in occurrences)


def gold_occurrences(record: TrajectoryRecord) -> dict[str, list[tuple[int, float]]]:
    """Map each retrieved gold passage id to its (turn, score) hits."""
    hits: dict[str, list[tuple[int, float]]] = {}
    for turn in record.turns:
        for p in turn.passages:
            if p.is_gold:
                hits.setdefault(p.pid, []).append((turn.t, p.score))
    return hits


def optimistic_gold_scores(record: TrajectoryRecord) -> list[float]:
    return [optimistic_score(occ) for occ in gold_occurrences(record).values()]


def calibrate_retrieval(cal: Iterable[TrajectoryRecord], alpha_ret: float = 0.1) -> RetrievalArtifact:
    if not 0.0 < alpha_ret < 1.0:
        raise ValueError(f"alpha_ret must lie in (0, 1), got {alpha_ret}")
    pooled = [s for rec in cal for s in optimistic_gold_scores(rec)]
    if not pooled:
        raise ValueError("no retrievable gold passages in calibration set")
    return RetrievalArtifact(lower_quantile(pooled, alpha_ret), alpha_ret, len(pooled))


def filter_passages(turn: TurnLog, artifact: RetrievalArtifact) -> list[PassageHit]:
    return [p for p in turn.passages if artifact.q_ret.admits(p.score)]


def gold_retention(records: Iterable[TrajectoryRecord], artifact: RetrievalArtifact) -> tuple[int, int]:
    """Count (kept, total) retrievable gold passages after filtering.

    A gold passage is kept when some turn retains it, i.e. when its
    optimistic score clears the threshold.
    """
    kept = total = 0
    for rec in records:
        for score in optimistic_gold_scores(rec):
            total += 1
            kept += artifact.q_ret.admits(score)
    return kept, total
