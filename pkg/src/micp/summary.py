"""Per-record turn summaries: clusters, entropies and gold bookkeeping.

Clustering is the only expensive step in calibration, so every record is
clustered once and the stopping / answer-set stages work off these
summaries (or the dense arrays in :class:`ScoreTable`).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .clustering import Cluster, ClusteringConfig, cluster_answers, normalized_entropy
from .trajectory import Matcher, TrajectoryRecord, get_matcher

STOP_SCORE_MODES = ("penalized_freq", "neg_entropy")


def canonical_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in STOP_SCORE_MODES:
        raise ValueError(f"stop score mode must be one of {STOP_SCORE_MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class TurnSummary:
    clusters: tuple[Cluster, ...]
    gold_flags: tuple[bool, ...]
    ne: float

    @property
    def top_confidence(self) -> float:
        # clusters are sorted by frequency and share the turn's NE penalty
        return self.clusters[0].penalized_confidence

    @property
    def has_gold(self) -> bool:
        return any(self.gold_flags)

    @property
    def gold_confidence(self) -> float:
        vals = [c.penalized_confidence for c, g in zip(self.clusters, self.gold_flags) if g]
        return max(vals) if vals else -np.inf


@dataclass(frozen=True)
class RecordSummary:
    id: str
    turns: tuple[TurnSummary, ...]

    @property
    def T(self) -> int:
        return len(self.turns) - 1

    def stop_score(self, t: int, mode: str = "penalized_freq") -> float:
        if canonical_mode(mode) == "penalized_freq":
            return self.turns[t].top_confidence
        return -self.turns[t].ne

    @cached_property
    def answerable(self) -> tuple[bool, ...]:
        """answerable[t]: gold sampled in some turn 0..t."""
        out, seen = [], False
        for ts in self.turns:
            seen = seen or ts.has_gold
            out.append(seen)
        return tuple(out)

    @cached_property
    def gold_confidence_upto(self) -> tuple[float, ...]:
        out, best = [], -np.inf
        for ts in self.turns:
            best = max(best, ts.gold_confidence)
            out.append(best)
        return tuple(out)


def summarize(
    record: TrajectoryRecord, config: ClusteringConfig, matcher: Matcher | None = None
) -> RecordSummary:
    matcher = matcher or get_matcher("exact")
    turns = []
    for turn in record.turns:
        clusters = cluster_answers(turn.samples, config)
        hit = [matcher(s.text, record.gold_answers) for s in turn.samples]
        flags = tuple(any(hit[i] for i in c.members) for c in clusters)
        m = len(turn.samples)
        ne = normalized_entropy(clusters, m) if m >= 2 else 0.0
        turns.append(TurnSummary(tuple(clusters), flags, ne))
    return RecordSummary(record.id, tuple(turns))


def _summarize_chunk(args) -> list[RecordSummary]:
    records, config, matcher_name = args
    matcher = get_matcher(matcher_name)
    return [summarize(r, config, matcher) for r in records]


def summarize_all(
    records: Sequence[TrajectoryRecord],
    config: ClusteringConfig,
    matcher: str = "exact",
    workers: int = 1,
) -> list[RecordSummary]:
    """Summarize records in input order, optionally across worker processes."""
    if workers <= 1 or len(records) < 2:
        return _summarize_chunk((list(records), config, matcher))
    n_chunks = min(len(records), workers * 4)
    bounds = np.linspace(0, len(records), n_chunks + 1).astype(int)
    chunks = [(list(records[a:b]), config, matcher) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_summarize_chunk, chunks))
    return [s for part in parts for s in part]


@dataclass(frozen=True)
class ScoreTable:
    """Dense per-record, per-turn arrays used by calibration sweeps.

    scores:      (n, T+1) stop scores, higher = more confident
    answerable:  (n, T+1) gold sampled in turns <= t
    gold_conf:   (n, T+1) best gold-cluster penalized confidence over turns <= t
    """

    ids: tuple[str, ...]
    scores: np.ndarray
    answerable: np.ndarray
    gold_conf: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def T(self) -> int:
        return self.scores.shape[1] - 1

    @classmethod
    def from_summaries(cls, summaries: Sequence[RecordSummary], mode: str = "penalized_freq") -> ScoreTable:
        if not summaries:
            raise ValueError("cannot build a score table from no records")
        turn_counts = {s.T for s in summaries}
        if len(turn_counts) != 1:
            raise ValueError(f"all records must share the same T, found {sorted(turn_counts)}")
        T = turn_counts.pop()
        scores = np.array([[s.stop_score(t, mode) for t in range(T + 1)] for s in summaries])
        answerable = np.array([s.answerable for s in summaries], dtype=bool)
        gold_conf = np.array([s.gold_confidence_upto for s in summaries], dtype=float)
        return cls(tuple(s.id for s in summaries), scores, answerable, gold_conf)
