"""Final prediction sets with a "Can't Answer" label, and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .clustering import ClusteringConfig
from .clustering import equivalent as clusters_equivalent
from .conformal import Threshold, lower_quantile
from .retrieval import RetrievalArtifact, gold_retention
from .stopping import (
    BudgetAllocation,
    StopOutcome,
    TurnTally,
    composite_objective,
    stop_turns,
    tally_turns,
)
from .summary import RecordSummary, ScoreTable, summarize, summarize_all
from .trajectory import TrajectoryRecord, get_matcher

CANT_ANSWER = "Can't Answer"


@dataclass(frozen=True)
class SetEntry:
    representative: str
    penalized_confidence: float
    turn: int
    contains_gold: bool


@dataclass(frozen=True)
class PredictionSet:
    id: str
    t_star: int
    entries: tuple[SetEntry, ...]
    cant_answer: bool

    @property
    def size(self) -> int:
        return len(self.entries) + int(self.cant_answer)

    @property
    def labels(self) -> tuple[str, ...]:
        labels = tuple(e.representative for e in self.entries)
        return labels + (CANT_ANSWER,) if self.cant_answer else labels

    @property
    def contains_gold(self) -> bool:
        return any(e.contains_gold for e in self.entries)


def _summary(record: TrajectoryRecord | RecordSummary, config: ClusteringConfig, matcher: str) -> RecordSummary:
    if isinstance(record, RecordSummary):
        return record
    return summarize(record, config, get_matcher(matcher))


def gold_confidence(
    record: TrajectoryRecord | RecordSummary,
    t_star: int,
    config: ClusteringConfig | None = None,
    matcher: str = "exact",
) -> float | None:
    """Best penalized confidence of a gold-containing cluster over turns 0..t_star.

    None when the gold answer was not sampled by ``t_star``; such records
    are left out of the frequency calibration.
    """
    s = _summary(record, config or ClusteringConfig(), matcher)
    value = s.gold_confidence_upto[t_star]
    return None if value == -math.inf else value


def freq_threshold_from_table(table: ScoreTable, t_star: np.ndarray, alpha: float) -> Threshold:
    rows = np.arange(table.n)
    mask = table.answerable[rows, t_star]
    if not mask.any():
        raise ValueError("no calibration record sampled its gold answer before stopping")
    return lower_quantile(table.gold_conf[rows, t_star][mask], alpha)


def calibrate_freq_threshold(
    cal: Sequence[tuple[TrajectoryRecord | RecordSummary, StopOutcome]],
    alpha: float,
    config: ClusteringConfig | None = None,
    matcher: str = "exact",
) -> Threshold:
    config = config or ClusteringConfig()
    scores = []
    for record, outcome in cal:
        g = gold_confidence(record, outcome.t_star, config, matcher)
        if g is not None:
            scores.append(g)
    if not scores:
        raise ValueError("no calibration record sampled its gold answer before stopping")
    return lower_quantile(scores, alpha)


def build_prediction_set(
    record: TrajectoryRecord | RecordSummary,
    outcome: StopOutcome | int,
    q_freq: Threshold,
    T: int | None = None,
    config: ClusteringConfig | None = None,
    matcher: str = "exact",
) -> PredictionSet:
    """Union of admitted clusters over turns 0..t_star, merged across turns.

    Clusters denoting the same answer in different turns collapse into one
    entry keeping the highest confidence and the earliest turn.
    "Can't Answer" is appended only when the record ran to the final turn.
    """
    config = config or ClusteringConfig()
    s = _summary(record, config, matcher)
    T = s.T if T is None else T
    t_star = outcome if isinstance(outcome, int) else outcome.t_star
    if not 0 <= t_star <= T:
        raise ValueError(f"stopping turn {t_star} outside 0..{T}")

    merged: list[list[Any]] = []  # [cluster, confidence, turn, contains_gold]
    for t in range(t_star + 1):
        ts = s.turns[t]
        for cluster, is_gold in zip(ts.clusters, ts.gold_flags):
            if not q_freq.admits(cluster.penalized_confidence):
                continue
            for slot in merged:
                if clusters_equivalent(slot[0], cluster, config):
                    if cluster.penalized_confidence > slot[1]:
                        slot[1] = cluster.penalized_confidence
                    slot[3] = slot[3] or is_gold
                    break
            else:
                merged.append([cluster, cluster.penalized_confidence, t, is_gold])
    entries = tuple(SetEntry(c.representative, conf, t, g) for c, conf, t, g in merged)
    return PredictionSet(s.id, t_star, entries, cant_answer=t_star == T)


@dataclass(frozen=True)
class MetricsReport:
    n_records: int
    coverage_rate: float
    coverage_se: float
    gold_retention_rate: float | None
    avg_turns: float
    avg_set_size: float
    answer_rate: float
    early_stop_rate: float
    composite_L: float
    per_turn: tuple[TurnTally, ...]
    alpha_total: float
    alpha_ret: float | None
    gamma: float

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_turn"] = [t.to_dict() for t in self.per_turn]
        return d


@dataclass(frozen=True)
class RecordRow:
    id: str
    t_star: int
    set_size: int
    covered: bool
    cant_answer: bool


def is_covered(pset: PredictionSet, answerable_at_stop: bool) -> bool:
    if answerable_at_stop:
        return pset.contains_gold
    return pset.cant_answer


def evaluate(
    test: Sequence[TrajectoryRecord],
    allocation: BudgetAllocation,
    q_freq: Threshold,
    config: ClusteringConfig | None = None,
    retrieval: RetrievalArtifact | None = None,
    matcher: str = "exact",
    summaries: Sequence[RecordSummary] | None = None,
    workers: int = 1,
) -> tuple[MetricsReport, list[RecordRow]]:
    """Apply calibrated thresholds to ``test`` and compute coverage and efficiency metrics."""
    if not test:
        raise ValueError("cannot evaluate an empty test set")
    config = config or ClusteringConfig()
    if summaries is None:
        summaries = summarize_all(test, config, matcher, workers)
    table = ScoreTable.from_summaries(summaries, allocation.stop_score_mode)
    if len(allocation.budgets) != table.T + 1:
        raise ValueError(
            f"allocation covers {len(allocation.budgets)} turns but records have T={table.T}"
        )
    t_star = stop_turns(table, allocation.thresholds)

    rows = []
    for i, s in enumerate(summaries):
        pset = build_prediction_set(s, int(t_star[i]), q_freq, table.T, config)
        covered = is_covered(pset, bool(table.answerable[i, t_star[i]]))
        rows.append(RecordRow(s.id, int(t_star[i]), pset.size, covered, pset.cant_answer))

    n = len(rows)
    coverage = sum(r.covered for r in rows) / n
    retention = None
    if retrieval is not None:
        kept, total = gold_retention(test, retrieval)
        retention = kept / total if total else None
    tallies = tally_turns(table, t_star)
    avg_turns = float(t_star.mean())
    report = MetricsReport(
        n_records=n,
        coverage_rate=coverage,
        coverage_se=math.sqrt(coverage * (1.0 - coverage) / n),
        gold_retention_rate=retention,
        avg_turns=avg_turns,
        avg_set_size=sum(r.set_size for r in rows) / n,
        answer_rate=sum(not r.cant_answer for r in rows) / n,
        early_stop_rate=float((t_star < table.T).mean()),
        composite_L=composite_objective(tallies, avg_turns, allocation.gamma),
        per_turn=tuple(tallies),
        alpha_total=allocation.alpha_total,
        alpha_ret=None if retrieval is None else retrieval.alpha_ret,
        gamma=allocation.gamma,
    )
    return report, rows
