"""Per-turn early stopping: budget allocation, threshold sweep and grid search.

A record stops at the first turn whose stop score strictly exceeds that
turn's threshold; records that never stop run to the final turn ``T``.
Thresholds are upper conformal quantiles over the scores of records that
are still active and have not yet sampled the gold answer, so at most an
``alpha_t`` fraction of those is stopped prematurely.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .clustering import ClusteringConfig, cluster_answers, normalized_entropy
from .conformal import POS_INF, Threshold, upper_quantile
from .summary import RecordSummary, ScoreTable, canonical_mode, summarize_all
from .trajectory import TrajectoryRecord, get_matcher

log = logging.getLogger(__name__)

EPS = 1e-6
BUDGET_SLACK = 1e-12


class InfeasibleBudgetError(ValueError):
    """No per-turn budget allocation satisfies the total error budget."""


@dataclass(frozen=True)
class TurnBudget:
    t: int
    alpha_t: float
    q_t: Threshold
    c_ans_t: float
    n_active: int
    n_unanswerable: int
    no_unanswerable: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "alpha_t": self.alpha_t,
            "q_t": self.q_t.to_dict(),
            "c_ans_t": self.c_ans_t,
            "n_active": self.n_active,
            "n_unanswerable": self.n_unanswerable,
            "no_unanswerable": self.no_unanswerable,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> TurnBudget:
        return cls(
            int(obj["t"]),
            float(obj["alpha_t"]),
            Threshold.from_dict(obj["q_t"]),
            float(obj["c_ans_t"]),
            int(obj["n_active"]),
            int(obj["n_unanswerable"]),
            bool(obj.get("no_unanswerable", False)),
        )


@dataclass(frozen=True)
class BudgetAllocation:
    budgets: tuple[TurnBudget, ...]
    alpha_total: float
    c_ans_final: float
    gamma: float = 1.0
    stop_score_mode: str = "penalized_freq"
    objective: float | None = None

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(b.alpha_t for b in self.budgets)

    @property
    def thresholds(self) -> tuple[Threshold, ...]:
        return tuple(b.q_t for b in self.budgets)

    @property
    def budget_used(self) -> float:
        return sum((1.0 - b.c_ans_t) * b.alpha_t for b in self.budgets)

    @property
    def budget_limit(self) -> float:
        return (1.0 - self.c_ans_final) * self.alpha_total

    @property
    def residual(self) -> float:
        return self.budget_limit - self.budget_used

    def satisfies_budget(self, slack: float = BUDGET_SLACK) -> bool:
        return self.budget_used <= self.budget_limit + slack

    def to_dict(self) -> dict[str, Any]:
        return {
            "budgets": [b.to_dict() for b in self.budgets],
            "alpha_total": self.alpha_total,
            "c_ans_final": self.c_ans_final,
            "gamma": self.gamma,
            "stop_score_mode": self.stop_score_mode,
            "objective": self.objective,
            "budget_used": self.budget_used,
            "budget_limit": self.budget_limit,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> BudgetAllocation:
        return cls(
            tuple(TurnBudget.from_dict(b) for b in obj["budgets"]),
            float(obj["alpha_total"]),
            float(obj["c_ans_final"]),
            float(obj["gamma"]),
            str(obj["stop_score_mode"]),
            None if obj.get("objective") is None else float(obj["objective"]),
        )


@dataclass(frozen=True)
class StopOutcome:
    id: str
    t_star: int
    early_stopped: bool
    scores: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class TurnTally:
    t: int
    n_corr_t: int
    n_wrong_t: int
    c_ans_t: float

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "n_corr_t": self.n_corr_t, "n_wrong_t": self.n_wrong_t, "c_ans_t": self.c_ans_t}


# ---------------------------------------------------------------------------
# record-level operations


def stop_score(
    record: TrajectoryRecord | RecordSummary,
    t: int,
    config: ClusteringConfig,
    mode: str = "penalized_freq",
) -> float:
    """Confidence of turn ``t``; higher always means more confident."""
    if isinstance(record, RecordSummary):
        return record.stop_score(t, mode)
    samples = record.turns[t].samples
    clusters = cluster_answers(samples, config)
    if canonical_mode(mode) == "penalized_freq":
        return max(c.penalized_confidence for c in clusters)
    return -normalized_entropy(clusters, len(samples))


def unanswerable_set(
    active: Sequence[TrajectoryRecord], t: int, matcher: str = "exact"
) -> list[TrajectoryRecord]:
    """Active records whose gold answer is absent from every sample in turns 0..t."""
    match = get_matcher(matcher)
    out = []
    for rec in active:
        seen = any(
            match(s.text, rec.gold_answers) for turn in rec.turns[: t + 1] for s in turn.samples
        )
        if not seen:
            out.append(rec)
    return out


def apply_stopping(
    record: TrajectoryRecord | RecordSummary,
    budgets: Sequence[TurnBudget] | Sequence[Threshold],
    config: ClusteringConfig | None = None,
    mode: str = "penalized_freq",
) -> StopOutcome:
    thresholds = [b.q_t if isinstance(b, TurnBudget) else b for b in budgets]
    T = len(record.turns) - 1
    if len(thresholds) != T + 1:
        raise ValueError(f"need {T + 1} thresholds for a record with T={T}, got {len(thresholds)}")
    config = config or ClusteringConfig()
    scores = tuple(stop_score(record, t, config, mode) for t in range(T + 1))
    t_star = T
    for t in range(T):
        if thresholds[t].exceeded_by(scores[t]):
            t_star = t
            break
    return StopOutcome(record.id, t_star, t_star < T, scores)


# ---------------------------------------------------------------------------
# budget accounting and objective


def derive_final_budget(
    alphas_prefix: Sequence[float],
    unanswerable_fractions: Sequence[float],
    alpha_total: float,
    c_ans_final: float,
) -> float | None:
    """Last-turn budget that makes the allocation meet the total budget with equality.

    ``unanswerable_fractions`` holds ``1 - c_ans_t`` for t = 0..T. Returns
    None when the earlier turns already overspend the budget.
    """
    T = len(alphas_prefix)
    if len(unanswerable_fractions) != T + 1:
        raise ValueError("need one unanswerable fraction per turn 0..T")
    spent = sum(u * a for u, a in zip(unanswerable_fractions[:T], alphas_prefix))
    numerator = (1.0 - c_ans_final) * alpha_total - spent
    if numerator < 0:
        return None
    return numerator / max(unanswerable_fractions[T], EPS)


def _clamp(c: float) -> float:
    return min(max(c, EPS), 1.0 - EPS)


def composite_objective(tallies: Sequence[TurnTally], avg_turns: float, gamma: float = 1.0) -> float:
    """gamma * avg_turns minus the answerability-weighted correct/wrong stop ratio."""
    reward = penalty = 0.0
    for tally in tallies:
        c = _clamp(tally.c_ans_t)
        if tally.n_corr_t:
            reward += tally.n_corr_t / c
        if tally.n_wrong_t:
            penalty += tally.n_wrong_t / (1.0 - c)
    return gamma * avg_turns - reward / max(penalty, EPS)


def tally_turns(table: ScoreTable, t_star: np.ndarray) -> list[TurnTally]:
    """Per-turn correct/wrong stop counts and active-set answerability.

    A record counts as correct at its stopping turn when the gold answer
    has been sampled by then.
    """
    rows = np.arange(table.n)
    correct = table.answerable[rows, t_star]
    tallies = []
    for t in range(table.T + 1):
        active = t_star >= t
        n_active = int(active.sum())
        c = float(table.answerable[active, t].mean()) if n_active else 1.0
        stopped = t_star == t
        tallies.append(
            TurnTally(t, int((stopped & correct).sum()), int((stopped & ~correct).sum()), c)
        )
    return tallies


def objective_for(table: ScoreTable, t_star: np.ndarray, gamma: float) -> float:
    return composite_objective(tally_turns(table, t_star), float(t_star.mean()), gamma)


# ---------------------------------------------------------------------------
# calibration sweep


@dataclass(frozen=True)
class _SweepState:
    t_star: np.ndarray
    thresholds: list[Threshold]
    n_active: list[int]
    n_unans: list[int]

    def unanswerable_fraction(self, t: int) -> float:
        return self.n_unans[t] / self.n_active[t] if self.n_active[t] else 0.0


def _turn_threshold(table: ScoreTable, mask: np.ndarray, t: int, alpha_t: float) -> Threshold:
    if not mask.any():
        return Threshold(POS_INF, alpha_t, 0)
    return upper_quantile(table.scores[mask, t], alpha_t)


def _sweep_prefix(table: ScoreTable, alphas_prefix: Sequence[float]) -> _SweepState:
    T = table.T
    if len(alphas_prefix) != T:
        raise ValueError(f"expected {T} budgets for turns 0..{T - 1}, got {len(alphas_prefix)}")
    active = np.ones(table.n, dtype=bool)
    t_star = np.full(table.n, T, dtype=int)
    thresholds, n_active, n_unans = [], [], []
    for t in range(T + 1):
        unans = active & ~table.answerable[:, t]
        n_active.append(int(active.sum()))
        n_unans.append(int(unans.sum()))
        if t == T:
            break
        q = _turn_threshold(table, unans, t, alphas_prefix[t])
        thresholds.append(q)
        stop = active & (table.scores[:, t] > q.value)
        t_star[stop] = t
        active &= ~stop
    return _SweepState(t_star, thresholds, n_active, n_unans)


def _finish(
    table: ScoreTable,
    state: _SweepState,
    alphas: Sequence[float],
) -> list[TurnBudget]:
    T = table.T
    active_T = state.t_star == T
    unans_T = active_T & ~table.answerable[:, T]
    q_T = _turn_threshold(table, unans_T, T, alphas[T])
    thresholds = state.thresholds + [q_T]
    budgets = []
    for t in range(T + 1):
        empty = state.n_unans[t] == 0
        if empty and alphas[t] > 0 and t < T:
            log.warning("turn %d: no unanswerable active records; nobody stops on confidence", t)
        budgets.append(
            TurnBudget(
                t=t,
                alpha_t=float(alphas[t]),
                q_t=thresholds[t],
                c_ans_t=1.0 - state.unanswerable_fraction(t),
                n_active=state.n_active[t],
                n_unanswerable=state.n_unans[t],
                no_unanswerable=empty,
            )
        )
    return budgets


def _as_table(
    data: Sequence[TrajectoryRecord] | Sequence[RecordSummary] | ScoreTable,
    config: ClusteringConfig | None,
    mode: str,
    matcher: str = "exact",
) -> ScoreTable:
    if isinstance(data, ScoreTable):
        return data
    data = list(data)
    if data and isinstance(data[0], TrajectoryRecord):
        data = summarize_all(data, config or ClusteringConfig(), matcher)
    return ScoreTable.from_summaries(data, mode)


def calibrate_stop_thresholds(
    cal: Sequence[TrajectoryRecord] | Sequence[RecordSummary] | ScoreTable,
    alphas: Sequence[float],
    config: ClusteringConfig | None = None,
    mode: str = "penalized_freq",
    matcher: str = "exact",
) -> list[TurnBudget]:
    """Sequentially calibrate one stopping threshold per turn 0..T."""
    table = _as_table(cal, config, mode, matcher)
    if len(alphas) != table.T + 1:
        raise ValueError(f"need {table.T + 1} budgets, got {len(alphas)}")
    if any(a < 0 for a in alphas):
        raise ValueError("per-turn budgets must be nonnegative")
    state = _sweep_prefix(table, alphas[:-1])
    return _finish(table, state, alphas)


def stop_turns(table: ScoreTable, thresholds: Sequence[Threshold]) -> np.ndarray:
    """Vectorized stopping turn for every record in ``table``."""
    T = table.T
    t_star = np.full(table.n, T, dtype=int)
    pending = np.ones(table.n, dtype=bool)
    for t in range(T):
        stop = pending & (table.scores[:, t] > thresholds[t].value)
        t_star[stop] = t
        pending &= ~stop
    return t_star


# ---------------------------------------------------------------------------
# allocations and grid search


def c_ans_final_of(table: ScoreTable) -> float:
    return float(table.answerable[:, table.T].mean())


def allocate(
    table: ScoreTable,
    alphas_prefix: Sequence[float],
    alpha_total: float,
    gamma: float = 1.0,
    mode: str = "penalized_freq",
) -> BudgetAllocation | None:
    """Calibrate thresholds for budgets on turns 0..T-1 and derive the last turn's budget.

    Returns None when the prefix overspends the total budget on this data.
    """
    state = _sweep_prefix(table, alphas_prefix)
    c_final = c_ans_final_of(table)
    fractions = [state.unanswerable_fraction(t) for t in range(table.T + 1)]
    alpha_T = derive_final_budget(alphas_prefix, fractions, alpha_total, c_final)
    if alpha_T is None:
        return None
    alphas = list(alphas_prefix) + [alpha_T]
    budgets = _finish(table, state, alphas)
    allocation = BudgetAllocation(
        tuple(budgets),
        alpha_total,
        c_final,
        gamma,
        canonical_mode(mode),
        objective_for(table, state.t_star, gamma),
    )
    if not allocation.satisfies_budget():
        return None
    return allocation


def allocate_feasible(
    table: ScoreTable,
    alphas_prefix: Sequence[float],
    alpha_total: float,
    gamma: float = 1.0,
    mode: str = "penalized_freq",
    shrink: float = 0.9,
    max_steps: int = 200,
) -> BudgetAllocation:
    """Like :func:`allocate`, shrinking the prefix geometrically until it fits.

    Budgets chosen on one split can overspend on another because the
    answerable fractions differ; the all-zero prefix is always feasible.
    """
    prefix = [float(a) for a in alphas_prefix]
    for _ in range(max_steps):
        allocation = allocate(table, prefix, alpha_total, gamma, mode)
        if allocation is not None:
            return allocation
        prefix = [a * shrink for a in prefix]
    allocation = allocate(table, [0.0] * len(prefix), alpha_total, gamma, mode)
    assert allocation is not None
    return allocation


def grid_values(alpha_total: float, steps: int) -> list[float]:
    if steps < 2:
        raise ValueError(f"grid needs at least 2 steps per dimension, got {steps}")
    return [alpha_total * i / (steps - 1) for i in range(steps)]


def _score_points(args) -> list[tuple[float, tuple[float, ...]] | None]:
    table, points, alpha_total, gamma, mode = args
    out = []
    for prefix in points:
        allocation = allocate(table, prefix, alpha_total, gamma, mode)
        out.append(None if allocation is None else (allocation.objective, prefix))
    return out


def grid_search(
    opt: Sequence[TrajectoryRecord] | Sequence[RecordSummary] | ScoreTable,
    alpha_total: float,
    steps: int = 20,
    gamma: float = 1.0,
    config: ClusteringConfig | None = None,
    mode: str = "penalized_freq",
    matcher: str = "exact",
    workers: int = 1,
) -> BudgetAllocation:
    """Exhaustive search over per-turn budgets for turns 0..T-1 minimizing the composite objective.

    The last turn's budget is derived from the total budget at equality.
    Ties go to the lexicographically smallest budget vector.
    """
    table = _as_table(opt, config, mode, matcher)
    values = grid_values(alpha_total, steps)
    points = list(itertools.product(values, repeat=table.T))
    if workers > 1 and len(points) > 1:
        bounds = np.linspace(0, len(points), workers + 1).astype(int)
        jobs = [(table, points[a:b], alpha_total, gamma, mode) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scored = [r for part in pool.map(_score_points, jobs) for r in part]
    else:
        scored = _score_points((table, points, alpha_total, gamma, mode))
    feasible = [s for s in scored if s is not None]
    if not feasible:
        raise InfeasibleBudgetError("every grid point violates the total error budget")
    _, best = min(feasible)
    return allocate(table, best, alpha_total, gamma, mode)


def uniform_prefix(table: ScoreTable, alpha_total: float) -> list[float]:
    """Equal per-turn budgets spending the total budget under no-early-stop answerability."""
    state = _sweep_prefix(table, [0.0] * table.T)
    fractions = [state.unanswerable_fraction(t) for t in range(table.T + 1)]
    total = sum(fractions)
    if total <= 0:
        return [0.0] * table.T
    a = alpha_total * (1.0 - c_ans_final_of(table)) / total
    return [a] * table.T
