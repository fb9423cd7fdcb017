"""End-to-end calibration state, its on-disk artifact, and evaluation/sweep drivers."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .answer_set import MetricsReport, RecordRow, evaluate, freq_threshold_from_table
from .clustering import ClusteringConfig
from .conformal import Threshold
from .retrieval import RetrievalArtifact, calibrate_retrieval
from .stopping import (
    BudgetAllocation,
    InfeasibleBudgetError,
    allocate,
    allocate_feasible,
    grid_search,
    stop_turns,
)
from .summary import RecordSummary, ScoreTable, canonical_mode, summarize_all
from .trajectory import TrajectoryRecord, get_matcher

FORMAT_VERSION = 1


class VersionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    alpha_total: float = 0.10
    alpha_ret: float = 0.1
    eta: float = 0.1
    gamma: float = 1.0
    grid_steps: int = 20
    similarity_threshold: float = 0.9
    stop_score_mode: str = "penalized_freq"
    cluster_mode: str = "auto"
    gold_match: str = "exact"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "stop_score_mode", canonical_mode(self.stop_score_mode))
        for name in ("alpha_total", "alpha_ret"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.grid_steps < 2:
            raise ValueError(f"grid_steps must be >= 2, got {self.grid_steps}")
        get_matcher(self.gold_match)
        self.clustering  # validates eta / threshold / mode

    @property
    def clustering(self) -> ClusteringConfig:
        return ClusteringConfig(self.similarity_threshold, self.eta, self.cluster_mode)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class CalibrationArtifact:
    config: RunConfig
    retrieval: RetrievalArtifact
    allocation: BudgetAllocation
    q_freq: Threshold
    c_ans_final: float
    n_cal: int
    n_cal_ans: int
    search: dict[str, Any] | None = None
    provenance: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "retrieval": self.retrieval.to_dict(),
            "allocation": self.allocation.to_dict(),
            "q_freq": self.q_freq.to_dict(),
            "c_ans_final": self.c_ans_final,
            "n_cal": self.n_cal,
            "n_cal_ans": self.n_cal_ans,
            "search": self.search,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> CalibrationArtifact:
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"artifact format version {version!r} is not supported (expected {FORMAT_VERSION})"
            )
        return cls(
            config=RunConfig.from_dict(obj["config"]),
            retrieval=RetrievalArtifact.from_dict(obj["retrieval"]),
            allocation=BudgetAllocation.from_dict(obj["allocation"]),
            q_freq=Threshold.from_dict(obj["q_freq"]),
            c_ans_final=float(obj["c_ans_final"]),
            n_cal=int(obj["n_cal"]),
            n_cal_ans=int(obj["n_cal_ans"]),
            search=obj.get("search"),
            provenance=obj.get("provenance") or {},
            format_version=version,
        )


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_artifact(artifact: CalibrationArtifact, path: str | Path) -> None:
    Path(path).write_text(dumps_json(artifact.to_dict()), encoding="utf-8")


def load_artifact(path: str | Path) -> CalibrationArtifact:
    return CalibrationArtifact.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def build_provenance(inputs: dict[str, str | Path | None], seed: int) -> dict[str, Any]:
    """Input digests plus the seed.

    A timestamp is recorded only when SOURCE_DATE_EPOCH is set, so that
    identical inputs give byte-identical artifacts.
    """
    prov: dict[str, Any] = {
        "inputs": {k: file_digest(v) for k, v in sorted(inputs.items()) if v is not None},
        "seed": seed,
    }
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        prov["timestamp"] = int(epoch)
    return prov


def _summaries(
    records: Sequence[TrajectoryRecord], config: RunConfig, workers: int
) -> list[RecordSummary]:
    return summarize_all(records, config.clustering, config.gold_match, workers)


def calibrate(
    cal: Sequence[TrajectoryRecord],
    config: RunConfig,
    opt: Sequence[TrajectoryRecord] | None = None,
    budgets: Sequence[float] | None = None,
    *,
    cal_summaries: Sequence[RecordSummary] | None = None,
    opt_summaries: Sequence[RecordSummary] | None = None,
    provenance: dict[str, Any] | None = None,
    workers: int = 1,
) -> CalibrationArtifact:
    """Run retrieval calibration, then stopping thresholds and the answer-set threshold.

    Exactly one of ``budgets`` (per-turn budgets for turns 0..T-1) or
    ``opt`` (grid search) selects the allocation. Explicit budgets that
    overspend the total raise :class:`InfeasibleBudgetError`; grid-searched
    budgets are shrunk until they fit the calibration data.
    """
    if not cal:
        raise ValueError("calibration set is empty")
    if (budgets is None) == (opt is None and opt_summaries is None):
        raise ValueError("pass exactly one of explicit budgets or an optimization set")
    retrieval = calibrate_retrieval(cal, config.alpha_ret)
    if cal_summaries is None:
        cal_summaries = _summaries(cal, config, workers)
    table = ScoreTable.from_summaries(cal_summaries, config.stop_score_mode)

    search = None
    if budgets is not None:
        if len(budgets) != table.T:
            raise ValueError(f"need {table.T} budgets for turns 0..{table.T - 1}, got {len(budgets)}")
        allocation = allocate(table, budgets, config.alpha_total, config.gamma, config.stop_score_mode)
        if allocation is None:
            raise InfeasibleBudgetError(
                "budgets violate sum_t (1 - c_ans_t) * alpha_t <= (1 - c_ans_final) * alpha "
                "on the calibration set"
            )
    else:
        if opt_summaries is None:
            opt_summaries = _summaries(opt, config, workers)
        opt_table = ScoreTable.from_summaries(opt_summaries, config.stop_score_mode)
        best = grid_search(
            opt_table,
            config.alpha_total,
            config.grid_steps,
            config.gamma,
            mode=config.stop_score_mode,
            workers=workers,
        )
        prefix = list(best.alphas[:-1])
        allocation = allocate_feasible(
            table, prefix, config.alpha_total, config.gamma, config.stop_score_mode
        )
        search = {
            "grid_steps": config.grid_steps,
            "selected_budgets": prefix,
            "opt_objective": best.objective,
            "n_opt": opt_table.n,
            "shrunk_on_cal": list(allocation.alphas[:-1]) != prefix,
        }

    t_star = stop_turns(table, allocation.thresholds)
    q_freq = freq_threshold_from_table(table, t_star, config.alpha_total)
    rows = range(table.n)
    n_ans = int(sum(table.answerable[i, t_star[i]] for i in rows))
    return CalibrationArtifact(
        config=config,
        retrieval=retrieval,
        allocation=allocation,
        q_freq=q_freq,
        c_ans_final=allocation.c_ans_final,
        n_cal=table.n,
        n_cal_ans=n_ans,
        search=search,
        provenance=provenance or {},
    )


def evaluate_artifact(
    test: Sequence[TrajectoryRecord],
    artifact: CalibrationArtifact,
    *,
    summaries: Sequence[RecordSummary] | None = None,
    workers: int = 1,
) -> tuple[MetricsReport, list[RecordRow]]:
    cfg = artifact.config
    if summaries is None and test:
        summaries = _summaries(test, cfg, workers)
    return evaluate(
        test,
        artifact.allocation,
        artifact.q_freq,
        cfg.clustering,
        retrieval=artifact.retrieval,
        matcher=cfg.gold_match,
        summaries=summaries,
    )


def report_document(report: MetricsReport, artifact: CalibrationArtifact, inputs: dict[str, Any]) -> dict[str, Any]:
    """Structured report: metrics, the coverage-vs-alpha row, and the thresholds used."""
    alpha = artifact.config.alpha_total
    return {
        "format_version": FORMAT_VERSION,
        "metrics": report.to_dict(),
        "coverage_vs_alpha": {
            "alpha": alpha,
            "target": 1.0 - alpha,
            "coverage": report.coverage_rate,
            "coverage_se": report.coverage_se,
            "meets_target": report.coverage_rate >= 1.0 - alpha,
        },
        "thresholds": {
            "q_ret": artifact.retrieval.q_ret.to_dict(),
            "q_t": [b.q_t.to_dict() for b in artifact.allocation.budgets],
            "alpha_t": list(artifact.allocation.alphas),
            "q_freq": artifact.q_freq.to_dict(),
        },
        "inputs": inputs,
    }


ROW_FIELDS = ("id", "t_star", "set_size", "covered", "cant_answer")


def rows_csv(rows: Sequence[RecordRow]) -> str:
    lines = [",".join(ROW_FIELDS)]
    for r in rows:
        lines.append(f"{r.id},{r.t_star},{r.set_size},{int(r.covered)},{int(r.cant_answer)}")
    return "\n".join(lines) + "\n"


SWEEP_FIELDS = ("alpha", "coverage", "retention", "avg_turns", "avg_set_size", "answer_rate", "composite_L")


def sweep(
    cal: Sequence[TrajectoryRecord],
    test: Sequence[TrajectoryRecord],
    alphas: Sequence[float],
    config: RunConfig,
    opt: Sequence[TrajectoryRecord] | None = None,
    budgets: Sequence[float] | None = None,
    workers: int = 1,
) -> list[dict[str, Any]]:
    """Calibrate and evaluate once per total error budget in ``alphas``.

    With ``opt`` each alpha gets its own grid search; otherwise ``budgets``
    (default all zero) are used for every alpha.
    """
    if not alphas:
        raise ValueError("alpha list is empty")
    cal_s = _summaries(cal, config, workers)
    test_s = _summaries(test, config, workers)
    opt_s = _summaries(opt, config, workers) if opt is not None else None
    if opt_s is None and budgets is None:
        budgets = [0.0] * cal_s[0].T
    out = []
    for alpha in alphas:
        cfg = replace(config, alpha_total=float(alpha))
        artifact = calibrate(
            cal,
            cfg,
            budgets=None if opt_s is not None else budgets,
            cal_summaries=cal_s,
            opt_summaries=opt_s,
            workers=workers,
        )
        report, _ = evaluate_artifact(test, artifact, summaries=test_s)
        out.append(
            {
                "alpha": float(alpha),
                "coverage": report.coverage_rate,
                "retention": report.gold_retention_rate,
                "avg_turns": report.avg_turns,
                "avg_set_size": report.avg_set_size,
                "answer_rate": report.answer_rate,
                "composite_L": report.composite_L,
            }
        )
    return out
