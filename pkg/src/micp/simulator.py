"""Synthetic exchangeable trajectory logs with known ground truth.

Every record is generated from its own sub-stream
``numpy.random.default_rng([seed, index])`` (PCG64), so records are i.i.d.
given the config and serial and parallel generation agree exactly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from .trajectory import AnswerSample, PassageHit, TrajectoryRecord, TurnLog, write_trajectory_log

GENERATOR = f"numpy-{np.__version__}/PCG64 default_rng([seed, record_index])"


def _default_first_turn_probs(T: int) -> tuple[float, ...]:
    if T == 3:
        return (0.35, 0.2, 0.15, 0.1, 0.2)
    return tuple([1.0 / (T + 2)] * (T + 2))


@dataclass(frozen=True)
class SimConfig:
    n_records: int = 5000
    T: int = 3
    M: int = 15
    K: int = 10
    first_answerable_turn_probs: tuple[float, ...] | None = None
    concentration_answerable: float = 6.0
    concentration_unanswerable: float = 0.25
    gold_score_mean: float = 2.0
    gold_score_sd: float = 1.0
    distractor_score_mean: float = 0.0
    distractor_score_sd: float = 1.0
    gold_retrievable_prob: float = 0.5
    n_gold_passages: int = 2
    vocab_size: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        probs = self.first_answerable_turn_probs
        if probs is None:
            probs = _default_first_turn_probs(self.T)
        object.__setattr__(self, "first_answerable_turn_probs", tuple(float(p) for p in probs))
        self.validate()

    def validate(self) -> None:
        probs = self.first_answerable_turn_probs
        problems = []
        if self.n_records < 0:
            problems.append("n_records must be >= 0")
        if self.T < 0:
            problems.append("T must be >= 0")
        if self.M < 2:
            problems.append("M must be >= 2")
        if self.K < self.n_gold_passages:
            problems.append("K must be at least n_gold_passages")
        if len(probs) != self.T + 2:
            problems.append(f"first_answerable_turn_probs needs T+2={self.T + 2} entries")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            problems.append("first_answerable_turn_probs must be nonnegative and sum to 1")
        if self.concentration_answerable <= 0 or self.concentration_unanswerable <= 0:
            problems.append("concentrations must be positive")
        if self.gold_score_sd <= 0 or self.distractor_score_sd <= 0:
            problems.append("score standard deviations must be positive")
        if not 0.0 <= self.gold_retrievable_prob <= 1.0:
            problems.append("gold_retrievable_prob must lie in [0, 1]")
        if self.vocab_size < 1:
            problems.append("vocab_size must be >= 1")
        if problems:
            raise ValueError("invalid SimConfig: " + "; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["first_answerable_turn_probs"] = list(self.first_answerable_turn_probs)
        return d

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        obj = dict(obj)
        if obj.get("first_answerable_turn_probs") is not None:
            obj["first_answerable_turn_probs"] = tuple(obj["first_answerable_turn_probs"])
        return cls(**obj)


def _answer_text(k: int) -> str:
    return f"answer {k}"


@lru_cache(maxsize=None)
def _vocabulary(V: int) -> tuple[AnswerSample, ...]:
    """Answer 0 is the gold; each answer carries a one-hot embedding."""
    return tuple(
        AnswerSample(_answer_text(k), tuple(1.0 if j == k else 0.0 for j in range(V + 1)))
        for k in range(V + 1)
    )


def _wrong_distribution(rng: np.random.Generator, V: int, concentration: float) -> np.ndarray:
    """One wrong answer takes Beta(concentration, 1) of the mass, the rest is Dirichlet-spread."""
    w = np.zeros(V)
    top = rng.integers(V)
    if V == 1:
        w[top] = 1.0
        return w
    p_top = rng.beta(concentration, 1.0)
    rest = rng.dirichlet(np.ones(V - 1))
    w[np.arange(V) != top] = (1.0 - p_top) * rest
    w[top] = p_top
    return w


def generate_record(config: SimConfig, index: int) -> tuple[TrajectoryRecord, int | None]:
    """Generate record ``index`` and its first answerable turn (None = never)."""
    rng = np.random.default_rng([config.seed, index])
    T, V = config.T, config.vocab_size
    first = int(rng.choice(T + 2, p=np.asarray(config.first_answerable_turn_probs)))
    rid = f"sim-{config.seed}-{index:06d}"
    vocab = _vocabulary(V)

    turns = []
    for t in range(T + 1):
        hits = []
        for g in range(config.n_gold_passages):
            if rng.random() < config.gold_retrievable_prob:
                score = rng.normal(config.gold_score_mean, config.gold_score_sd)
                hits.append(PassageHit(f"{rid}-gold{g}", float(score), True))
        n_distract = config.K - len(hits)
        scores = rng.normal(config.distractor_score_mean, config.distractor_score_sd, n_distract)
        hits.extend(PassageHit(f"{rid}-t{t}-d{j}", float(s), False) for j, s in enumerate(scores))
        hits.sort(key=lambda p: (-p.score, p.pid))

        wrong = _wrong_distribution(rng, V, config.concentration_unanswerable)
        p_gold = rng.beta(config.concentration_answerable, 1.0) if t >= first else 0.0
        probs = np.concatenate([[p_gold], (1.0 - p_gold) * wrong])
        probs /= probs.sum()
        draws = rng.choice(V + 1, size=config.M, p=probs)
        samples = tuple(vocab[k] for k in draws.tolist())
        turns.append(TurnLog(t, tuple(hits), samples))

    record = TrajectoryRecord(
        id=rid,
        question=f"synthetic question {index}",
        gold_answers=(_answer_text(0),),
        turns=tuple(turns),
    )
    return record, (first if first <= T else None)


def _generate_range(args) -> list[tuple[TrajectoryRecord, int | None]]:
    config, start, stop = args
    return [generate_record(config, i) for i in range(start, stop)]


def generate_with_truth(
    config: SimConfig, workers: int = 1
) -> tuple[list[TrajectoryRecord], dict[str, int | None]]:
    n = config.n_records
    if workers > 1 and n > 1:
        bounds = np.linspace(0, n, min(n, workers * 4) + 1).astype(int)
        jobs = [(config, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pairs = [p for part in pool.map(_generate_range, jobs) for p in part]
    else:
        pairs = _generate_range((config, 0, n))
    records = [r for r, _ in pairs]
    return records, {r.id: first for r, first in pairs}


def generate_trajectories(config: SimConfig, workers: int = 1) -> list[TrajectoryRecord]:
    return generate_with_truth(config, workers)[0]


def truth_path_for(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".truth.json")


def write_simulation(config: SimConfig, out: str | Path, workers: int = 1) -> Path:
    """Write the trajectory log to ``out`` and the ground-truth sidecar next to it."""
    records, truth = generate_with_truth(config, workers)
    write_trajectory_log(records, out)
    sidecar = truth_path_for(out)
    payload = {
        "generator": GENERATOR,
        "config": config.to_dict(),
        "first_answerable_turn": truth,
    }
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def oracle_min_turns(truth: dict[str, int | None], T: int) -> float:
    """Average stopping turn of an oracle that stops once the gold becomes available."""
    if not truth:
        return math.nan
    return sum(T if f is None else f for f in truth.values()) / len(truth)
