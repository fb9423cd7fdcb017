from __future__ import annotations

import sys
from typing import Sequence

import pytest

from micp.simulator import SimConfig, generate_trajectories
from micp.trajectory import AnswerSample, PassageHit, TrajectoryRecord, TurnLog


def make_record(
    rid: str,
    turn_texts: Sequence[Sequence[str]],
    gold: str | Sequence[str] = "gold",
    passages: Sequence[Sequence[tuple[str, float, bool]]] | None = None,
) -> TrajectoryRecord:
    """Build a record from per-turn answer strings (exact-match clustering)."""
    golds = (gold,) if isinstance(gold, str) else tuple(gold)
    turns = []
    for t, texts in enumerate(turn_texts):
        hits = tuple(PassageHit(*p) for p in passages[t]) if passages else ()
        turns.append(TurnLog(t, hits, tuple(AnswerSample(x) for x in texts)))
    return TrajectoryRecord(rid, f"question {rid}", golds, tuple(turns))


@pytest.fixture(scope="session")
def small_sim() -> list[TrajectoryRecord]:
    return generate_trajectories(SimConfig(n_records=600, seed=11))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
