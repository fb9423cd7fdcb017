"""Trajectory log data model, answer matching, splitting and JSONL I/O."""

from __future__ import annotations

import io
import json
import math
import string
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import IO, Any, Callable, Iterable, Sequence

import numpy as np


class TrajectoryParseError(ValueError):
    """A log line could not be decoded into a record."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SchemaError(ValueError):
    """A record decoded but violates the trajectory invariants."""


@dataclass(frozen=True)
class PassageHit:
    pid: str
    score: float
    is_gold: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise SchemaError(f"passage {self.pid!r} has non-finite score {self.score}")


@dataclass(frozen=True)
class AnswerSample:
    text: str
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class TurnLog:
    t: int
    passages: tuple[PassageHit, ...]
    samples: tuple[AnswerSample, ...]

    def __post_init__(self) -> None:
        if self.t < 0:
            raise SchemaError(f"negative turn index {self.t}")


@dataclass(frozen=True)
class TrajectoryRecord:
    """One question's full multi-turn log.

    ``turns`` holds T+1 entries; turn 0 answers from the initial context.
    """

    id: str
    question: str
    gold_answers: tuple[str, ...]
    turns: tuple[TurnLog, ...]

    def __post_init__(self) -> None:
        if not self.gold_answers:
            raise SchemaError(f"record {self.id!r}: gold_answers is empty")
        if not self.turns:
            raise SchemaError(f"record {self.id!r}: no turns")
        for expected, turn in enumerate(self.turns):
            if turn.t != expected:
                raise SchemaError(
                    f"record {self.id!r}: turn indices must be 0..T consecutive, "
                    f"got {turn.t} at position {expected}"
                )
        counts = {len(turn.samples) for turn in self.turns}
        if len(counts) != 1:
            raise SchemaError(
                f"record {self.id!r}: inconsistent sample count across turns {sorted(counts)}"
            )
        if counts.pop() < 1:
            raise SchemaError(f"record {self.id!r}: turns carry no samples")

    @property
    def T(self) -> int:
        return len(self.turns) - 1

    @property
    def M(self) -> int:
        return len(self.turns[0].samples)

    def to_dict(self) -> dict[str, Any]:
        turns = []
        for turn in self.turns:
            samples = []
            for s in turn.samples:
                d: dict[str, Any] = {"text": s.text}
                if s.embedding is not None:
                    d["embedding"] = list(s.embedding)
                samples.append(d)
            turns.append(
                {
                    "t": turn.t,
                    "passages": [
                        {"pid": p.pid, "score": p.score, "is_gold": p.is_gold}
                        for p in turn.passages
                    ],
                    "samples": samples,
                }
            )
        return {
            "id": self.id,
            "question": self.question,
            "gold_answers": list(self.gold_answers),
            "turns": turns,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> TrajectoryRecord:
        turns = []
        for raw in obj["turns"]:
            passages = tuple(
                PassageHit(str(p["pid"]), float(p["score"]), bool(p.get("is_gold", False)))
                for p in raw.get("passages", [])
            )
            samples = []
            for s in raw["samples"]:
                emb = s.get("embedding")
                samples.append(
                    AnswerSample(
                        str(s["text"]),
                        None if emb is None else tuple(float(v) for v in emb),
                    )
                )
            turns.append(TurnLog(int(raw["t"]), passages, tuple(samples)))
        return cls(
            id=str(obj["id"]),
            question=str(obj.get("question", "")),
            gold_answers=tuple(str(g) for g in obj["gold_answers"]),
            turns=tuple(turns),
        )


def _check_embeddings(records: Sequence[TrajectoryRecord]) -> None:
    dim = None
    for rec in records:
        for turn in rec.turns:
            for s in turn.samples:
                if s.embedding is None:
                    continue
                if dim is None:
                    dim = len(s.embedding)
                elif len(s.embedding) != dim:
                    raise SchemaError(
                        f"record {rec.id!r}: embedding dimension {len(s.embedding)} != {dim}"
                    )
                if not any(s.embedding):
                    raise SchemaError(f"record {rec.id!r}: zero-norm embedding")


def parse_trajectory_log(source: IO[bytes] | IO[str] | bytes | str) -> list[TrajectoryRecord]:
    """Parse a line-delimited JSON trajectory log.

    ``source`` may be a binary or text stream, or the raw bytes/str content.
    Blank lines are skipped; unknown fields are ignored.
    """
    if isinstance(source, (bytes, str)):
        source = io.BytesIO(source.encode("utf-8") if isinstance(source, str) else source)
    records = []
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise TrajectoryParseError(lineno, f"invalid UTF-8: {exc}") from None
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise TrajectoryParseError(lineno, "record is not an object")
        try:
            rec = TrajectoryRecord.from_dict(obj)
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise TrajectoryParseError(lineno, f"missing or malformed field: {exc!r}") from None
        records.append(rec)
    _check_embeddings(records)
    return records


def dumps_record(record: TrajectoryRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False, separators=(",", ":"))


def write_trajectory_log(records: Iterable[TrajectoryRecord], dest: str | Path | IO[str]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_trajectory_log(records, fh)
        return
    for rec in records:
        dest.write(dumps_record(rec))
        dest.write("\n")


def load_trajectory_log(path: str | Path) -> list[TrajectoryRecord]:
    with open(path, "rb") as fh:
        return parse_trajectory_log(fh)


_PUNCT = set(string.punctuation)
_ARTICLES = {"a", "an", "the"}


def _is_punct(ch: str) -> bool:
    return ch in _PUNCT or unicodedata.category(ch).startswith("P")


@lru_cache(maxsize=1 << 16)
def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and leading articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if not _is_punct(ch))
    tokens = text.split()
    while tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(tokens)


def matches_gold(answer: str, golds: Sequence[str]) -> bool:
    if not golds:
        raise ValueError("matches_gold requires at least one gold answer")
    norm = normalize_answer(answer)
    return any(norm == normalize_answer(g) for g in golds)


def matches_gold_substring(answer: str, golds: Sequence[str]) -> bool:
    """Softer matcher: normalized gold contained in the normalized answer or vice versa."""
    if not golds:
        raise ValueError("matches_gold requires at least one gold answer")
    norm = normalize_answer(answer)
    if not norm:
        return any(not normalize_answer(g) for g in golds)
    for g in golds:
        ng = normalize_answer(g)
        if ng and (ng in norm or norm in ng):
            return True
    return False


Matcher = Callable[[str, Sequence[str]], bool]

MATCHERS: dict[str, Matcher] = {
    "exact": matches_gold,
    "substring": matches_gold_substring,
}


def get_matcher(name: str) -> Matcher:
    try:
        return MATCHERS[name]
    except KeyError:
        raise ValueError(f"unknown gold matcher {name!r}; choose from {sorted(MATCHERS)}") from None


@dataclass(frozen=True)
class DatasetSplit:
    opt: tuple[TrajectoryRecord, ...]
    cal: tuple[TrajectoryRecord, ...]
    test: tuple[TrajectoryRecord, ...]
    seed: int


def split_dataset(
    records: Sequence[TrajectoryRecord], seed: int, sizes: tuple[int, int, int]
) -> DatasetSplit:
    """Seeded shuffle followed by contiguous slicing into (opt, cal, test).

    Records beyond ``sum(sizes)`` after the shuffle are dropped.
    """
    n_opt, n_cal, n_test = (int(s) for s in sizes)
    if min(n_opt, n_cal, n_test) < 0:
        raise ValueError(f"split sizes must be nonnegative, got {sizes}")
    if n_opt + n_cal + n_test > len(records):
        raise ValueError(
            f"split sizes {sizes} sum to {n_opt + n_cal + n_test} > {len(records)} records"
        )
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique to split")
    perm = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in perm]
    return DatasetSplit(
        opt=tuple(shuffled[:n_opt]),
        cal=tuple(shuffled[n_opt : n_opt + n_cal]),
        test=tuple(shuffled[n_opt + n_cal : n_opt + n_cal + n_test]),
        seed=seed,
    )
