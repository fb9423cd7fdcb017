import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from micp.trajectory import (
    SchemaError,
    TrajectoryParseError,
    TrajectoryRecord,
    dumps_record,
    matches_gold,
    normalize_answer,
    parse_trajectory_log,
    split_dataset,
)

from conftest import make_record


def _line(n_turns=4, m=15, **extra):
    obj = {
        "id": "q1",
        "question": "who?",
        "gold_answers": ["Paris"],
        "turns": [
            {
                "t": t,
                "passages": [{"pid": f"p{t}", "score": 0.5 + t, "is_gold": t == 1}],
                "samples": [{"text": "Paris", "embedding": [1.0, 0.0]}] * m,
            }
            for t in range(n_turns)
        ],
    }
    obj.update(extra)
    return json.dumps(obj)


def test_empty_stream():
    assert parse_trajectory_log(io.BytesIO(b"")) == []


def test_parses_default_shape():
    (rec,) = parse_trajectory_log(io.BytesIO(_line().encode()))
    assert rec.T == 3 and len(rec.turns) == 4 and rec.M == 15
    assert rec.turns[1].passages[0].is_gold


def test_unknown_fields_ignored():
    (rec,) = parse_trajectory_log(_line(extra_field={"x": 1}))
    assert rec.id == "q1"


def test_inconsistent_sample_count():
    obj = json.loads(_line())
    obj["turns"][2]["samples"] = obj["turns"][2]["samples"][:14]
    with pytest.raises(SchemaError):
        parse_trajectory_log(json.dumps(obj))


def test_malformed_line_reports_line_number():
    data = _line() + "\n{not json\n"
    with pytest.raises(TrajectoryParseError) as err:
        parse_trajectory_log(data)
    assert err.value.lineno == 2


def test_turn_indices_must_be_consecutive():
    obj = json.loads(_line())
    obj["turns"][1]["t"] = 5
    with pytest.raises(SchemaError):
        parse_trajectory_log(json.dumps(obj))


def test_empty_gold_rejected():
    with pytest.raises(SchemaError):
        parse_trajectory_log(_line(gold_answers=[]))


def test_non_finite_score_rejected():
    obj = json.loads(_line())
    obj["turns"][0]["passages"][0]["score"] = float("nan")
    with pytest.raises(SchemaError):
        parse_trajectory_log(json.dumps(obj))


def test_embedding_dimension_mismatch():
    a = json.loads(_line())
    b = json.loads(_line())
    b["id"] = "q2"
    for turn in b["turns"]:
        turn["samples"] = [{"text": "x", "embedding": [1.0, 0.0, 0.0]}] * 15
    with pytest.raises(SchemaError):
        parse_trajectory_log(json.dumps(a) + "\n" + json.dumps(b))


def test_round_trip(small_sim):
    text = "\n".join(dumps_record(r) for r in small_sim[:50])
    assert parse_trajectory_log(text) == small_sim[:50]


@pytest.mark.parametrize(
    "text, expected",
    [("The Eiffel Tower!", "eiffel tower"), ("a cat", "cat"), ("", ""), ("  An   Apple. ", "apple")],
)
def test_normalize_answer(text, expected):
    assert normalize_answer(text) == expected


@pytest.mark.parametrize(
    "answer, golds, expected",
    [("Paris", ["paris"], True), ("Paris", ["London"], False), ("the Nile", ["Nile"], True)],
)
def test_matches_gold(answer, golds, expected):
    assert matches_gold(answer, golds) is expected


def test_matches_gold_needs_golds():
    with pytest.raises(ValueError):
        matches_gold("x", [])


words = st.text(alphabet="abcdefghij ", min_size=1, max_size=12)


@given(words, words)
def test_matches_gold_symmetric(a, b):
    assert matches_gold(a, [b]) == matches_gold(b, [a])


@given(words, st.sampled_from(["", "!", "...", "?!"]))
def test_matches_gold_case_and_punctuation_invariant(a, punct):
    assert matches_gold(f"{punct}{a.upper()}{punct}", [a])


def _records(n):
    return [make_record(f"r{i}", [["gold", "x"]]) for i in range(n)]


def test_split_sizes_and_disjointness():
    recs = _records(900)
    split = split_dataset(recs, seed=0, sizes=(300, 300, 300))
    ids = [set(r.id for r in part) for part in (split.opt, split.cal, split.test)]
    assert [len(s) for s in ids] == [300, 300, 300]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert set().union(*ids) == {r.id for r in recs}


def test_split_deterministic():
    recs = _records(100)
    assert split_dataset(recs, 5, (30, 30, 40)) == split_dataset(recs, 5, (30, 30, 40))
    assert split_dataset(recs, 5, (30, 30, 40)) != split_dataset(recs, 6, (30, 30, 40))


def test_split_too_large():
    with pytest.raises(ValueError):
        split_dataset(_records(900), 0, (900, 1, 0))


def test_record_properties():
    rec = make_record("a", [["x", "y"], ["x", "x"]])
    assert isinstance(rec, TrajectoryRecord) and rec.T == 1 and rec.M == 2
