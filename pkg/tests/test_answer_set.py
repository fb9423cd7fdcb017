import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micp.answer_set import (
    CANT_ANSWER,
    build_prediction_set,
    calibrate_freq_threshold,
    evaluate,
    gold_confidence,
)
from micp.clustering import Cluster, ClusteringConfig
from micp.conformal import NEG_INF, POS_INF, Threshold
from micp.stopping import BudgetAllocation, StopOutcome, TurnBudget
from micp.summary import RecordSummary, TurnSummary, summarize

from conftest import make_record

EXACT = ClusteringConfig(eta=0.1, mode="exact-match")


def _turn(entries):
    """entries: list of (text, confidence, is_gold)."""
    clusters = tuple(Cluster(text, (i,), conf, conf) for i, (text, conf, _) in enumerate(entries))
    return TurnSummary(clusters, tuple(g for *_, g in entries), 0.0)


def _summary(rid, turns):
    return RecordSummary(rid, tuple(_turn(t) for t in turns))


def _thr(v):
    return Threshold(v, 0.1, 10)


def test_gold_confidence_max_over_turns():
    s = _summary("r", [[("g", 0.6, True), ("x", 0.2, False)], [("g", 0.7, True)], [("g", 0.9, True)]])
    assert gold_confidence(s, 1) == 0.7
    assert gold_confidence(s, 0) == 0.6


def test_gold_confidence_never_sampled():
    s = _summary("r", [[("x", 0.6, False)], [("y", 0.7, False)]])
    assert gold_confidence(s, 1) is None


def _outcome(t):
    return StopOutcome("r", t, False, ())


def test_freq_threshold_examples():
    pairs = [(_summary(f"r{i}", [[("g", v, True)]]), _outcome(0)) for i, v in enumerate([0.2, 0.4, 0.6, 0.8, 1.0])]
    assert calibrate_freq_threshold(pairs, 0.2).value == 0.2
    assert calibrate_freq_threshold(pairs, 0.1).is_neg_inf
    one = [(_summary("a", [[("g", 0.37, True)]]), _outcome(0))]
    assert calibrate_freq_threshold(one, 0.6).value == 0.37


def test_freq_threshold_skips_unanswerable_and_errors_when_empty():
    none = [(_summary("a", [[("x", 0.5, False)]]), _outcome(0))]
    with pytest.raises(ValueError):
        calibrate_freq_threshold(none, 0.1)


def test_prediction_set_cross_turn_merge():
    s = _summary("r", [[("A", 0.6, False), ("B", 0.3, False)], [("A", 0.7, False), ("C", 0.55, False)], [("D", 1.0, False)]])
    pset = build_prediction_set(s, 1, _thr(0.5), T=2, config=EXACT)
    assert pset.labels == ("A", "C") and pset.size == 2 and not pset.cant_answer
    a = pset.entries[0]
    assert a.penalized_confidence == 0.7 and a.turn == 0


def test_prediction_set_abstain_only():
    s = _summary("r", [[("A", 0.2, False)], [("B", 0.1, False)]])
    pset = build_prediction_set(s, 1, _thr(0.5), config=EXACT)
    assert pset.labels == (CANT_ANSWER,) and pset.size == 1


def test_prediction_set_neg_inf_admits_turn_zero():
    s = _summary("r", [[("A", 0.2, False), ("B", -0.1, False)], [("C", 0.9, False)]])
    pset = build_prediction_set(s, 0, Threshold(NEG_INF, 0.0, 3), config=EXACT)
    assert pset.labels == ("A", "B")


def test_prediction_set_bad_turn():
    s = _summary("r", [[("A", 0.2, False)]])
    with pytest.raises(ValueError):
        build_prediction_set(s, 1, _thr(0.5))


conf = st.floats(-0.2, 1.0, allow_nan=False)
turn_strategy = st.lists(st.tuples(st.sampled_from("ABCDE"), conf, st.booleans()), min_size=1, max_size=5, unique_by=lambda e: e[0])


@settings(max_examples=150, deadline=None)
@given(st.lists(turn_strategy, min_size=2, max_size=4), st.data())
def test_set_monotone_in_threshold(turns, data):
    s = _summary("r", turns)
    q_hi = data.draw(conf)
    q_lo = data.draw(st.floats(-0.3, q_hi))
    t_star = data.draw(st.integers(0, s.T))
    hi = build_prediction_set(s, t_star, _thr(q_hi), config=EXACT)
    lo = build_prediction_set(s, t_star, _thr(q_lo), config=EXACT)
    assert set(hi.labels) <= set(lo.labels)
    assert hi.cant_answer == (t_star == s.T)
    assert all(e.penalized_confidence >= q_hi for e in hi.entries)


def _allocation(thresholds, T):
    budgets = tuple(TurnBudget(t, 0.0, _thr(q), 0.5, 4, 2) for t, q in enumerate(thresholds))
    assert len(budgets) == T + 1
    return BudgetAllocation(budgets, 0.1, 0.5, 1.0)


def _toy():
    return [
        make_record("A", [["gold"] * 4, ["gold"] * 4]),
        make_record("B", [["w"] * 4, ["w"] * 4]),
        make_record("C", [["w1", "w2", "w3", "w4"], ["gold", "gold", "w", "w"]]),
        make_record("D", [["w1", "w1", "w2", "w2"], ["w3", "w3", "w3", "w4"]]),
    ]


def test_evaluate_hand_toy():
    alloc = _allocation([0.5, POS_INF], 1)
    report, rows = evaluate(_toy(), alloc, _thr(0.3), EXACT)
    by_id = {r.id: r for r in rows}
    assert [by_id[k].t_star for k in "ABCD"] == [0, 0, 1, 1]
    assert [by_id[k].set_size for k in "ABCD"] == [1, 1, 3, 4]
    assert [by_id[k].covered for k in "ABCD"] == [True, False, True, True]
    assert report.coverage_rate == 0.75
    assert report.avg_turns == 0.5
    assert report.avg_set_size == 2.25
    assert report.answer_rate == 0.5
    assert report.early_stop_rate == 0.5
    # t0: c=1/4, A correct, B wrong; t1: c=1/2, C correct, D wrong
    assert report.composite_L == pytest.approx(0.5 - (4 + 2) / (1 / 0.75 + 2), abs=1e-12)
    assert report.coverage_se == pytest.approx(math.sqrt(0.75 * 0.25 / 4))


def test_evaluate_maximal_sets_full_coverage():
    alloc = _allocation([POS_INF, POS_INF], 1)
    report, rows = evaluate(_toy(), alloc, Threshold(NEG_INF, 0.0, 4), EXACT)
    assert report.coverage_rate == 1.0
    assert all(r.cant_answer and r.t_star == 1 for r in rows)
    for rec, row in zip(_toy(), rows):
        s = summarize(rec, EXACT)
        distinct = {c.representative for ts in s.turns for c in ts.clusters}
        assert row.set_size == len(distinct) + 1


def test_evaluate_rejects_empty_and_mismatched_turns():
    with pytest.raises(ValueError):
        evaluate([], _allocation([0.5, POS_INF], 1), _thr(0.3))
    with pytest.raises(ValueError):
        evaluate(_toy(), _allocation([0.5, 0.5, POS_INF], 2), _thr(0.3), EXACT)
