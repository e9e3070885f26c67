from __future__ import annotations

import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import construct_script, make_task
from structtrust.backend import MockBackend
from structtrust.config import ScoringConfig
from structtrust.core import IntermediateScore
from structtrust.engine import Scorer, ScoringError, aggregate, harmonic_mean, score, select_explanations

# hand evaluation of the aggregation rules on the constructed five-call fixture
ORACLE_DOC = float((Fraction(8, 10) + Fraction(9, 10) + Fraction(7, 10) + Fraction(2, 3) + Fraction(3, 4)) / 5)
ORACLE_A = 0.8875
ORACLE_B = 0.5625


def fixture_intermediates() -> list[IntermediateScore]:
    return [
        IntermediateScore("T1", "T1", doc_score=0.8, doc_explanation="total looks off"),
        IntermediateScore("T2_numeric", "T2_numeric", field_scores={"a": 1.0, "b": 0.5},
                          field_explanations={"a": "fine", "b": "doubtful"}),
        IntermediateScore("T3_likert", "T3_likert", field_scores={"a": 0.75, "b": 0.75},
                          field_explanations={"a": "ok", "b": "ok"}),
        IntermediateScore("T4_flag_accuracy", "T4_flag_accuracy", doc_score=0.9, field_scores={"a": 0.9, "b": 0.9},
                          doc_explanation="all good", field_explanations={"a": "", "b": ""}),
        IntermediateScore("T5_flag_confidence", "T5_flag_confidence", doc_score=0.7, field_scores={"a": 0.9, "b": 0.1},
                          doc_explanation="b is wrong", field_explanations={"a": "", "b": "b contradicts"}),
    ]


def test_oracle_value():
    assert ORACLE_DOC == pytest.approx(0.7633333333333333, abs=1e-12)


def test_harmonic_mean_examples():
    assert harmonic_mean([0.9, 0.9, 0.9]) == 0.9
    assert harmonic_mean([0.5, 1.0]) == pytest.approx(2 / 3, abs=1e-15)
    assert harmonic_mean([0.0, 1.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        harmonic_mean([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_harmonic_soft_minimum(scores):
    h = harmonic_mean(scores)
    assert min(scores) <= h <= max(scores)
    assert h <= sum(scores) / len(scores) + 1e-15


def test_aggregate_fixture():
    doc, per_field = aggregate(fixture_intermediates(), ["a", "b"])
    assert doc == pytest.approx(ORACLE_DOC, abs=1e-9)
    assert per_field == {"a": pytest.approx(ORACLE_A, abs=1e-9), "b": pytest.approx(ORACLE_B, abs=1e-9)}
    assert list(per_field) == ["a", "b"]


def test_aggregate_is_permutation_invariant():
    items = fixture_intermediates()
    results = {aggregate(list(p), ["a", "b"]) == aggregate(items, ["a", "b"]) for p in itertools.permutations(items)}
    assert results == {True}


def test_aggregate_only_t1_is_insufficient():
    with pytest.raises(ScoringError, match="insufficient verifier signal"):
        aggregate([IntermediateScore("T1", "T1", doc_score=0.6)], ["a", "b"])


def test_aggregate_only_t2():
    doc, per_field = aggregate([IntermediateScore("T2_numeric", "T2_numeric", field_scores={"a": 0.4, "b": 0.4})], ["a", "b"])
    assert doc == pytest.approx(0.4)
    assert per_field == {"a": pytest.approx(0.4), "b": pytest.approx(0.4)}


def test_aggregate_dropping_a_call_equals_mean_of_rest():
    items = fixture_intermediates()
    without_t1 = [i for i in items if i.template_id != "T1"]
    doc, _ = aggregate(without_t1, ["a", "b"])
    assert doc == pytest.approx(float((Fraction(9, 10) + Fraction(7, 10) + Fraction(2, 3) + Fraction(3, 4)) / 4), abs=1e-12)


def test_harmonic_switch_limits_to_numeric_template():
    doc, _ = aggregate(fixture_intermediates(), ["a", "b"], harmonic_templates=("T2_numeric",))
    assert doc == pytest.approx(float((Fraction(8, 10) + Fraction(9, 10) + Fraction(7, 10) + Fraction(2, 3)) / 4))


def test_select_explanations_minimum():
    inters = [
        IntermediateScore("T2_numeric", "T2_numeric", field_scores={"b": 0.1}, field_explanations={"b": "wrong date"}),
        IntermediateScore("T3_likert", "T3_likert", field_scores={"b": 0.5}, field_explanations={"b": "maybe"}),
    ]
    _, fields = select_explanations(inters, {"b": 0.3})
    assert fields == {"b": "wrong date"}

    docs = [
        IntermediateScore("T1", "T1", doc_score=0.3, doc_explanation="bad total"),
        IntermediateScore("T4_flag_accuracy", "T4_flag_accuracy", doc_score=0.8, doc_explanation="fine"),
    ]
    assert select_explanations(docs, {})[0] == "bad total"


def test_select_explanations_ties_follow_template_order():
    docs = [
        IntermediateScore("T5_flag_confidence", "T5_flag_confidence", doc_score=0.5, doc_explanation="from T5"),
        IntermediateScore("T4_flag_accuracy", "T4_flag_accuracy", doc_score=0.5, doc_explanation="from T4"),
    ]
    assert select_explanations(docs, {})[0] == "from T4"
    fields = [
        IntermediateScore("T3_likert", "T3_likert", field_scores={"a": 0.5}, field_explanations={"a": "T3 says"}),
        IntermediateScore("T2_numeric", "T2_numeric", field_scores={"a": 0.5}, field_explanations={"a": "T2 says"}),
    ]
    assert select_explanations(fields, {"a": 0.5})[1] == {"a": "T2 says"}


def test_select_explanations_skips_empty_text():
    doc, fields = select_explanations(fixture_intermediates(), {"a": ORACLE_A, "b": ORACLE_B})
    # T5's 0.7 is the lowest doc-level intermediate
    assert doc == "b is wrong"
    # a: T4/T5 flags carry no text, so the lowest with text is T3 (0.75)
    assert fields == {"a": "ok", "b": "b contradicts"}


def test_select_explanations_fallback_empty():
    inters = [IntermediateScore("T2_numeric", "T2_numeric", field_scores={"a": 0.5})]
    assert select_explanations(inters, {"a": 0.5}) == ("", {"a": ""})


def test_score_via_mock(ab_task):
    report = score(ab_task, MockBackend(construct_script()), ScoringConfig(deadline_ms=5000))
    assert report.trustworthiness_score == pytest.approx(ORACLE_DOC, abs=1e-9)
    assert report.per_field_scores == {"a": pytest.approx(ORACLE_A, abs=1e-9), "b": pytest.approx(ORACLE_B, abs=1e-9)}
    assert report.untrustworthy_fields == ()
    assert [r.template_id for r in report.diagnostics] == [
        "T1", "T2_numeric", "T3_likert", "T4_flag_accuracy", "T5_flag_confidence"
    ]
    assert {r.outcome for r in report.diagnostics} == {"completed"}
    # harmonic T2 (0.667) is lowest but has no text, so T5 (0.7) explains
    assert report.doc_explanation == "b is wrong"
    assert report.per_field_explanations == {"a": "looks fine", "b": "b contradicts the document"}


def test_score_threshold(ab_task):
    report = score(ab_task, MockBackend(construct_script()), ScoringConfig(field_threshold=0.6))
    assert report.untrustworthy_fields == ("b",)


def test_score_requests_user_only_messages(ab_task):
    backend = MockBackend(construct_script())
    Scorer(backend).score(ab_task)
    assert sorted(r.tag for r in backend.requests) == sorted(
        ["T1", "T2_numeric", "T3_likert", "T4_flag_accuracy", "T5_flag_confidence"]
    )
    for r in backend.requests:
        assert [m["role"] for m in r.messages] == ["user"]
        assert r.temperature == 0.0
        assert (r.response_format is None) == (r.tag == "T1")


def test_score_all_timeouts(ab_task):
    script = construct_script(slow={t: 2000 for t in ("T1", "T2_numeric", "T3_likert", "T4_flag_accuracy", "T5_flag_confidence")})
    with pytest.raises(ScoringError, match="insufficient verifier signal"):
        score(ab_task, MockBackend(script), ScoringConfig(deadline_ms=100))


def test_score_records_parse_failures(ab_task):
    report = score(ab_task, MockBackend(construct_script(t1="<score>abc</score>")))
    t1 = report.diagnostics[0]
    assert (t1.template_id, t1.outcome) == ("T1", "parse_failed")
    expected = float((Fraction(9, 10) + Fraction(7, 10) + Fraction(2, 3) + Fraction(3, 4)) / 4)
    assert report.trustworthiness_score == pytest.approx(expected, abs=1e-12)


def test_score_is_deterministic(ab_task):
    reports = [score(ab_task, MockBackend(construct_script())).to_dict() for _ in range(3)]
    assert reports[0] == reports[1] == reports[2]


def test_scores_bounded_and_cover_fields():
    task = make_task({"x": 1, "y": "two", "z": None})
    script = [
        {"tag": "T1", "reply_text": "<score>0</score>"},
        {"tag": "T2_numeric", "reply_payload": {f: {"explanation": "", "score": 0} for f in "xyz"}},
        {"tag": "*", "status": "transport_failed"},
    ]
    report = score(task, MockBackend(script))
    assert report.trustworthiness_score == 0.0
    assert list(report.per_field_scores) == ["x", "y", "z"]
    assert report.untrustworthy_fields == ("x", "y", "z")
    assert [r.outcome for r in report.diagnostics][2:] == ["transport_failed"] * 3
