from __future__ import annotations

import json
from pathlib import Path

import pytest

from structtrust.core import OutputSchema, ScoringTask, StructuredOutput

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def make_task(values: dict, user: str = "Extract the fields.", system: str = "", logprobs=None) -> ScoringTask:
    """A task whose schema has one string-or-anything field per key of ``values``."""
    schema = OutputSchema.from_fields(list(values))
    return ScoringTask(system, user, schema, StructuredOutput(values), logprobs)


def construct_script(
    t1: str = "<think>The total looks off.</think><score>80</score>",
    slow: dict[str, int] | None = None,
) -> list[dict]:
    """Mock replies for the two-field fixture: T1=0.8, T2={a:1.0,b:0.5}, T3={a:.75,b:.75},
    T4 doc .9 nothing flagged, T5 doc .7 with b flagged."""
    slow = slow or {}
    return [
        {"tag": "T1", "reply_text": t1, "latency_ms": slow.get("T1", 1)},
        {
            "tag": "T2_numeric",
            "reply_payload": {
                "a": {"explanation": "a is stated verbatim", "score": 100},
                "b": {"explanation": "b is doubtful", "score": 50},
            },
            "latency_ms": slow.get("T2_numeric", 1),
        },
        {
            "tag": "T3_likert",
            "reply_payload": {
                "a": {"explanation": "looks fine", "confidence": "Mostly Certain"},
                "b": {"explanation": "probably fine", "confidence": "Mostly Certain"},
            },
            "latency_ms": slow.get("T3_likert", 1),
        },
        {
            "tag": "T4_flag_accuracy",
            "reply_payload": {"explanation": "all good", "incorrect_fields": [], "confidence_score": 90},
            "latency_ms": slow.get("T4_flag_accuracy", 1),
        },
        {
            "tag": "T5_flag_confidence",
            "reply_payload": {
                "explanation": "b is wrong",
                "incorrect_fields": [{"field_name": "b", "explanation": "b contradicts the document"}],
                "rating": 7,
            },
            "latency_ms": slow.get("T5_flag_confidence", 1),
        },
    ]


@pytest.fixture
def ab_task() -> ScoringTask:
    return make_task({"a": "alpha", "b": "beta"})


@pytest.fixture
def invoice_data() -> dict:
    return json.loads((FIXTURES / "invoice_task.json").read_text("utf-8"))


@pytest.fixture
def invoice_task(invoice_data) -> ScoringTask:
    return ScoringTask.from_dict(invoice_data)


SYNTH_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "amount": {"type": "number"},
        "tags": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["name", "amount", "tags"],
    "additionalProperties": False,
}
SYNTH_N = 20
# hand counts: examples 0-5 fully correct, 6-13 one wrong field, 14-19 two wrong fields
SYNTH_DOC_ACCURACY = 6 / 20
SYNTH_FIELD_ACCURACY = (60 - 8 - 12) / 60


def _synth_example(i: int) -> tuple[dict, dict, set[str]]:
    ex_id = f"ex{i:02d}"
    truth = {"name": f"Item {i}", "amount": i * 1.5, "tags": ["red", "blue"]}
    record = {
        "id": ex_id,
        "system": "Extract the record.",
        "user": f"[{ex_id}] Item {i} costs {i * 1.5} and is tagged red, blue.",
        "schema": SYNTH_SCHEMA,
        "ground_truth": truth,
        "comparison_profile": "unordered",
    }
    # equal under the profile: padded string, int for whole amounts, reordered tags
    out = {"name": f"  Item {i} ", "amount": int(i * 1.5) if (i * 1.5).is_integer() else i * 1.5, "tags": ["blue", "red"]}
    wrong: set[str] = set()
    if i >= 6:
        out["amount"] = i * 1.5 + 1
        wrong.add("amount")
    if i >= 14:
        out["name"] = f"Item {i + 100}"
        out["tags"] = ["red"]
        wrong |= {"name", "tags"}
        out["amount"] = i * 1.5
        wrong.discard("amount")
    return record, out, wrong


def _verifier_replies(ex_id: str, wrong: set[str]) -> list[dict]:
    fields = ["name", "amount", "tags"]
    ok = not wrong
    match = f"[{ex_id}]"
    return [
        {"tag": "T1", "match": match, "reply_text": f"<think>checked {ex_id}</think><score>{90 if ok else 30}</score>"},
        {"tag": "T2_numeric", "match": match, "reply_payload": {
            f: {"explanation": f"{f} checked", "score": 20 if f in wrong else 95} for f in fields}},
        {"tag": "T3_likert", "match": match, "reply_payload": {
            f: {"explanation": f"{f} looked at", "confidence": "Uncertain" if f in wrong else "Certain"} for f in fields}},
        {"tag": "T4_flag_accuracy", "match": match, "reply_payload": {
            "explanation": "reviewed", "confidence_score": 85 if ok else 15,
            "incorrect_fields": [{"field_name": f, "explanation": f"{f} disagrees"} for f in sorted(wrong)]}},
        {"tag": "T5_flag_confidence", "match": match, "reply_payload": {
            "explanation": "reviewed", "rating": 8 if ok else 3,
            "incorrect_fields": [{"field_name": f, "explanation": f"{f} looks off"} for f in sorted(wrong)]}},
        {"tag": "judge_doc", "match": match, "reply_text": f"Rating: [[{8 if ok else 4}]]"},
        {"tag": "judge_fields_single", "match": match, "reply_payload": {
            f: {"explanation": "", "rating": 2 if f in wrong else 9} for f in fields}},
        *({"tag": f"judge_fields_multi:{f}", "match": match, "reply_text": f"Rating: [[{2 if f in wrong else 9}]]"}
          for f in fields),
    ]


def build_synthetic(directory: Path, with_logprobs: bool = False) -> dict[str, Path]:
    """Write dataset.jsonl, outputs.jsonl and mock.json for the 20-example benchmark."""
    directory.mkdir(parents=True, exist_ok=True)
    dataset, outputs, script = [], [], []
    for i in range(SYNTH_N):
        record, out, wrong = _synth_example(i)
        dataset.append(json.dumps(record))
        rec = {"id": record["id"], "status": "completed", "generated_output": out}
        if with_logprobs:
            rec["logprobs"] = [-0.05 if not wrong else -0.9, -0.1]
        outputs.append(json.dumps(rec))
        script += _verifier_replies(record["id"], wrong)
    paths = {"dataset": directory / "dataset.jsonl", "outputs": directory / "outputs.jsonl", "mock": directory / "mock.json"}
    paths["dataset"].write_text("\n".join(dataset) + "\n", "utf-8")
    paths["outputs"].write_text("\n".join(outputs) + "\n", "utf-8")
    paths["mock"].write_text(json.dumps({"replies": script}, indent=1), "utf-8")
    return paths


# (criterion number, PASS | FAIL | SKIP, description) from test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, text in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {text}")
