"""Benchmark datasets, correctness labels, generation and detector evaluation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .backend import ChatBackend, ChatRequest
from .baselines import Judge, LogprobsUnavailable, logprob_score
from .config import ScoringConfig
from .core import InvalidInput, OutputSchema, ScoringTask, StructuredOutput, parse_value_text, validate_output
from .engine import Scorer, ScoringError
from .metrics import UndefinedMetric, auroc, confidence_gap, precision_at_num_errors

log = logging.getLogger(__name__)

PROFILES = ("ordered", "unordered")
NUMERIC_TOLERANCE = Decimal("1e-9")

DETECTORS = ("construct", "judge_doc", "judge_fields_single", "judge_fields_multi", "logprob")
DOC_DETECTORS = ("construct", "judge_doc", "logprob")
FIELD_DETECTORS = ("construct", "judge_fields_single", "judge_fields_multi")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkExample:
    id: str
    system_message: str
    user_message: str
    output_schema: OutputSchema
    ground_truth: StructuredOutput
    comparison_profile: str = "ordered"

    def task(self, generated: StructuredOutput, logprobs: Sequence[float] | None = None) -> ScoringTask:
        return ScoringTask(self.system_message, self.user_message, self.output_schema, generated, logprobs)


def _example_from_record(record: Any) -> BenchmarkExample:
    if not isinstance(record, dict):
        raise DatasetError("record is not a JSON object")
    for key in ("id", "user", "schema", "ground_truth"):
        if key not in record:
            raise DatasetError(f"record is missing {key!r}")
    raw_schema = record["schema"]
    schema = OutputSchema.from_text(raw_schema) if isinstance(raw_schema, str) else OutputSchema.from_dict(raw_schema)
    truth = record["ground_truth"]
    ground_truth = StructuredOutput.from_text(truth) if isinstance(truth, str) else StructuredOutput(truth)
    profile = record.get("comparison_profile") or "ordered"
    if profile not in PROFILES:
        raise DatasetError(f"unknown comparison_profile {profile!r}")
    violations = validate_output(schema, ground_truth)
    if violations:
        raise DatasetError("ground_truth does not match schema: " + "; ".join(violations[:3]))
    return BenchmarkExample(str(record["id"]), record.get("system") or "", record["user"], schema, ground_truth, profile)


def load_dataset(path: str | Path) -> list[BenchmarkExample]:
    """Read newline-delimited JSON records ``{id, system, user, schema, ground_truth, comparison_profile}``."""
    examples: list[BenchmarkExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                example = _example_from_record(json.loads(line))
            except (json.JSONDecodeError, DatasetError, InvalidInput) as err:
                raise DatasetError(f"{path}:{lineno}: {err}") from None
            if example.id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {example.id!r}")
            seen.add(example.id)
            examples.append(example)
    return examples


# ---------------------------------------------------------------------------
# Correctness
# ---------------------------------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _numbers_equal(a: Any, b: Any) -> bool:
    try:
        return abs(Decimal(str(a)) - Decimal(str(b))) <= NUMERIC_TOLERANCE
    except InvalidOperation:
        return False


def _multiset_equal(a: list, b: list, profile: str) -> bool:
    if len(a) != len(b):
        return False
    # bipartite matching, so the result does not depend on argument order
    match_of: dict[int, int] = {}

    def augment(i: int, seen: set[int]) -> bool:
        for j in range(len(b)):
            if j in seen or not field_correct(a[i], b[j], profile):
                continue
            seen.add(j)
            if j not in match_of or augment(match_of[j], seen):
                match_of[j] = i
                return True
        return False

    return all(augment(i, set()) for i in range(len(a)))


def field_correct(predicted: Any, truth: Any, profile: str = "ordered") -> bool:
    """Deep equality of two field values under a comparison profile.

    Strings compare after trimming, numbers within 1e-9, null only equals
    null. Lists are positional under ``ordered`` and multisets under
    ``unordered``; objects compare key by key.
    """
    if predicted is None or truth is None:
        return predicted is None and truth is None
    if isinstance(predicted, str) and isinstance(truth, str):
        return predicted.strip() == truth.strip()
    if isinstance(predicted, bool) or isinstance(truth, bool):
        return isinstance(predicted, bool) and isinstance(truth, bool) and predicted == truth
    if _is_number(predicted) and _is_number(truth):
        return _numbers_equal(predicted, truth)
    if isinstance(predicted, list) and isinstance(truth, list):
        if profile == "unordered":
            return _multiset_equal(predicted, truth, profile)
        return len(predicted) == len(truth) and all(field_correct(p, t, profile) for p, t in zip(predicted, truth))
    if isinstance(predicted, dict) and isinstance(truth, dict):
        return predicted.keys() == truth.keys() and all(field_correct(predicted[k], truth[k], profile) for k in truth)
    return False


def label_fields(example: BenchmarkExample, generated: StructuredOutput) -> dict[str, bool]:
    """Per-field correctness of one generated output (top-level fields only)."""
    values = generated.values
    return {
        f: f in values and field_correct(values[f], example.ground_truth[f], example.comparison_profile)
        for f in example.output_schema.field_names
    }


def field_accuracy(results: Sequence[Mapping[str, bool]]) -> float:
    total = sum(len(r) for r in results)
    if total == 0:
        raise ValueError("field_accuracy needs at least one field")
    return sum(sum(r.values()) for r in results) / total


def document_accuracy(results: Sequence[Mapping[str, bool]]) -> float:
    if not results:
        raise ValueError("document_accuracy needs at least one example")
    return sum(1 for r in results if all(r.values())) / len(results)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationRecord:
    id: str
    status: str
    generated_output: dict[str, Any] | None = None
    logprobs: list[float] | None = None
    error: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenerationRecord:
        out = data.get("generated_output")
        if isinstance(out, str):
            out = parse_value_text(out)
        return cls(str(data["id"]), data.get("status", "completed"), out, data.get("logprobs"), data.get("error", ""))


def load_outputs(path: str | Path) -> dict[str, GenerationRecord]:
    records: dict[str, GenerationRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = GenerationRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DatasetError(f"{path}:{lineno}: {err}") from None
            records[rec.id] = rec
    return records


def generate_one(example: BenchmarkExample, backend: ChatBackend, config: ScoringConfig) -> GenerationRecord:
    messages = []
    if example.system_message:
        messages.append({"role": "system", "content": example.system_message})
    messages.append({"role": "user", "content": example.user_message})
    schema = json.loads(example.output_schema.raw_schema_text)
    request = ChatRequest(
        messages=messages,
        response_format=schema,
        want_logprobs=True,
        temperature=config.temperature,
        model_name=config.model,
        tag="generate",
        strict_schema=False,
        max_tokens=config.max_tokens,
    )
    (outcome,) = backend.dispatch_parallel([request], config.deadline_ms, config.adaptive_timeout)
    if not outcome.ok:
        return GenerationRecord(example.id, "failed", error=f"{outcome.status}: {outcome.error}")
    payload = outcome.structured_payload
    problems = validate_output(example.output_schema, payload) if isinstance(payload, dict) else ["not an object"]
    if problems:
        return GenerationRecord(example.id, "failed", error="; ".join(problems[:3]))
    lps = list(outcome.token_logprobs) if outcome.token_logprobs else None
    return GenerationRecord(example.id, "completed", payload, lps)


def generate(
    examples: Sequence[BenchmarkExample],
    backend: ChatBackend,
    config: ScoringConfig,
    existing: Mapping[str, GenerationRecord] | None = None,
) -> list[GenerationRecord]:
    """Generate outputs for every example, reusing completed records from ``existing``."""
    existing = existing or {}
    todo = [ex for ex in examples if getattr(existing.get(ex.id), "status", None) != "completed"]
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        fresh = dict(zip((ex.id for ex in todo), pool.map(lambda ex: generate_one(ex, backend, config), todo)))
    return [fresh.get(ex.id) or existing[ex.id] for ex in examples]


# ---------------------------------------------------------------------------
# Detector evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorResult:
    doc_score: float | None = None
    field_scores: dict[str, float] | None = None
    error: str | None = None
    unavailable: bool = False


@dataclass(frozen=True)
class DetectorEvaluation:
    detector: str
    level: str
    auroc: float | None
    precision_at_k: float | None
    confidence_gap: float | None
    num_examples: int
    num_errors: int
    status: str = "ok"
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["notes"] = list(self.notes)
        return d


def detector_runner(name: str, backend: ChatBackend, config: ScoringConfig) -> Callable[[ScoringTask], DetectorResult]:
    if name not in DETECTORS:
        raise ValueError(f"unknown detector {name!r}; choose from {', '.join(DETECTORS)}")
    scorer = Scorer(backend, config)
    judge = Judge(backend, config, scorer.templates)

    def run(task: ScoringTask) -> DetectorResult:
        try:
            if name == "construct":
                report = scorer.score(task)
                return DetectorResult(report.trustworthiness_score, dict(report.per_field_scores))
            if name == "judge_doc":
                return DetectorResult(doc_score=judge.document(task))
            if name == "judge_fields_single":
                return DetectorResult(field_scores=judge.fields_single_call(task))
            if name == "judge_fields_multi":
                res = judge.fields_multi_call(task)
                err = "; ".join(f"{f}: {why}" for f, why in res.failures.items()) or None
                return DetectorResult(field_scores=res.scores, error=err)
            return DetectorResult(doc_score=logprob_score(task))
        except LogprobsUnavailable as err:
            return DetectorResult(error=str(err), unavailable=True)
        except ScoringError as err:
            return DetectorResult(error=str(err))

    return run


def _evaluate_rows(
    detector: str, level: str, pairs: list[tuple[float | None, bool]], unavailable: int, failed: int
) -> DetectorEvaluation:
    scored = [(s, e) for s, e in pairs if s is not None]
    notes = []
    if failed:
        notes.append(f"{failed} item(s) without a score")
    if not scored:
        status = "unavailable" if unavailable else "failed"
        return DetectorEvaluation(detector, level, None, None, None, 0, 0, status, tuple(notes))
    scores = [s for s, _ in scored]
    labels = [e for _, e in scored]
    values = {}
    for metric, fn in (("auroc", auroc), ("precision_at_k", precision_at_num_errors), ("confidence_gap", confidence_gap)):
        try:
            values[metric] = fn(scores, labels)
        except UndefinedMetric as err:
            values[metric] = None
            notes.append(f"{metric} undefined: {err}")
    return DetectorEvaluation(detector, level, num_examples=len(scored), num_errors=sum(labels), notes=tuple(notes), **values)


@dataclass
class EvaluationReport:
    field_accuracy: float
    document_accuracy: float
    num_examples: int
    skipped: list[dict[str, str]]
    rows: list[DetectorEvaluation]
    examples: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": {
                "field_accuracy": self.field_accuracy,
                "document_accuracy": self.document_accuracy,
                "num_examples": self.num_examples,
            },
            "skipped": self.skipped,
            "detectors": [r.to_dict() for r in self.rows],
            "examples": self.examples,
        }


def evaluate(
    examples: Sequence[BenchmarkExample],
    outputs: Mapping[str, GenerationRecord],
    detectors: Sequence[str],
    backend: ChatBackend | None,
    config: ScoringConfig,
) -> EvaluationReport:
    """Label every generated output, run each detector on it, and compute the metric table."""
    if not detectors:
        raise ValueError("at least one detector is required")
    runners = {d: detector_runner(d, backend, config) for d in detectors}

    usable, skipped = [], []
    for ex in examples:
        rec = outputs.get(ex.id)
        if rec is None or rec.status != "completed" or rec.generated_output is None:
            skipped.append({"id": ex.id, "reason": "no generated output" if rec is None else (rec.error or rec.status)})
            continue
        try:
            task = ex.task(StructuredOutput(rec.generated_output), rec.logprobs)
        except InvalidInput as err:
            skipped.append({"id": ex.id, "reason": str(err)})
            continue
        usable.append((ex, task))
    if not usable:
        raise ValueError("no evaluable examples")

    labels = [label_fields(ex, task.generated_output) for ex, task in usable]

    def run_all(item: tuple[BenchmarkExample, ScoringTask]) -> dict[str, DetectorResult]:
        return {d: runners[d](item[1]) for d in detectors}

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(pool.map(run_all, usable))

    rows = []
    for d in detectors:
        per = [r[d] for r in results]
        unavailable = sum(1 for r in per if r.unavailable)
        if d in DOC_DETECTORS:
            pairs = [(r.doc_score, not all(lab.values())) for r, lab in zip(per, labels)]
            rows.append(_evaluate_rows(d, "document", pairs, unavailable, sum(1 for s, _ in pairs if s is None)))
        if d in FIELD_DETECTORS:
            pairs = [
                ((r.field_scores or {}).get(f), not ok)
                for r, lab in zip(per, labels)
                for f, ok in lab.items()
            ]
            rows.append(_evaluate_rows(d, "field", pairs, unavailable, sum(1 for s, _ in pairs if s is None)))

    example_rows = []
    for (ex, _), lab, res in zip(usable, labels, results):
        example_rows.append(
            {
                "id": ex.id,
                "document_correct": all(lab.values()),
                "field_correct": lab,
                "scores": {
                    d: {"document": r.doc_score, "fields": r.field_scores, "error": r.error}
                    for d, r in res.items()
                },
            }
        )
    return EvaluationReport(
        field_accuracy=field_accuracy(labels),
        document_accuracy=document_accuracy(labels),
        num_examples=len(usable),
        skipped=skipped,
        rows=rows,
        examples=example_rows,
    )


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def render_table(report: EvaluationReport) -> str:
    """Plain-text summary: accuracies plus one line per detector and level."""
    lines = [
        f"Examples evaluated: {report.num_examples} (skipped: {len(report.skipped)})",
        f"Field Accuracy:     {report.field_accuracy:.3f}",
        f"Document Accuracy:  {report.document_accuracy:.3f}",
        "",
    ]
    header = f"{'detector':<22}{'level':<10}{'AUROC':>8}{'P@NumErr':>10}{'ConfGap':>9}{'N':>6}{'errors':>8}  status"
    lines.append(header)
    lines.append("-" * len(header))
    for r in report.rows:
        lines.append(
            f"{r.detector:<22}{r.level:<10}{_fmt(r.auroc):>8}{_fmt(r.precision_at_k):>10}"
            f"{_fmt(r.confidence_gap):>9}{r.num_examples:>6}{r.num_errors:>8}  {r.status}"
        )
        for note in r.notes:
            lines.append(f"    note: {note}")
    return "\n".join(lines) + "\n"
