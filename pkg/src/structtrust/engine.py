"""The ensemble scorer: five verifier calls, parsed and aggregated into a TrustReport."""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .backend import ChatBackend, ChatRequest
from .config import ScoringConfig
from .core import CONSTRUCT_TEMPLATES, CallRecord, IntermediateScore, ScoringTask, TrustReport, untrustworthy
from .parsing import ParseError, parse_reply
from .templates import TemplateSet, response_schema

DEFAULT_HARMONIC = ("T2_numeric", "T3_likert")


class ScoringError(RuntimeError):
    pass


def harmonic_mean(scores: Sequence[float]) -> float:
    """n / sum(1/s), evaluated exactly and rounded once; zero if any score is zero."""
    scores = list(scores)
    if not scores:
        raise ValueError("harmonic_mean of an empty list")
    if any(s == 0 for s in scores):
        return 0.0
    return float(len(scores) / sum(1 / Fraction(s) for s in scores))


def mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def _order(score: IntermediateScore) -> tuple[int, str]:
    idx = CONSTRUCT_TEMPLATES.index(score.template_id) if score.template_id in CONSTRUCT_TEMPLATES else len(CONSTRUCT_TEMPLATES)
    return idx, score.call_id


def doc_level_scores(
    intermediates: Iterable[IntermediateScore], harmonic_templates: Sequence[str] = DEFAULT_HARMONIC
) -> list[tuple[float, IntermediateScore]]:
    """Every intermediate doc-level score: direct ones plus harmonic means of field-scoring calls."""
    out = []
    for inter in intermediates:
        if inter.doc_score is not None:
            out.append((inter.doc_score, inter))
        elif inter.field_scores and inter.template_id in harmonic_templates:
            out.append((harmonic_mean(list(inter.field_scores.values())), inter))
    return out


def aggregate(
    intermediates: Sequence[IntermediateScore],
    fields: Sequence[str],
    harmonic_templates: Sequence[str] = DEFAULT_HARMONIC,
) -> tuple[float, dict[str, float]]:
    """Arithmetic means of the surviving doc-level and field-level intermediates."""
    docs = [s for s, _ in doc_level_scores(intermediates, harmonic_templates)]
    field_sources = [i for i in intermediates if i.field_scores is not None]
    if not docs or not field_sources:
        raise ScoringError("insufficient verifier signal")
    per_field = {f: mean(i.field_scores[f] for i in field_sources) for f in fields}
    return mean(docs), per_field


def select_explanations(
    intermediates: Sequence[IntermediateScore],
    per_field: Mapping[str, float],
    harmonic_templates: Sequence[str] = DEFAULT_HARMONIC,
) -> tuple[str, dict[str, str]]:
    """Explanation from the lowest-scoring call, doc-level and per field.

    Ties go to the earlier template; calls with empty explanations are skipped.
    """
    ranked = sorted(doc_level_scores(intermediates, harmonic_templates), key=lambda p: (p[0], _order(p[1])))
    doc_expl = next((i.doc_explanation for _, i in ranked if i.doc_explanation), "")

    field_calls = [i for i in intermediates if i.field_scores is not None]
    field_expl = {}
    for f in per_field:
        candidates = sorted(field_calls, key=lambda i: (i.field_scores[f], _order(i)))
        field_expl[f] = next(
            (i.field_explanations[f] for i in candidates if i.field_explanations and i.field_explanations.get(f)), ""
        )
    return doc_expl, field_expl


class Scorer:
    """Scores tasks against one backend; reusable and safe to share across threads."""

    def __init__(self, backend: ChatBackend, config: ScoringConfig | None = None, templates: TemplateSet | None = None):
        self.backend = backend
        self.config = config or ScoringConfig()
        self.templates = templates or TemplateSet(self.config.template_dir)

    def requests(self, task: ScoringTask) -> list[ChatRequest]:
        fields = task.field_names
        return [
            ChatRequest(
                messages=[{"role": "user", "content": self.templates.render(tid, task)}],
                response_format=response_schema(tid, fields),
                temperature=self.config.temperature,
                model_name=self.config.model,
                tag=tid,
                max_tokens=self.config.max_tokens,
            )
            for tid in CONSTRUCT_TEMPLATES
        ]

    def intermediates(self, task: ScoringTask) -> tuple[list[IntermediateScore], list[CallRecord]]:
        cfg = self.config
        outcomes = self.backend.dispatch_parallel(self.requests(task), cfg.deadline_ms, cfg.adaptive_timeout)
        survivors, records = [], []
        for tid, outcome in zip(CONSTRUCT_TEMPLATES, outcomes):
            if not outcome.ok:
                records.append(CallRecord(tid, outcome.status, outcome.latency_ms, outcome.error))
                continue
            reply = outcome.structured_payload if outcome.structured_payload is not None else outcome.content
            try:
                inter = parse_reply(tid, reply, task.field_names, cfg.alpha, cfg.beta, call_id=tid)
            except ParseError as err:
                records.append(CallRecord(tid, "parse_failed", outcome.latency_ms, str(err)))
                continue
            survivors.append(inter)
            records.append(CallRecord(tid, "completed", outcome.latency_ms, "; ".join(inter.notes)))
        return survivors, records

    def score(self, task: ScoringTask) -> TrustReport:
        survivors, records = self.intermediates(task)
        harmonic = self.config.harmonic_templates
        try:
            doc, per_field = aggregate(survivors, task.field_names, harmonic)
        except ScoringError as err:
            failed = ", ".join(f"{r.template_id}={r.outcome}" for r in records if r.outcome != "completed")
            raise ScoringError(f"{err} ({failed or 'no usable calls'})") from None
        doc_expl, field_expl = select_explanations(survivors, per_field, harmonic)
        return TrustReport(
            trustworthiness_score=doc,
            per_field_scores=per_field,
            per_field_explanations=field_expl,
            doc_explanation=doc_expl,
            untrustworthy_fields=untrustworthy(per_field, self.config.field_threshold),
            diagnostics=tuple(records),
        )


def score(task: ScoringTask, backend: ChatBackend, config: ScoringConfig | None = None) -> TrustReport:
    return Scorer(backend, config).score(task)
