"""Comparison scorers: LLM-as-a-Judge variants and average token log-probability."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

from .backend import ChatBackend, ChatRequest
from .config import ScoringConfig
from .core import ScoringTask
from .engine import ScoringError
from .parsing import ParseError, as_payload, parse_judge_per_field, parse_judge_rating
from .templates import TemplateSet, response_schema


class LogprobsUnavailable(ScoringError):
    pass


@dataclass(frozen=True)
class FieldJudgement:
    scores: dict[str, float]
    failures: dict[str, str] = field(default_factory=dict)


class Judge:
    """LLM-as-a-Judge baselines sharing one backend and config."""

    def __init__(self, backend: ChatBackend, config: ScoringConfig | None = None, templates: TemplateSet | None = None):
        self.backend = backend
        self.config = config or ScoringConfig()
        self.templates = templates or TemplateSet(self.config.template_dir)

    def _request(self, template_id: str, task: ScoringTask, relevant_field: str | None = None) -> ChatRequest:
        return ChatRequest(
            messages=[{"role": "user", "content": self.templates.render(template_id, task, relevant_field)}],
            response_format=response_schema(template_id, task.field_names),
            temperature=self.config.temperature,
            model_name=self.config.model,
            tag=template_id if relevant_field is None else f"{template_id}:{relevant_field}",
            max_tokens=self.config.max_tokens,
        )

    def _dispatch(self, requests: list[ChatRequest]):
        return self.backend.dispatch_parallel(requests, self.config.deadline_ms, self.config.adaptive_timeout)

    def document(self, task: ScoringTask) -> float:
        (outcome,) = self._dispatch([self._request("judge_doc", task)])
        if not outcome.ok:
            raise ScoringError(f"judge call {outcome.status}: {outcome.error}")
        try:
            return parse_judge_rating(outcome.content or "")
        except ParseError as err:
            raise ScoringError(f"judge reply unusable: {err}") from None

    def fields_single_call(self, task: ScoringTask) -> dict[str, float]:
        (outcome,) = self._dispatch([self._request("judge_fields_single", task)])
        if not outcome.ok:
            raise ScoringError(f"judge call {outcome.status}: {outcome.error}")
        payload = outcome.structured_payload if outcome.structured_payload is not None else outcome.content
        try:
            scores, _ = parse_judge_per_field(as_payload(payload), task.field_names)
        except ParseError as err:
            raise ScoringError(f"judge reply unusable: {err}") from None
        return scores

    def fields_multi_call(self, task: ScoringTask) -> FieldJudgement:
        fields = task.field_names
        outcomes = self._dispatch([self._request("judge_fields_multi", task, f) for f in fields])
        scores, failures = {}, {}
        for f, outcome in zip(fields, outcomes):
            if not outcome.ok:
                failures[f] = f"{outcome.status}: {outcome.error}"
                continue
            try:
                scores[f] = parse_judge_rating(outcome.content or "")
            except ParseError as err:
                failures[f] = f"parse_failed: {err}"
        if not scores:
            raise ScoringError(f"every per-field judge call failed: {failures}")
        return FieldJudgement(scores, failures)


def judge_document(task: ScoringTask, backend: ChatBackend, config: ScoringConfig | None = None) -> float:
    return Judge(backend, config).document(task)


def judge_fields_single_call(task: ScoringTask, backend: ChatBackend, config: ScoringConfig | None = None) -> dict[str, float]:
    return Judge(backend, config).fields_single_call(task)


def judge_fields_multi_call(task: ScoringTask, backend: ChatBackend, config: ScoringConfig | None = None) -> FieldJudgement:
    return Judge(backend, config).fields_multi_call(task)


def logprob_score(task: ScoringTask) -> float:
    """exp(mean token logprob) over every generated token: the geometric-mean token probability."""
    if not task.generation_logprobs:
        raise LogprobsUnavailable("logprobs unavailable for this generation")
    lps = task.generation_logprobs
    avg = float(sum(map(Fraction, lps)) / len(lps))
    # keep the result strictly positive even when exp underflows
    return max(math.exp(avg), math.ulp(0.0))
