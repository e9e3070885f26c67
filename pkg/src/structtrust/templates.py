"""Verifier and judge prompt templates."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from .core import ScoringTask

PLACEHOLDERS = ("input_to_generator", "schema_text", "generated_output_text", "relevant_field")
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")

LIKERT_LABELS = ("Certain", "Mostly Certain", "Somewhat Certain", "Uncertain", "Likely Incorrect")

RESPONSE_KINDS = {
    "T1": "tagged_think_score",
    "T2_numeric": "structured_field_scores_numeric",
    "T3_likert": "structured_field_scores_likert",
    "T4_flag_accuracy": "structured_flagged_fields_accuracy",
    "T5_flag_confidence": "structured_flagged_fields_confidence",
    "judge_doc": "judge_rating_text",
    "judge_fields_single": "judge_structured_per_field",
    "judge_fields_multi": "judge_rating_text",
}
TEMPLATE_IDS = tuple(RESPONSE_KINDS)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    expected_response_kind: str

    def __post_init__(self) -> None:
        unknown = set(_PLACEHOLDER_RE.findall(self.body)) - set(PLACEHOLDERS)
        if unknown:
            raise TemplateError(f"template {self.template_id} uses unknown placeholders: {sorted(unknown)}")

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))


def _read_body(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=None)
def builtin_template(template_id: str) -> PromptTemplate:
    if template_id not in RESPONSE_KINDS:
        raise TemplateError(f"unknown template id: {template_id!r}")
    text = resources.files(__package__).joinpath("templates", f"{template_id}.txt").read_text("utf-8")
    return PromptTemplate(template_id, _read_body(text), RESPONSE_KINDS[template_id])


class TemplateSet:
    """Built-in templates, optionally overridden by ``<template_id>.txt`` files in a directory."""

    def __init__(self, override_dir: str | Path | None = None):
        self._overrides: dict[str, PromptTemplate] = {}
        if override_dir is not None:
            root = Path(override_dir)
            if not root.is_dir():
                raise TemplateError(f"template directory not found: {root}")
            for template_id in TEMPLATE_IDS:
                path = root / f"{template_id}.txt"
                if path.is_file():
                    body = _read_body(path.read_text("utf-8"))
                    self._overrides[template_id] = PromptTemplate(template_id, body, RESPONSE_KINDS[template_id])

    def get(self, template_id: str) -> PromptTemplate:
        if template_id in self._overrides:
            return self._overrides[template_id]
        return builtin_template(template_id)

    def render(self, template_id: str, task: ScoringTask, relevant_field: str | None = None) -> str:
        return render(template_id, task, relevant_field, template=self.get(template_id))


def input_text(task: ScoringTask) -> str:
    """The generator's prompt: its instructions (system message, if any) plus the user message."""
    if task.system_message:
        return f"{task.system_message}\n\n{task.user_message}"
    return task.user_message


def render(
    template_id: str,
    task: ScoringTask,
    relevant_field: str | None = None,
    template: PromptTemplate | None = None,
) -> str:
    """Fill a template for ``task``.

    ``relevant_field`` is required by (and only accepted for) the multi-call judge.
    """
    template = template or builtin_template(template_id)
    if template_id == "judge_fields_multi":
        if relevant_field is None:
            raise TemplateError("judge_fields_multi needs a relevant_field")
        if relevant_field not in task.field_names:
            raise TemplateError(f"relevant_field {relevant_field!r} is not a schema field")
    elif relevant_field is not None:
        raise TemplateError(f"{template_id} does not take a relevant_field")

    values = {
        "input_to_generator": input_text(task),
        "schema_text": task.output_schema.raw_schema_text,
        "generated_output_text": task.generated_output.to_text(),
        "relevant_field": relevant_field or "",
    }
    # single pass, so braces inside substituted values are never re-expanded
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.body)


# ---------------------------------------------------------------------------
# Structured response formats requested from the verifier
# ---------------------------------------------------------------------------


def _object(properties: dict[str, Any]) -> dict[str, Any]:
    return {
        "type": "object",
        "properties": properties,
        "required": list(properties),
        "additionalProperties": False,
    }


_FLAGGED_ENTRY = _object({"field_name": {"type": "string"}, "explanation": {"type": "string"}})


def response_schema(template_id: str, fields: list[str]) -> dict[str, Any] | None:
    """JSON schema for the structured reply of a template, or None for free-text replies."""
    if template_id == "T2_numeric":
        per_field = _object({"explanation": {"type": "string"}, "score": {"type": "number"}})
        return _object({f: per_field for f in fields})
    if template_id == "T3_likert":
        per_field = _object({"explanation": {"type": "string"}, "confidence": {"type": "string", "enum": list(LIKERT_LABELS)}})
        return _object({f: per_field for f in fields})
    if template_id in ("T4_flag_accuracy", "T5_flag_confidence"):
        score_key = "confidence_score" if template_id == "T4_flag_accuracy" else "rating"
        return _object(
            {
                "explanation": {"type": "string"},
                "incorrect_fields": {"type": "array", "items": _FLAGGED_ENTRY},
                score_key: {"type": "number"},
            }
        )
    if template_id == "judge_fields_single":
        rating = _object({"explanation": {"type": "string"}, "rating": {"type": "integer", "minimum": 0, "maximum": 10}})
        return _object({f: rating for f in fields})
    if template_id in RESPONSE_KINDS:
        return None
    raise TemplateError(f"unknown template id: {template_id!r}")
