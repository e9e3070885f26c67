"""Shared data model: tasks, schemas, structured outputs, scores and reports."""

from __future__ import annotations

import ast
import io
import json
import math
import tokenize
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

CONSTRUCT_TEMPLATES = (
    "T1",
    "T2_numeric",
    "T3_likert",
    "T4_flag_accuracy",
    "T5_flag_confidence",
)
BASELINE_TEMPLATES = ("judge_doc", "judge_fields_single", "judge_fields_multi")

CALL_OUTCOMES = ("completed", "timed_out", "parse_failed", "transport_failed")


class InvalidInput(ValueError):
    """Raised when a task, schema or output cannot be constructed."""


# ---------------------------------------------------------------------------
# Value helpers
# ---------------------------------------------------------------------------


def _check_json_value(value: Any, path: str) -> None:
    if value is None or isinstance(value, (str, bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvalidInput(f"non-finite number at {path or '<root>'}")
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check_json_value(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise InvalidInput(f"non-string key {key!r} at {path or '<root>'}")
            _check_json_value(item, f"{path}.{key}" if path else key)
        return
    raise InvalidInput(f"unsupported value type {type(value).__name__} at {path or '<root>'}")


def _pythonish_to_json(text: str) -> str:
    """Rewrite bare None/True/False tokens to their JSON spellings (same lengths)."""
    mapping = {"None": "null", "True": "true", "False": "false"}
    lines = text.splitlines(keepends=True)
    for tok in tokenize.generate_tokens(io.StringIO(text).readline):
        if tok.type == tokenize.NAME and tok.string in mapping:
            row, col = tok.start
            line = lines[row - 1]
            lines[row - 1] = line[:col] + mapping[tok.string] + line[col + len(tok.string) :]
    return "".join(lines)


def parse_value_text(text: str) -> Any:
    """Parse JSON text, also accepting the Python-literal spelling (``None``, single quotes)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as json_err:
        try:
            return ast.literal_eval(text)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            pass
        try:
            return json.loads(_pythonish_to_json(text))
        except (json.JSONDecodeError, tokenize.TokenError, IndentationError, IndexError):
            raise json_err from None


def dump_value(value: Any) -> str:
    """Canonical text form of a value, as embedded in prompts."""
    return json.dumps(value, indent=2, ensure_ascii=False, allow_nan=False)


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutputSchema:
    """The generator's output schema.

    ``top_level_fields`` holds ``(name, descriptor)`` pairs in declaration
    order, where a descriptor is the JSON-Schema subtree for that field.
    ``raw_schema_text`` is exactly what gets shown to the verifier.
    """

    top_level_fields: tuple[tuple[str, Mapping[str, Any]], ...]
    raw_schema_text: str
    definitions: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        names = [name for name, _ in self.top_level_fields]
        if not names:
            raise InvalidInput("schema must declare at least one top-level field")
        if len(set(names)) != len(names):
            raise InvalidInput("schema field names must be unique")

    @classmethod
    def from_dict(cls, schema: Mapping[str, Any], raw_text: str | None = None) -> OutputSchema:
        if not isinstance(schema, Mapping):
            raise InvalidInput("schema must be a JSON object")
        props = schema.get("properties")
        if not isinstance(props, Mapping) or not props:
            raise InvalidInput("schema must have a non-empty 'properties' object")
        for name, desc in props.items():
            if not isinstance(desc, Mapping):
                raise InvalidInput(f"descriptor for field {name!r} must be an object")
        defs: dict[str, Any] = {}
        for key in ("$defs", "definitions"):
            if isinstance(schema.get(key), Mapping):
                defs.update({f"#/{key}/{k}": v for k, v in schema[key].items()})
        if raw_text is None:
            raw_text = json.dumps(schema, indent=2, ensure_ascii=False)
        return cls(tuple((str(k), v) for k, v in props.items()), raw_text, defs)

    @classmethod
    def from_text(cls, text: str) -> OutputSchema:
        try:
            parsed = json.loads(text)
        except json.JSONDecodeError as err:
            raise InvalidInput(f"schema is not valid JSON: {err}") from None
        return cls.from_dict(parsed, raw_text=text)

    @classmethod
    def from_fields(cls, fields: Mapping[str, Mapping[str, Any]] | Iterable[str]) -> OutputSchema:
        """Build an object schema from ``{name: descriptor}`` or a list of names (untyped)."""
        if not isinstance(fields, Mapping):
            fields = {name: {} for name in fields}
        schema = {
            "type": "object",
            "properties": dict(fields),
            "required": list(fields),
            "additionalProperties": False,
        }
        return cls.from_dict(schema)

    @property
    def field_names(self) -> list[str]:
        return [name for name, _ in self.top_level_fields]

    @property
    def n(self) -> int:
        return len(self.top_level_fields)

    def descriptor(self, name: str) -> Mapping[str, Any]:
        for field_name, desc in self.top_level_fields:
            if field_name == name:
                return desc
        raise KeyError(name)

    def resolve(self, desc: Mapping[str, Any]) -> Mapping[str, Any]:
        seen = set()
        while "$ref" in desc:
            ref = desc["$ref"]
            if ref in seen or ref not in self.definitions:
                break
            seen.add(ref)
            desc = self.definitions[ref]
        return desc


def top_level_fields(schema: OutputSchema) -> list[str]:
    return schema.field_names


# ---------------------------------------------------------------------------
# Structured outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuredOutput:
    """A generated structured output: ordered map of field name to JSON value."""

    values: dict[str, Any]

    def __post_init__(self) -> None:
        if not isinstance(self.values, dict):
            raise InvalidInput("structured output must be a JSON object")
        _check_json_value(self.values, "")

    @classmethod
    def from_text(cls, text: str) -> StructuredOutput:
        try:
            value = parse_value_text(text)
        except json.JSONDecodeError as err:
            raise InvalidInput(f"structured output is not valid JSON: {err}") from None
        return cls(value)

    def to_text(self) -> str:
        return dump_value(self.values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def keys(self):
        return self.values.keys()


_JSON_TYPES = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: (isinstance(v, int) and not isinstance(v, bool))
    or (isinstance(v, float) and v.is_integer()),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "array": lambda v: isinstance(v, list),
    "object": lambda v: isinstance(v, dict),
    "null": lambda v: v is None,
}


def check_value(value: Any, desc: Mapping[str, Any], path: str, schema: OutputSchema | None = None) -> list[str]:
    """Type-check ``value`` against a descriptor; returns violation messages.

    Numeric bounds (minimum/maximum) are not enforced here.
    """
    if schema is not None:
        desc = schema.resolve(desc)
    if value is None and desc.get("nullable") is True:
        return []
    for key in ("anyOf", "oneOf"):
        if isinstance(desc.get(key), list):
            branches = desc[key]
            if any(not check_value(value, b, path, schema) for b in branches):
                return []
            return [f"type mismatch: {path} matches none of the allowed types"]

    violations: list[str] = []
    declared = desc.get("type")
    if declared is not None:
        types = declared if isinstance(declared, list) else [declared]
        if not any(_JSON_TYPES.get(t, lambda v: True)(value) for t in types):
            shown = "value" if value is None else type(value).__name__
            return [f"type mismatch: {path} expected {'|'.join(map(str, types))}, got {shown}"]
    if "enum" in desc and value not in desc["enum"]:
        violations.append(f"type mismatch: {path} value {value!r} not in enum")

    if isinstance(value, list) and isinstance(desc.get("items"), Mapping):
        for i, item in enumerate(value):
            violations += check_value(item, desc["items"], f"{path}[{i}]", schema)
    if isinstance(value, dict) and isinstance(desc.get("properties"), Mapping):
        props = desc["properties"]
        for key in desc.get("required", []):
            if key not in value:
                violations.append(f"missing key: {path}.{key}")
        if desc.get("additionalProperties") is False:
            for key in value:
                if key not in props:
                    violations.append(f"extra key: {path}.{key}")
        for key, item in value.items():
            if key in props:
                violations += check_value(item, props[key], f"{path}.{key}", schema)
    return violations


def validate_output(schema: OutputSchema, output: StructuredOutput | Mapping[str, Any]) -> list[str]:
    """Return the list of violations; an empty list means the output conforms."""
    values = output.values if isinstance(output, StructuredOutput) else output
    names = schema.field_names
    violations = [f"missing key: {n}" for n in names if n not in values]
    violations += [f"extra key: {k}" for k in values if k not in names]
    for name, desc in schema.top_level_fields:
        if name in values:
            violations += check_value(values[name], desc, name, schema)
    return violations


# ---------------------------------------------------------------------------
# Tasks, scores and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoringTask:
    system_message: str
    user_message: str
    output_schema: OutputSchema
    generated_output: StructuredOutput
    generation_logprobs: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        keys = set(self.generated_output.keys())
        names = set(self.output_schema.field_names)
        if keys != names:
            missing = sorted(names - keys)
            extra = sorted(keys - names)
            raise InvalidInput(f"generated output keys do not match schema (missing={missing}, extra={extra})")
        if self.generation_logprobs is not None:
            lps = tuple(float(x) for x in self.generation_logprobs)
            if not lps:
                raise InvalidInput("generation_logprobs must be non-empty when present")
            if any(not (lp <= 0.0) for lp in lps):
                raise InvalidInput("every generation logprob must be <= 0")
            object.__setattr__(self, "generation_logprobs", lps)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScoringTask:
        """Build a task from the task-file shape ``{system, user, schema, generated_output, logprobs}``."""
        if not isinstance(data, Mapping):
            raise InvalidInput("task must be a JSON object")
        for key in ("user", "schema", "generated_output"):
            if key not in data:
                raise InvalidInput(f"task is missing {key!r}")
        raw_schema = data["schema"]
        schema = OutputSchema.from_text(raw_schema) if isinstance(raw_schema, str) else OutputSchema.from_dict(raw_schema)
        out = data["generated_output"]
        output = StructuredOutput.from_text(out) if isinstance(out, str) else StructuredOutput(out)
        return cls(
            system_message=data.get("system") or "",
            user_message=data["user"],
            output_schema=schema,
            generated_output=output,
            generation_logprobs=data.get("logprobs"),
        )

    @property
    def field_names(self) -> list[str]:
        return self.output_schema.field_names


@dataclass(frozen=True)
class IntermediateScore:
    """Parsed result of one verifier call."""

    call_id: str
    template_id: str
    doc_score: float | None = None
    field_scores: dict[str, float] | None = None
    doc_explanation: str | None = None
    field_explanations: dict[str, str] | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.doc_score is None and self.field_scores is None:
            raise InvalidInput("intermediate score needs a doc score or field scores")
        scores = list(self.field_scores.values()) if self.field_scores else []
        if self.doc_score is not None:
            scores.append(self.doc_score)
        if any(not (0.0 <= s <= 1.0) for s in scores):
            raise InvalidInput("intermediate scores must lie in [0, 1]")


@dataclass(frozen=True)
class CallRecord:
    template_id: str
    outcome: str
    latency_ms: int
    detail: str = ""


@dataclass(frozen=True)
class TrustReport:
    trustworthiness_score: float
    per_field_scores: dict[str, float]
    per_field_explanations: dict[str, str]
    doc_explanation: str
    untrustworthy_fields: tuple[str, ...]
    diagnostics: tuple[CallRecord, ...] = ()

    def to_dict(self, include_latency: bool = True) -> dict[str, Any]:
        calls = []
        for rec in self.diagnostics:
            item = {"template_id": rec.template_id, "outcome": rec.outcome}
            if include_latency:
                item["latency_ms"] = rec.latency_ms
            if rec.detail:
                item["detail"] = rec.detail
            calls.append(item)
        return {
            "trustworthiness_score": self.trustworthiness_score,
            "per_field_scores": dict(self.per_field_scores),
            "per_field_explanations": dict(self.per_field_explanations),
            "doc_explanation": self.doc_explanation,
            "untrustworthy_fields": list(self.untrustworthy_fields),
            "diagnostics": calls,
        }


def untrustworthy(per_field_scores: Mapping[str, float], threshold: float) -> tuple[str, ...]:
    """Fields scoring strictly below ``threshold``, lowest first (declaration order on ties)."""
    order = {name: i for i, name in enumerate(per_field_scores)}
    flagged = [f for f, s in per_field_scores.items() if s < threshold]
    return tuple(sorted(flagged, key=lambda f: (per_field_scores[f], order[f])))
