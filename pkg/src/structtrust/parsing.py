"""Turn raw verifier replies into intermediate scores in [0, 1].

Every parser either returns a valid result or raises :class:`ParseError`;
a call whose reply fails to parse is discarded, never clamped or repaired.
"""

from __future__ import annotations

import json
import math
import re
from typing import Any, Mapping, Sequence

from .core import IntermediateScore

ALPHA = 0.1
BETA = 0.9

LIKERT_SCORES = {
    "certain": 1.0,
    "mostly certain": 0.75,
    "somewhat certain": 0.5,
    "uncertain": 0.25,
    "likely incorrect": 0.0,
}

_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")
_SCORE_RE = re.compile(r"<score>(.*?)</score>", re.DOTALL)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_RATING_RE = re.compile(r"\[\[\s*(\d+(?:\.\d+)?)\s*\]\]")


class ParseError(ValueError):
    pass


def _text(raw: str | bytes) -> str:
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="replace")
    if not isinstance(raw, str):
        raise ParseError(f"expected text, got {type(raw).__name__}")
    return raw


def _number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{what} is not a number: {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ParseError(f"{what} is not finite")
    return value


def _in_range(value: float, lo: float, hi: float, what: str) -> float:
    if not lo <= value <= hi:
        raise ParseError(f"{what} {value:g} outside [{lo:g}, {hi:g}]")
    return value


def _explanation(obj: Mapping[str, Any]) -> str:
    text = obj.get("explanation", "")
    if text is None:
        return ""
    if not isinstance(text, str):
        raise ParseError("explanation must be text")
    return text.strip()


def _field_objects(payload: Any, fields: Sequence[str]) -> dict[str, Mapping[str, Any]]:
    if not isinstance(payload, Mapping):
        raise ParseError("payload is not a JSON object")
    missing = [f for f in fields if f not in payload]
    extra = [k for k in payload if k not in fields]
    if missing or extra:
        raise ParseError(f"field set mismatch (missing={missing}, extra={extra})")
    out = {}
    for f in fields:
        if not isinstance(payload[f], Mapping):
            raise ParseError(f"entry for field {f!r} is not an object")
        out[f] = payload[f]
    return out


def as_payload(raw: Any) -> Any:
    """Accept an already-decoded payload or JSON text."""
    if isinstance(raw, (str, bytes)):
        try:
            return json.loads(_text(raw))
        except (json.JSONDecodeError, RecursionError) as err:
            raise ParseError(f"reply is not JSON: {err}") from None
    return raw


def parse_tagged_score(text: str | bytes) -> float:
    """Score from the last ``<score>…</score>`` block, 0-100 mapped to [0, 1]."""
    blocks = _SCORE_RE.findall(_text(text))
    if not blocks:
        raise ParseError("no <score> block")
    body = blocks[-1].strip()
    if not _NUMBER_RE.fullmatch(body):
        raise ParseError(f"score is not numeric: {body[:40]!r}")
    return _in_range(float(body), 0, 100, "score") / 100


def extract_think(text: str | bytes) -> str:
    blocks = _THINK_RE.findall(_text(text))
    return blocks[-1].strip() if blocks else ""


def parse_field_scores_numeric(payload: Any, fields: Sequence[str]) -> tuple[dict[str, float], dict[str, str]]:
    objs = _field_objects(payload, fields)
    scores, notes = {}, {}
    for f, obj in objs.items():
        if "score" not in obj:
            raise ParseError(f"field {f!r} has no score")
        scores[f] = _in_range(_number(obj["score"], f"score for {f!r}"), 0, 100, f"score for {f!r}") / 100
        notes[f] = _explanation(obj)
    return scores, notes


def normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


def parse_likert_label(label: Any) -> float:
    if not isinstance(label, str):
        raise ParseError(f"confidence label is not text: {label!r}")
    try:
        return LIKERT_SCORES[normalize_label(label)]
    except KeyError:
        raise ParseError(f"unrecognized confidence label: {label!r}") from None


def parse_field_scores_likert(payload: Any, fields: Sequence[str]) -> tuple[dict[str, float], dict[str, str]]:
    objs = _field_objects(payload, fields)
    scores, notes = {}, {}
    for f, obj in objs.items():
        if "confidence" not in obj:
            raise ParseError(f"field {f!r} has no confidence label")
        scores[f] = parse_likert_label(obj["confidence"])
        notes[f] = _explanation(obj)
    return scores, notes


def parse_flagged_fields(
    payload: Any,
    fields: Sequence[str],
    alpha: float = ALPHA,
    beta: float = BETA,
    scale_max: int = 100,
    call_id: str = "",
    template_id: str | None = None,
) -> IntermediateScore:
    """Doc score plus alpha/beta field scores from a list of flagged fields.

    ``scale_max`` selects the reply shape: 100 reads ``confidence_score``,
    10 reads ``rating``. Flags naming unknown fields are dropped and noted.
    """
    if scale_max not in (100, 10):
        raise ValueError("scale_max must be 100 or 10")
    if not isinstance(payload, Mapping):
        raise ParseError("payload is not a JSON object")
    key = "confidence_score" if scale_max == 100 else "rating"
    if key not in payload:
        raise ParseError(f"payload has no {key!r}")
    doc = _in_range(_number(payload[key], key), 0, scale_max, key) / scale_max
    flagged = payload.get("incorrect_fields")
    if not isinstance(flagged, list):
        raise ParseError("incorrect_fields is not a list")

    notes: list[str] = []
    reasons: dict[str, list[str]] = {}
    for entry in flagged:
        if not isinstance(entry, Mapping):
            notes.append("ignored malformed flag entry")
            continue
        name = entry.get("field_name")
        if not isinstance(name, str) or name not in fields:
            notes.append(f"ignored flag for unknown field: {name!r}"[:120])
            continue
        reason = entry.get("explanation")
        reasons.setdefault(name, [])
        if isinstance(reason, str) and reason.strip():
            reasons[name].append(reason.strip())

    doc_note = payload.get("explanation")
    return IntermediateScore(
        call_id=call_id,
        template_id=template_id or ("T4_flag_accuracy" if scale_max == 100 else "T5_flag_confidence"),
        doc_score=doc,
        field_scores={f: (alpha if f in reasons else beta) for f in fields},
        doc_explanation=doc_note.strip() if isinstance(doc_note, str) else "",
        field_explanations={f: " ".join(reasons.get(f, [])) for f in fields},
        notes=tuple(notes),
    )


def parse_judge_rating(text: str | bytes) -> float:
    """Last ``[[k]]`` marker with k in [1, 10], mapped to k/10."""
    found = _RATING_RE.findall(_text(text))
    if not found:
        raise ParseError("no [[rating]] marker")
    return _in_range(float(found[-1]), 1, 10, "rating") / 10


def parse_judge_per_field(payload: Any, fields: Sequence[str]) -> tuple[dict[str, float], dict[str, str]]:
    objs = _field_objects(payload, fields)
    scores, notes = {}, {}
    for f, obj in objs.items():
        if "rating" not in obj:
            raise ParseError(f"field {f!r} has no rating")
        scores[f] = _in_range(_number(obj["rating"], f"rating for {f!r}"), 0, 10, f"rating for {f!r}") / 10
        notes[f] = _explanation(obj)
    return scores, notes


def parse_reply(
    template_id: str,
    reply: Any,
    fields: Sequence[str],
    alpha: float = ALPHA,
    beta: float = BETA,
    call_id: str = "",
) -> IntermediateScore:
    """Parse one verifier reply (text or decoded payload) according to its template."""
    call_id = call_id or template_id
    if template_id == "T1":
        text = _text(reply)
        return IntermediateScore(call_id, template_id, doc_score=parse_tagged_score(text), doc_explanation=extract_think(text))
    if template_id in ("judge_doc",):
        text = _text(reply)
        return IntermediateScore(call_id, template_id, doc_score=parse_judge_rating(text), doc_explanation=text.strip())
    payload = as_payload(reply)
    if template_id == "T2_numeric":
        scores, notes = parse_field_scores_numeric(payload, fields)
    elif template_id == "T3_likert":
        scores, notes = parse_field_scores_likert(payload, fields)
    elif template_id == "judge_fields_single":
        scores, notes = parse_judge_per_field(payload, fields)
    elif template_id == "T4_flag_accuracy":
        return parse_flagged_fields(payload, fields, alpha, beta, 100, call_id, template_id)
    elif template_id == "T5_flag_confidence":
        return parse_flagged_fields(payload, fields, alpha, beta, 10, call_id, template_id)
    else:
        raise ValueError(f"no parser for template {template_id!r}")
    return IntermediateScore(call_id, template_id, field_scores=scores, field_explanations=notes)
