"""Trustworthiness scores for LLM structured outputs, per document and per field."""

from .backend import ChatOutcome, ChatRequest, MockBackend, OpenAIBackend, dispatch_parallel
from .config import ScoringConfig, load_config
from .core import (
    IntermediateScore,
    OutputSchema,
    ScoringTask,
    StructuredOutput,
    TrustReport,
    top_level_fields,
    validate_output,
)
from .engine import Scorer, ScoringError, aggregate, harmonic_mean, score, select_explanations

__all__ = [
    "ChatOutcome",
    "ChatRequest",
    "IntermediateScore",
    "MockBackend",
    "OpenAIBackend",
    "OutputSchema",
    "Scorer",
    "ScoringConfig",
    "ScoringError",
    "ScoringTask",
    "StructuredOutput",
    "TrustReport",
    "aggregate",
    "dispatch_parallel",
    "harmonic_mean",
    "load_config",
    "score",
    "select_explanations",
    "top_level_fields",
    "validate_output",
]
