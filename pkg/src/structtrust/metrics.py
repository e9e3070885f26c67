"""Error-detection metrics. Detectors score errors LOW, so every metric treats low score as "flagged"."""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from typing import Sequence


class UndefinedMetric(ValueError):
    """The metric has no value for this input (e.g. only one class present)."""


def _split(scores: Sequence[float], is_error: Sequence[bool]) -> tuple[list[float], list[float]]:
    if len(scores) != len(is_error):
        raise ValueError("scores and labels differ in length")
    correct = [float(s) for s, e in zip(scores, is_error) if not e]
    errors = [float(s) for s, e in zip(scores, is_error) if e]
    return correct, errors


def auroc(scores: Sequence[float], is_error: Sequence[bool]) -> float:
    """P(score of a correct item > score of an erroneous one), ties counting one half."""
    correct, errors = _split(scores, is_error)
    if not correct or not errors:
        raise UndefinedMetric("AUROC needs both correct and erroneous items")
    errors.sort()
    # twice the Mann-Whitney U, kept integral so the sum is exact
    twice_u = 0
    for c in correct:
        lo = bisect_left(errors, c)
        hi = bisect_right(errors, c)
        twice_u += 2 * lo + (hi - lo)
    return twice_u / (2 * len(correct) * len(errors))


def precision_at_num_errors(scores: Sequence[float], is_error: Sequence[bool]) -> float:
    """Fraction of errors among the K lowest-scored items, K = true error count.

    Ties are broken by input position (earlier first).
    """
    if len(scores) != len(is_error):
        raise ValueError("scores and labels differ in length")
    k = sum(1 for e in is_error if e)
    if k == 0:
        raise UndefinedMetric("Precision@Num-Errors needs at least one error")
    lowest = sorted(range(len(scores)), key=lambda i: (scores[i], i))[:k]
    return sum(1 for i in lowest if is_error[i]) / k


def confidence_gap(scores: Sequence[float], is_error: Sequence[bool]) -> float:
    """Mean score of correct items minus mean score of erroneous ones."""
    correct, errors = _split(scores, is_error)
    if not correct or not errors:
        raise UndefinedMetric("Confidence Gap needs both correct and erroneous items")
    return math.fsum(correct) / len(correct) - math.fsum(errors) / len(errors)
