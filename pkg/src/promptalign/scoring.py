"""Pure metric arithmetic: faithfulness scores, combined score, report rounding.

Everything here is deterministic and I/O-free. Internal comparisons always
use unrounded floats; rounding happens only at report emission, in decimal
space with half-up ties (0.8475 -> 0.848), never on binary floats directly.
"""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .model import NounChunk

__all__ = [
    "UnscorableError",
    "tifa_score",
    "vqa_score",
    "combined_score",
    "report_average",
    "vqa_question_text",
    "round_half_up",
    "format_fixed",
    "decimal_mean",
    "as_decimal",
    "quantize_half_up",
]

VQA_QUESTION_TEMPLATE = "Does this figure show {text}?"


class UnscorableError(ValueError):
    """Raised when a score is requested over empty evidence."""


def tifa_score(answers: Sequence[tuple[int, int]]) -> float:
    """Fraction of (chosen_index, correct_index) pairs that agree.

    Raises UnscorableError on an empty answer list: an absent score must stay
    absent rather than deflating to 0.0.
    """
    if not answers:
        raise UnscorableError("unscorable: no answers to grade")
    correct = sum(1 for chosen, expected in answers if chosen == expected)
    return correct / len(answers)


def vqa_score(yes_probabilities: Sequence[float]) -> float:
    """Arithmetic mean of per-chunk yes probabilities."""
    if not yes_probabilities:
        raise UnscorableError("unscorable: no chunk probabilities")
    for value in yes_probabilities:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"invalid probability: {value!r} outside [0, 1]")
    return math.fsum(yes_probabilities) / len(yes_probabilities)


def combined_score(tifa: float, vqa: float) -> float:
    """Selection objective: the plain sum of the two component scores."""
    for name, value in (("tifa", tifa), ("vqa", vqa)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"invalid score: {name}={value!r} outside [0, 1]")
    return tifa + vqa


def report_average(tifa: float, vqa: float) -> float:
    """Mean of the two scores as reported in summary tables.

    Computed in decimal space so that half-way values round up by their
    printed decimal digits, not by their binary representation.
    """
    for name, value in (("tifa", tifa), ("vqa", vqa)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"invalid score: {name}={value!r} outside [0, 1]")
    average = (as_decimal(tifa) + as_decimal(vqa)) / 2
    return float(quantize_half_up(average, 3))


def vqa_question_text(chunk: NounChunk) -> str:
    """Render the yes/no probe question for one noun chunk, verbatim template."""
    if not chunk.text.strip():
        raise ValueError("invalid chunk: text must be non-empty")
    return VQA_QUESTION_TEMPLATE.format(text=chunk.text)


# ---------------------------------------------------------------------------
# Rounding helpers shared by report emitters


def as_decimal(value: float | int | str) -> Decimal:
    # repr() gives the shortest decimal that round-trips, which is the value
    # a human reads off the number; rounding must act on that, not on the
    # raw binary expansion.
    if isinstance(value, str):
        return Decimal(value)
    return Decimal(repr(value))


def quantize_half_up(value: Decimal, places: int) -> Decimal:
    return value.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def round_half_up(value: float, places: int) -> float:
    """Round to ``places`` decimals with ties away from zero."""
    return float(quantize_half_up(as_decimal(value), places))


def format_fixed(value: float, places: int, signed: bool = False) -> str:
    """Format with exactly ``places`` decimals, half-up, optional leading sign."""
    quantized = quantize_half_up(as_decimal(value), places)
    text = f"{quantized:f}"
    if signed and not text.startswith("-"):
        text = "+" + text
    return text


def decimal_mean(values: Iterable[float]) -> Decimal:
    """Exact decimal mean of the shortest-repr decimals of ``values``."""
    items = [as_decimal(v) for v in values]
    if not items:
        raise UnscorableError("unscorable: mean of empty sequence")
    return sum(items, Decimal(0)) / len(items)
