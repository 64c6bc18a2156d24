"""Aggregation tables, deltas, human-score correlation, and call-cost reports.

All functions are pure. Means and deltas are computed in decimal space from
the shortest decimal representation of their inputs, then rounded half-up
(3 decimals for table means, 4 for correlations and deltas), matching how
the numbers are printed rather than how floats happen to fall in binary.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable, Mapping, Sequence

from .datastore import StoredRecord, iter_jsonl
from .model import BackendCallStats, HumanRating, RatingCase
from .scoring import as_decimal, format_fixed, quantize_half_up

__all__ = [
    "ScoredRow",
    "TableRow",
    "CorrelationMatrix",
    "rows_from_records",
    "scores_from_records",
    "aggregate",
    "group_means",
    "delta",
    "pearson",
    "correlate_human",
    "cost_report",
    "load_ratings",
    "render_table",
    "render_correlations",
]


@dataclass(frozen=True)
class ScoredRow:
    """One record's contribution to a summary table."""

    dataset: str
    mode: str
    tifa: float
    vqa: float


@dataclass(frozen=True)
class TableRow:
    dataset: str
    mode: str
    mean_tifa: float
    mean_vqa: float
    mean_average: float
    n: int


def rows_from_records(stored: Iterable[StoredRecord], use_final: bool = True) -> list[ScoredRow]:
    """Project persisted records onto summary rows.

    ``use_final`` False reads the original (pre-optimization) scores instead,
    which is how an "original prompts" table row is produced from the same
    record file.
    """
    rows = []
    for item in stored:
        bundle = item.record.final_score if use_final else item.record.original_score
        if bundle.tifa is None or bundle.vqa is None:
            continue
        rows.append(
            ScoredRow(
                dataset=item.record.prompt.dataset,
                mode=item.mode,
                tifa=bundle.tifa,
                vqa=bundle.vqa,
            )
        )
    return rows


def group_means(rows: Sequence[ScoredRow]) -> dict[tuple[str, str], tuple[float, float, float]]:
    """Unrounded per-group means of tifa, vqa, and the per-row average."""
    result = {}
    for key, items in _grouped(rows).items():
        tifa = math.fsum(r.tifa for r in items) / len(items)
        vqa = math.fsum(r.vqa for r in items) / len(items)
        avg = math.fsum((r.tifa + r.vqa) / 2 for r in items) / len(items)
        result[key] = (tifa, vqa, avg)
    return result


def aggregate(rows: Sequence[ScoredRow]) -> list[TableRow]:
    """Per-(dataset, mode) means, rounded half-up to 3 decimals.

    The average column is the mean of per-row (tifa + vqa) / 2, carried in
    decimal space so half-way values round by their printed digits.
    """
    table = []
    for (dataset, mode), items in sorted(_grouped(rows).items()):
        mean_tifa = _decimal_mean([as_decimal(r.tifa) for r in items])
        mean_vqa = _decimal_mean([as_decimal(r.vqa) for r in items])
        mean_avg = _decimal_mean([(as_decimal(r.tifa) + as_decimal(r.vqa)) / 2 for r in items])
        table.append(
            TableRow(
                dataset=dataset,
                mode=mode,
                mean_tifa=float(quantize_half_up(mean_tifa, 3)),
                mean_vqa=float(quantize_half_up(mean_vqa, 3)),
                mean_average=float(quantize_half_up(mean_avg, 3)),
                n=len(items),
            )
        )
    return table


def _grouped(rows: Sequence[ScoredRow]) -> dict[tuple[str, str], list[ScoredRow]]:
    groups: dict[tuple[str, str], list[ScoredRow]] = defaultdict(list)
    for row in rows:
        groups[(row.dataset, row.mode)].append(row)
    return groups


def _decimal_mean(values: Sequence[Decimal]) -> Decimal:
    return sum(values, Decimal(0)) / len(values)


def delta(before: float, after: float) -> float:
    """Change after minus before, rounded half-up to 4 decimals."""
    return float(quantize_half_up(as_decimal(after) - as_decimal(before), 4))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation of two equal-length series."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("need at least two points")
    mean_x = math.fsum(x) / len(x)
    mean_y = math.fsum(y) / len(y)
    dx = [value - mean_x for value in x]
    dy = [value - mean_y for value in y]
    var_x = math.fsum(d * d for d in dx)
    var_y = math.fsum(d * d for d in dy)
    if var_x == 0.0 or var_y == 0.0:
        raise ValueError("undefined correlation: constant series")
    return math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(var_x * var_y)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pearson r between each human axis and each automatic score."""

    alignment_tifa: float
    alignment_vqa: float
    structure_tifa: float
    structure_vqa: float
    n: int

    def as_dict(self) -> dict[str, float | int]:
        return {
            "alignment_tifa": self.alignment_tifa,
            "alignment_vqa": self.alignment_vqa,
            "structure_tifa": self.structure_tifa,
            "structure_vqa": self.structure_vqa,
            "n": self.n,
        }


def correlate_human(
    ratings: Sequence[HumanRating],
    scores: Mapping[tuple[str, str], tuple[float, float]],
    pool_cases: bool = True,
) -> CorrelationMatrix | dict[str, CorrelationMatrix]:
    """Correlate annotator ratings with automatic scores.

    Ratings are averaged across annotators per (prompt, case) before pairing
    with that case's (tifa, vqa). With ``pool_cases`` both cases enter one
    series (the default); otherwise one matrix per case is returned.
    """
    grouped: dict[tuple[str, str], list[HumanRating]] = defaultdict(list)
    for rating in ratings:
        grouped[(rating.prompt_id, rating.case.value)].append(rating)

    missing = sorted({key[0] for key in grouped if key not in scores})
    if missing:
        raise ValueError("no automatic scores for prompt ids: " + ", ".join(missing))

    def matrix_for(keys: list[tuple[str, str]]) -> CorrelationMatrix:
        alignment = []
        structure = []
        tifa = []
        vqa = []
        for key in sorted(keys):
            items = grouped[key]
            alignment.append(math.fsum(r.alignment for r in items) / len(items))
            structure.append(math.fsum(r.structure for r in items) / len(items))
            tifa.append(scores[key][0])
            vqa.append(scores[key][1])
        return CorrelationMatrix(
            alignment_tifa=pearson(alignment, tifa),
            alignment_vqa=pearson(alignment, vqa),
            structure_tifa=pearson(structure, tifa),
            structure_vqa=pearson(structure, vqa),
            n=len(keys),
        )

    if pool_cases:
        return matrix_for(list(grouped))
    return {
        case.value: matrix_for([key for key in grouped if key[1] == case.value])
        for case in RatingCase
        if any(key[1] == case.value for key in grouped)
    }


def scores_from_records(stored: Iterable[StoredRecord]) -> dict[tuple[str, str], tuple[float, float]]:
    """Per-(prompt, case) automatic scores, original and optimized."""
    scores: dict[tuple[str, str], tuple[float, float]] = {}
    for item in stored:
        record = item.record
        if record.original_score.tifa is not None and record.original_score.vqa is not None:
            scores[(record.prompt.id, "original")] = (
                record.original_score.tifa,
                record.original_score.vqa,
            )
        if record.final_score.tifa is not None and record.final_score.vqa is not None:
            scores[(record.prompt.id, "optimized")] = (
                record.final_score.tifa,
                record.final_score.vqa,
            )
    return scores


def cost_report(
    stats_by_mode: Mapping[str, Sequence[BackendCallStats]],
    *,
    iterative_mode: str = "iterative",
    one_pass_mode: str = "one_pass",
    k: int | None = None,
    m: int | None = None,
) -> dict:
    """Total calls per backend kind per mode, plus cross-mode cost ratios.

    When ``k`` and ``m`` are given, the iterative image-generation count is
    checked against records * (1 + k * m). A one-pass mode with zero scoring
    calls yields an infinite ratio, flagged rather than divided.
    """
    report: dict = {"modes": {}}
    totals: dict[str, BackendCallStats] = {}
    for mode, stats in stats_by_mode.items():
        total = sum(stats, BackendCallStats())
        totals[mode] = total
        report["modes"][mode] = {
            "records": len(stats),
            "totals": total.as_dict(),
            "scoring_calls": total.scoring_calls(),
        }

    if iterative_mode in totals and k is not None and m is not None:
        expected = len(stats_by_mode[iterative_mode]) * (1 + k * m)
        actual = totals[iterative_mode].image_gen_calls
        report["expected_image_gen_calls"] = expected
        report["image_gen_matches_expected"] = actual == expected

    if one_pass_mode in totals:
        scoring = totals[one_pass_mode].scoring_calls()
        report["one_pass_scoring_calls"] = scoring
        report["one_pass_is_scoring_free"] = scoring == 0

    if iterative_mode in totals and one_pass_mode in totals:
        iterative_scoring = totals[iterative_mode].scoring_calls()
        one_pass_scoring = totals[one_pass_mode].scoring_calls()
        if one_pass_scoring == 0:
            report["scoring_call_ratio"] = None
            report["note"] = "one-pass performs no scoring"
        else:
            report["scoring_call_ratio"] = iterative_scoring / one_pass_scoring
    return report


def load_ratings(path) -> list[HumanRating]:
    """Read annotator ratings from JSONL; integer scores must lie in 0..4."""
    ratings = []
    for line_no, data in iter_jsonl(path):
        alignment = int(data["alignment"])
        structure = int(data["structure"])
        if not 0 <= alignment <= 4 or not 0 <= structure <= 4:
            raise ValueError(f"{path}: line {line_no}: ratings must lie in [0, 4]")
        ratings.append(
            HumanRating(
                prompt_id=str(data["prompt_id"]),
                annotator_id=str(data["annotator_id"]),
                alignment=alignment,
                structure=structure,
                case=RatingCase(data["case"]),
            )
        )
    return ratings


# ---------------------------------------------------------------------------
# Rendering


def render_table(rows: Sequence[TableRow]) -> str:
    """Aligned-column plain text, one line per (dataset, mode) group."""
    header = ("dataset", "mode", "tifa", "vqa", "average", "n")
    body = [
        (
            row.dataset,
            row.mode,
            format_fixed(row.mean_tifa, 3),
            format_fixed(row.mean_vqa, 3),
            format_fixed(row.mean_average, 3),
            str(row.n),
        )
        for row in rows
    ]
    widths = [max(len(header[i]), *(len(line[i]) for line in body)) if body else len(header[i]) for i in range(6)]
    lines = ["  ".join(header[i].ljust(widths[i]) for i in range(6))]
    for line in body:
        lines.append("  ".join(line[i].ljust(widths[i]) for i in range(6)))
    return "\n".join(lines)


def render_correlations(matrix: CorrelationMatrix) -> str:
    lines = [
        "human axis  tifa     vqa",
        f"alignment   {format_fixed(matrix.alignment_tifa, 4, signed=True)}  {format_fixed(matrix.alignment_vqa, 4, signed=True)}",
        f"structure   {format_fixed(matrix.structure_tifa, 4, signed=True)}  {format_fixed(matrix.structure_vqa, 4, signed=True)}",
        f"n = {matrix.n}",
    ]
    return "\n".join(lines)
