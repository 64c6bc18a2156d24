"""Shared value types for the prompt-alignment pipeline.

Every type here is an immutable value: safe to share between threads, safe
to hash into cache keys, and serializable to plain JSON dicts via the
``*_to_dict`` / ``*_from_dict`` helpers at the bottom of the module.
No I/O and no backend logic lives here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any

__all__ = [
    "Provenance",
    "QuestionCategory",
    "RatingCase",
    "PromptRecord",
    "Candidate",
    "ImageRef",
    "NounChunk",
    "McQuestion",
    "AnswerOutcome",
    "ChunkProbability",
    "ScoreBundle",
    "ScoredCandidate",
    "IterationTrace",
    "OptimizationRecord",
    "ExamplePair",
    "BackendCallStats",
    "HumanRating",
    "validate_record",
    "record_to_dict",
    "record_from_dict",
]


class Provenance(str, enum.Enum):
    ORIGINAL = "original"
    PARAPHRASE = "paraphrase"
    FINETUNED_ONE_PASS = "finetuned_one_pass"
    ICL_ONE_PASS = "icl_one_pass"


class QuestionCategory(str, enum.Enum):
    OBJECT = "object"
    ATTRIBUTE = "attribute"
    RELATIONSHIP = "relationship"
    OTHER = "other"


class RatingCase(str, enum.Enum):
    ORIGINAL = "original"
    OPTIMIZED = "optimized"


@dataclass(frozen=True)
class PromptRecord:
    """A user-written prompt plus dataset provenance."""

    id: str
    text: str
    dataset: str
    created_at: str = ""


@dataclass(frozen=True)
class Candidate:
    """One prompt text competing within an optimization iteration.

    ``index`` is the 0-based position within its iteration's pool and
    ``iteration`` the 0-based round it belongs to.
    """

    index: int
    text: str
    provenance: Provenance
    iteration: int


@dataclass(frozen=True)
class ImageRef:
    """Opaque handle to a generated image.

    ``content_id`` is a deterministic hash of the image bytes; no pixel data
    is kept in memory.
    """

    content_id: str
    locator: str
    generator_id: str
    generation_seed: int


@dataclass(frozen=True)
class NounChunk:
    """A content-bearing nominal phrase, always taken from the original prompt."""

    text: str
    source_prompt_id: str


@dataclass(frozen=True)
class McQuestion:
    """A multiple-choice question probing one element of the prompt."""

    question: str
    options: tuple[str, ...]
    correct_index: int
    category: QuestionCategory


@dataclass(frozen=True)
class AnswerOutcome:
    question_id: str
    chosen_index: int
    correct: bool


@dataclass(frozen=True)
class ChunkProbability:
    chunk_text: str
    yes_probability: float


@dataclass(frozen=True)
class ScoreBundle:
    """Faithfulness scores for one (candidate, image) pair.

    ``tifa`` and ``vqa`` are ``None`` when their evidence list is empty:
    an unscored bundle is explicit, never a silent 0.0. ``combined`` is the
    plain sum and is ``None`` unless both components are present.
    """

    tifa: float | None
    vqa: float | None
    combined: float | None
    per_question: tuple[AnswerOutcome, ...] = ()
    per_chunk: tuple[ChunkProbability, ...] = ()

    @classmethod
    def from_evidence(
        cls,
        per_question: tuple[AnswerOutcome, ...],
        per_chunk: tuple[ChunkProbability, ...],
    ) -> "ScoreBundle":
        tifa = _tifa_of(per_question)
        vqa = _vqa_of(per_chunk)
        combined = tifa + vqa if tifa is not None and vqa is not None else None
        return cls(tifa=tifa, vqa=vqa, combined=combined, per_question=tuple(per_question), per_chunk=tuple(per_chunk))

    @property
    def is_scored(self) -> bool:
        return self.combined is not None


def _tifa_of(per_question: tuple[AnswerOutcome, ...]) -> float | None:
    if not per_question:
        return None
    return sum(1 for outcome in per_question if outcome.correct) / len(per_question)


def _vqa_of(per_chunk: tuple[ChunkProbability, ...]) -> float | None:
    if not per_chunk:
        return None
    return math.fsum(entry.yes_probability for entry in per_chunk) / len(per_chunk)


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: Candidate
    image: ImageRef
    scores: ScoreBundle


@dataclass(frozen=True)
class IterationTrace:
    """One optimization round: the pool that was scored and what was picked.

    ``failures`` lists human-readable notes for candidates that could not be
    scored; selection then ran over the surviving pool.
    """

    iteration: int
    seed_text: str
    candidates: tuple[ScoredCandidate, ...]
    selected_index: int
    failures: tuple[str, ...] = ()


@dataclass(frozen=True)
class BackendCallStats:
    """Exact call counts per backend kind for one unit of work."""

    paraphraser_calls: int = 0
    image_gen_calls: int = 0
    question_gen_calls: int = 0
    chunk_extract_calls: int = 0
    vqa_answer_calls: int = 0
    yes_prob_calls: int = 0
    one_pass_llm_calls: int = 0

    def __add__(self, other: "BackendCallStats") -> "BackendCallStats":
        return BackendCallStats(
            paraphraser_calls=self.paraphraser_calls + other.paraphraser_calls,
            image_gen_calls=self.image_gen_calls + other.image_gen_calls,
            question_gen_calls=self.question_gen_calls + other.question_gen_calls,
            chunk_extract_calls=self.chunk_extract_calls + other.chunk_extract_calls,
            vqa_answer_calls=self.vqa_answer_calls + other.vqa_answer_calls,
            yes_prob_calls=self.yes_prob_calls + other.yes_prob_calls,
            one_pass_llm_calls=self.one_pass_llm_calls + other.one_pass_llm_calls,
        )

    def scoring_calls(self) -> int:
        """Calls attributable to image scoring (everything except the LLM passes)."""
        return (
            self.image_gen_calls
            + self.question_gen_calls
            + self.chunk_extract_calls
            + self.vqa_answer_calls
            + self.yes_prob_calls
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "paraphraser_calls": self.paraphraser_calls,
            "image_gen_calls": self.image_gen_calls,
            "question_gen_calls": self.question_gen_calls,
            "chunk_extract_calls": self.chunk_extract_calls,
            "vqa_answer_calls": self.vqa_answer_calls,
            "yes_prob_calls": self.yes_prob_calls,
            "one_pass_llm_calls": self.one_pass_llm_calls,
        }


@dataclass(frozen=True)
class OptimizationRecord:
    """Full trace of one iterative optimization run for one prompt."""

    prompt: PromptRecord
    original_score: ScoreBundle
    traces: tuple[IterationTrace, ...]
    final_text: str
    final_score: ScoreBundle
    stats: BackendCallStats
    engine_seed: int
    config_fingerprint: str

    @property
    def combined_gain(self) -> float:
        if self.final_score.combined is None or self.original_score.combined is None:
            return 0.0
        return self.final_score.combined - self.original_score.combined


@dataclass(frozen=True)
class ExamplePair:
    """An (original, optimized) prompt pair used for SFT export or ICL history."""

    original: str
    optimized: str
    source_record_id: str = ""
    combined_gain: float = 0.0

    @classmethod
    def from_record(cls, record: OptimizationRecord) -> "ExamplePair":
        return cls(
            original=record.prompt.text,
            optimized=record.final_text,
            source_record_id=record.prompt.id,
            combined_gain=record.combined_gain,
        )


@dataclass(frozen=True)
class HumanRating:
    """One annotator's 0..4 ratings for one (prompt, case) image."""

    prompt_id: str
    annotator_id: str
    alignment: int
    structure: int
    case: RatingCase


# ---------------------------------------------------------------------------
# Validation


def validate_record(record: OptimizationRecord) -> list[str]:
    """Check every structural invariant of an OptimizationRecord.

    Returns an empty list when the record is well formed; otherwise one
    human-readable violation per broken invariant, each naming the offending
    field. Violations are data, not errors: nothing is raised.
    """
    violations: list[str] = []

    if not record.prompt.text.strip():
        violations.append("prompt.text: must be non-empty after whitespace trimming")
    if not record.prompt.id:
        violations.append("prompt.id: must be non-empty")

    violations.extend(_check_bundle(record.original_score, "original_score"))

    for pos, trace in enumerate(record.traces):
        prefix = f"traces[{pos}]"
        if trace.iteration != pos:
            violations.append(f"{prefix}.iteration: expected {pos}, found {trace.iteration}")
        violations.extend(_check_trace(trace, prefix))

    if record.traces:
        last = record.traces[-1]
        if 0 <= last.selected_index < len(last.candidates):
            winner = last.candidates[last.selected_index].candidate.text
            if record.final_text != winner:
                violations.append("final_text: must equal the selected candidate text of the last trace")

    violations.extend(_check_bundle(record.final_score, "final_score"))
    if (
        record.final_score.combined is not None
        and record.original_score.combined is not None
        and record.final_score.combined < record.original_score.combined
    ):
        violations.append("final_score.combined: must be >= original_score.combined")

    for name, value in record.stats.as_dict().items():
        if value < 0:
            violations.append(f"stats.{name}: must be non-negative")

    if not record.config_fingerprint:
        violations.append("config_fingerprint: must be non-empty")

    return violations


def _check_trace(trace: IterationTrace, prefix: str) -> list[str]:
    violations: list[str] = []
    if trace.iteration < 0:
        violations.append(f"{prefix}.iteration: must be >= 0")

    for pos, scored in enumerate(trace.candidates):
        cand = scored.candidate
        cprefix = f"{prefix}.candidates[{pos}]"
        if cand.index != pos:
            violations.append(f"{cprefix}.index: indices must be contiguous starting at 0")
        if not cand.text.strip():
            violations.append(f"{cprefix}.text: must be non-empty")
        if cand.iteration != trace.iteration:
            violations.append(f"{cprefix}.iteration: must match the trace iteration")
        if cand.provenance is Provenance.ORIGINAL and trace.iteration != 0:
            violations.append(f"{cprefix}.provenance: original candidates belong to iteration 0 only")
        if not scored.image.content_id:
            violations.append(f"{cprefix}.image.content_id: must be non-empty")
        violations.extend(_check_bundle(scored.scores, f"{cprefix}.scores"))

    originals = sum(
        1 for scored in trace.candidates if scored.candidate.provenance is Provenance.ORIGINAL
    )
    if originals > 1:
        violations.append(f"{prefix}.candidates: at most one candidate may carry provenance=original")

    if not 0 <= trace.selected_index < len(trace.candidates):
        violations.append(f"{prefix}.selected_index: out of range")
    else:
        combined = [
            scored.scores.combined if scored.scores.combined is not None else float("-inf")
            for scored in trace.candidates
        ]
        best = max(combined) if combined else float("-inf")
        first_best = combined.index(best)
        if trace.selected_index != first_best:
            violations.append(
                f"{prefix}.selected_index: must point at the highest combined score, "
                "ties broken by lowest index"
            )
    return violations


def _check_bundle(bundle: ScoreBundle, prefix: str) -> list[str]:
    violations: list[str] = []

    expected_tifa = _tifa_of(bundle.per_question)
    if bundle.per_question:
        if bundle.tifa is None or bundle.tifa != expected_tifa:
            violations.append(f"{prefix}.tifa: must equal correct-answer fraction of per_question")
    elif bundle.tifa is not None:
        violations.append(f"{prefix}.tifa: must be unscored (None) when per_question is empty")

    expected_vqa = _vqa_of(bundle.per_chunk)
    if bundle.per_chunk:
        if bundle.vqa is None or bundle.vqa != expected_vqa:
            violations.append(f"{prefix}.vqa: must equal the mean of per_chunk probabilities")
    elif bundle.vqa is not None:
        violations.append(f"{prefix}.vqa: must be unscored (None) when per_chunk is empty")

    if bundle.tifa is not None and not 0.0 <= bundle.tifa <= 1.0:
        violations.append(f"{prefix}.tifa: must lie in [0, 1]")
    if bundle.vqa is not None and not 0.0 <= bundle.vqa <= 1.0:
        violations.append(f"{prefix}.vqa: must lie in [0, 1]")

    if bundle.tifa is not None and bundle.vqa is not None:
        if bundle.combined != bundle.tifa + bundle.vqa:
            violations.append(f"{prefix}.combined: must equal tifa + vqa exactly")
    elif bundle.combined is not None:
        violations.append(f"{prefix}.combined: must be unscored (None) unless both components are scored")

    for pos, entry in enumerate(bundle.per_chunk):
        if not 0.0 <= entry.yes_probability <= 1.0:
            violations.append(f"{prefix}.per_chunk[{pos}].yes_probability: must lie in [0, 1]")

    return violations


# ---------------------------------------------------------------------------
# JSON mapping


def prompt_to_dict(prompt: PromptRecord) -> dict[str, Any]:
    return {
        "id": prompt.id,
        "text": prompt.text,
        "dataset": prompt.dataset,
        "created_at": prompt.created_at,
    }


def prompt_from_dict(data: dict[str, Any]) -> PromptRecord:
    return PromptRecord(
        id=str(data["id"]),
        text=data["text"],
        dataset=data.get("dataset", ""),
        created_at=data.get("created_at", ""),
    )


def score_bundle_to_dict(bundle: ScoreBundle) -> dict[str, Any]:
    return {
        "tifa": bundle.tifa,
        "vqa": bundle.vqa,
        "combined": bundle.combined,
        "per_question": [
            {"question_id": o.question_id, "chosen_index": o.chosen_index, "correct": o.correct}
            for o in bundle.per_question
        ],
        "per_chunk": [
            {"chunk_text": c.chunk_text, "yes_probability": c.yes_probability}
            for c in bundle.per_chunk
        ],
    }


def score_bundle_from_dict(data: dict[str, Any]) -> ScoreBundle:
    return ScoreBundle(
        tifa=data["tifa"],
        vqa=data["vqa"],
        combined=data["combined"],
        per_question=tuple(
            AnswerOutcome(
                question_id=o["question_id"],
                chosen_index=o["chosen_index"],
                correct=o["correct"],
            )
            for o in data.get("per_question", [])
        ),
        per_chunk=tuple(
            ChunkProbability(chunk_text=c["chunk_text"], yes_probability=c["yes_probability"])
            for c in data.get("per_chunk", [])
        ),
    )


def image_ref_to_dict(image: ImageRef) -> dict[str, Any]:
    return {
        "content_id": image.content_id,
        "locator": image.locator,
        "generator_id": image.generator_id,
        "generation_seed": image.generation_seed,
    }


def image_ref_from_dict(data: dict[str, Any]) -> ImageRef:
    return ImageRef(
        content_id=data["content_id"],
        locator=data["locator"],
        generator_id=data["generator_id"],
        generation_seed=data["generation_seed"],
    )


def _scored_candidate_to_dict(scored: ScoredCandidate) -> dict[str, Any]:
    return {
        "candidate": {
            "index": scored.candidate.index,
            "text": scored.candidate.text,
            "provenance": scored.candidate.provenance.value,
            "iteration": scored.candidate.iteration,
        },
        "image": image_ref_to_dict(scored.image),
        "scores": score_bundle_to_dict(scored.scores),
    }


def _scored_candidate_from_dict(data: dict[str, Any]) -> ScoredCandidate:
    cand = data["candidate"]
    return ScoredCandidate(
        candidate=Candidate(
            index=cand["index"],
            text=cand["text"],
            provenance=Provenance(cand["provenance"]),
            iteration=cand["iteration"],
        ),
        image=image_ref_from_dict(data["image"]),
        scores=score_bundle_from_dict(data["scores"]),
    )


def record_to_dict(record: OptimizationRecord) -> dict[str, Any]:
    return {
        "prompt": prompt_to_dict(record.prompt),
        "original_score": score_bundle_to_dict(record.original_score),
        "traces": [
            {
                "iteration": trace.iteration,
                "seed_text": trace.seed_text,
                "candidates": [_scored_candidate_to_dict(sc) for sc in trace.candidates],
                "selected_index": trace.selected_index,
                "failures": list(trace.failures),
            }
            for trace in record.traces
        ],
        "final_text": record.final_text,
        "final_score": score_bundle_to_dict(record.final_score),
        "stats": record.stats.as_dict(),
        "engine_seed": record.engine_seed,
        "config_fingerprint": record.config_fingerprint,
    }


def record_from_dict(data: dict[str, Any]) -> OptimizationRecord:
    return OptimizationRecord(
        prompt=prompt_from_dict(data["prompt"]),
        original_score=score_bundle_from_dict(data["original_score"]),
        traces=tuple(
            IterationTrace(
                iteration=t["iteration"],
                seed_text=t["seed_text"],
                candidates=tuple(_scored_candidate_from_dict(sc) for sc in t["candidates"]),
                selected_index=t["selected_index"],
                failures=tuple(t.get("failures", [])),
            )
            for t in data["traces"]
        ),
        final_text=data["final_text"],
        final_score=score_bundle_from_dict(data["final_score"]),
        stats=BackendCallStats(**data["stats"]),
        engine_seed=data["engine_seed"],
        config_fingerprint=data["config_fingerprint"],
    )
