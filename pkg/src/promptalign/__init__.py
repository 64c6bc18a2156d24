"""Prompt optimization engine for text-to-image alignment.

Iterative paraphrase-generate-score-select optimization with full score
accounting, plus one-pass inference through a fine-tuned model or
in-context learning, offline-testable end to end via seeded synthetic
backends.
"""

from .model import (
    BackendCallStats,
    Candidate,
    ExamplePair,
    HumanRating,
    ImageRef,
    IterationTrace,
    McQuestion,
    NounChunk,
    OptimizationRecord,
    PromptRecord,
    Provenance,
    RatingCase,
    ScoreBundle,
    ScoredCandidate,
    validate_record,
)
from .optimizer import (
    ICL_SYSTEM_PROMPT,
    OptimizationAborted,
    OptimizeConfig,
    assemble_icl_messages,
    optimize_iterative,
    optimize_one_pass,
    score_candidate,
    select_best,
)
from .scoring import (
    UnscorableError,
    combined_score,
    report_average,
    tifa_score,
    vqa_question_text,
    vqa_score,
)

__version__ = "0.1.0"

__all__ = [
    "BackendCallStats",
    "Candidate",
    "ExamplePair",
    "HumanRating",
    "ImageRef",
    "IterationTrace",
    "McQuestion",
    "NounChunk",
    "OptimizationRecord",
    "PromptRecord",
    "Provenance",
    "RatingCase",
    "ScoreBundle",
    "ScoredCandidate",
    "validate_record",
    "ICL_SYSTEM_PROMPT",
    "OptimizationAborted",
    "OptimizeConfig",
    "assemble_icl_messages",
    "optimize_iterative",
    "optimize_one_pass",
    "score_candidate",
    "select_best",
    "UnscorableError",
    "combined_score",
    "report_average",
    "tifa_score",
    "vqa_question_text",
    "vqa_score",
    "__version__",
]
