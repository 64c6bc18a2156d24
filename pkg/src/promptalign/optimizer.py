"""The optimization control loop and the two one-pass inference modes.

Iterative mode scores the original prompt once, then repeatedly paraphrases
the current best text, scores every candidate against questions and noun
chunks derived from the ORIGINAL prompt, and keeps the argmax of the combined
score. The incumbent is pooled into every round by default, which makes the
best combined score non-decreasing across iterations by construction.

One-pass mode issues exactly one LLM completion (fine-tuned passthrough or
in-context learning with example pairs) and performs no scoring at all.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Sequence

from .backends.base import BackendSuite, CallTracker, ChatMessage
from .model import (
    AnswerOutcome,
    Candidate,
    ChunkProbability,
    ExamplePair,
    ImageRef,
    IterationTrace,
    McQuestion,
    NounChunk,
    OptimizationRecord,
    PromptRecord,
    Provenance,
    ScoreBundle,
    ScoredCandidate,
)
from .util import canonical_json, derive_seed, sha256_hex

logger = logging.getLogger(__name__)

ICL_SYSTEM_PROMPT = (
    "You are a prompt improver for a text-to-image generation model. "
    "You are improving prompts in a way that is specific to one such model, "
    "and you are expected to improve the prompts in a way that is specific to "
    "that model, such that the images are faithful to the original user prompt, "
    "and more aesthetically pleasing and complete than if they had been "
    "generated without any prompt improver."
)

USER_PREFIX = "User Prompt:"
ASSISTANT_PREFIX = "Improved Prompt:"


@dataclass(frozen=True)
class OptimizeConfig:
    """Knobs for one iterative run.

    ``image_seed_policy`` "fixed" shares one generation seed across all of a
    record's candidates so they differ only by text; "per_candidate" gives
    each candidate its own derived seed.
    """

    m: int = 4
    k: int = 2
    q: int = 4
    pool_incumbent: bool = True
    parallelism: int = 1
    engine_seed: int = 0
    image_seed_policy: Literal["fixed", "per_candidate"] = "fixed"

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.image_seed_policy not in ("fixed", "per_candidate"):
            raise ValueError(f"unknown image_seed_policy: {self.image_seed_policy!r}")

    def fingerprint(self, suite: BackendSuite) -> str:
        return sha256_hex(
            canonical_json(
                {
                    "m": self.m,
                    "k": self.k,
                    "q": self.q,
                    "pool_incumbent": self.pool_incumbent,
                    "engine_seed": self.engine_seed,
                    "image_seed_policy": self.image_seed_policy,
                    "backends": suite.fingerprint(),
                }
            )
        )


@dataclass(frozen=True)
class ScoringAssets:
    """Questions and noun chunks, derived once from the original prompt."""

    chunks: tuple[NounChunk, ...]
    questions: tuple[McQuestion, ...]


class OptimizationAborted(RuntimeError):
    """Raised when a record cannot be completed; carries the partial trace."""

    def __init__(self, prompt_id: str, traces: tuple[IterationTrace, ...], cause: Exception):
        super().__init__(f"optimization aborted for prompt {prompt_id!r}: {cause}")
        self.prompt_id = prompt_id
        self.traces = traces
        self.cause = cause


def select_best(scored: Sequence[tuple[Candidate, ScoreBundle]]) -> int:
    """Index of the highest combined score; ties break to the lowest index.

    Comparison uses unrounded values. Unscored bundles never win against a
    scored one.
    """
    if not scored:
        raise ValueError("cannot select from an empty candidate list")
    best_index = 0
    best_value = float("-inf")
    for index, (_, bundle) in enumerate(scored):
        value = bundle.combined if bundle.combined is not None else float("-inf")
        if value > best_value:
            best_value = value
            best_index = index
    return best_index


def prepare_assets(
    prompt: PromptRecord, cfg: OptimizeConfig, suite: BackendSuite, tracker: CallTracker
) -> ScoringAssets:
    """Derive chunks and questions from the original prompt, exactly once."""
    chunks = suite.extract_noun_chunks(prompt.text, tracker, source_prompt_id=prompt.id)
    question_seed = derive_seed(cfg.engine_seed, prompt.id, "questions")
    questions = suite.generate_questions(prompt.text, cfg.q, question_seed, tracker)
    return ScoringAssets(chunks=tuple(chunks), questions=tuple(questions))


def score_candidate(
    original: PromptRecord,
    candidate: Candidate,
    assets: ScoringAssets,
    suite: BackendSuite,
    tracker: CallTracker,
    image_seed: int,
) -> tuple[ImageRef, ScoreBundle]:
    """Generate one image from the candidate text and grade it.

    All questions and chunk probabilities are evaluated against that single
    image; the assets must have been derived from the original prompt.
    """
    for chunk in assets.chunks:
        if chunk.source_prompt_id and chunk.source_prompt_id != original.id:
            raise ValueError(
                f"chunk {chunk.text!r} was derived from prompt "
                f"{chunk.source_prompt_id!r}, not {original.id!r}"
            )
    image = suite.generate_image(candidate.text, image_seed, tracker)
    per_question = []
    for i, question in enumerate(assets.questions):
        chosen = suite.answer_question(image, question, tracker)
        per_question.append(
            AnswerOutcome(
                question_id=f"q{i}",
                chosen_index=chosen,
                correct=chosen == question.correct_index,
            )
        )
    per_chunk = tuple(
        ChunkProbability(
            chunk_text=chunk.text,
            yes_probability=suite.yes_probability(image, chunk, tracker),
        )
        for chunk in assets.chunks
    )
    return image, ScoreBundle.from_evidence(tuple(per_question), per_chunk)


def optimize_iterative(
    prompt: PromptRecord, cfg: OptimizeConfig, suite: BackendSuite
) -> OptimizationRecord:
    """Run the full paraphrase-generate-score-select loop for one prompt."""
    tracker = CallTracker()
    traces: tuple[IterationTrace, ...] = ()
    try:
        assets = prepare_assets(prompt, cfg, suite, tracker)
        record_image_seed = derive_seed(cfg.engine_seed, prompt.id, "image")

        original = Candidate(index=0, text=prompt.text, provenance=Provenance.ORIGINAL, iteration=0)
        image, original_score = score_candidate(
            prompt, original, assets, suite, tracker, record_image_seed
        )
        incumbent = ScoredCandidate(candidate=original, image=image, scores=original_score)
    except Exception as exc:
        raise OptimizationAborted(prompt.id, traces, exc) from exc

    trace_list: list[IterationTrace] = []
    for iteration in range(cfg.k):
        seed_text = incumbent.candidate.text
        try:
            paraphrase_seed = derive_seed(cfg.engine_seed, prompt.id, iteration, "paraphrase")
            texts = suite.paraphrase(seed_text, cfg.m, paraphrase_seed, tracker)
        except Exception as exc:
            raise OptimizationAborted(prompt.id, tuple(trace_list), exc) from exc

        def image_seed_for(position: int) -> int:
            if cfg.image_seed_policy == "fixed":
                return record_image_seed
            return derive_seed(cfg.engine_seed, prompt.id, iteration, position, "image")

        def score_text(job: tuple[int, str]) -> tuple[int, str, ImageRef, ScoreBundle]:
            position, text = job
            shadow = Candidate(
                index=position, text=text, provenance=Provenance.PARAPHRASE, iteration=iteration
            )
            ref, bundle = score_candidate(
                prompt, shadow, assets, suite, tracker, image_seed_for(position)
            )
            return position, text, ref, bundle

        jobs = list(enumerate(texts))
        results: list[tuple[int, str, ImageRef, ScoreBundle]] = []
        failures: list[str] = []
        if cfg.parallelism > 1:
            with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
                outcomes = list(pool.map(_guard(score_text), jobs))
        else:
            outcomes = [_guard(score_text)(job) for job in jobs]
        for job, outcome in zip(jobs, outcomes):
            if isinstance(outcome, Exception):
                failures.append(f"candidate {job[0]} of iteration {iteration}: {outcome}")
            else:
                results.append(outcome)

        pool_entries: list[ScoredCandidate] = []
        if cfg.pool_incumbent:
            provenance = Provenance.ORIGINAL if iteration == 0 else Provenance.PARAPHRASE
            pool_entries.append(
                ScoredCandidate(
                    candidate=Candidate(
                        index=0,
                        text=incumbent.candidate.text,
                        provenance=provenance,
                        iteration=iteration,
                    ),
                    image=incumbent.image,
                    scores=incumbent.scores,
                )
            )
        for _, text, ref, bundle in results:
            pool_entries.append(
                ScoredCandidate(
                    candidate=Candidate(
                        index=len(pool_entries),
                        text=text,
                        provenance=Provenance.PARAPHRASE,
                        iteration=iteration,
                    ),
                    image=ref,
                    scores=bundle,
                )
            )

        if not pool_entries:
            cause = RuntimeError(f"no candidate could be scored: {'; '.join(failures)}")
            raise OptimizationAborted(prompt.id, tuple(trace_list), cause)
        if failures:
            logger.warning(
                "prompt %s iteration %d: %d candidate(s) failed to score",
                prompt.id,
                iteration,
                len(failures),
            )

        selected = select_best([(entry.candidate, entry.scores) for entry in pool_entries])
        trace_list.append(
            IterationTrace(
                iteration=iteration,
                seed_text=seed_text,
                candidates=tuple(pool_entries),
                selected_index=selected,
                failures=tuple(failures),
            )
        )
        # With pooling, the winner already dominates the incumbent by argmax;
        # without pooling, the winner seeds the next round regardless.
        incumbent = pool_entries[selected]

    return OptimizationRecord(
        prompt=prompt,
        original_score=original_score,
        traces=tuple(trace_list),
        final_text=trace_list[-1].candidates[trace_list[-1].selected_index].candidate.text,
        final_score=trace_list[-1].candidates[trace_list[-1].selected_index].scores,
        stats=tracker.snapshot(),
        engine_seed=cfg.engine_seed,
        config_fingerprint=cfg.fingerprint(suite),
    )


def _guard(fn):
    def wrapped(job):
        try:
            return fn(job)
        except Exception as exc:  # surfaced in the trace, not fatal per candidate
            return exc

    return wrapped


def assemble_icl_messages(
    new_prompt: str, examples: Sequence[ExamplePair]
) -> list[ChatMessage]:
    """Build the in-context-learning dialogue for one new prompt.

    The system message is followed by a user/assistant turn per example pair
    (its dialogue "history"), then the new prompt; 2 * len(examples) + 2
    messages in total. An empty example list is the no-examples mode.
    """
    messages = [ChatMessage("system", ICL_SYSTEM_PROMPT)]
    for example in examples:
        messages.append(ChatMessage("user", f"{USER_PREFIX} {example.original}"))
        messages.append(ChatMessage("assistant", f"{ASSISTANT_PREFIX} {example.optimized}"))
    messages.append(ChatMessage("user", f"{USER_PREFIX} {new_prompt}"))
    return messages


def optimize_one_pass(
    prompt: PromptRecord,
    mode: Literal["finetuned", "icl"],
    suite: BackendSuite,
    examples: Sequence[ExamplePair] = (),
    tracker: CallTracker | None = None,
    seed: int = 0,
) -> str:
    """Produce an optimized prompt with a single completion call.

    No image generation and no scoring happens here; a leading
    "Improved Prompt:" in the reply is stripped.
    """
    if mode == "finetuned":
        # The fine-tuned model was trained on bare prompt -> completion rows.
        messages = [ChatMessage("user", prompt.text)]
    elif mode == "icl":
        messages = assemble_icl_messages(prompt.text, examples)
    else:
        raise ValueError(f"unknown one-pass mode: {mode!r}")

    if tracker is None:
        tracker = CallTracker()
    reply = suite.complete(messages, seed, tracker).strip()
    if reply.startswith(ASSISTANT_PREFIX):
        reply = reply[len(ASSISTANT_PREFIX):].strip()
    if not reply:
        raise RuntimeError("empty completion after stripping the reply prefix")
    return reply
