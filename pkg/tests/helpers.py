"""Shared builders for synthetic prompts and hand-made records."""

from __future__ import annotations

import random

from promptalign.model import (
    AnswerOutcome,
    BackendCallStats,
    Candidate,
    ChunkProbability,
    ImageRef,
    IterationTrace,
    OptimizationRecord,
    PromptRecord,
    Provenance,
    ScoreBundle,
    ScoredCandidate,
)

ADJECTIVES = ["red", "golden", "ancient", "misty", "tall", "crimson", "weathered", "silver", "quiet", "vivid"]
NOUNS = ["bicycle", "lighthouse", "forest", "mountain", "river", "castle", "garden", "harbor", "meadow", "bridge"]
RELATIONS = ["next to", "beside", "under", "above", "near", "behind"]


def make_prompt(index: int, rng: random.Random, dataset: str = "synthetic") -> PromptRecord:
    """A three-chunk prompt with enough tokens for dropout headroom."""
    a1, a2, a3 = rng.sample(ADJECTIVES, 3)
    n1, n2, n3 = rng.sample(NOUNS, 3)
    rel = rng.choice(RELATIONS)
    return PromptRecord(
        id=f"p{index}",
        text=f"a {a1} {n1} {rel} a {a2} {n2} with a {a3} {n3}",
        dataset=dataset,
    )


def bundle_with_combined(combined: float) -> ScoreBundle:
    """A structurally valid bundle whose combined score is ``combined``.

    Built from two chunk probabilities of combined / 2 each and a single
    graded answer when combined >= 1, so the arithmetic identities hold.
    """
    half = combined / 2
    if half > 1.0 or half < 0.0:
        raise ValueError("combined must lie in [0, 2]")
    per_question = (
        AnswerOutcome(question_id="q0", chosen_index=0, correct=half >= 0.5),
        AnswerOutcome(question_id="q1", chosen_index=0, correct=half >= 0.5),
    )
    tifa = sum(1 for o in per_question if o.correct) / len(per_question)
    # Shift vqa so tifa + vqa lands exactly on the requested combined value.
    vqa_target = combined - tifa
    per_chunk = (ChunkProbability(chunk_text="thing", yes_probability=vqa_target),)
    return ScoreBundle.from_evidence(per_question, per_chunk)


def image_for(text: str, seed: int = 0) -> ImageRef:
    from promptalign.backends.synthetic import SyntheticImageGenerator, SyntheticWorld

    return SyntheticImageGenerator(SyntheticWorld(seed=1)).generate(text, seed)


def handmade_record(
    combined_by_iteration: list[list[float]],
    selected: list[int],
    original_combined: float = 0.5,
    prompt_text: str = "a quiet harbor",
) -> OptimizationRecord:
    """Assemble a record directly from per-candidate combined scores."""
    prompt = PromptRecord(id="hand", text=prompt_text, dataset="fixture")
    traces = []
    for iteration, (scores, pick) in enumerate(zip(combined_by_iteration, selected)):
        candidates = []
        for index, value in enumerate(scores):
            provenance = (
                Provenance.ORIGINAL
                if iteration == 0 and index == 0
                else Provenance.PARAPHRASE
            )
            text = prompt_text if index == 0 else f"{prompt_text} variant {iteration}.{index}"
            candidates.append(
                ScoredCandidate(
                    candidate=Candidate(
                        index=index, text=text, provenance=provenance, iteration=iteration
                    ),
                    image=image_for(text),
                    scores=bundle_with_combined(value),
                )
            )
        traces.append(
            IterationTrace(
                iteration=iteration,
                seed_text=prompt_text,
                candidates=tuple(candidates),
                selected_index=pick,
            )
        )
    last = traces[-1]
    final = last.candidates[last.selected_index]
    return OptimizationRecord(
        prompt=prompt,
        original_score=bundle_with_combined(original_combined),
        traces=tuple(traces),
        final_text=final.candidate.text,
        final_score=final.scores,
        stats=BackendCallStats(image_gen_calls=len(traces)),
        engine_seed=0,
        config_fingerprint="fixture",
    )
