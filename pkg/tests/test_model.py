from __future__ import annotations

import json
import random

import pytest
from helpers import handmade_record, make_prompt

from promptalign.backends.synthetic import synthetic_suite
from promptalign.model import (
    AnswerOutcome,
    ChunkProbability,
    ExamplePair,
    ScoreBundle,
    record_from_dict,
    record_to_dict,
    validate_record,
)
from promptalign.optimizer import OptimizeConfig, optimize_iterative


def run_record(seed: int, **cfg_kwargs):
    suite = synthetic_suite(seed, noise_scale=0.25)
    prompt = make_prompt(seed, random.Random(seed))
    cfg = OptimizeConfig(engine_seed=seed, **cfg_kwargs)
    return optimize_iterative(prompt, cfg, suite)


def test_well_formed_record_has_no_violations():
    record = run_record(3)
    assert validate_record(record) == []


def test_serialization_round_trip_is_identity():
    record = run_record(4, m=3, k=2)
    blob = json.dumps(record_to_dict(record))
    assert record_from_dict(json.loads(blob)) == record


def test_combined_mismatch_names_combined():
    bundle = ScoreBundle(
        tifa=0.5,
        vqa=0.5,
        combined=1.2,
        per_question=(AnswerOutcome("q0", 0, True), AnswerOutcome("q1", 1, False)),
        per_chunk=(ChunkProbability("thing", 0.5),),
    )
    record = handmade_record([[0.4, 1.3]], [1], original_combined=0.4)
    broken = record.__class__(
        prompt=record.prompt,
        original_score=bundle,
        traces=record.traces,
        final_text=record.final_text,
        final_score=record.final_score,
        stats=record.stats,
        engine_seed=record.engine_seed,
        config_fingerprint=record.config_fingerprint,
    )
    violations = validate_record(broken)
    assert len(violations) == 1
    assert "combined" in violations[0]


def test_selected_index_not_argmax_is_flagged():
    # Brute-force check the argmax of the 3-candidate trace by hand: the
    # maximum of (0.1, 0.9, 0.5) sits at index 1, so selecting 0 is invalid.
    combined = [0.1, 0.9, 0.5]
    assert max(range(3), key=lambda i: combined[i]) == 1
    record = handmade_record([combined], [0], original_combined=0.1)
    violations = validate_record(record)
    assert any("selected_index" in v for v in violations)


def test_tie_break_must_pick_lowest_index():
    record = handmade_record([[0.9, 0.9]], [1], original_combined=0.5)
    assert any("selected_index" in v for v in validate_record(record))
    record = handmade_record([[0.9, 0.9]], [0], original_combined=0.5)
    assert validate_record(record) == []


def test_final_text_mismatch_is_flagged():
    good = handmade_record([[0.2, 0.8]], [1], original_combined=0.2)
    bad = good.__class__(
        prompt=good.prompt,
        original_score=good.original_score,
        traces=good.traces,
        final_text="something else entirely",
        final_score=good.final_score,
        stats=good.stats,
        engine_seed=good.engine_seed,
        config_fingerprint=good.config_fingerprint,
    )
    assert any("final_text" in v for v in validate_record(bad))


def test_regressing_final_score_is_flagged():
    record = handmade_record([[0.3]], [0], original_combined=0.9)
    assert any("final_score.combined" in v for v in validate_record(record))


def test_unscored_state_is_explicit_not_zero():
    bundle = ScoreBundle.from_evidence((), ())
    assert bundle.tifa is None
    assert bundle.vqa is None
    assert bundle.combined is None
    assert not bundle.is_scored


def test_unscored_must_not_carry_values():
    bundle = ScoreBundle(tifa=0.0, vqa=None, combined=None)
    record = handmade_record([[0.5]], [0], original_combined=0.5)
    broken = record.__class__(
        prompt=record.prompt,
        original_score=bundle,
        traces=record.traces,
        final_text=record.final_text,
        final_score=record.final_score,
        stats=record.stats,
        engine_seed=record.engine_seed,
        config_fingerprint=record.config_fingerprint,
    )
    assert any("unscored" in v for v in validate_record(broken))


def test_example_pair_from_record_gain_matches():
    record = run_record(9)
    pair = ExamplePair.from_record(record)
    assert pair.original == record.prompt.text
    assert pair.optimized == record.final_text
    assert pair.combined_gain == pytest.approx(
        record.final_score.combined - record.original_score.combined
    )
    if pair.combined_gain != 0:
        assert pair.original != pair.optimized


@pytest.mark.slow
def test_fuzz_validate_record_over_seeded_runs():
    # Every record the engine produces with synthetic backends must validate.
    rng = random.Random(2024)
    suite = synthetic_suite(77, noise_scale=0.3)
    for i in range(1000):
        prompt = make_prompt(i, rng)
        cfg = OptimizeConfig(m=2, k=1, engine_seed=i)
        record = optimize_iterative(prompt, cfg, suite)
        assert validate_record(record) == [], f"seed {i}"
        if record.combined_gain != 0:
            assert record.final_text != record.prompt.text
