from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptalign.model import NounChunk
from promptalign.scoring import (
    UnscorableError,
    combined_score,
    format_fixed,
    report_average,
    round_half_up,
    tifa_score,
    vqa_question_text,
    vqa_score,
)


class TestTifaScore:
    def test_all_correct(self):
        assert tifa_score([(0, 0), (1, 1), (2, 2), (3, 3)]) == 1.0

    def test_none_correct(self):
        assert tifa_score([(0, 1), (1, 2), (2, 3), (3, 0)]) == 0.0

    def test_three_of_four(self):
        assert tifa_score([(0, 0), (1, 1), (2, 2), (0, 3)]) == 0.75

    def test_empty_is_unscorable(self):
        with pytest.raises(UnscorableError):
            tifa_score([])

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_matches_brute_force_counting(self, answers):
        expected = 0
        for chosen, correct in answers:
            if chosen == correct:
                expected += 1
        assert tifa_score(answers) == expected / len(answers)
        assert 0.0 <= tifa_score(answers) <= 1.0


class TestVqaScore:
    def test_certainty(self):
        assert vqa_score([1.0, 1.0]) == 1.0

    def test_single_zero(self):
        assert vqa_score([0.0]) == 0.0

    def test_forced_mean(self):
        assert vqa_score([0.2, 0.4, 0.9]) == 0.5

    def test_empty_is_unscorable(self):
        with pytest.raises(UnscorableError):
            vqa_score([])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="invalid probability"):
            vqa_score([0.5, 1.2])

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.randoms())
    def test_permutation_invariant(self, probs, rng):
        shuffled = probs[:]
        rng.shuffle(shuffled)
        assert vqa_score(probs) == vqa_score(shuffled)
        assert 0.0 <= vqa_score(probs) <= 1.0


class TestCombinedScore:
    def test_sum(self):
        assert combined_score(0.5, 0.5) == 1.0

    def test_maximum(self):
        assert combined_score(1.0, 1.0) == 2.0

    def test_forced_arithmetic(self):
        assert combined_score(0.863, 0.829) == 1.692

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="invalid score"):
            combined_score(1.5, 0.2)
        with pytest.raises(ValueError, match="invalid score"):
            combined_score(0.2, -0.1)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_symmetric_and_bounded(self, a, b):
        assert combined_score(a, b) == combined_score(b, a)
        assert 0.0 <= combined_score(a, b) <= 2.0


class TestReportAverage:
    @pytest.mark.parametrize(
        "tifa,vqa,expected",
        [
            (0.863, 0.829, 0.846),
            (0.937, 0.930, 0.934),  # 0.9335 rounds up
            (0.845, 0.850, 0.848),  # 0.8475 rounds up
        ],
    )
    def test_table_values(self, tifa, vqa, expected):
        assert report_average(tifa, vqa) == expected

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_half_combined_before_rounding(self, a, b):
        assert abs(report_average(a, b) - combined_score(a, b) / 2) <= 0.0005 + 1e-12
        assert report_average(a, b) == report_average(b, a)


class TestQuestionTemplate:
    def test_probe_template_exact(self):
        chunk = NounChunk(text="a red bicycle", source_prompt_id="p")
        assert vqa_question_text(chunk) == "Does this figure show a red bicycle?"

    def test_bare_substitution_no_article_insertion(self):
        chunk = NounChunk(text="cat", source_prompt_id="p")
        assert vqa_question_text(chunk) == "Does this figure show cat?"

    def test_empty_chunk_rejected(self):
        with pytest.raises(ValueError):
            vqa_question_text(NounChunk(text="", source_prompt_id="p"))


class TestRounding:
    @pytest.mark.parametrize(
        "value,places,expected",
        [
            (0.8475, 3, 0.848),
            (0.9335, 3, 0.934),
            (0.8445, 3, 0.845),
            (0.9605, 3, 0.961),
            (0.0424, 4, 0.0424),
            (-0.05, 4, -0.05),
            (2.5, 0, 3.0),
        ],
    )
    def test_half_up(self, value, places, expected):
        assert round_half_up(value, places) == expected

    def test_format_fixed_signed(self):
        assert format_fixed(0.0424, 4, signed=True) == "+0.0424"
        assert format_fixed(-0.05, 4, signed=True) == "-0.0500"
        assert format_fixed(0.846, 3) == "0.846"

    def test_float_half_artifacts_round_by_decimal_digits(self):
        # (0.845 + 0.850) / 2 lands below 0.8475 in binary; the decimal-space
        # average must still round up.
        assert (0.845 + 0.850) / 2 < 0.8475
        assert report_average(0.845, 0.850) == 0.848


def test_exhaustive_quarter_grid_consistency():
    grid = [i / 4 for i in range(5)]
    for a, b in itertools.product(grid, grid):
        assert combined_score(a, b) == a + b
        assert report_average(a, b) == round_half_up((a + b) / 2, 3)
