from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptalign.analytics import (
    CorrelationMatrix,
    ScoredRow,
    aggregate,
    correlate_human,
    cost_report,
    delta,
    group_means,
    load_ratings,
    pearson,
    render_correlations,
    render_table,
    rows_from_records,
    scores_from_records,
)
from promptalign.model import BackendCallStats, HumanRating, RatingCase


class TestAggregate:
    def test_singleton_mean(self):
        [row] = aggregate([ScoredRow("d", "m", 0.5, 0.5)])
        assert (row.mean_tifa, row.mean_vqa, row.mean_average) == (0.5, 0.5, 0.5)
        assert row.n == 1

    def test_benchmark_row_values(self):
        [row] = aggregate([ScoredRow("coco", "original", 0.863, 0.829)])
        assert row.mean_average == 0.846

    def test_halfway_average_rounds_up(self):
        [row] = aggregate([ScoredRow("parti", "icl-100", 0.856, 0.833)])
        assert row.mean_average == 0.845

    def test_multi_record_group_mean(self):
        rows = [
            ScoredRow("d", "m", 0.8, 0.6),
            ScoredRow("d", "m", 0.9, 0.7),
            ScoredRow("d", "other", 0.1, 0.1),
        ]
        table = aggregate(rows)
        assert [row.mode for row in table] == ["m", "other"]
        main = table[0]
        assert main.n == 2
        assert main.mean_tifa == pytest.approx(0.85)
        assert main.mean_vqa == pytest.approx(0.65)
        assert main.mean_average == pytest.approx(0.75)

    def test_deterministic_ordering(self):
        rows = [
            ScoredRow("zebra", "b", 0.5, 0.5),
            ScoredRow("alpha", "z", 0.5, 0.5),
            ScoredRow("alpha", "a", 0.5, 0.5),
        ]
        table = aggregate(rows)
        assert [(row.dataset, row.mode) for row in table] == [
            ("alpha", "a"),
            ("alpha", "z"),
            ("zebra", "b"),
        ]

    def test_empty_input_yields_empty_table(self):
        assert aggregate([]) == []

    def test_means_match_brute_force_fold(self):
        rng = random.Random(17)
        rows = [
            ScoredRow("d", f"m{i % 3}", rng.random(), rng.random()) for i in range(200)
        ]
        means = group_means(rows)
        for (dataset, mode), (tifa, vqa, avg) in means.items():
            members = [r for r in rows if r.dataset == dataset and r.mode == mode]
            fold_tifa = sum(r.tifa for r in members) / len(members)
            fold_vqa = sum(r.vqa for r in members) / len(members)
            fold_avg = sum((r.tifa + r.vqa) / 2 for r in members) / len(members)
            assert abs(tifa - fold_tifa) <= 1e-12
            assert abs(vqa - fold_vqa) <= 1e-12
            assert abs(avg - fold_avg) <= 1e-12
        # Rounded table agrees with the unrounded means to rounding width.
        for row in aggregate(rows):
            tifa, vqa, avg = means[(row.dataset, row.mode)]
            assert abs(row.mean_average - avg) <= 0.0005 + 1e-12


class TestDelta:
    @pytest.mark.parametrize(
        "before,after,expected",
        [
            (0.8168, 0.8592, 0.0424),
            (0.7890, 0.8416, 0.0526),
            (3.2500, 3.3597, 0.1097),
            (2.8947, 2.8447, -0.0500),
        ],
    )
    def test_benchmark_changes(self, before, after, expected):
        assert delta(before, after) == expected

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_antisymmetric(self, a, b):
        assert delta(a, b) == -delta(b, a)


class TestPearson:
    def test_perfect_correlation(self):
        assert pearson([1.0, 2.0, 5.0], [1.0, 2.0, 5.0]) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        x = [0.3, 1.7, 2.2, 9.0]
        assert pearson(x, [-v for v in x]) == -1.0

    def test_textbook_example(self):
        # Independent oracle: raw-sum form of the same coefficient.
        x, y = [1.0, 2.0, 3.0], [1.0, 2.0, 4.0]
        n = 3
        oracle = (n * sum(a * b for a, b in zip(x, y)) - sum(x) * sum(y)) / math.sqrt(
            (n * sum(a * a for a in x) - sum(x) ** 2) * (n * sum(b * b for b in y) - sum(y) ** 2)
        )
        assert pearson(x, y) == pytest.approx(0.981981, abs=1e-6)
        assert pearson(x, y) == pytest.approx(oracle, abs=1e-12)

    def test_constant_series_undefined(self):
        with pytest.raises(ValueError, match="undefined correlation"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            pearson([1.0, 2.0], [1.0])

    def test_too_short(self):
        with pytest.raises(ValueError):
            pearson([1.0], [1.0])

    def test_symmetric(self):
        rng = random.Random(3)
        x = [rng.random() for _ in range(40)]
        y = [rng.random() for _ in range(40)]
        assert abs(pearson(x, y) - pearson(y, x)) <= 1e-12

    def test_affine_invariance(self):
        rng = random.Random(4)
        x = [rng.uniform(-5, 5) for _ in range(25)]
        assert pearson(x, [3 * v + 2 for v in x]) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)


def build_rated_world(
    seed: int,
    n_prompts: int = 24,
    align_tifa: float = 2.0,
    struct_tifa: float = 0.35,
    struct_vqa: float = -0.5,
    noise: float = 0.35,
):
    """Five annotators rating prompts whose scores drive the ratings."""
    rng = random.Random(seed)
    ratings: list[HumanRating] = []
    scores: dict[tuple[str, str], tuple[float, float]] = {}
    for i in range(n_prompts):
        for case in ("original", "optimized"):
            tifa = rng.uniform(0.5, 1.0)
            vqa = rng.uniform(0.5, 1.0)
            scores[(f"p{i}", case)] = (tifa, vqa)
            for annotator in range(5):
                alignment = 1.0 + align_tifa * tifa + 1.5 * vqa + rng.gauss(0, noise)
                structure = 2.0 + struct_tifa * tifa + struct_vqa * vqa + rng.gauss(0, noise)
                ratings.append(
                    HumanRating(
                        prompt_id=f"p{i}",
                        annotator_id=f"a{annotator}",
                        alignment=max(0, min(4, round(alignment))),
                        structure=max(0, min(4, round(structure))),
                        case=RatingCase(case),
                    )
                )
    return ratings, scores


class TestCorrelateHuman:
    def test_noisy_monotone_ratings_correlate_positively(self):
        ratings, scores = build_rated_world(seed=0)
        matrix = correlate_human(ratings, scores)
        assert matrix.alignment_tifa > 0
        assert matrix.alignment_vqa > 0

    def test_mixed_sign_pattern(self):
        # Alignment tracks both scores, structure couples weakly-positively
        # to tifa and negatively to vqa: signs (+, +, +, -).
        ratings, scores = build_rated_world(seed=0)
        matrix = correlate_human(ratings, scores)
        assert matrix.alignment_tifa > 0
        assert matrix.alignment_vqa > 0
        assert matrix.structure_tifa > 0
        assert matrix.structure_vqa < 0

    def test_independent_ratings_stay_inside_null_band(self):
        # Permutation-test oracle: with ratings decoupled from scores by a
        # seeded shuffle, the observed |r| must sit inside the 99% band of
        # the permutation null distribution.
        ratings, scores = build_rated_world(seed=2, align_tifa=0.0, struct_tifa=0.0, struct_vqa=0.0, noise=0.9)
        keys = sorted(scores)
        rng = random.Random(11)
        shuffled_values = [scores[key] for key in keys]
        rng.shuffle(shuffled_values)
        shuffled = dict(zip(keys, shuffled_values))
        matrix = correlate_human(ratings, shuffled)

        aligned_means = {}
        for rating in ratings:
            aligned_means.setdefault((rating.prompt_id, rating.case.value), []).append(
                rating.alignment
            )
        alignment_series = [
            sum(values) / len(values) for key, values in sorted(aligned_means.items())
        ]
        tifa_series = [shuffled[key][0] for key in sorted(aligned_means)]
        null = []
        perm_rng = random.Random(99)
        for _ in range(300):
            permuted = tifa_series[:]
            perm_rng.shuffle(permuted)
            null.append(abs(pearson(alignment_series, permuted)))
        band = sorted(null)[int(0.99 * len(null))]
        assert abs(matrix.alignment_tifa) <= band

    def test_unmatched_prompt_ids_listed(self):
        ratings, scores = build_rated_world(seed=1, n_prompts=3)
        del scores[("p1", "original")]
        del scores[("p1", "optimized")]
        with pytest.raises(ValueError, match="p1"):
            correlate_human(ratings, scores)

    def test_annotators_averaged_before_pairing(self):
        scores = {("p0", "original"): (0.2, 0.2), ("p1", "original"): (0.9, 0.9)}
        ratings = [
            HumanRating("p0", "a0", 0, 1, RatingCase.ORIGINAL),
            HumanRating("p0", "a1", 2, 1, RatingCase.ORIGINAL),
            HumanRating("p1", "a0", 3, 3, RatingCase.ORIGINAL),
            HumanRating("p1", "a1", 4, 3, RatingCase.ORIGINAL),
        ]
        matrix = correlate_human(ratings, scores)
        # Two paired points (1.0, 0.2) and (3.5, 0.9): perfect correlation.
        assert matrix.alignment_tifa == pytest.approx(1.0, abs=1e-12)
        assert matrix.n == 2

    def test_per_case_split(self):
        ratings, scores = build_rated_world(seed=0)
        by_case = correlate_human(ratings, scores, pool_cases=False)
        assert set(by_case) == {"original", "optimized"}
        assert all(isinstance(matrix, CorrelationMatrix) for matrix in by_case.values())


class TestCostReport:
    def iterative_stats(self, records=10, k=2, m=4, q=4, chunks=3):
        per_record = BackendCallStats(
            paraphraser_calls=k,
            image_gen_calls=1 + k * m,
            question_gen_calls=1,
            chunk_extract_calls=1,
            vqa_answer_calls=(1 + k * m) * q,
            yes_prob_calls=(1 + k * m) * chunks,
        )
        return [per_record] * records

    def test_iterative_image_count_assertion(self):
        report = cost_report(
            {"iterative": self.iterative_stats(), "one_pass": [BackendCallStats(one_pass_llm_calls=1)] * 10},
            k=2,
            m=4,
        )
        assert report["expected_image_gen_calls"] == 90
        assert report["image_gen_matches_expected"] is True
        assert report["modes"]["iterative"]["totals"]["image_gen_calls"] == 90

    def test_one_pass_counts(self):
        report = cost_report({"one_pass": [BackendCallStats(one_pass_llm_calls=1)] * 10})
        totals = report["modes"]["one_pass"]["totals"]
        assert totals["one_pass_llm_calls"] == 10
        assert totals["image_gen_calls"] == 0
        assert report["one_pass_is_scoring_free"] is True

    def test_infinite_ratio_is_flagged_not_divided(self):
        report = cost_report(
            {"iterative": self.iterative_stats(), "one_pass": [BackendCallStats(one_pass_llm_calls=1)] * 10},
        )
        assert report["scoring_call_ratio"] is None
        assert report["note"] == "one-pass performs no scoring"

    def test_finite_ratio(self):
        report = cost_report(
            {
                "iterative": [BackendCallStats(image_gen_calls=9)],
                "one_pass": [BackendCallStats(image_gen_calls=3)],
            }
        )
        assert report["scoring_call_ratio"] == 3.0


class TestRatingIngestion:
    def test_load_and_validate(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        path.write_text(
            json.dumps(
                {
                    "prompt_id": "p0",
                    "annotator_id": "a0",
                    "alignment": 3,
                    "structure": 2,
                    "case": "original",
                }
            )
            + "\n"
        )
        [rating] = load_ratings(path)
        assert rating.alignment == 3
        assert rating.case is RatingCase.ORIGINAL

    def test_out_of_scale_rejected(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        path.write_text(
            '{"prompt_id": "p", "annotator_id": "a", "alignment": 5, "structure": 0, "case": "original"}\n'
        )
        with pytest.raises(ValueError, match="line 1"):
            load_ratings(path)


class TestRendering:
    def test_table_alignment_and_values(self):
        table = aggregate(
            [ScoredRow("coco", "original", 0.863, 0.829), ScoredRow("coco", "optimized", 0.967, 0.954)]
        )
        text = render_table(table)
        lines = text.splitlines()
        assert lines[0].split() == ["dataset", "mode", "tifa", "vqa", "average", "n"]
        assert "0.846" in text
        assert "0.961" in text

    def test_empty_table_renders_header(self):
        assert render_table([]).splitlines()[0].startswith("dataset")

    def test_correlations_render_signed(self):
        matrix = CorrelationMatrix(0.2313, 0.2755, 0.0574, -0.0031, n=40)
        text = render_correlations(matrix)
        assert "+0.2313" in text
        assert "-0.0031" in text


def test_rows_and_scores_from_records(tmp_path):
    import random as _random

    from helpers import make_prompt
    from promptalign.backends.synthetic import synthetic_suite
    from promptalign.datastore import append_record, read_record_file
    from promptalign.optimizer import OptimizeConfig, optimize_iterative

    suite = synthetic_suite(6, noise_scale=0.2)
    path = tmp_path / "records.jsonl"
    for i in range(3):
        prompt = make_prompt(i, _random.Random(i), dataset="demo")
        record = optimize_iterative(prompt, OptimizeConfig(m=2, k=1, engine_seed=i), suite)
        append_record(path, record, mode="iterative")
    stored, _ = read_record_file(path)

    rows = rows_from_records(stored)
    assert len(rows) == 3
    assert all(row.dataset == "demo" and row.mode == "iterative" for row in rows)

    scores = scores_from_records(stored)
    assert len(scores) == 6
    assert ("p0", "original") in scores and ("p0", "optimized") in scores
