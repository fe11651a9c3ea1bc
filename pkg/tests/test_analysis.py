import math
import random
import sys
from collections import Counter
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instructgen.analysis import (
    CostModel,
    ExternalScorer,
    HISTOGRAM_BINS,
    SimilarityDistribution,
    dataset_stats,
    estimate_cost,
    sample_pair_similarities,
    token_overlap_score,
)

from conftest import random_text


# ------------------------------------------------------------------ overlap score


def test_overlap_identity():
    assert token_overlap_score("a b c", "a b c") == 1.0


def test_overlap_disjoint():
    assert token_overlap_score("a b", "c d") == 0.0


def test_overlap_half():
    # 2 common tokens, 4 tokens each side: F1 = 2*2/(4+4)
    assert token_overlap_score("a b c d", "c d e f") == 0.5


def test_overlap_empty_strings_count_as_identical():
    assert token_overlap_score("", "") == 1.0
    assert token_overlap_score("", "a") == 0.0


def test_overlap_multiset_semantics():
    # repeated tokens matter: common multiset of "a a" vs "a" is one "a"
    assert token_overlap_score("a a", "a") == pytest.approx(2 * 1 / 3)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=" abcdef", max_size=30), st.text(alphabet=" abcdef", max_size=30))
def test_overlap_contract_properties(a, b):
    s = token_overlap_score(a, b)
    assert 0.0 <= s <= 1.0
    assert s == token_overlap_score(b, a)
    assert token_overlap_score(a, a) == 1.0


# ------------------------------------------------------------------ pair sampling


def _records(inputs):
    return [{"input": text} for text in inputs]


def test_identical_inputs_score_one():
    dist = sample_pair_similarities(_records(["same text"] * 5), n_pairs=50, rng_seed=1)
    assert set(dist.scores) == {1.0}
    assert dist.pair_count == 50


def test_disjoint_inputs_score_zero():
    dist = sample_pair_similarities(_records(["aa", "bb", "cc", "dd"]), n_pairs=30, rng_seed=1)
    assert set(dist.scores) == {0.0}


def test_sampling_is_bitwise_reproducible():
    records = _records([random_text(random.Random(k), 8) for k in range(30)])
    a = sample_pair_similarities(records, n_pairs=500, rng_seed=7)
    b = sample_pair_similarities(records, n_pairs=500, rng_seed=7)
    assert a.scores == b.scores
    c = sample_pair_similarities(records, n_pairs=500, rng_seed=8)
    assert c.scores != a.scores


def test_never_pairs_record_with_itself():
    # one record is token-disjoint from the identical rest; a self-pair of it
    # would be the only way to score 1.0 with it involved
    records = _records(["x y z"] + ["p q"] * 9)
    dist = sample_pair_similarities(records, n_pairs=2000, rng_seed=3)
    assert all(s in (0.0, 1.0) for s in dist.scores)
    # scores of 1.0 only come from the identical "p q" pairs, never "x y z" self-pairs
    assert 0.0 in set(dist.scores)


def test_exhaustive_mode_scores_every_unordered_pair():
    inputs = ["a b", "a c", "b c", "d e", "a b c"]
    dist = sample_pair_similarities(_records(inputs), n_pairs=None)
    expected = [
        token_overlap_score(inputs[i], inputs[j])
        for i in range(5) for j in range(i + 1, 5)
    ]
    assert dist.pair_count == 10
    assert list(dist.scores) == expected


def test_dataset_too_small():
    with pytest.raises(ValueError, match="at least 2"):
        sample_pair_similarities(_records(["only one"]))


def test_histogram_mass_equals_pair_count():
    records = _records([random_text(random.Random(k), 6) for k in range(12)])
    dist = sample_pair_similarities(records, n_pairs=1000, rng_seed=2)
    assert sum(dist.histogram) == dist.pair_count == 1000
    assert len(dist.histogram) == HISTOGRAM_BINS


def test_histogram_rows_cover_unit_interval():
    dist = SimilarityDistribution.from_scores([0.0, 0.5, 1.0])
    rows = dist.histogram_rows()
    assert rows[0][0] == 0.0 and rows[-1][1] == 1.0
    assert sum(count for _, _, count in rows) == 3
    # exact 1.0 lands in the last bin
    assert rows[-1][2] == 1


def test_out_of_range_scores_rejected():
    with pytest.raises(ValueError):
        SimilarityDistribution.from_scores([0.5, 1.5])


def test_accepts_plain_strings_as_records():
    dist = sample_pair_similarities(["a b", "a b"], n_pairs=3, rng_seed=0)
    assert set(dist.scores) == {1.0}


# ------------------------------------------------------------------ external scorer

ECHO_SCORER = (
    "import sys\n"
    "for line in sys.stdin:\n"
    "    a, b = line.rstrip('\\n').split('\\t')\n"
    "    print(1.0 if a == b else 0.25)\n"
)


def test_external_scorer_round_trip():
    scorer = ExternalScorer([sys.executable, "-c", ECHO_SCORER])
    scores = scorer.score_pairs([("same", "same"), ("one", "two")])
    assert scores == [1.0, 0.25]
    assert scorer("x", "x") == 1.0


def test_external_scorer_escapes_tabs_and_newlines():
    scorer = ExternalScorer([sys.executable, "-c", ECHO_SCORER])
    tricky = "line one\nline two\twith tab\\and backslash"
    assert scorer.score_pairs([(tricky, tricky)]) == [1.0]


def test_external_scorer_used_for_sampling():
    scorer = ExternalScorer([sys.executable, "-c", ECHO_SCORER])
    dist = sample_pair_similarities(_records(["a", "a", "b"]), n_pairs=20, rng_seed=0,
                                    scorer=scorer)
    assert set(dist.scores) <= {1.0, 0.25}


def test_external_scorer_rejects_out_of_range():
    bad = "import sys\nfor line in sys.stdin:\n    print(3.0)\n"
    scorer = ExternalScorer([sys.executable, "-c", bad])
    with pytest.raises(ValueError, match="out-of-range"):
        scorer.score_pairs([("a", "b")])


def test_external_scorer_rejects_count_mismatch():
    silent = "import sys\nsys.stdin.read()\n"
    scorer = ExternalScorer([sys.executable, "-c", silent])
    with pytest.raises(ValueError, match="0 scores for 1 pairs"):
        scorer.score_pairs([("a", "b")])


def test_external_scorer_propagates_process_failure():
    scorer = ExternalScorer([sys.executable, "-c", "import sys; sys.exit(9)"])
    with pytest.raises(RuntimeError, match="exited with 9"):
        scorer.score_pairs([("a", "b")])


# ------------------------------------------------------------------ cost model


def test_cost_of_64k_core_examples():
    report = estimate_cost(64_000, 0)
    assert report.generated_cost == Decimal("1280.00")
    assert report.human_equivalent_cost == Decimal("32000.00")
    assert report.ratio == 25.0


def test_cost_zero_counts():
    report = estimate_cost(0, 0)
    assert report.generated_cost == 0
    assert report.human_equivalent_cost == 0
    assert report.ratio == 0.0


def test_cost_unit_counts():
    report = estimate_cost(1, 1)
    assert report.generated_cost == Decimal("0.03")
    assert report.human_equivalent_cost == Decimal("1.00")


def test_cost_ratio_infinite_with_free_generation():
    report = estimate_cost(3, 0, CostModel(per_core_example=Decimal("0")))
    assert math.isinf(report.ratio)


def test_cost_rejects_negative_counts_and_rates():
    with pytest.raises(ValueError):
        estimate_cost(-1, 0)
    with pytest.raises(ValueError):
        CostModel(per_human_example=Decimal("-0.5"))


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=0, max_value=10**6),
       st.integers(min_value=0, max_value=10**6))
def test_cost_is_linear_and_monotone(core, expanded, bump):
    base = estimate_cost(core, expanded)
    more_core = estimate_cost(core + bump, expanded)
    more_expanded = estimate_cost(core, expanded + bump)
    assert more_core.generated_cost - base.generated_cost == bump * Decimal("0.02")
    assert more_expanded.generated_cost - base.generated_cost == bump * Decimal("0.01")
    assert more_core.human_equivalent_cost >= base.human_equivalent_cost


# ------------------------------------------------------------------ dataset stats


def test_stats_empty_dataset():
    stats = dataset_stats([])
    assert stats["total_records"] == 0
    assert stats["records_by_kind"] == {}
    assert stats["instruction_groups"]["count"] == 0


def test_stats_no_constraint_prevalence():
    records = [
        {"instruction": "a", "input": "x", "constraints": "None.", "output": "1"},
        {"instruction": "b", "input": "y", "constraints": "None.", "output": "2"},
        {"instruction": "c", "input": "z", "constraints": "The output should be 'x'.", "output": "3"},
    ]
    stats = dataset_stats(records)
    assert stats["constraints"]["no_constraint_prevalence"] == pytest.approx(2 / 3)


def test_stats_malformed_records_tolerated():
    records = [{"instruction": "a", "input": "x", "output": "1"}, "not a dict", {"foo": 1}]
    stats = dataset_stats(records)
    assert stats["total_records"] == 3
    assert stats["malformed_records"] == 2


def test_stats_paraphrase_rate_matches_hand_count():
    # 3 instructions: A has 2 templates, B has 1, C has 0 -> rate 1/3
    records = []
    for name, inputs, templates in (("A", 2, 2), ("B", 1, 1), ("C", 1, 0)):
        for i in range(inputs):
            rid = f"core-{name}{i}"
            records.append({
                "id": f"x{name}{i}", "formulation_kind": "core",
                "task_text": f"Task {name}.", "input": f"in {name} {i}",
                "rendered_task": "...", "output": "o", "core_example_id": rid,
            })
            for t in range(templates):
                records.append({
                    "id": f"p{name}{i}{t}", "formulation_kind": "paraphrase",
                    "task_text": f"Variant {t} of {name}: {{INPUT}}", "input": f"in {name} {i}",
                    "rendered_task": "...", "output": "o", "core_example_id": rid,
                })
    stats = dataset_stats(records)
    assert stats["paraphrase"]["instructions"] == 3
    assert stats["paraphrase"]["with_two_or_more_templates"] == 1
    assert stats["paraphrase"]["two_template_rate"] == pytest.approx(1 / 3)
    assert stats["records_by_kind"] == {"core": 4, "paraphrase": 5}
    assert stats["instruction_groups"]["max_inputs"] == 2


def test_stats_field_length_histograms_count_everything():
    records = [{"instruction": "a" * 40, "input": "b" * 700, "output": "c"}]
    stats = dataset_stats(records)
    lengths = stats["field_lengths"]
    assert lengths["instruction"]["histogram"]["32-63"] == 1
    assert lengths["input"]["histogram"]["512-1023"] == 1
    assert sum(lengths["output"]["histogram"].values()) == 1
