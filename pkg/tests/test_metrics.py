"""Metric definitions against independent brute-force re-computations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramen.metrics import (
    MetricsReport,
    PredictionRecord,
    build_report,
    harmonic_mean_per_type,
    mean_per_type,
    normalized_mean_per_type,
    simple_accuracy,
    vqa_10choose3,
)

FAMILIES = ("alpha", "beta", "gamma")
ANSWERS = ("yes", "no", "red", "blue", "2")


def rec(qid, family, pred, gold):
    return PredictionRecord(question_id=qid, family=family, predicted_answer=pred, gold=gold)


# --- independent oracles (dict-and-loop re-computation) ---------------------


def oracle_simple(records):
    return sum(r.predicted_answer == r.gold for r in records) / len(records)


def oracle_mpt(records):
    fams = {}
    for r in records:
        fams.setdefault(r.family, []).append(r)
    return sum(oracle_simple(g) for g in fams.values()) / len(fams)


def oracle_nmpt(records):
    fams = {}
    for r in records:
        fams.setdefault(r.family, []).append(r)
    fam_scores = []
    for g in fams.values():
        per_answer = {}
        for r in g:
            per_answer.setdefault(r.gold, []).append(r.predicted_answer == r.gold)
        fam_scores.append(
            sum(sum(v) / len(v) for v in per_answer.values()) / len(per_answer)
        )
    return sum(fam_scores) / len(fam_scores)


def oracle_10c3(records):
    total = 0.0
    for r in records:
        hits = sum(1 for g in r.gold if g == r.predicted_answer)
        total += min(hits / 3.0, 1.0)
    return total / len(records)


def random_records(rng, n=200):
    out = []
    for i in range(n):
        fam = FAMILIES[rng.integers(len(FAMILIES))]
        gold = ANSWERS[rng.integers(len(ANSWERS))]
        pred = gold if rng.random() < 0.55 else ANSWERS[rng.integers(len(ANSWERS))]
        out.append(rec(i, fam, pred, gold))
    return out


class TestSimpleAccuracy:
    def test_all_correct(self):
        records = [rec(i, "alpha", "yes", "yes") for i in range(5)]
        assert simple_accuracy(records) == 1.0

    def test_none_correct(self):
        records = [rec(i, "alpha", "no", "yes") for i in range(5)]
        assert simple_accuracy(records) == 0.0

    def test_three_of_four(self):
        records = [rec(0, "a", "x", "x"), rec(1, "a", "x", "x"),
                   rec(2, "a", "x", "x"), rec(3, "a", "y", "x")]
        assert simple_accuracy(records) == 0.75

    def test_case_and_whitespace_insensitive(self):
        assert simple_accuracy([rec(0, "a", " Yes ", "yes")]) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            simple_accuracy([])


class TestVqa10Choose3:
    def test_five_of_ten_clamps(self):
        golds = ("a",) * 5 + ("b",) * 5
        assert vqa_10choose3([rec(0, "f", "a", golds)]) == 1.0

    def test_two_of_ten(self):
        golds = ("a",) * 2 + ("b",) * 8
        assert vqa_10choose3([rec(0, "f", "a", golds)]) == pytest.approx(2 / 3)

    def test_zero_of_ten(self):
        golds = ("b",) * 10
        assert vqa_10choose3([rec(0, "f", "a", golds)]) == 0.0

    def test_wrong_gold_count_rejected(self):
        with pytest.raises(ValueError, match="expected 10"):
            vqa_10choose3([rec(0, "f", "a", ("a", "b"))])

    def test_matches_oracle_on_random_corpora(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            records = []
            for i in range(100):
                golds = tuple(ANSWERS[rng.integers(len(ANSWERS))] for _ in range(10))
                pred = ANSWERS[rng.integers(len(ANSWERS))]
                records.append(rec(i, "f", pred, golds))
            assert vqa_10choose3(records) == pytest.approx(oracle_10c3(records), abs=1e-12)


class TestMeanPerType:
    def test_single_family_collapses_to_simple(self):
        rng = np.random.default_rng(1)
        records = [r for r in random_records(rng, 50) if r.family == "alpha"]
        assert mean_per_type(records) == pytest.approx(simple_accuracy(records), abs=1e-12)

    def test_two_families(self):
        records = [rec(0, "a", "x", "x"), rec(1, "a", "x", "x"),
                   rec(2, "b", "x", "x"), rec(3, "b", "y", "x")]
        assert mean_per_type(records) == pytest.approx(0.75)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            records = random_records(rng)
            assert mean_per_type(records) == pytest.approx(oracle_mpt(records), abs=1e-12)


class TestNormalizedMeanPerType:
    def test_family_arithmetic(self):
        # answers a (2 questions, 1 correct) and b (1 question, correct) -> 0.75
        records = [rec(0, "f", "a", "a"), rec(1, "f", "x", "a"), rec(2, "f", "b", "b")]
        assert normalized_mean_per_type(records) == pytest.approx(0.75)

    def test_uniform_answers_equals_mpt(self):
        # every family has a single distinct answer -> N-MPT == MPT
        records = [rec(0, "a", "x", "x"), rec(1, "a", "y", "x"),
                   rec(2, "b", "z", "z"), rec(3, "b", "z", "z")]
        assert normalized_mean_per_type(records) == pytest.approx(mean_per_type(records), abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            records = random_records(rng)
            assert normalized_mean_per_type(records) == pytest.approx(
                oracle_nmpt(records), abs=1e-12
            )

    def test_biased_predictor_scores_lower_on_nmpt(self):
        # a majority-answer predictor on a skewed corpus: simple stays high,
        # N-MPT drops because rare answers are all missed
        records = []
        for i in range(90):
            records.append(rec(i, "f", "yes", "yes"))
        for i in range(10):
            records.append(rec(90 + i, "f", "yes", "no"))
        assert normalized_mean_per_type(records) < simple_accuracy(records)


class TestHarmonicMpt:
    def test_zero_family_gives_zero(self):
        records = [rec(0, "a", "x", "x"), rec(1, "b", "y", "x")]
        assert harmonic_mean_per_type(records) == 0.0

    def test_below_arithmetic(self):
        rng = np.random.default_rng(4)
        records = random_records(rng)
        assert harmonic_mean_per_type(records) <= mean_per_type(records) + 1e-12


@st.composite
def record_lists(draw):
    n = draw(st.integers(min_value=1, max_value=60))
    out = []
    for i in range(n):
        fam = draw(st.sampled_from(FAMILIES))
        gold = draw(st.sampled_from(ANSWERS))
        pred = draw(st.sampled_from(ANSWERS))
        out.append(rec(i, fam, pred, gold))
    return out


class TestProperties:
    @given(record_lists())
    @settings(max_examples=60, deadline=None)
    def test_bounds_and_order_invariance(self, records):
        for fn in (simple_accuracy, mean_per_type, normalized_mean_per_type):
            value = fn(records)
            assert 0.0 <= value <= 1.0
            assert fn(list(reversed(records))) == pytest.approx(value, abs=1e-12)

    @given(record_lists())
    @settings(max_examples=60, deadline=None)
    def test_mpt_between_family_extremes(self, records):
        fams = {}
        for r in records:
            fams.setdefault(r.family, []).append(r)
        accs = [simple_accuracy(g) for g in fams.values()]
        value = mean_per_type(records)
        assert min(accs) - 1e-12 <= value <= max(accs) + 1e-12

    @given(record_lists())
    @settings(max_examples=30, deadline=None)
    def test_overall_simple_is_count_weighted_family_mean(self, records):
        report = build_report(records)
        weighted = sum(
            v["simple"] * v["count"] for v in report.per_family.values()
        ) / sum(v["count"] for v in report.per_family.values())
        assert report.overall_simple == pytest.approx(weighted, abs=1e-12)


class TestReport:
    def test_json_schema(self):
        rng = np.random.default_rng(5)
        report = build_report(random_records(rng, 40), include_harmonic=True)
        import json

        payload = json.loads(report.to_json())
        assert set(payload) == {"overall", "per_family"}
        assert {"simple", "mpt", "nmpt", "harmonic_mpt"} <= set(payload["overall"])
        for fam in payload["per_family"].values():
            assert {"simple", "count", "per_answer"} <= set(fam)

    def test_vqa10c3_present_only_for_multi_gold(self):
        rng = np.random.default_rng(6)
        single = build_report(random_records(rng, 20))
        assert single.vqa10c3 is None
        multi = build_report(
            [rec(i, "f", "a", ("a",) * 10) for i in range(5)]
        )
        assert multi.vqa10c3 == 1.0
