import json

import numpy as np
import pytest

from triquant import (
    CodebookSet,
    EvaluationError,
    aqd_score,
    build_table,
    evaluate,
    mean_average_precision,
    precision_at_n,
    precision_recall_curve,
    reconstruct,
    reconstruct_batch,
    search,
)
from triquant.evaluation import average_precision, save_report, score_all


def random_codebooks(rng, m=3, d=5, k=4):
    return CodebookSet(rng.normal(size=(m, d, k)))


class TestLookupTable:
    def test_table_matches_loop_oracle(self, rng):
        cb = random_codebooks(rng)
        q = rng.normal(size=5)
        table = build_table(q, cb)
        assert table.shape == (3, 4)
        for m in range(3):
            for k in range(4):
                assert table[m, k] == pytest.approx(float(q @ cb.codebooks[m, :, k]))

    def test_aqd_equals_direct_inner_product(self, rng):
        # lookup-sum must equal dot(query, reconstruction) exactly
        cb = random_codebooks(rng)
        for _ in range(200):
            q = rng.normal(size=5)
            code = rng.integers(4, size=3)
            table = build_table(q, cb)
            direct = float(q @ reconstruct(cb, code))
            assert abs(aqd_score(table, code) - direct) <= 1e-10

    def test_score_all_matches_single(self, rng):
        cb = random_codebooks(rng)
        q = rng.normal(size=5)
        codes = rng.integers(4, size=(50, 3))
        table = build_table(q, cb)
        scores = score_all(table, codes)
        for i in range(50):
            assert scores[i] == pytest.approx(aqd_score(table, codes[i]))

    def test_dim_mismatch(self, rng):
        cb = random_codebooks(rng)
        with pytest.raises(ValueError):
            build_table(rng.normal(size=4), cb)


class TestSearch:
    def test_matches_brute_force_ranking(self, rng):
        cb = random_codebooks(rng, m=2, d=6, k=5)
        codes = rng.integers(5, size=(40, 2))
        q = rng.normal(size=6)
        recon = reconstruct_batch(cb, codes)
        brute = np.argsort(-(recon @ q), kind="stable")
        result = search(q, cb, codes, top_r=40)
        assert np.array_equal(result.indices, brute)

    def test_scores_descending_and_aligned(self, rng):
        cb = random_codebooks(rng)
        codes = rng.integers(4, size=(30, 3))
        q = rng.normal(size=5)
        result = search(q, cb, codes, top_r=10)
        assert result.indices.shape == (10,)
        assert np.all(np.diff(result.scores) <= 1e-12)
        table = build_table(q, cb)
        for pos, score in zip(result.indices, result.scores):
            assert score == pytest.approx(aqd_score(table, codes[pos]))

    def test_ties_break_by_ascending_index(self, rng):
        # identical codes -> identical scores -> order must follow index
        cb = random_codebooks(rng)
        codes = np.tile(np.array([[1, 2, 3]]), (8, 1))
        q = rng.normal(size=5)
        result = search(q, cb, codes, top_r=8)
        assert np.array_equal(result.indices, np.arange(8))

    def test_top_r_bounds(self, rng):
        cb = random_codebooks(rng)
        codes = rng.integers(4, size=(5, 3))
        q = rng.normal(size=5)
        with pytest.raises(ValueError):
            search(q, cb, codes, top_r=0)
        with pytest.raises(ValueError):
            search(q, cb, codes, top_r=6)


def ap_oracle(ranking, relevant, r):
    """Scalar-loop average precision."""
    total = int(np.sum(relevant))
    if total == 0:
        return None
    hits = 0
    acc = 0.0
    for rank, idx in enumerate(ranking[:r], start=1):
        if relevant[idx]:
            hits += 1
            acc += hits / rank
    return acc / min(r, total)


class TestAveragePrecision:
    def test_hand_case(self):
        # ranking: rel, non, rel; two relevant total, r=3
        relevant = np.array([True, False, True])
        ranking = np.array([0, 1, 2])
        # precision at relevant ranks: 1/1 and 2/3; denominator min(3, 2)=2
        assert average_precision(ranking, relevant, 3) == pytest.approx((1 + 2 / 3) / 2)

    def test_truncation_denominator_uses_r(self):
        # 5 relevant items but r=2: denominator is min(2, 5) = 2
        relevant = np.ones(5, dtype=bool)
        ranking = np.arange(5)
        assert average_precision(ranking, relevant, 2) == pytest.approx(1.0)

    def test_perfect_and_worst_orderings(self):
        relevant = np.array([True, True, False, False])
        assert average_precision(np.array([0, 1, 2, 3]), relevant, 4) == pytest.approx(1.0)
        worst = average_precision(np.array([2, 3, 0, 1]), relevant, 4)
        assert worst == pytest.approx((1 / 3 + 2 / 4) / 2)

    def test_no_relevant_returns_none(self):
        assert average_precision(np.arange(3), np.zeros(3, dtype=bool), 3) is None

    def test_matches_loop_oracle_random(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 30))
            relevant = rng.random(n) < 0.3
            ranking = rng.permutation(n)
            r = int(rng.integers(1, n + 1))
            got = average_precision(ranking, relevant, r)
            want = ap_oracle(ranking, relevant, r)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want)


class TestMeanAveragePrecision:
    def test_skips_queries_without_relevant_items(self):
        rankings = [np.arange(3), np.arange(3)]
        relevances = [np.array([True, False, False]), np.zeros(3, dtype=bool)]
        # second query is skipped; first has AP 1.0
        assert mean_average_precision(rankings, relevances, 3) == pytest.approx(1.0)

    def test_all_skipped_raises(self):
        with pytest.raises(EvaluationError):
            mean_average_precision([np.arange(2)], [np.zeros(2, dtype=bool)], 2)

    def test_macro_average(self):
        rankings = [np.array([0, 1]), np.array([1, 0])]
        relevances = [np.array([True, False]), np.array([True, False])]
        # first: AP=1.0; second: relevant item ranked 2nd -> AP=0.5
        assert mean_average_precision(rankings, relevances, 2) == pytest.approx(0.75)

    def test_invalid_r(self):
        with pytest.raises(ValueError):
            mean_average_precision([np.arange(2)], [np.array([True, False])], 0)


class TestPrecisionRecallCurve:
    def test_hand_case(self):
        relevant = np.array([True, False, True])
        curve = precision_recall_curve(np.array([0, 1, 2]), relevant)
        assert curve == [
            (pytest.approx(0.5), pytest.approx(1.0)),
            (pytest.approx(0.5), pytest.approx(0.5)),
            (pytest.approx(1.0), pytest.approx(2 / 3)),
        ]

    def test_recall_monotone_and_ends_at_one(self, rng):
        n = 20
        relevant = rng.random(n) < 0.4
        relevant[0] = True
        curve = precision_recall_curve(rng.permutation(n), relevant)
        recalls = [rec for rec, _ in curve]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == pytest.approx(1.0)

    def test_no_relevant_raises(self):
        with pytest.raises(EvaluationError):
            precision_recall_curve(np.arange(2), np.zeros(2, dtype=bool))


class TestPrecisionAtN:
    def test_hand_case(self):
        relevant = np.array([True, False, True, False])
        ranking = np.array([0, 2, 1, 3])  # two relevant first
        out = precision_at_n(ranking, relevant, [1, 2, 4])
        assert out == [
            (1, pytest.approx(1.0)),
            (2, pytest.approx(1.0)),
            (4, pytest.approx(0.5)),
        ]

    def test_out_of_range_n(self):
        with pytest.raises(ValueError):
            precision_at_n(np.arange(3), np.ones(3, dtype=bool), [4])


class TestEvaluate:
    def build_instance(self, rng):
        cb = random_codebooks(rng, m=2, d=4, k=3)
        codes = rng.integers(3, size=(25, 2))
        queries = rng.normal(size=(4, 4))
        relevances = rng.random((4, 25)) < 0.3
        relevances[:, 0] = True  # every query has at least one relevant
        return cb, codes, queries, relevances

    def test_map_matches_manual_composition(self, rng):
        cb, codes, queries, relevances = self.build_instance(rng)
        report = evaluate(queries, cb, codes, relevances, r=10)
        rankings = [search(q, cb, codes, 25).indices for q in queries]
        want = mean_average_precision(rankings, list(relevances), 10)
        assert report.map_at_r == pytest.approx(want)
        assert report.n_queries == 4
        assert report.r == 10

    def test_pr_curve_is_macro_average(self, rng):
        cb, codes, queries, relevances = self.build_instance(rng)
        report = evaluate(queries, cb, codes, relevances, r=10)
        curves = [
            precision_recall_curve(search(q, cb, codes, 25).indices, rel)
            for q, rel in zip(queries, relevances)
        ]
        for pos, (rec, prec) in enumerate(report.pr_curve):
            assert rec == pytest.approx(np.mean([c[pos][0] for c in curves]))
            assert prec == pytest.approx(np.mean([c[pos][1] for c in curves]))

    def test_default_n_list_capped_by_database(self, rng):
        cb, codes, queries, relevances = self.build_instance(rng)
        report = evaluate(queries, cb, codes, relevances, r=10)
        ns = [n for n, _ in report.p_at_n]
        assert ns == [1, 2, 5, 10, 20]  # database has 25 items

    def test_report_round_trip(self, tmp_path, rng):
        cb, codes, queries, relevances = self.build_instance(rng)
        report = evaluate(queries, cb, codes, relevances, r=5)
        path = tmp_path / "report.json"
        save_report(path, report)
        doc = json.loads(path.read_text())
        assert doc["map"] == pytest.approx(report.map_at_r)
        assert doc["r"] == 5
        assert doc["n_queries"] == 4
        assert len(doc["pr_curve"]) == len(report.pr_curve)
