"""Tests for ranking, metrics, sweeps, BM25, and the paired t-test."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from neuroretrieve import retrieval
from neuroretrieve.corpus import GeneratorConfig, generate_synthetic
from neuroretrieve.encoders import EncoderConfig, EncoderParams, TextProvider, encode_text
from neuroretrieve.errors import ConfigError, FormatError
from neuroretrieve.ict import Passage, build_masked_pool, build_training_pairs
from neuroretrieve.retrieval import (
    DEFAULT_RATIOS,
    METRIC_NAMES,
    SWEEP_HEADER,
    Bm25Index,
    MetricsReport,
    SweepReport,
    bm25_build,
    bm25_rank,
    bm25_score,
    bm25_sweep,
    evaluate,
    evaluate_bm25,
    hit_at_k,
    masking_sweep,
    metrics_from_ranks,
    mrr,
    noise_control,
    noise_sweep,
    paired_t_test,
    rank_by_scores,
    read_sweep_csv,
    read_sweep_json,
    regularized_incomplete_beta,
    resolve_threads,
    significance_table,
    student_t_two_sided_p,
    write_sweep_csv,
    write_sweep_json,
)
from neuroretrieve.training import similarity

EXPECTED_RANDOM_MRR_100 = 0.05187377517639621


def tiny_setup(pooling="mean", n_records=12, seed=3, vocab_size=40):
    gen = GeneratorConfig(
        n_records=n_records,
        passage_length_mean=8,
        query_count_target=n_records,
        T=4,
        C=2,
        latent_dim=8,
        noise_sigma=0.0,
        vocab_size=vocab_size,
        seed=seed,
    )
    corpus = generate_synthetic(gen, TextProvider(dimension=8, seed=11))
    pairs = build_training_pairs(corpus, seed=5)
    enc_cfg = EncoderConfig(T=4, C=2, hidden=16, layers=1, heads=2, pooling=pooling)
    params = EncoderParams.initialize(enc_cfg, seed=7)
    provider = TextProvider(dimension=16, seed=13)
    return pairs, params, provider


class TestMrr:
    def test_all_first_is_one(self):
        assert mrr([1, 1, 1]) == 1.0

    def test_direct_formula(self):
        assert mrr([1, 2, 4]) == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-15)

    def test_uniform_random_ranks_near_harmonic_expectation(self):
        """1000 uniform draws over 1..100 land near H_100/100."""
        rng = np.random.default_rng(19)
        ranks = rng.integers(1, 101, size=1000)
        assert abs(mrr(list(ranks)) - EXPECTED_RANDOM_MRR_100) < 0.01

    def test_empty_and_invalid_ranks_rejected(self):
        with pytest.raises(ConfigError):
            mrr([])
        with pytest.raises(ConfigError):
            mrr([1, 0, 2])


class TestHitAtK:
    def test_direct_fraction(self):
        assert hit_at_k([1, 7, 3], 5) == pytest.approx(2 / 3)

    def test_k_at_least_pool_size_is_one(self):
        assert hit_at_k([4, 9, 2], 9) == 1.0

    def test_k_below_one_rejected(self):
        with pytest.raises(ConfigError):
            hit_at_k([1], 0)

    @given(st.lists(st.integers(min_value=1, max_value=50), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_monotone_nondecreasing_in_k(self, ranks):
        values = [hit_at_k(ranks, k) for k in range(1, 51)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestRankByScores:
    def test_singleton_pool(self):
        assert rank_by_scores("q", {"p": 0.3}, "p").rank_of_positive == 1

    def test_clear_winner(self):
        ranked = rank_by_scores("q", {"pos": 0.9, "other": 0.1}, "pos")
        assert ranked.rank_of_positive == 1
        assert ranked.passage_ids == ("pos", "other")

    def test_ties_broken_by_ascending_id(self):
        scores = {"b": 0.5, "a": 0.5, "c": 0.5}
        assert rank_by_scores("q", scores, "a").rank_of_positive == 1
        assert rank_by_scores("q", scores, "b").rank_of_positive == 2
        assert rank_by_scores("q", scores, "c").rank_of_positive == 3

    def test_missing_positive_rejected(self):
        with pytest.raises(ConfigError):
            rank_by_scores("q", {"a": 1.0}, "zz")
        with pytest.raises(ConfigError):
            rank_by_scores("q", {}, "a")

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_counting_oracle_on_random_pools(self, seed):
        """Rank equals 1 + #(better scores) + #(equal scores with smaller id)."""
        rng = np.random.default_rng(seed)
        ids = [f"d{i:03d}" for i in range(50)]
        values = np.round(rng.normal(size=50), 2)
        scores = dict(zip(ids, values))
        pos = ids[int(rng.integers(50))]
        expected = 1 + sum(
            1
            for pid in ids
            if pid != pos
            and (scores[pid] > scores[pos] or (scores[pid] == scores[pos] and pid < pos))
        )
        assert rank_by_scores("q", scores, pos).rank_of_positive == expected


class TestResolveThreads:
    def test_default_is_serial(self, monkeypatch):
        monkeypatch.delenv("NEURORETRIEVE_THREADS", raising=False)
        assert resolve_threads() == 1

    def test_env_var_sets_count(self, monkeypatch):
        monkeypatch.setenv("NEURORETRIEVE_THREADS", "4")
        assert resolve_threads() == 4

    def test_explicit_argument_wins(self, monkeypatch):
        monkeypatch.setenv("NEURORETRIEVE_THREADS", "4")
        assert resolve_threads(2) == 2

    def test_invalid_values_rejected(self, monkeypatch):
        monkeypatch.setenv("NEURORETRIEVE_THREADS", "soon")
        with pytest.raises(ConfigError):
            resolve_threads()
        with pytest.raises(ConfigError):
            resolve_threads(0)


class TestEvaluate:
    def test_untrained_encoder_scores_near_random(self):
        pairs, params, provider = tiny_setup(n_records=100)
        pool = build_masked_pool(pairs, 0.0, seed=0)
        report = evaluate(pool, params, provider)
        n = report.pool_size
        expected = sum(1.0 / k for k in range(1, n + 1)) / n
        sigma = _mrr_sigma(n, report.n_queries)
        assert abs(report.mrr - expected) < 3 * sigma

    def test_metric_ordering_invariants(self):
        pairs, params, provider = tiny_setup(n_records=30)
        report = evaluate(build_masked_pool(pairs, 0.5, seed=1), params, provider)
        assert report.hit1 <= report.hit5 <= report.hit10
        assert report.mrr >= report.hit1
        assert 0.0 < report.mrr <= 1.0

    def test_deterministic(self):
        pairs, params, provider = tiny_setup()
        pool = build_masked_pool(pairs, 0.25, seed=2)
        assert evaluate(pool, params, provider) == evaluate(pool, params, provider)

    def test_thread_count_does_not_change_results(self, monkeypatch):
        pairs, params, provider = tiny_setup()
        pool = build_masked_pool(pairs, 0.5, seed=2)
        serial = evaluate(pool, params, provider, threads=1)
        monkeypatch.setenv("NEURORETRIEVE_THREADS", "3")
        assert evaluate(pool, params, provider) == serial

    def test_text_on_both_sides_retrieves_itself(self):
        """Identical embeddings on both sides make every rank 1."""
        pairs, _, provider = tiny_setup()
        pool = build_masked_pool(pairs, 0.0, seed=0)
        reprs = {p.passage_id: encode_text(p.tokens, provider, "mean") for p in pool.passages}
        ranks = []
        for pair in pool.pairs:
            positive = pool.positives[pair.pair_id]
            query = encode_text(
                next(p.tokens for p in pool.passages if p.passage_id == positive),
                provider,
                "mean",
            )
            scores = {pid: similarity(query, rep, "mean") for pid, rep in reprs.items()}
            ranks.append(rank_by_scores(pair.pair_id, scores, positive).rank_of_positive)
        assert mrr(ranks) == 1.0


def _mrr_sigma(pool_size, n_queries):
    """Std of the mean reciprocal rank under uniform random ranking."""
    ranks = np.arange(1, pool_size + 1, dtype=np.float64)
    mean = (1.0 / ranks).mean()
    var = (1.0 / ranks**2).mean() - mean**2
    return math.sqrt(var / n_queries)


class TestNoiseControl:
    def test_scores_near_random_for_any_seed(self):
        pairs, params, provider = tiny_setup(n_records=100)
        pool = build_masked_pool(pairs, 0.5, seed=0)
        n = len(pool.passages)
        expected = sum(1.0 / k for k in range(1, n + 1)) / n
        sigma = _mrr_sigma(n, len(pool.pairs))
        for seed in (0, 7):
            report = noise_control(pool, params, provider, seed=seed)
            assert abs(report.mrr - expected) < 3 * sigma

    def test_deterministic_per_seed(self):
        pairs, params, provider = tiny_setup()
        pool = build_masked_pool(pairs, 0.0, seed=0)
        a = noise_control(pool, params, provider, seed=3)
        b = noise_control(pool, params, provider, seed=3)
        assert a == b

    def test_original_pool_left_untouched(self):
        pairs, params, provider = tiny_setup()
        pool = build_masked_pool(pairs, 0.0, seed=0)
        before = [pair.query_signal.signal.copy() for pair in pool.pairs]
        noise_control(pool, params, provider, seed=1)
        for pair, signal in zip(pool.pairs, before):
            assert np.array_equal(pair.query_signal.signal, signal)


class TestSweeps:
    def test_default_grid_produces_six_reports(self):
        pairs, params, provider = tiny_setup()
        sweep = masking_sweep(pairs, params, provider, seed=0)
        assert sweep.ratios == DEFAULT_RATIOS
        assert len(sweep.reports) == 6
        for ratio, report in zip(sweep.ratios, sweep.reports):
            assert report.mask_ratio == ratio
            assert report.pool_size > 0

    def test_ratios_come_back_sorted(self):
        pairs, params, provider = tiny_setup()
        sweep = masking_sweep(pairs, params, provider, ratios=[1.0, 0.0, 0.5], seed=0)
        assert sweep.ratios == (0.0, 0.5, 1.0)

    def test_mean_and_std_match_independent_recomputation(self):
        reports = tuple(
            metrics_from_ranks([r], 10, ratio)
            for ratio, r in zip((0.0, 0.5, 1.0), (1, 2, 4))
        )
        sweep = SweepReport(system="dense", ratios=(0.0, 0.5, 1.0), reports=reports)
        values = [1.0, 0.5, 0.25]
        assert sweep.mean("mrr") == pytest.approx(np.mean(values), abs=1e-15)
        assert sweep.std("mrr") == pytest.approx(np.std(values, ddof=1), abs=1e-15)

    def test_constant_metrics_have_zero_std(self):
        reports = tuple(metrics_from_ranks([2, 2], 10, r) for r in (0.0, 1.0))
        sweep = SweepReport(system="dense", ratios=(0.0, 1.0), reports=reports)
        for name in METRIC_NAMES:
            assert sweep.std(name) == 0.0

    def test_single_ratio_std_is_zero(self):
        sweep = SweepReport(
            system="dense", ratios=(0.5,), reports=(metrics_from_ranks([3], 10, 0.5),)
        )
        assert sweep.std("mrr") == 0.0

    def test_invalid_ratio_rejected(self):
        pairs, params, provider = tiny_setup()
        with pytest.raises(ConfigError):
            masking_sweep(pairs, params, provider, ratios=[0.0, 1.5])
        with pytest.raises(ConfigError):
            masking_sweep(pairs, params, provider, ratios=[])

    def test_unsorted_construction_rejected(self):
        reports = tuple(metrics_from_ranks([1], 5, r) for r in (1.0, 0.0))
        with pytest.raises(ConfigError):
            SweepReport(system="dense", ratios=(1.0, 0.0), reports=reports)

    def test_noise_sweep_shares_the_grid(self):
        pairs, params, provider = tiny_setup()
        sweep = noise_sweep(pairs, params, provider, ratios=(0.0, 1.0), seed=0)
        assert sweep.system == "noise"
        assert sweep.ratios == (0.0, 1.0)


class TestBm25:
    def docs(self):
        return [
            Passage("d1", ["the", "cat", "sat"]),
            Passage("d2", ["the", "dog"]),
            Passage("d3", ["cat", "cat", "dog"]),
        ]

    def test_hand_computed_okapi_scores(self):
        """Three-document toy index against the formula written out longhand."""
        index = bm25_build(self.docs())
        idf = math.log((3 - 2 + 0.5) / (2 + 0.5) + 1.0)
        avgdl = 8 / 3
        norm3 = 1 - 0.75 + 0.75 * 3 / avgdl
        norm2 = 1 - 0.75 + 0.75 * 2 / avgdl
        query = ["cat", "dog"]
        assert_allclose(
            bm25_score(query, index, "d1"),
            idf * 1 * 2.5 / (1 + 1.5 * norm3),
            rtol=0,
            atol=1e-9,
        )
        assert_allclose(
            bm25_score(query, index, "d2"),
            idf * 1 * 2.5 / (1 + 1.5 * norm2),
            rtol=0,
            atol=1e-9,
        )
        assert_allclose(
            bm25_score(query, index, "d3"),
            idf * 2 * 2.5 / (2 + 1.5 * norm3) + idf * 1 * 2.5 / (1 + 1.5 * norm3),
            rtol=0,
            atol=1e-9,
        )

    def test_absent_query_term_contributes_nothing(self):
        index = bm25_build(self.docs())
        assert bm25_score(["cat"], index, "d3") == bm25_score(["cat", "zebra"], index, "d3")

    def test_identical_documents_tie_by_id(self):
        passages = [Passage("b", ["x", "y"]), Passage("a", ["x", "y"])]
        index = bm25_build(passages)
        ranked = bm25_rank(["x"], index, "q", "b")
        assert ranked.passage_ids == ("a", "b")
        assert ranked.rank_of_positive == 2

    def test_idf_stays_positive_even_for_ubiquitous_terms(self):
        index = bm25_build([Passage(f"d{i}", ["common"]) for i in range(5)])
        assert index.idf("common") > 0

    def test_empty_index_rejected(self):
        with pytest.raises(ConfigError):
            bm25_build([])

    def test_duplicate_passage_id_rejected(self):
        with pytest.raises(ConfigError):
            bm25_build([Passage("d", ["a"]), Passage("d", ["b"])])

    def test_masking_degrades_bm25(self):
        """Removing the span's terms from positives lowers lexical MRR."""
        pairs, _, _ = tiny_setup(n_records=40)
        sweep = bm25_sweep(pairs, ratios=(0.0, 1.0), seed=0)
        assert sweep.reports[1].mrr <= sweep.reports[0].mrr

    def test_evaluate_bm25_reports_pool_shape(self):
        pairs, _, _ = tiny_setup(n_records=20)
        pool = build_masked_pool(pairs, 0.5, seed=0)
        report = evaluate_bm25(pool)
        assert report.pool_size == len(pool.passages)
        assert report.n_queries == len(pool.pairs)
        assert report.hit1 <= report.hit5 <= report.hit10


class TestIncompleteBeta:
    def test_frozen_reference_values(self):
        assert_allclose(
            regularized_incomplete_beta(1.0, 0.5, 0.4),
            0.22540333075851665,
            rtol=0,
            atol=1e-10,
        )
        assert_allclose(
            regularized_incomplete_beta(2.5, 0.5, 0.9),
            0.48958974456442755,
            rtol=0,
            atol=1e-10,
        )

    def test_boundaries(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0

    @given(
        st.floats(min_value=0.5, max_value=8.0),
        st.floats(min_value=0.5, max_value=8.0),
        st.floats(min_value=0.01, max_value=0.99),
    )
    @settings(max_examples=60, deadline=None)
    def test_reflection_identity(self, a, b, x):
        lhs = regularized_incomplete_beta(a, b, x)
        rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
        assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ConfigError):
            regularized_incomplete_beta(0.0, 1.0, 0.5)


class TestPairedTTest:
    def test_identical_samples(self):
        result = paired_t_test([0.4, 0.5, 0.6], [0.4, 0.5, 0.6])
        assert result.t == 0.0
        assert result.p == 1.0
        assert result.df == 2

    def test_three_point_difference_oracle(self):
        """d = [0.1, 0.2, 0.3] gives t = 3.4641, df = 2, p = 0.0742."""
        result = paired_t_test([0.6, 0.7, 0.8], [0.5, 0.5, 0.5])
        assert result.t == pytest.approx(3.4641016151377553, rel=1e-9)
        assert result.df == 2
        assert result.p == pytest.approx(0.0741799002274485, abs=1e-8)

    def test_six_point_difference_is_significant(self):
        a = [0.6, 0.7, 0.8, 0.6, 0.7, 0.8]
        b = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
        result = paired_t_test(a, b)
        assert result.t == pytest.approx(5.477225575051662, rel=1e-9)
        assert result.df == 5
        assert result.p == pytest.approx(0.002764960301304952, abs=1e-8)
        assert result.p < 0.05

    def test_antisymmetry(self):
        a, b = [0.9, 0.3, 0.7], [0.2, 0.4, 0.1]
        fwd = paired_t_test(a, b)
        rev = paired_t_test(b, a)
        assert fwd.t == pytest.approx(-rev.t, rel=1e-12)
        assert fwd.p == pytest.approx(rev.p, rel=1e-12)

    def test_zero_variance_conventions(self):
        shifted = paired_t_test([1.1, 1.1], [1.0, 1.0])
        assert math.isinf(shifted.t) and shifted.t > 0
        assert shifted.p == 0.0
        negative = paired_t_test([1.0, 1.0], [1.1, 1.1])
        assert negative.t < 0 and math.isinf(negative.t)

    def test_bad_inputs_rejected(self):
        with pytest.raises(ConfigError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(ConfigError):
            paired_t_test([1.0, 2.0], [1.0])

    def test_matches_scipy_on_random_inputs(self):
        stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(99)
        for _ in range(50):
            n = int(rng.integers(3, 9))
            a = rng.normal(size=n)
            b = rng.normal(size=n)
            if np.std(a - b, ddof=1) == 0:
                continue
            ours = paired_t_test(list(a), list(b))
            ref = stats.ttest_rel(a, b)
            assert ours.t == pytest.approx(ref.statistic, abs=1e-6)
            assert ours.p == pytest.approx(ref.pvalue, abs=1e-4)

    def test_two_sided_p_edge_cases(self):
        assert student_t_two_sided_p(0.0, 5) == 1.0
        assert student_t_two_sided_p(math.inf, 5) == 0.0


class TestSignificanceTable:
    def sweep_with(self, values, ratios=(0.0, 0.25, 0.5, 0.75, 0.9, 1.0)):
        reports = []
        for ratio, v in zip(ratios, values):
            reports.append(
                MetricsReport(
                    mask_ratio=ratio,
                    pool_size=100,
                    n_queries=10,
                    mrr=v,
                    hit1=0.5,
                    hit5=0.6,
                    hit10=0.7,
                )
            )
        return SweepReport(system="dense", ratios=tuple(ratios), reports=tuple(reports))

    def test_report_against_itself_is_never_significant(self):
        sweep = self.sweep_with([0.4, 0.5, 0.6, 0.4, 0.5, 0.6])
        rows = significance_table(sweep, sweep)
        assert [row["metric"] for row in rows] == list(METRIC_NAMES)
        for row in rows:
            assert row["p"] == 1.0
            assert not row["significant"]

    def test_constructed_gap_is_flagged(self):
        base = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
        better = [0.6, 0.7, 0.8, 0.6, 0.7, 0.8]
        rows = significance_table(self.sweep_with(better), self.sweep_with(base))
        by_metric = {row["metric"]: row for row in rows}
        assert by_metric["mrr"]["significant"]
        assert by_metric["mrr"]["t"] == pytest.approx(5.477225575051662, rel=1e-9)
        assert by_metric["mrr"]["df"] == 5
        assert by_metric["mrr"]["p"] < 0.05
        assert not by_metric["hit1"]["significant"]

    def test_mismatched_grids_rejected(self):
        a = self.sweep_with([0.5, 0.6], ratios=(0.0, 1.0))
        b = self.sweep_with([0.5, 0.6, 0.7], ratios=(0.0, 0.5, 1.0))
        with pytest.raises(ConfigError):
            significance_table(a, b)


class TestSweepSerialization:
    def sample_sweep(self):
        reports = (
            metrics_from_ranks([1, 3, 2], 7, 0.0),
            metrics_from_ranks([2, 5, 9], 9, 0.5),
            metrics_from_ranks([11, 4, 6], 11, 1.0),
        )
        return SweepReport(system="dense", ratios=(0.0, 0.5, 1.0), reports=reports)

    def test_csv_round_trip_preserves_all_columns(self, tmp_path):
        sweep = self.sample_sweep()
        path = tmp_path / "sweep.csv"
        write_sweep_csv(sweep, path)
        back = read_sweep_csv(path)
        assert back.ratios == sweep.ratios
        for ours, parsed in zip(sweep.reports, back.reports):
            assert parsed.mask_ratio == ours.mask_ratio
            assert parsed.pool_size == ours.pool_size
            assert parsed.mrr == ours.mrr
            assert parsed.hit1 == ours.hit1
            assert parsed.hit5 == ours.hit5
            assert parsed.hit10 == ours.hit10

    def test_csv_rewrite_is_byte_identical(self, tmp_path):
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        write_sweep_csv(self.sample_sweep(), first)
        write_sweep_csv(read_sweep_csv(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_csv_header_and_summary_are_present(self, tmp_path):
        path = tmp_path / "sweep.csv"
        write_sweep_csv(self.sample_sweep(), path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == SWEEP_HEADER
        assert lines[-1].startswith("mean±std,")
        assert len(lines) == 5

    def test_corrupted_summary_rejected(self, tmp_path):
        path = tmp_path / "sweep.csv"
        write_sweep_csv(self.sample_sweep(), path)
        text = path.read_text(encoding="utf-8")
        lines = text.splitlines()
        fields = lines[-1].split(",")
        fields[2] = "0.9±0.0"
        lines[-1] = ",".join(fields)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_sweep_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "sweep.csv"
        path.write_text("wrong,header\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_sweep_csv(path)

    def test_json_round_trip_is_lossless(self, tmp_path):
        sweep = self.sample_sweep()
        path = tmp_path / "sweep.json"
        write_sweep_json(sweep, path)
        assert read_sweep_json(path) == sweep

    def test_json_preserves_significance(self, tmp_path):
        rows = (
            {"metric": "mrr", "t": 2.5, "df": 5, "p": 0.04, "significant": True},
        )
        sweep = SweepReport(
            system="dense",
            ratios=(0.0,),
            reports=(metrics_from_ranks([2], 5, 0.0),),
            significance=rows,
        )
        path = tmp_path / "sweep.json"
        write_sweep_json(sweep, path)
        back = read_sweep_json(path)
        assert back.significance == rows
