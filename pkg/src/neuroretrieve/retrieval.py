"""Ranking, IR metrics, robustness sweeps, the BM25 baseline, and t-tests.

Evaluation is exhaustive: every query is scored against every pool passage
and sorted descending, with score ties broken by ascending passage id so
rankings are deterministic. Sweeps rebuild the pool at each masking ratio
and aggregate mean and sample standard deviation (n - 1 denominator) per
metric. The paired t-test pairs systems by masking level and computes its
two-sided p-value in-module from the regularized incomplete beta function,
so no statistics dependency is needed at runtime.

Reports serialize two ways: JSON carries the full structure, CSV carries
one row per ratio under the header ``ratio,pool_size,mrr,hit1,hit5,hit10``
followed by a final ``mean±std`` summary row. The CSV is the plotting
input for sweep figures.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import SignalSequence
from .encoders import EncoderParams, TextProvider, embed_signal, encode_text
from .errors import ConfigError, FormatError
from .ict import EvalPool, IctPair, Passage, build_masked_pool
from .training import similarity

METRIC_NAMES = ("mrr", "hit1", "hit5", "hit10")
DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)
THREADS_ENV_VAR = "NEURORETRIEVE_THREADS"


@dataclass(frozen=True)
class RankedList:
    """One query's full ordering of the pool, best first."""

    pair_id: str
    passage_ids: tuple[str, ...]
    rank_of_positive: int


@dataclass(frozen=True)
class MetricsReport:
    mask_ratio: float
    pool_size: int
    n_queries: int
    mrr: float
    hit1: float
    hit5: float
    hit10: float
    ranks: tuple[int, ...] = ()

    def metric(self, name: str) -> float:
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r}")
        return float(getattr(self, name))


@dataclass(frozen=True)
class SweepReport:
    """Per-ratio metrics for one system plus mean/std aggregation."""

    system: str
    ratios: tuple[float, ...]
    reports: tuple[MetricsReport, ...]
    significance: tuple[dict, ...] | None = None

    def __post_init__(self):
        if len(self.ratios) != len(self.reports):
            raise ConfigError("one report per ratio required")
        if list(self.ratios) != sorted(self.ratios):
            raise ConfigError("ratios must be sorted ascending")

    def metric_values(self, name: str) -> tuple[float, ...]:
        return tuple(r.metric(name) for r in self.reports)

    def mean(self, name: str) -> float:
        return float(np.mean(self.metric_values(name)))

    def std(self, name: str) -> float:
        """Sample standard deviation across ratios; 0.0 for a single ratio."""
        values = self.metric_values(name)
        if len(values) < 2:
            return 0.0
        return float(np.std(values, ddof=1))

    def summary(self) -> dict[str, dict[str, float]]:
        return {name: {"mean": self.mean(name), "std": self.std(name)} for name in METRIC_NAMES}


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank of 1-based positive ranks."""
    _check_ranks(ranks)
    return float(np.mean([1.0 / r for r in ranks]))


def hit_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose positive landed in the top k."""
    _check_ranks(ranks)
    if k < 1:
        raise ConfigError("k must be at least 1")
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def _check_ranks(ranks: Sequence[int]) -> None:
    if len(ranks) == 0:
        raise ConfigError("no ranks to aggregate")
    if any(r < 1 for r in ranks):
        raise ConfigError("ranks are 1-based and must be >= 1")


def rank_by_scores(pair_id: str, scores: Mapping[str, float], positive_id: str) -> RankedList:
    """Order passage ids by descending score, ascending id on ties."""
    if not scores:
        raise ConfigError("cannot rank an empty pool")
    if positive_id not in scores:
        raise ConfigError(f"positive passage {positive_id!r} missing from pool")
    order = tuple(sorted(scores, key=lambda pid: (-scores[pid], pid)))
    return RankedList(
        pair_id=pair_id,
        passage_ids=order,
        rank_of_positive=order.index(positive_id) + 1,
    )


def resolve_threads(requested: int | None = None) -> int:
    """Worker-thread count for evaluation; defaults to the env var, else 1."""
    if requested is None:
        raw = os.environ.get(THREADS_ENV_VAR, "").strip()
        if not raw:
            return 1
        try:
            requested = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV_VAR} must be a positive integer, got {raw!r}")
    if requested < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be a positive integer, got {requested}")
    return requested


def metrics_from_ranks(ranks: Sequence[int], pool_size: int, mask_ratio: float) -> MetricsReport:
    return MetricsReport(
        mask_ratio=float(mask_ratio),
        pool_size=int(pool_size),
        n_queries=len(ranks),
        mrr=mrr(ranks),
        hit1=hit_at_k(ranks, 1),
        hit5=hit_at_k(ranks, 5),
        hit10=hit_at_k(ranks, 10),
        ranks=tuple(int(r) for r in ranks),
    )


def evaluate(
    pool: EvalPool,
    params: EncoderParams,
    provider: TextProvider,
    threads: int | None = None,
) -> MetricsReport:
    """Rank every pair's query against the full passage pool."""
    strategy = params.cfg.pooling
    passage_reprs = {
        p.passage_id: encode_text(p.tokens, provider, strategy) for p in pool.passages
    }

    def rank_one(pair: IctPair) -> int:
        query = embed_signal(pair.query_signal, params)
        scores = {pid: similarity(query, rep, strategy) for pid, rep in passage_reprs.items()}
        return rank_by_scores(pair.pair_id, scores, pool.positives[pair.pair_id]).rank_of_positive

    n_threads = resolve_threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool_exec:
            ranks = list(pool_exec.map(rank_one, pool.pairs))
    else:
        ranks = [rank_one(pair) for pair in pool.pairs]
    return metrics_from_ranks(ranks, len(pool.passages), pool.mask_ratio)


def _check_ratios(ratios: Sequence[float]) -> tuple[float, ...]:
    if len(ratios) == 0:
        raise ConfigError("at least one masking ratio required")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"masking ratio {r} outside [0, 1]")
    return tuple(sorted(float(r) for r in ratios))


def masking_sweep(
    pairs: Sequence[IctPair],
    params: EncoderParams,
    provider: TextProvider,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    threads: int | None = None,
    system: str = "dense",
) -> SweepReport:
    """Evaluate the encoder at each masking ratio over rebuilt pools."""
    grid = _check_ratios(ratios)
    reports = tuple(
        evaluate(build_masked_pool(pairs, ratio, seed), params, provider, threads)
        for ratio in grid
    )
    return SweepReport(system=system, ratios=grid, reports=reports)


def noise_control(
    pool: EvalPool,
    params: EncoderParams,
    provider: TextProvider,
    seed: int = 0,
    threads: int | None = None,
) -> MetricsReport:
    """Evaluate with every query signal replaced by standard Gaussian noise.

    Shapes and word lists are preserved; only the signal content changes,
    so the result estimates random-ranking performance for the pool size.
    """
    rng = np.random.default_rng(seed)
    noisy_pairs = []
    for pair in pool.pairs:
        shape = pair.query_signal.signal.shape
        noise = rng.standard_normal(shape).astype(np.float32)
        noisy = dataclasses.replace(
            pair,
            query_signal=SignalSequence(words=list(pair.query_signal.words), signal=noise),
        )
        noisy_pairs.append(noisy)
    noisy_pool = EvalPool(
        pairs=noisy_pairs,
        passages=pool.passages,
        positives=pool.positives,
        mask_ratio=pool.mask_ratio,
    )
    return evaluate(noisy_pool, params, provider, threads)


def noise_sweep(
    pairs: Sequence[IctPair],
    params: EncoderParams,
    provider: TextProvider,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    threads: int | None = None,
    system: str = "noise",
) -> SweepReport:
    grid = _check_ratios(ratios)
    reports = tuple(
        noise_control(build_masked_pool(pairs, ratio, seed), params, provider, seed, threads)
        for ratio in grid
    )
    return SweepReport(system=system, ratios=grid, reports=reports)


@dataclass(frozen=True)
class Bm25Index:
    """Okapi BM25 statistics over a fixed passage pool."""

    k1: float
    b: float
    n_docs: int
    avgdl: float
    doc_ids: tuple[str, ...]
    doc_lengths: dict[str, int]
    term_freqs: dict[str, dict[str, int]]
    doc_freqs: dict[str, int]

    def idf(self, term: str) -> float:
        df = self.doc_freqs.get(term, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_build(passages: Sequence[Passage], k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    if not passages:
        raise ConfigError("cannot build a BM25 index over zero passages")
    if k1 < 0 or not 0.0 <= b <= 1.0:
        raise ConfigError("BM25 requires k1 >= 0 and b in [0, 1]")
    term_freqs: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    doc_freqs: Counter[str] = Counter()
    for p in passages:
        if p.passage_id in term_freqs:
            raise ConfigError(f"duplicate passage id {p.passage_id!r}")
        counts = Counter(p.tokens)
        term_freqs[p.passage_id] = dict(counts)
        doc_lengths[p.passage_id] = len(p.tokens)
        doc_freqs.update(counts.keys())
    return Bm25Index(
        k1=k1,
        b=b,
        n_docs=len(passages),
        avgdl=float(np.mean(list(doc_lengths.values()))),
        doc_ids=tuple(p.passage_id for p in passages),
        doc_lengths=doc_lengths,
        term_freqs=term_freqs,
        doc_freqs=dict(doc_freqs),
    )


def bm25_score(query_tokens: Sequence[str], index: Bm25Index, doc_id: str) -> float:
    freqs = index.term_freqs[doc_id]
    length_norm = 1.0 - index.b + index.b * index.doc_lengths[doc_id] / index.avgdl
    score = 0.0
    for term in query_tokens:
        f = freqs.get(term, 0)
        if f == 0:
            continue
        score += index.idf(term) * f * (index.k1 + 1.0) / (f + index.k1 * length_norm)
    return score


def bm25_rank(
    query_tokens: Sequence[str], index: Bm25Index, pair_id: str, positive_id: str
) -> RankedList:
    scores = {doc_id: bm25_score(query_tokens, index, doc_id) for doc_id in index.doc_ids}
    return rank_by_scores(pair_id, scores, positive_id)


def evaluate_bm25(pool: EvalPool, k1: float = 1.5, b: float = 0.75) -> MetricsReport:
    """Lexical baseline: queries are the pairs' word lists."""
    index = bm25_build(pool.passages, k1, b)
    ranks = [
        bm25_rank(pair.query_words, index, pair.pair_id, pool.positives[pair.pair_id]).rank_of_positive
        for pair in pool.pairs
    ]
    return metrics_from_ranks(ranks, len(pool.passages), pool.mask_ratio)


def bm25_sweep(
    pairs: Sequence[IctPair],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    k1: float = 1.5,
    b: float = 0.75,
    system: str = "bm25",
) -> SweepReport:
    grid = _check_ratios(ratios)
    reports = tuple(
        evaluate_bm25(build_masked_pool(pairs, ratio, seed), k1, b) for ratio in grid
    )
    return SweepReport(system=system, ratios=grid, reports=reports)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, by the modified Lentz method."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ConfigError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) with absolute error well under 1e-8 for a, b > 0."""
    if a <= 0 or b <= 0:
        raise ConfigError("incomplete beta requires a > 0 and b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with the given degrees of freedom."""
    if df < 1:
        raise ConfigError("degrees of freedom must be at least 1")
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on per-level metric values.

    Zero-variance differences follow the conventions: all-zero gives
    t = 0 and p = 1, constant nonzero gives t = +/-inf and p = 0.
    """
    if len(a) != len(b):
        raise ConfigError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ConfigError("paired t-test needs at least 2 pairs")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    df = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0)
        return TTestResult(t=math.copysign(math.inf, mean), df=df, p=0.0)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, df=df, p=student_t_two_sided_p(t, df))


def significance_table(
    sweep_a: SweepReport, sweep_b: SweepReport, alpha: float = 0.05
) -> list[dict]:
    """Per-metric paired t-tests between two sweeps over the same ratios."""
    if sweep_a.ratios != sweep_b.ratios:
        raise ConfigError(
            f"ratio grids differ: {list(sweep_a.ratios)} vs {list(sweep_b.ratios)}"
        )
    rows = []
    for name in METRIC_NAMES:
        result = paired_t_test(sweep_a.metric_values(name), sweep_b.metric_values(name))
        rows.append(
            {
                "metric": name,
                "t": result.t,
                "df": result.df,
                "p": result.p,
                "significant": bool(result.p < alpha),
            }
        )
    return rows


SWEEP_HEADER = "ratio,pool_size,mrr,hit1,hit5,hit10"
SUMMARY_LABEL = "mean±std"


def _summary_fields(report: SweepReport) -> list[str]:
    fields = [SUMMARY_LABEL]
    pools = [float(r.pool_size) for r in report.reports]
    pool_std = float(np.std(pools, ddof=1)) if len(pools) > 1 else 0.0
    fields.append(f"{float(np.mean(pools))!r}±{pool_std!r}")
    for name in METRIC_NAMES:
        fields.append(f"{report.mean(name)!r}±{report.std(name)!r}")
    return fields


def write_sweep_csv(report: SweepReport, path) -> None:
    lines = [SWEEP_HEADER]
    for r in report.reports:
        lines.append(
            f"{r.mask_ratio!r},{r.pool_size},{r.mrr!r},{r.hit1!r},{r.hit5!r},{r.hit10!r}"
        )
    lines.append(",".join(_summary_fields(report)))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_sweep_csv(path, system: str = "dense") -> SweepReport:
    """Parse a sweep CSV back into a report.

    Per-query ranks and query counts are not part of the delimited format,
    so those fields come back empty. The summary row is validated against
    a recomputation from the parsed rows.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != SWEEP_HEADER:
        raise FormatError(f"expected header {SWEEP_HEADER!r} in {path}")
    reports = []
    summary_fields = None
    for line in lines[1:]:
        fields = line.split(",")
        if fields[0] == SUMMARY_LABEL:
            summary_fields = fields
            continue
        if summary_fields is not None:
            raise FormatError("data rows after the summary row")
        if len(fields) != 6:
            raise FormatError(f"expected 6 fields, got {len(fields)}: {line!r}")
        reports.append(
            MetricsReport(
                mask_ratio=float(fields[0]),
                pool_size=int(fields[1]),
                n_queries=0,
                mrr=float(fields[2]),
                hit1=float(fields[3]),
                hit5=float(fields[4]),
                hit10=float(fields[5]),
            )
        )
    report = SweepReport(
        system=system,
        ratios=tuple(r.mask_ratio for r in reports),
        reports=tuple(reports),
    )
    if summary_fields is None:
        raise FormatError("missing summary row")
    expected = _summary_fields(report)
    for got, want in zip(summary_fields[1:], expected[1:]):
        g_mean, g_std = (float(v) for v in got.split("±"))
        w_mean, w_std = (float(v) for v in want.split("±"))
        if not (math.isclose(g_mean, w_mean, rel_tol=1e-9, abs_tol=1e-12)
                and math.isclose(g_std, w_std, rel_tol=1e-9, abs_tol=1e-12)):
            raise FormatError(f"summary row disagrees with data rows: {got} vs {want}")
    return report


def sweep_to_dict(report: SweepReport) -> dict:
    return {
        "system": report.system,
        "ratios": list(report.ratios),
        "reports": [dataclasses.asdict(r) | {"ranks": list(r.ranks)} for r in report.reports],
        "summary": report.summary(),
        "significance": list(report.significance) if report.significance else None,
    }


def write_sweep_json(report: SweepReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(sweep_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")


def sweep_from_dict(payload: Mapping, where: str = "sweep payload") -> SweepReport:
    try:
        reports = tuple(
            MetricsReport(
                mask_ratio=r["mask_ratio"],
                pool_size=r["pool_size"],
                n_queries=r["n_queries"],
                mrr=r["mrr"],
                hit1=r["hit1"],
                hit5=r["hit5"],
                hit10=r["hit10"],
                ranks=tuple(r.get("ranks", ())),
            )
            for r in payload["reports"]
        )
        significance = payload.get("significance")
        return SweepReport(
            system=payload["system"],
            ratios=tuple(payload["ratios"]),
            reports=reports,
            significance=tuple(significance) if significance else None,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed sweep report in {where}: {exc}") from exc


def read_sweep_json(path) -> SweepReport:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return sweep_from_dict(payload, where=str(path))
