"""Inverse-cloze training pairs and masked evaluation pools.

A pair takes a contiguous span of a record (30% of its words, rounded
half-up, at least one word) as the query. The query keeps the signal
segments aligned with the span words. The passage the query must retrieve
is the record's word sequence, with the span excised with probability
``p_mask`` during training. Evaluation pools re-derive the positive for
each pair at a chosen masking ratio, so the stored ``span_removed`` flag
only matters for training batches.

Pairs serialize to JSON lines. Signal data is not duplicated there; a pair
references its source record id plus span indices, and loading requires
the corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, PairedRecord, SignalSequence, round_half_up
from .errors import ConfigError, DimensionError, FormatError

SPAN_RATIO = 0.3
DEFAULT_P_MASK = 0.9


@dataclass(eq=False)
class IctPair:
    pair_id: str
    query_words: list[str]
    query_signal: SignalSequence
    positive_tokens: list[str]
    span_start: int
    span_len: int
    span_removed: bool
    source_record_id: str
    modality: str

    def source_tokens(self) -> list[str]:
        """The full word sequence of the source record."""
        if self.span_removed:
            return (
                self.positive_tokens[: self.span_start]
                + self.query_words
                + self.positive_tokens[self.span_start :]
            )
        return list(self.positive_tokens)

    def masked_tokens(self) -> list[str]:
        """The source sequence with the query span excised."""
        src = self.source_tokens()
        return src[: self.span_start] + src[self.span_start + self.span_len :]


@dataclass
class Passage:
    passage_id: str
    tokens: list[str]


@dataclass
class EvalPool:
    """Deduplicated passages plus the positive assignment for each pair."""

    pairs: list[IctPair]
    passages: list[Passage]
    positives: dict[str, str]
    mask_ratio: float


def span_length(n_words: int, ratio: float = SPAN_RATIO) -> int:
    if n_words < 1:
        raise DimensionError("cannot take a span of an empty sequence")
    return max(1, round_half_up(ratio * n_words))


def extract_span(n_words: int, rng: np.random.Generator, ratio: float = SPAN_RATIO) -> tuple[int, int]:
    """(start, length) with start uniform over all feasible positions."""
    length = span_length(n_words, ratio)
    start = int(rng.integers(0, n_words - length + 1))
    return start, length


def make_pair(
    record: PairedRecord,
    rng: np.random.Generator,
    p_mask: float = DEFAULT_P_MASK,
    pair_id: str | None = None,
) -> IctPair:
    if not 0.0 <= p_mask <= 1.0:
        raise ConfigError("p_mask must lie in [0, 1]")
    words = record.sequence.words
    start, length = extract_span(len(words), rng)
    removed = bool(rng.random() < p_mask)
    positive = list(words)
    if removed:
        positive = positive[:start] + positive[start + length :]
    return IctPair(
        pair_id=pair_id if pair_id is not None else f"{record.record_id}#0",
        query_words=list(words[start : start + length]),
        query_signal=record.sequence.slice(start, start + length),
        positive_tokens=positive,
        span_start=start,
        span_len=length,
        span_removed=removed,
        source_record_id=record.record_id,
        modality=record.modality,
    )


def build_training_pairs(
    corpus: Corpus,
    pairs_per_record: int = 1,
    p_mask: float = DEFAULT_P_MASK,
    seed: int = 0,
) -> list[IctPair]:
    """Pairs in record order; each record gets its own derived seed
    (seed XOR record index), so records can be processed independently."""
    if pairs_per_record < 1:
        raise ConfigError("pairs_per_record must be positive")
    if not corpus.records:
        raise ConfigError("cannot build pairs from an empty corpus")
    pairs = []
    for index, record in enumerate(corpus.records):
        rng = np.random.default_rng(seed ^ index)
        for j in range(pairs_per_record):
            pairs.append(
                make_pair(record, rng, p_mask=p_mask, pair_id=f"{record.record_id}#{j}")
            )
    return pairs


def build_masked_pool(pairs: Sequence[IctPair], mask_ratio: float, seed: int = 0) -> EvalPool:
    """Pool with exactly round(mask_ratio * n) masked positives.

    The masked subset is the prefix of one seeded permutation, so pools
    built with the same seed nest across ratios: every pair masked at a
    lower ratio stays masked at any higher one.
    """
    if not pairs:
        raise ConfigError("cannot build a pool from zero pairs")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ConfigError("mask_ratio must lie in [0, 1]")
    n = len(pairs)
    n_masked = round_half_up(mask_ratio * n)
    order = np.random.default_rng(seed).permutation(n)
    masked = set(order[:n_masked].tolist())
    passages: list[Passage] = []
    by_tokens: dict[tuple[str, ...], str] = {}
    positives: dict[str, str] = {}
    for i, pair in enumerate(pairs):
        tokens = pair.masked_tokens() if i in masked else pair.source_tokens()
        key = tuple(tokens)
        pid = by_tokens.get(key)
        if pid is None:
            pid = f"d{len(passages):05d}"
            by_tokens[key] = pid
            passages.append(Passage(passage_id=pid, tokens=list(tokens)))
        if pair.pair_id in positives:
            raise ConfigError(f"duplicate pair id {pair.pair_id!r}")
        positives[pair.pair_id] = pid
    return EvalPool(pairs=list(pairs), passages=passages, positives=positives, mask_ratio=mask_ratio)


def write_pairs_jsonl(pairs: Sequence[IctPair], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(
                json.dumps(
                    {
                        "pair_id": pair.pair_id,
                        "source_record_id": pair.source_record_id,
                        "modality": pair.modality,
                        "query_words": pair.query_words,
                        "positive_tokens": pair.positive_tokens,
                        "span_start": pair.span_start,
                        "span_len": pair.span_len,
                        "span_removed": pair.span_removed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_pairs_jsonl(path, corpus: Corpus) -> list[IctPair]:
    """Rebuild pairs, reattaching query signals from the corpus records."""
    path = Path(path)
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                record = corpus.record_by_id(obj["source_record_id"])
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.args[0]}") from exc
            start = int(obj["span_start"])
            length = int(obj["span_len"])
            if start + length > len(record.sequence):
                raise FormatError(
                    f"{path}:{lineno}: span [{start}, {start + length}) exceeds record length"
                )
            pairs.append(
                IctPair(
                    pair_id=obj["pair_id"],
                    query_words=list(obj["query_words"]),
                    query_signal=record.sequence.slice(start, start + length),
                    positive_tokens=list(obj["positive_tokens"]),
                    span_start=start,
                    span_len=length,
                    span_removed=bool(obj["span_removed"]),
                    source_record_id=obj["source_record_id"],
                    modality=obj["modality"],
                )
            )
    return pairs
