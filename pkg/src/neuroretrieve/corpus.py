"""Paired signal/text corpora: data model, synthesis, and binary storage.

A corpus is a list of records. Each record pairs a word sequence with one
fixed-size signal segment per word, so a sequence of L words carries an
(L, T, C) float32 array: T samples by C channels per word.

Storage format (all integers little-endian):

    magic   4 bytes  b"NRT1"
    version u32      1
    T       u32
    C       u32
    count   u32      number of records
    then per record:
        id_len  u32, id UTF-8 bytes
        modality u8  (0 = auditory, 1 = visual)
        subj_len u32, subject id UTF-8 bytes
        L       u32  word count (must be >= 1)
        L x (word_len u32, word UTF-8 bytes)
        L*T*C   float32 values, row-major per word

A JSON sidecar ``<path>.meta.json`` carries the corpus name, its sorted
vocabulary, and summary statistics. The sidecar is advisory; the binary
file alone round-trips all record data.
"""

from __future__ import annotations

import json
import math
import string
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"NRT1"
FORMAT_VERSION = 1
MODALITIES = ("auditory", "visual")
_MODALITY_CODE = {"auditory": 0, "visual": 1}
_CODE_MODALITY = {code: name for name, code in _MODALITY_CODE.items()}

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_token(token: str) -> str:
    """Lowercase and drop punctuation characters; may return ''."""
    return token.translate(_PUNCT_TABLE).lower()


def tokenize(text: str) -> list[str]:
    """Whitespace split, then normalize; empty results are dropped."""
    out = []
    for raw in text.split():
        tok = normalize_token(raw)
        if tok:
            out.append(tok)
    return out


def round_half_up(x: float) -> int:
    """floor(x + 1/2) with a 1e-9 nudge so binary float artifacts
    (0.3 * 5 == 1.4999999999999998) still round like exact arithmetic."""
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(eq=False)
class SignalSequence:
    """L words of text aligned with an (L, T, C) float32 signal block."""

    words: list[str]
    signal: np.ndarray

    def __post_init__(self) -> None:
        self.signal = np.asarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 3:
            raise DimensionError(f"signal must be (L, T, C), got shape {self.signal.shape}")
        if len(self.words) != self.signal.shape[0]:
            raise DimensionError(
                f"{len(self.words)} words but {self.signal.shape[0]} signal segments"
            )
        if len(self.words) == 0:
            raise DimensionError("a sequence must hold at least one word")
        if not np.all(np.isfinite(self.signal)):
            raise DimensionError("signal holds non-finite values")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def T(self) -> int:
        return self.signal.shape[1]

    @property
    def C(self) -> int:
        return self.signal.shape[2]

    def segment(self, i: int) -> np.ndarray:
        return self.signal[i]

    def slice(self, start: int, stop: int) -> "SignalSequence":
        if not (0 <= start < stop <= len(self.words)):
            raise DimensionError(f"slice [{start}:{stop}] outside sequence of length {len(self)}")
        return SignalSequence(list(self.words[start:stop]), self.signal[start:stop].copy())


@dataclass(eq=False)
class PairedRecord:
    record_id: str
    modality: str
    subject_id: str
    sequence: SignalSequence

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")


@dataclass(eq=False)
class Corpus:
    name: str
    records: list[PairedRecord]

    def __post_init__(self) -> None:
        if self.records:
            shapes = {(r.sequence.T, r.sequence.C) for r in self.records}
            if len(shapes) != 1:
                raise DimensionError(f"records disagree on segment shape: {sorted(shapes)}")
        ids = [r.record_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("record ids are not unique within the corpus")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def T(self) -> int:
        if not self.records:
            raise DimensionError("empty corpus has no segment shape")
        return self.records[0].sequence.T

    @property
    def C(self) -> int:
        if not self.records:
            raise DimensionError("empty corpus has no segment shape")
        return self.records[0].sequence.C

    @property
    def vocabulary(self) -> set[str]:
        vocab: set[str] = set()
        for record in self.records:
            for word in record.sequence.words:
                tok = normalize_token(word)
                if tok:
                    vocab.add(tok)
        return vocab

    def record_by_id(self, record_id: str) -> PairedRecord:
        for record in self.records:
            if record.record_id == record_id:
                return record
        raise KeyError(f"record {record_id!r} not in corpus {self.name!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic corpus builder.

    The signal for a word w is a fixed random linear projection of the
    text provider's vector for w, plus optional Gaussian noise, so a
    linear map from signal space back to text space always exists.

    With ``n_topics`` > 0 the vocabulary is divided into equal topic
    slices; each record samples one topic and draws words from that slice
    except with probability ``off_topic_rate``, which draws from the whole
    vocabulary. Topical word structure gives the masked-document benchmark
    something learnable beyond verbatim span overlap.
    """

    n_records: int
    passage_length_mean: float
    query_count_target: int
    T: int
    C: int
    latent_dim: int
    noise_sigma: float
    vocab_size: int
    seed: int
    name: str = "synthetic"
    modality: str = "visual"
    vocabulary: tuple[str, ...] | None = None
    n_topics: int = 0
    off_topic_rate: float = 0.25

    def validate(self) -> None:
        if self.n_records < 1:
            raise ConfigError("n_records must be positive")
        if self.passage_length_mean < 4:
            raise ConfigError("passage_length_mean must be at least 4")
        if self.query_count_target < 1:
            raise ConfigError("query_count_target must be positive")
        if self.T < 1 or self.C < 1:
            raise ConfigError("T and C must be positive")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.T * self.C < self.latent_dim:
            raise ConfigError(
                f"segment size T*C={self.T * self.C} is smaller than latent_dim="
                f"{self.latent_dim}; the projection would lose structure"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")
        if self.vocabulary is not None and len(self.vocabulary) != self.vocab_size:
            raise ConfigError("explicit vocabulary length must equal vocab_size")
        if self.n_topics < 0:
            raise ConfigError("n_topics must be non-negative")
        if self.n_topics > 0 and self.vocab_size < self.n_topics:
            raise ConfigError("need at least one vocabulary entry per topic")
        if not 0.0 <= self.off_topic_rate <= 1.0:
            raise ConfigError("off_topic_rate must lie in [0, 1]")


def default_vocabulary(size: int, start: int = 0) -> tuple[str, ...]:
    return tuple(f"w{start + i:05d}" for i in range(size))


def shared_count_for_jaccard(n_a: int, n_b: int, jaccard: float) -> int:
    """Intersection size giving the requested Jaccard for two vocab sizes."""
    if not 0 < jaccard <= 1:
        raise ConfigError("jaccard target must lie in (0, 1]")
    return round_half_up(jaccard * (n_a + n_b) / (1.0 + jaccard))


def make_vocab_pair(n_a: int, n_b: int, n_shared: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Two vocabularies with exactly ``n_shared`` common tokens."""
    if n_shared > min(n_a, n_b):
        raise ConfigError("shared token count exceeds a vocabulary size")
    shared = default_vocabulary(n_shared, start=0)
    only_a = default_vocabulary(n_a - n_shared, start=n_shared)
    only_b = default_vocabulary(n_b - n_shared, start=n_shared + len(only_a))
    return shared + only_a, shared + only_b


def generate_synthetic(cfg: GeneratorConfig, text_provider) -> Corpus:
    """Build a corpus whose signals are a seeded linear image of word vectors."""
    cfg.validate()
    if text_provider.dimension != cfg.latent_dim:
        raise ConfigError(
            f"text provider dimension {text_provider.dimension} must equal "
            f"latent_dim {cfg.latent_dim}"
        )
    vocab = list(cfg.vocabulary) if cfg.vocabulary is not None else list(default_vocabulary(cfg.vocab_size))
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_proj = np.random.default_rng(seeds[0])
    rng_len = np.random.default_rng(seeds[1])
    rng_words = np.random.default_rng(seeds[2])
    rng_noise = np.random.default_rng(seeds[3])
    rng_topic = np.random.default_rng(seeds[4])

    projection = rng_proj.standard_normal((cfg.T * cfg.C, cfg.latent_dim)) / math.sqrt(cfg.latent_dim)

    topic_slices: list[list[str]] = []
    if cfg.n_topics > 0:
        per_topic = len(vocab) // cfg.n_topics
        topic_slices = [vocab[i * per_topic : (i + 1) * per_topic] for i in range(cfg.n_topics)]

    records = []
    sigma_len = max(cfg.passage_length_mean / 6.0, 1.0)
    for i in range(cfg.n_records):
        length = max(4, round_half_up(rng_len.normal(cfg.passage_length_mean, sigma_len)))
        if topic_slices:
            topic = topic_slices[int(rng_topic.integers(cfg.n_topics))]
            words = []
            for _ in range(length):
                pool = vocab if rng_words.random() < cfg.off_topic_rate else topic
                words.append(pool[int(rng_words.integers(len(pool)))])
        else:
            words = [vocab[int(j)] for j in rng_words.integers(len(vocab), size=length)]
        signal = np.empty((length, cfg.T, cfg.C), dtype=np.float32)
        for j, word in enumerate(words):
            flat = projection @ text_provider.vector(word)
            segment = flat.reshape(cfg.T, cfg.C)
            if cfg.noise_sigma > 0:
                segment = segment + cfg.noise_sigma * rng_noise.standard_normal((cfg.T, cfg.C))
            signal[j] = segment.astype(np.float32)
        sequence = SignalSequence(words, signal)
        records.append(
            PairedRecord(
                record_id=f"{cfg.name}-r{i:05d}",
                modality=cfg.modality,
                subject_id=f"sub{i % 12:02d}",
                sequence=sequence,
            )
        )
    return Corpus(name=cfg.name, records=records)


def corpus_statistics(corpus: Corpus) -> dict:
    lengths = [len(r.sequence) for r in corpus.records]
    total_words = int(sum(lengths))
    return {
        "n_records": len(corpus.records),
        "n_words": total_words,
        "n_unique_words": len(corpus.vocabulary),
        "avg_passage_length": total_words / len(corpus.records) if corpus.records else 0.0,
        "T": corpus.T if corpus.records else 0,
        "C": corpus.C if corpus.records else 0,
    }


def write_corpus(corpus: Corpus, path) -> None:
    if not corpus.records:
        raise ConfigError("refusing to write an empty corpus")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, corpus.T, corpus.C, len(corpus.records)))
        for record in corpus.records:
            rid = record.record_id.encode("utf-8")
            subj = record.subject_id.encode("utf-8")
            f.write(struct.pack("<I", len(rid)))
            f.write(rid)
            f.write(struct.pack("<B", _MODALITY_CODE[record.modality]))
            f.write(struct.pack("<I", len(subj)))
            f.write(subj)
            words = record.sequence.words
            f.write(struct.pack("<I", len(words)))
            for word in words:
                wb = word.encode("utf-8")
                f.write(struct.pack("<I", len(wb)))
                f.write(wb)
            f.write(record.sequence.signal.astype("<f4").tobytes(order="C"))
    meta = {
        "name": corpus.name,
        "vocabulary": sorted(corpus.vocabulary),
        "statistics": corpus_statistics(corpus),
    }
    meta_path = path.with_name(path.name + ".meta.json")
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.offset}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        return self.take(n, what).decode("utf-8")


def read_corpus(path) -> Corpus:
    path = Path(path)
    r = _Reader(path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(
            f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}"
        )
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {FORMAT_VERSION}")
    T = r.u32("T")
    C = r.u32("C")
    count = r.u32("record count")
    records = []
    for _ in range(count):
        rid = r.text("record id")
        code = r.u8("modality")
        if code not in _CODE_MODALITY:
            raise FormatError(f"{path}: unknown modality code {code} at offset {r.offset - 1}")
        subj = r.text("subject id")
        length = r.u32("word count")
        if length == 0:
            raise FormatError(f"{path}: record {rid!r} has zero words at offset {r.offset - 4}")
        words = [r.text("word") for _ in range(length)]
        raw = r.take(length * T * C * 4, "signal block")
        signal = np.frombuffer(raw, dtype="<f4").reshape(length, T, C).copy()
        records.append(
            PairedRecord(rid, _CODE_MODALITY[code], subj, SignalSequence(words, signal))
        )
    if r.offset != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.offset} trailing bytes at offset {r.offset}")
    name = path.stem
    meta_path = path.with_name(path.name + ".meta.json")
    if meta_path.exists():
        try:
            name = json.loads(meta_path.read_text(encoding="utf-8")).get("name", name)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: invalid sidecar JSON: {exc}") from exc
    return Corpus(name=name, records=records)


def split_corpus(
    corpus: Corpus,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[Corpus, Corpus, Corpus]:
    """Record-level train/dev/test partition with floor-sized tail splits.

    Dev and test sizes are floors of their fractions; the remainder goes to
    train. The shuffle is seeded, so the same seed always yields the same
    partition.
    """
    if len(fractions) != 3:
        raise ConfigError("fractions must have exactly three entries")
    if any(f < 0 for f in fractions):
        raise ConfigError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(corpus.records)
    if n < 3:
        raise ConfigError(f"cannot split a corpus of {n} records three ways")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_dev = int(math.floor(fractions[1] * n))
    n_test = int(math.floor(fractions[2] * n))
    n_train = n - n_dev - n_test
    picks = [order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :]]
    parts = []
    for suffix, idx in zip(("train", "dev", "test"), picks):
        records = [corpus.records[i] for i in sorted(idx)]
        parts.append(Corpus(name=f"{corpus.name}-{suffix}", records=records))
    return tuple(parts)


def merge_corpora(a: Corpus, b: Corpus, name: str | None = None) -> Corpus:
    if (a.T, a.C) != (b.T, b.C):
        raise DimensionError(
            f"segment shapes differ: {(a.T, a.C)} vs {(b.T, b.C)}; corpora cannot merge"
        )
    return Corpus(name=name or f"{a.name}+{b.name}", records=list(a.records) + list(b.records))


def balance_corpora(a: Corpus, b: Corpus, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Subsample the larger corpus down to the smaller one's record count."""
    target = min(len(a.records), len(b.records))
    seeds = np.random.SeedSequence(seed).spawn(2)

    def shrink(corpus: Corpus, child_seed) -> Corpus:
        if len(corpus.records) == target:
            return corpus
        rng = np.random.default_rng(child_seed)
        keep = sorted(rng.choice(len(corpus.records), size=target, replace=False))
        return Corpus(name=corpus.name, records=[corpus.records[i] for i in keep])

    return shrink(a, seeds[0]), shrink(b, seeds[1])


def lexical_jaccard(a: Corpus, b: Corpus) -> float:
    va, vb = a.vocabulary, b.vocabulary
    if not va and not vb:
        raise ConfigError("both vocabularies are empty; Jaccard is undefined")
    union = va | vb
    return len(va & vb) / len(union)


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    """Field-level equality check used by round-trip tests."""
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (ra.record_id, ra.modality, ra.subject_id) != (rb.record_id, rb.modality, rb.subject_id):
            return False
        if ra.sequence.words != rb.sequence.words:
            return False
        if not np.array_equal(ra.sequence.signal, rb.sequence.signal):
            return False
    return True
