"""The trainable signal encoder and the frozen text side.

Signal path: each (T, C) segment is flattened row-major to a length T*C
vector, projected into the model width by a learned affine map, then run
through a stack of post-norm transformer layers. No positional encoding is
added and no dropout is applied; runs are deterministic given a seed.

Text path: a :class:`TextProvider` maps tokens to fixed unit vectors,
either derived from a seeded hash (the default stand-in for a pretrained
text encoder) or loaded from a precomputed JSON-lines table. Nothing on
the text side ever receives a gradient.

Checkpoint format (all integers little-endian):

    magic   4 bytes  b"NRP1"
    version u32      1
    cfg_len u32, config JSON (sorted keys: C, T, heads, hidden, layers, pooling)
    count   u32      number of parameter tensors
    then per tensor, in the canonical order of parameter_shapes():
        rank u32, rank x dim u32, float64 values row-major

The canonical order is: embed.weight, embed.bias, cls_token, then per
layer i: attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo,
attn.bo, ln1.gamma, ln1.beta, ffn.w1, ffn.b1, ffn.w2, ffn.b2, ln2.gamma,
ln2.beta.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .corpus import SignalSequence
from .errors import ConfigError, DimensionError, FormatError, NumericsError

CHECKPOINT_MAGIC = b"NRP1"
CHECKPOINT_VERSION = 1
POOLING_STRATEGIES = ("cls", "mean", "max", "multi")


@dataclass(frozen=True)
class EncoderConfig:
    T: int
    C: int
    hidden: int = 768
    layers: int = 1
    heads: int = 4
    pooling: str = "mean"

    @property
    def input_dim(self) -> int:
        return self.T * self.C

    def validate(self) -> None:
        if self.T < 1 or self.C < 1:
            raise ConfigError("T and C must be positive")
        if self.hidden < 2:
            raise ConfigError("hidden width must be at least 2")
        if self.layers < 1:
            raise ConfigError("at least one encoder layer is required")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden width {self.hidden} must divide evenly into {self.heads} heads"
            )
        if self.pooling not in POOLING_STRATEGIES:
            raise ConfigError(
                f"pooling must be one of {POOLING_STRATEGIES}, got {self.pooling!r}"
            )


def parameter_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) listing; also the checkpoint tensor order."""
    d = cfg.hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.weight", (cfg.input_dim, d)),
        ("embed.bias", (d,)),
        ("cls_token", (d,)),
    ]
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes += [
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "ffn.w1", (d, 4 * d)),
            (p + "ffn.b1", (4 * d,)),
            (p + "ffn.w2", (4 * d, d)),
            (p + "ffn.b2", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
        ]
    return shapes


class EncoderParams:
    """Trainable encoder state: an EncoderConfig plus its ParamSet."""

    def __init__(self, cfg: EncoderConfig, params: tc.ParamSet):
        cfg.validate()
        expected = parameter_shapes(cfg)
        if params.names() != [name for name, _ in expected]:
            raise ConfigError("parameter set does not match the encoder layout")
        for name, shape in expected:
            if params[name].data.shape != shape:
                raise DimensionError(
                    f"parameter {name!r} has shape {params[name].data.shape}, expected {shape}"
                )
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: EncoderConfig, seed: int = 0) -> "EncoderParams":
        """Seeded init: matrices uniform in +-1/sqrt(fan_in), biases zero,
        norm scales one, the cls token like a width-d matrix row."""
        cfg.validate()
        rng = np.random.default_rng(seed)
        params = tc.ParamSet()
        for name, shape in parameter_shapes(cfg):
            if name.endswith("gamma"):
                params.add(name, np.ones(shape))
            elif name == "cls_token":
                bound = 1.0 / math.sqrt(cfg.hidden)
                params.add(name, rng.uniform(-bound, bound, size=shape))
            elif len(shape) == 2:
                bound = 1.0 / math.sqrt(shape[0])
                params.add(name, rng.uniform(-bound, bound, size=shape))
            else:
                params.add(name, np.zeros(shape))
        return cls(cfg, params)

    def __getitem__(self, name: str) -> tc.Tensor:
        return self.params[name]

    def layer_mapping(self, i: int) -> dict[str, tc.Tensor]:
        p = f"layer{i}."
        return {
            "wq": self.params[p + "attn.wq"],
            "bq": self.params[p + "attn.bq"],
            "wk": self.params[p + "attn.wk"],
            "bk": self.params[p + "attn.bk"],
            "wv": self.params[p + "attn.wv"],
            "bv": self.params[p + "attn.bv"],
            "wo": self.params[p + "attn.wo"],
            "bo": self.params[p + "attn.bo"],
            "ln1_gamma": self.params[p + "ln1.gamma"],
            "ln1_beta": self.params[p + "ln1.beta"],
            "w1": self.params[p + "ffn.w1"],
            "b1": self.params[p + "ffn.b1"],
            "w2": self.params[p + "ffn.w2"],
            "b2": self.params[p + "ffn.b2"],
            "ln2_gamma": self.params[p + "ln2.gamma"],
            "ln2_beta": self.params[p + "ln2.beta"],
        }

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.cfg, self.params.copy())


@dataclass
class PooledEmbedding:
    """A single unit-norm vector representing one sequence."""

    vector: np.ndarray


@dataclass
class MultiVector:
    """One unit-norm row per kept position, for late-interaction scoring."""

    rows: np.ndarray
    valid_mask: np.ndarray


def flatten_segment(segment) -> np.ndarray:
    """Row-major flatten of one (T, C) segment to length T*C."""
    arr = np.asarray(segment, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"segment must be 2-d, got shape {arr.shape}")
    return arr.reshape(-1)


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt((arr * arr).sum()))
    if norm <= eps:
        raise NumericsError("cannot normalize a near-zero vector")
    return arr / norm


def encode_signal(seq: SignalSequence, params: EncoderParams) -> tc.Tensor:
    """Contextual rows for one sequence; (L+1, d) when pooling is cls."""
    cfg = params.cfg
    if (seq.T, seq.C) != (cfg.T, cfg.C):
        raise DimensionError(
            f"sequence segments are {(seq.T, seq.C)} but the encoder expects {(cfg.T, cfg.C)}"
        )
    L = len(seq)
    flat = seq.signal.reshape(L, cfg.input_dim).astype(np.float64)
    h = tc.add_rowvec(tc.matmul(tc.Tensor(flat), params["embed.weight"]), params["embed.bias"])
    if cfg.pooling == "cls":
        cls_row = tc.reshape(params["cls_token"], (1, cfg.hidden))
        h = tc.concat_rows([cls_row, h])
    mask = np.ones(h.shape[0], dtype=bool)
    for i in range(cfg.layers):
        h = tc.transformer_layer(h, params.layer_mapping(i), cfg.heads, mask)
    return h


def pool(h: tc.Tensor, strategy: str, valid_mask) -> tc.Tensor:
    """Reduce contextual rows to a retrieval representation.

    Returns a unit-norm (1, d) tensor, or for ``multi`` the valid rows
    normalized one by one. The cls strategy always reads row 0.
    """
    if strategy not in POOLING_STRATEGIES:
        raise ConfigError(f"unknown pooling strategy {strategy!r}")
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (h.shape[0],):
        raise DimensionError(f"mask shape {mask.shape} does not match {h.shape}")
    if not mask.any():
        raise DimensionError("pool: all positions masked")
    if strategy == "mean":
        return tc.normalize_rows(tc.masked_mean_rows(h, mask))
    if strategy == "max":
        return tc.normalize_rows(tc.masked_max_rows(h, mask))
    if strategy == "cls":
        return tc.normalize_rows(tc.slice_rows(h, 0, 1))
    return tc.normalize_rows(tc.select_rows(h, np.flatnonzero(mask)))


def encode_signal_pooled(seq: SignalSequence, params: EncoderParams) -> tc.Tensor:
    """Differentiable encode-and-pool for the training loop."""
    h = encode_signal(seq, params)
    return pool(h, params.cfg.pooling, np.ones(h.shape[0], dtype=bool))


def embed_signal(seq: SignalSequence, params: EncoderParams) -> PooledEmbedding | MultiVector:
    """Inference-side embedding, detached from the graph."""
    pooled = encode_signal_pooled(seq, params)
    if params.cfg.pooling == "multi":
        rows = pooled.data.copy()
        return MultiVector(rows=rows, valid_mask=np.ones(rows.shape[0], dtype=bool))
    return PooledEmbedding(vector=pooled.data[0].copy())


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class TextProvider:
    """Frozen token-to-unit-vector map.

    Default mode derives each vector from a 64-bit FNV-1a hash of the
    lowercased token XORed with the provider seed, which seeds a PRNG that
    draws the vector. Tokens map to near-orthogonal directions at realistic
    widths, the usual behavior of a pretrained embedding table.
    """

    def __init__(self, dimension: int, seed: int = 0, table: dict[str, np.ndarray] | None = None):
        if dimension < 1:
            raise ConfigError("provider dimension must be positive")
        self.dimension = int(dimension)
        self.seed = int(seed)
        self._table = table
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_file(cls, path) -> "TextProvider":
        """Load a precomputed table: one JSON object per line with keys
        ``token`` and ``vector``."""
        path = Path(path)
        table: dict[str, np.ndarray] = {}
        dimension = None
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if "token" not in obj or "vector" not in obj:
                    raise FormatError(f"{path}:{lineno}: expected keys 'token' and 'vector'")
                vec = np.asarray(obj["vector"], dtype=np.float64)
                if vec.ndim != 1:
                    raise FormatError(f"{path}:{lineno}: vector must be one-dimensional")
                if dimension is None:
                    dimension = vec.size
                elif vec.size != dimension:
                    raise FormatError(
                        f"{path}:{lineno}: vector length {vec.size} differs from {dimension}"
                    )
                table[str(obj["token"]).lower()] = vec
        if not table:
            raise FormatError(f"{path}: no entries in precomputed table")
        return cls(dimension=dimension, table=table)

    def vector(self, token: str) -> np.ndarray:
        key = token.lower()
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if self._table is not None:
            if key not in self._table:
                raise ConfigError(f"token {key!r} is missing from the precomputed table")
            vec = l2_normalize(self._table[key])
        else:
            rng = np.random.default_rng(_fnv1a64(key) ^ (self.seed & 0xFFFFFFFFFFFFFFFF))
            vec = l2_normalize(rng.standard_normal(self.dimension))
        self._cache[key] = vec
        return vec

    def matrix(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            raise DimensionError("cannot embed an empty token list")
        return np.stack([self.vector(t) for t in tokens])


def text_token_vectors(tokens: Sequence[str], provider: TextProvider) -> np.ndarray:
    return provider.matrix(tokens)


def encode_text(
    tokens: Sequence[str], provider: TextProvider, strategy: str
) -> PooledEmbedding | MultiVector:
    """Pool frozen token vectors; cls (no trainable text side) uses mean."""
    if strategy not in POOLING_STRATEGIES:
        raise ConfigError(f"unknown pooling strategy {strategy!r}")
    m = provider.matrix(tokens)
    if strategy == "multi":
        rows = np.stack([l2_normalize(row) for row in m])
        return MultiVector(rows=rows, valid_mask=np.ones(rows.shape[0], dtype=bool))
    if strategy == "max":
        return PooledEmbedding(vector=l2_normalize(m.max(axis=0)))
    return PooledEmbedding(vector=l2_normalize(m.mean(axis=0)))


def save_checkpoint(params: EncoderParams, path) -> None:
    cfg_blob = json.dumps(asdict(params.cfg), sort_keys=True).encode("utf-8")
    names = [name for name, _ in parameter_shapes(params.cfg)]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = params.params[name].data
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> EncoderParams:
    path = Path(path)
    data = path.read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated while reading {what} at offset {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    cfg_len = struct.unpack("<I", take(4, "config length"))[0]
    try:
        cfg_dict = json.loads(take(cfg_len, "config blob").decode("utf-8"))
        cfg = EncoderConfig(**cfg_dict)
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: invalid embedded config: {exc}") from exc
    expected = parameter_shapes(cfg)
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    if count != len(expected):
        raise FormatError(f"{path}: {count} tensors but the config implies {len(expected)}")
    params = tc.ParamSet()
    for name, shape in expected:
        rank = struct.unpack("<I", take(4, f"{name} rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        if dims != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {dims}, expected {shape}")
        n_values = int(np.prod(dims)) if dims else 1
        raw = take(8 * n_values, f"{name} values")
        params.add(name, np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return EncoderParams(cfg, params)
