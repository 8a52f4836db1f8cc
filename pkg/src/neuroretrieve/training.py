"""Contrastive training of the signal encoder against frozen text vectors.

Each batch encodes its queries, looks up its positives' text embeddings,
forms the batch score matrix S (S[i][j] scores query i against positive j),
and minimizes the InfoNCE objective with the other in-batch positives as
negatives. The learning rate warms up linearly per epoch and then decays
linearly to zero; early stopping watches the validation loss.

The history CSV written by :func:`write_history_csv` has the columns
``epoch,train_loss,val_loss,lr,stopped`` with a 1-based epoch column;
``stopped`` is 1 only on the row where the patience rule fired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .encoders import (
    EncoderParams,
    MultiVector,
    PooledEmbedding,
    TextProvider,
    encode_signal_pooled,
    encode_text,
)
from .errors import ConfigError, DimensionError, NumericsError
from .ict import IctPair


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    temperature: float = 0.07
    batch_size: int = 32
    warmup_epochs: int = 10
    max_epochs: int = 200
    patience: int = 10
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError("warmup_epochs must lie in [0, max_epochs)")
        if self.patience < 1:
            raise ConfigError("patience must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    optimizer: tc.AdamWState = field(default_factory=tc.AdamWState)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    stopped: bool


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Epoch-granular schedule, 0-based: linear warmup, then linear decay."""
    if not 0 <= epoch < cfg.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.learning_rate * (epoch + 1) / cfg.warmup_epochs
    return cfg.learning_rate * (cfg.max_epochs - epoch) / (cfg.max_epochs - cfg.warmup_epochs)


def _rows_of(x) -> np.ndarray:
    if isinstance(x, MultiVector):
        return x.rows
    raise DimensionError("expected a multi-vector representation")


def _vector_of(x) -> np.ndarray:
    if isinstance(x, PooledEmbedding):
        return x.vector
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError("expected a pooled vector")
    return arr


def similarity(query, passage, strategy: str) -> float:
    """Score one query representation against one passage representation.

    Pooled strategies use the dot product of unit vectors. The multi
    strategy uses late interaction: for each query row take the best
    passage row, then sum.
    """
    if strategy == "multi":
        q = _rows_of(query)
        p = _rows_of(passage)
        if q.shape[1] != p.shape[1]:
            raise DimensionError("query and passage widths differ")
        return float((q @ p.T).max(axis=1).sum())
    q = _vector_of(query)
    p = _vector_of(passage)
    if q.shape != p.shape:
        raise DimensionError("query and passage widths differ")
    return float(q @ p)


def info_nce(scores, temperature: float = 0.07) -> tc.Tensor:
    """Mean cross-entropy of each row's softmax against the diagonal."""
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    s = scores if isinstance(scores, tc.Tensor) else tc.Tensor(np.asarray(scores, dtype=np.float64))
    if s.data.ndim != 2 or s.data.shape[0] != s.data.shape[1]:
        raise DimensionError(f"score matrix must be square, got {s.data.shape}")
    if s.data.shape[0] == 0:
        raise DimensionError("empty score matrix")
    log_probs = tc.log_softmax_rows(tc.scale(s, 1.0 / temperature))
    return tc.neg(tc.mean_all(tc.diag(log_probs)))


def batch_score_matrix(
    batch: Sequence[IctPair], params: EncoderParams, provider: TextProvider
) -> tc.Tensor:
    """Differentiable B x B score matrix for one batch of pairs."""
    if not batch:
        raise DimensionError("empty batch")
    strategy = params.cfg.pooling
    queries = [encode_signal_pooled(pair.query_signal, params) for pair in batch]
    positives = [encode_text(pair.positive_tokens, provider, strategy) for pair in batch]
    if strategy == "multi":
        grid = []
        for q in queries:
            row = []
            for p in positives:
                table = tc.matmul(q, tc.Tensor(p.rows.T.copy()))
                row.append(tc.sum_all(tc.rowwise_max(table)))
            grid.append(row)
        return tc.stack_scalars(grid)
    q_mat = tc.concat_rows(queries)
    p_mat = np.stack([p.vector for p in positives])
    return tc.matmul(q_mat, tc.Tensor(p_mat.T))


def _batches(n: int, batch_size: int, order: np.ndarray | None = None) -> list[np.ndarray]:
    idx = order if order is not None else np.arange(n)
    return [idx[i : i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(
    pairs: Sequence[IctPair],
    params: EncoderParams,
    provider: TextProvider,
    cfg: TrainConfig,
    state: TrainState,
    lr: float | None = None,
) -> float:
    """One pass over the pairs; returns the mean batch loss.

    The shuffle is derived from (seed, epoch), the final partial batch is
    kept, and a non-finite loss aborts with the epoch and batch named.
    ``lr`` overrides the schedule; at lr 0 the optimizer is skipped and
    the pass is a pure evaluation in shuffled order.
    """
    cfg.validate()
    if not pairs:
        raise ConfigError("cannot train on zero pairs")
    if lr is None:
        lr = lr_at(state.epoch, cfg)
    elif lr < 0:
        raise ConfigError("lr override must be non-negative")
    order = np.random.default_rng(np.random.SeedSequence((cfg.seed, state.epoch))).permutation(len(pairs))
    losses = []
    for batch_index, batch_idx in enumerate(_batches(len(pairs), cfg.batch_size, order)):
        batch = [pairs[i] for i in batch_idx]
        try:
            scores = batch_score_matrix(batch, params, provider)
            loss = info_nce(scores, cfg.temperature)
        except NumericsError as exc:
            raise NumericsError(
                f"non-finite loss at epoch {state.epoch + 1}, batch {batch_index}: {exc}"
            ) from exc
        if lr > 0:
            params.params.zero_grad()
            loss.backward()
            tc.clip_global_norm(params.params, cfg.clip_norm)
            tc.adamw_step(
                params.params,
                state.optimizer,
                lr=lr,
                weight_decay=cfg.weight_decay,
            )
        losses.append(loss.item())
    return float(np.mean(losses))


def eval_loss(
    pairs: Sequence[IctPair],
    params: EncoderParams,
    provider: TextProvider,
    cfg: TrainConfig,
) -> float:
    """Mean batch loss in deterministic order, no parameter updates."""
    if not pairs:
        raise ConfigError("cannot evaluate on zero pairs")
    losses = []
    for batch_idx in _batches(len(pairs), cfg.batch_size):
        batch = [pairs[i] for i in batch_idx]
        losses.append(info_nce(batch_score_matrix(batch, params, provider), cfg.temperature).item())
    return float(np.mean(losses))


def fit(
    train_pairs: Sequence[IctPair],
    val_pairs: Sequence[IctPair],
    params: EncoderParams,
    provider: TextProvider,
    cfg: TrainConfig,
) -> tuple[EncoderParams, list[HistoryRow]]:
    """Train with early stopping; returns the best-validation parameters.

    Only a strict improvement resets the patience counter, so on ties the
    earliest epoch's parameters win.
    """
    cfg.validate()
    if not val_pairs:
        raise ConfigError("fit requires a non-empty validation set")
    state = TrainState(optimizer=tc.AdamWState.for_params(params.params))
    best_params = params.copy()
    history: list[HistoryRow] = []
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        train_loss = train_epoch(train_pairs, params, provider, cfg, state)
        val_loss = eval_loss(val_pairs, params, provider, cfg)
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.epochs_since_improvement = 0
            best_params = params.copy()
        else:
            state.epochs_since_improvement += 1
        stopped = state.epochs_since_improvement >= cfg.patience
        history.append(
            HistoryRow(
                epoch=epoch + 1,
                train_loss=train_loss,
                val_loss=val_loss,
                lr=lr_at(epoch, cfg),
                stopped=stopped,
            )
        )
        if stopped:
            break
    return best_params, history


HISTORY_HEADER = "epoch,train_loss,val_loss,lr,stopped"


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(
            f"{row.epoch},{row.train_loss!r},{row.val_loss!r},{row.lr!r},{int(row.stopped)}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
