"""Tests for the contrastive training loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from neuroretrieve import tensorcore as tc
from neuroretrieve import training
from neuroretrieve.corpus import GeneratorConfig, generate_synthetic
from neuroretrieve.encoders import (
    EncoderConfig,
    EncoderParams,
    MultiVector,
    PooledEmbedding,
    TextProvider,
    embed_signal,
    encode_text,
)
from neuroretrieve.errors import ConfigError, DimensionError
from neuroretrieve.ict import build_training_pairs
from neuroretrieve.training import (
    HISTORY_HEADER,
    TrainConfig,
    TrainState,
    batch_score_matrix,
    eval_loss,
    fit,
    info_nce,
    lr_at,
    similarity,
    train_epoch,
    write_history_csv,
)


def tiny_setup(pooling="mean", n_records=12, seed=3):
    """A small synthetic corpus with matching encoder and providers."""
    gen = GeneratorConfig(
        n_records=n_records,
        passage_length_mean=8,
        query_count_target=n_records,
        T=4,
        C=2,
        latent_dim=8,
        noise_sigma=0.0,
        vocab_size=40,
        seed=seed,
    )
    corpus = generate_synthetic(gen, TextProvider(dimension=8, seed=11))
    pairs = build_training_pairs(corpus, seed=5)
    enc_cfg = EncoderConfig(T=4, C=2, hidden=16, layers=1, heads=2, pooling=pooling)
    params = EncoderParams.initialize(enc_cfg, seed=7)
    provider = TextProvider(dimension=16, seed=13)
    return pairs, params, provider


class TestInfoNce:
    def test_uniform_scores_give_log_batch_size(self):
        """With identical scores everywhere the loss is exactly ln(B)."""
        for b in (2, 4, 32):
            scores = np.full((b, b), 0.3)
            assert_allclose(info_nce(scores, 0.07).item(), math.log(b), rtol=0, atol=1e-12)

    def test_single_pair_batch_has_zero_loss(self):
        assert info_nce(np.array([[2.7]]), 0.07).item() == pytest.approx(0.0, abs=1e-15)

    def test_sharp_diagonal_drives_loss_to_zero(self):
        """Diagonal +1 vs off-diagonal -1 at temperature 0.07 is ~e-12 loss."""
        scores = np.full((4, 4), -1.0)
        np.fill_diagonal(scores, 1.0)
        assert info_nce(scores, 0.07).item() == pytest.approx(0.0, abs=1e-9)

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_row_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=(3, 3))
        shifts = rng.normal(size=(3, 1))
        base = info_nce(scores, 0.07).item()
        shifted = info_nce(scores + shifts, 0.07).item()
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_gradient_matches_closed_form(self):
        """dL/dS is (softmax(S/t) - I) / (B * t)."""
        rng = np.random.default_rng(42)
        s = tc.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        loss = info_nce(s, 0.07)
        loss.backward()
        z = s.data / 0.07
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        expected = (p - np.eye(5)) / (5 * 0.07)
        assert_allclose(s.grad, expected, rtol=0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        """Checked at temperature 1.0 where central differences are stable."""
        rng = np.random.default_rng(7)
        ps = tc.ParamSet()
        ps.add("scores", rng.normal(size=(4, 4)))
        worst = tc.grad_check(lambda p: info_nce(p["scores"], 1.0), ps)
        assert worst < 1e-6

    def test_rejects_non_square_scores(self):
        with pytest.raises(DimensionError):
            info_nce(np.zeros((2, 3)), 0.07)
        with pytest.raises(DimensionError):
            info_nce(np.zeros((0, 0)), 0.07)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ConfigError):
            info_nce(np.zeros((2, 2)), 0.0)


class TestSimilarity:
    def test_pooled_dot_product(self):
        q = PooledEmbedding(vector=np.array([0.6, 0.8]))
        p = PooledEmbedding(vector=np.array([0.8, 0.6]))
        assert similarity(q, p, "mean") == pytest.approx(0.96)

    def test_late_interaction_takes_best_row_then_sums(self):
        """Each query row keeps only its best-matching passage row."""
        q = MultiVector(
            rows=np.array([[1.0, 0.0], [0.0, 1.0]]),
            valid_mask=np.ones(2, dtype=bool),
        )
        p = MultiVector(
            rows=np.array([[1.0, 0.0], [0.0, -1.0]]),
            valid_mask=np.ones(2, dtype=bool),
        )
        assert similarity(q, p, "multi") == pytest.approx(1.0, abs=1e-15)

    def test_width_mismatch_raises(self):
        q = PooledEmbedding(vector=np.ones(3))
        p = PooledEmbedding(vector=np.ones(4))
        with pytest.raises(DimensionError):
            similarity(q, p, "mean")


class TestLrSchedule:
    def test_warmup_then_linear_decay(self):
        cfg = TrainConfig(learning_rate=1e-5, warmup_epochs=10, max_epochs=200)
        assert lr_at(0, cfg) == pytest.approx(1e-6)
        assert lr_at(4, cfg) == pytest.approx(5e-6)
        assert lr_at(9, cfg) == pytest.approx(1e-5)
        assert lr_at(10, cfg) == pytest.approx(1e-5)
        assert lr_at(104, cfg) == pytest.approx(1e-5 * 96 / 190)
        assert lr_at(199, cfg) == pytest.approx(1e-5 / 190)

    def test_schedule_is_continuous_at_warmup_boundary(self):
        cfg = TrainConfig(learning_rate=2e-3, warmup_epochs=5, max_epochs=50)
        assert lr_at(4, cfg) == pytest.approx(lr_at(5, cfg))

    def test_schedule_never_reaches_zero(self):
        cfg = TrainConfig(learning_rate=1e-4, warmup_epochs=2, max_epochs=20)
        assert min(lr_at(e, cfg) for e in range(20)) > 0

    def test_out_of_range_epoch_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            lr_at(-1, cfg)
        with pytest.raises(ConfigError):
            lr_at(cfg.max_epochs, cfg)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"learning_rate": 0.0},
            {"temperature": 0.0},
            {"batch_size": 0},
            {"warmup_epochs": 200},
            {"warmup_epochs": -1},
            {"max_epochs": 0},
            {"patience": 0},
            {"clip_norm": 0.0},
            {"weight_decay": -0.1},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_defaults_are_valid(self):
        TrainConfig().validate()


class TestBatchScores:
    def test_pooled_matrix_matches_pairwise_similarity(self):
        pairs, params, provider = tiny_setup("mean")
        batch = pairs[:4]
        scores = batch_score_matrix(batch, params, provider).data
        for i, qp in enumerate(batch):
            q = embed_signal(qp.query_signal, params)
            for j, pp in enumerate(batch):
                p = encode_text(pp.positive_tokens, provider, "mean")
                assert scores[i, j] == pytest.approx(similarity(q, p, "mean"), abs=1e-12)

    def test_multi_matrix_matches_pairwise_similarity(self):
        pairs, params, provider = tiny_setup("multi")
        batch = pairs[:3]
        scores = batch_score_matrix(batch, params, provider).data
        for i, qp in enumerate(batch):
            q = embed_signal(qp.query_signal, params)
            for j, pp in enumerate(batch):
                p = encode_text(pp.positive_tokens, provider, "multi")
                assert scores[i, j] == pytest.approx(similarity(q, p, "multi"), abs=1e-12)

    def test_empty_batch_rejected(self):
        _, params, provider = tiny_setup("mean")
        with pytest.raises(DimensionError):
            batch_score_matrix([], params, provider)


class TestTrainEpoch:
    def test_zero_lr_leaves_parameters_bitwise_unchanged(self):
        pairs, params, provider = tiny_setup("mean")
        before = {name: t.data.copy() for name, t in params.params.items()}
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, warmup_epochs=1, max_epochs=4)
        state = TrainState(optimizer=tc.AdamWState.for_params(params.params))
        loss = train_epoch(pairs, params, provider, cfg, state, lr=0.0)
        assert math.isfinite(loss)
        for name, t in params.params.items():
            assert np.array_equal(t.data, before[name]), name
        assert state.optimizer.t == 0

    def test_shuffle_depends_on_epoch_and_is_reproducible(self):
        """Batch grouping changes with the epoch but not across reruns."""
        pairs, params, provider = tiny_setup("mean")
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, warmup_epochs=1, max_epochs=4)

        def loss_at(epoch):
            state = TrainState(epoch=epoch, optimizer=tc.AdamWState.for_params(params.params))
            return train_epoch(pairs, params, provider, cfg, state, lr=0.0)

        assert loss_at(0) == loss_at(0)
        assert not math.isclose(loss_at(0), loss_at(1), rel_tol=1e-12)

    def test_positive_lr_updates_parameters_and_optimizer(self):
        pairs, params, provider = tiny_setup("mean")
        before = params.params["embed.weight"].data.copy()
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, warmup_epochs=1, max_epochs=4)
        state = TrainState(optimizer=tc.AdamWState.for_params(params.params))
        train_epoch(pairs, params, provider, cfg, state)
        assert not np.array_equal(params.params["embed.weight"].data, before)
        assert state.optimizer.t == 3

    def test_empty_pairs_rejected(self):
        _, params, provider = tiny_setup("mean")
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            train_epoch([], params, provider, cfg, TrainState())

    def test_negative_lr_override_rejected(self):
        pairs, params, provider = tiny_setup("mean")
        with pytest.raises(ConfigError):
            train_epoch(pairs, params, provider, TrainConfig(), TrainState(), lr=-1.0)

    def test_loss_decreases_on_learnable_data(self):
        """A few epochs at a workable rate should reduce the objective."""
        pairs, params, provider = tiny_setup("mean", n_records=24)
        cfg = TrainConfig(
            learning_rate=3e-3, batch_size=8, warmup_epochs=1, max_epochs=6, seed=0
        )
        state = TrainState(optimizer=tc.AdamWState.for_params(params.params))
        losses = []
        for epoch in range(cfg.max_epochs):
            state.epoch = epoch
            losses.append(train_epoch(pairs, params, provider, cfg, state))
        assert losses[-1] < losses[0]


class TestEvalLoss:
    def test_deterministic_and_order_free(self):
        pairs, params, provider = tiny_setup("mean")
        cfg = TrainConfig(batch_size=4)
        assert eval_loss(pairs, params, provider, cfg) == eval_loss(pairs, params, provider, cfg)

    def test_empty_rejected(self):
        _, params, provider = tiny_setup("mean")
        with pytest.raises(ConfigError):
            eval_loss([], params, provider, TrainConfig())


def _marker_params():
    cfg = EncoderConfig(T=2, C=2, hidden=8, layers=1, heads=2, pooling="mean")
    return EncoderParams.initialize(cfg, seed=0)


def _stub_train(mark_with_epoch=True):
    def stub(pairs, params, provider, cfg, state, lr=None):
        if mark_with_epoch:
            params.params["embed.bias"].data[0] = float(state.epoch + 1)
        return 9.0

    return stub


class TestFit:
    def test_patience_stops_after_monotone_worsening(self, monkeypatch):
        """Worsening from epoch 2 on stops at epoch 11 with epoch-1 weights."""
        vals = iter(1.0 + 0.1 * k for k in range(1000))
        monkeypatch.setattr(training, "train_epoch", _stub_train())
        monkeypatch.setattr(training, "eval_loss", lambda *a, **k: next(vals))
        params = _marker_params()
        cfg = TrainConfig(patience=10, max_epochs=200, warmup_epochs=10)
        best, history = fit([object()], [object()], params, None, cfg)
        assert len(history) == 11
        assert [row.epoch for row in history] == list(range(1, 12))
        assert history[-1].stopped
        assert not any(row.stopped for row in history[:-1])
        assert best.params["embed.bias"].data[0] == 1.0
        assert params.params["embed.bias"].data[0] == 11.0

    def test_ties_keep_the_earliest_epoch(self, monkeypatch):
        monkeypatch.setattr(training, "train_epoch", _stub_train())
        monkeypatch.setattr(training, "eval_loss", lambda *a, **k: 1.0)
        params = _marker_params()
        cfg = TrainConfig(patience=3, max_epochs=50, warmup_epochs=5)
        best, history = fit([object()], [object()], params, None, cfg)
        assert len(history) == 4
        assert best.params["embed.bias"].data[0] == 1.0

    def test_runs_to_max_epochs_when_improving(self, monkeypatch):
        vals = iter([3.0, 2.0, 1.0])
        monkeypatch.setattr(training, "train_epoch", _stub_train())
        monkeypatch.setattr(training, "eval_loss", lambda *a, **k: next(vals))
        params = _marker_params()
        cfg = TrainConfig(patience=10, max_epochs=3, warmup_epochs=1)
        best, history = fit([object()], [object()], params, None, cfg)
        assert len(history) == 3
        assert not any(row.stopped for row in history)
        assert best.params["embed.bias"].data[0] == 3.0

    def test_history_lr_column_follows_schedule(self, monkeypatch):
        monkeypatch.setattr(training, "train_epoch", _stub_train(mark_with_epoch=False))
        monkeypatch.setattr(training, "eval_loss", lambda *a, **k: 1.0)
        cfg = TrainConfig(patience=2, max_epochs=40, warmup_epochs=4)
        _, history = fit([object()], [object()], _marker_params(), None, cfg)
        for row in history:
            assert row.lr == lr_at(row.epoch - 1, cfg)

    def test_empty_validation_set_rejected(self):
        with pytest.raises(ConfigError):
            fit([object()], [], _marker_params(), None, TrainConfig())


class TestHistoryCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rows = [
            training.HistoryRow(epoch=1, train_loss=1.25, val_loss=1.5, lr=1e-6, stopped=False),
            training.HistoryRow(
                epoch=2, train_loss=0.3333333333333333, val_loss=0.7, lr=2e-6, stopped=True
            ),
        ]
        path = tmp_path / "history.csv"
        write_history_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == HISTORY_HEADER
        assert len(lines) == 3
        fields = lines[2].split(",")
        assert int(fields[0]) == 2
        assert float(fields[1]) == 0.3333333333333333
        assert fields[4] == "1"
