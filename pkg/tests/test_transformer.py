import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nextact.features import ManifestMismatchError, fit_encoders, generate_prefix_samples
from nextact.synthetic import SyntheticLogSpec, generate_synthetic_log
from nextact.transformer import (
    PROFILES,
    DAWTransformerClassifier,
    EarlyStopping,
    TrainConfig,
    TrainState,
    adam_step,
    attention,
    fit_arrays,
    forward,
    init_params,
    layer_norm,
    loss_and_grads,
    multi_head_attention,
    positional_encoding,
    predict_next,
)
from nextact.transformer.model import (
    AllMaskedError,
    Batch,
    IndexOutOfVocabError,
    InvalidConfigError,
    TransformerConfig,
    block_params,
    check_params,
    embedding_dim,
)

from .oracles import finite_difference_errors, loop_attention, random_batch, tiny_config


@pytest.fixture
def tiny():
    config = tiny_config()
    return config, init_params(config, seed=3)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(InvalidConfigError):
            TransformerConfig(4, 3, (("activity", 5, 4),), embed_dim=10, num_heads=3)

    def test_dropout_range(self):
        with pytest.raises(InvalidConfigError):
            TransformerConfig(4, 3, (("activity", 5, 4),), dropout=1.0)

    def test_needs_categorical(self):
        with pytest.raises(InvalidConfigError):
            TransformerConfig(4, 3, ())

    def test_embedding_dim_rule(self):
        assert [embedding_dim(v) for v in (3, 4, 7, 40)] == [4, 4, 8, 32]

    def test_dict_round_trip(self):
        c = tiny_config()
        assert TransformerConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_param_shapes(self, tiny):
        config, params = tiny
        assert params["input.W"].shape == (4 + 2 + 1, 8)
        assert params["head.W"].shape == (4 * 8 + 1, 3)
        check_params(params, config)
        bad = dict(params, **{"head.b": np.zeros(4)})
        with pytest.raises(InvalidConfigError):
            check_params(bad, config)


class TestLayers:
    def test_positional_encoding_values(self):
        P = positional_encoding(5, 6)
        for pos in range(5):
            for i in range(3):
                angle = pos / 10000 ** (2 * i / 6)
                assert P[pos, 2 * i] == pytest.approx(math.sin(angle), abs=1e-15)
                assert P[pos, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-15)

    def test_attention_matches_loops(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            L, dk = rng.integers(1, 6), rng.integers(1, 5)
            Q, K, V = rng.normal(size=(3, L, dk))
            mask = rng.random(L) < 0.6
            mask[rng.integers(L)] = True
            np.testing.assert_allclose(attention(Q, K, V, mask),
                                       loop_attention(Q, K, V, mask), atol=1e-12)

    def test_all_masked_row_raises(self):
        Q = np.ones((2, 2))
        with pytest.raises(AllMaskedError):
            attention(Q, Q, Q, np.array([False, False]))

    def test_layer_norm(self):
        x = np.array([[1.0, 2.0, 3.0, 6.0]])
        y = layer_norm(x, np.ones(4), np.zeros(4))
        mu, var = 3.0, np.var([1, 2, 3, 6])
        np.testing.assert_allclose(y, (x - mu) / np.sqrt(var + 1e-5), atol=1e-12)

    def test_single_head_mha_is_projected_attention(self, tiny):
        config, params = tiny
        bp = block_params(params, 0)
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4, 8))
        mask = np.array([False, True, True, True])
        expected = loop_attention(X @ bp["Wq"], X @ bp["Wk"], X @ bp["Wv"], mask) @ bp["Wo"]
        np.testing.assert_allclose(multi_head_attention(X, bp, mask, 1), expected, atol=1e-12)

    def test_out_of_vocab_index(self, tiny):
        config, params = tiny
        batch = random_batch(config, 2, np.random.default_rng(0))
        batch.cat[0, 0, -1] = 6
        with pytest.raises(IndexOutOfVocabError):
            forward(batch, params, config)


class TestGradients:
    def test_matches_finite_differences(self, tiny):
        config, params = tiny
        rng = np.random.default_rng(5)
        batch = random_batch(config, 4, rng)
        labels = rng.integers(0, 3, size=4)
        errors = finite_difference_errors(batch, labels, params, config)
        assert set(errors) == set(params)
        assert max(errors.values()) <= 1e-4

    def test_two_blocks(self):
        config = TransformerConfig(3, 2, (("activity", 5, 4),), embed_dim=4,
                                   num_heads=2, ff_dim=6, num_blocks=2)
        params = init_params(config, 0)
        rng = np.random.default_rng(2)
        batch = random_batch(config, 3, rng)
        errors = finite_difference_errors(batch, rng.integers(0, 2, 3), params, config)
        assert max(errors.values()) <= 1e-4

    def test_dropout_is_seeded(self):
        config = tiny_config(dropout=0.3)
        params = init_params(config, 0)
        batch = random_batch(config, 4, np.random.default_rng(0))
        y = np.zeros(4, dtype=int)
        a, _ = loss_and_grads(batch, y, params, config, True, np.random.default_rng(9))
        b, _ = loss_and_grads(batch, y, params, config, True, np.random.default_rng(9))
        c, _ = loss_and_grads(batch, y, params, config, False)
        assert a == b and a != c


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_padding_is_invisible(seed):
    config = tiny_config()
    params = init_params(config, 7)
    rng = np.random.default_rng(seed)
    batch = random_batch(config, 1, rng)
    base = forward(batch, params, config)
    noisy = Batch(batch.cat.copy(), batch.num.copy(), batch.mask, batch.scalars)
    hidden = ~batch.mask[0]
    for a, (_, vocab, _) in enumerate(config.categorical):
        noisy.cat[0, a, hidden] = rng.integers(0, vocab, size=hidden.sum())
    noisy.num[0, :, hidden] = rng.normal(size=(hidden.sum(), len(config.numeric))) * 100
    assert np.max(np.abs(forward(noisy, params, config) - base)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.booleans())
def test_softmax_rows_sum_to_one(seed, n, train_mode):
    config = tiny_config(dropout=0.2)
    params = init_params(config, seed % 1000)
    rng = np.random.default_rng(seed)
    probs = forward(random_batch(config, n, rng), params, config, train_mode, rng)
    assert probs.shape == (n, 3)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


class TestTraining:
    def test_adam_hand_trace(self):
        state = TrainState.fresh({"w": np.array([1.0])})
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.5, -0.2, 0.3], start=1):
            adam_step(state, {"w": np.array([g])}, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert state.params["w"][0] == pytest.approx(w, abs=1e-15)
        assert state.step == 3
        # first bias-corrected step moves by exactly lr
        fresh = TrainState.fresh({"w": np.array([0.0])})
        adam_step(fresh, {"w": np.array([123.0])}, 0.01)
        assert fresh.params["w"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_early_stopping(self):
        stop = EarlyStopping(patience=2)
        losses = [1.0, 0.8, 0.9, 0.85, 0.7]
        flags = []
        for epoch, loss in enumerate(losses[:4]):
            flags.append(stop.update(epoch, loss))
        assert flags == [False, False, False, True]
        assert stop.best_epoch == 1
        assert stop.update(4, 0.7) is False and stop.best_epoch == 4
        never = EarlyStopping(None)
        assert not any(never.update(e, 1.0) for e in range(10))

    def test_restores_best_validation_epoch(self, tiny):
        config, _ = tiny
        rng = np.random.default_rng(0)
        train = random_batch(config, 24, rng)
        val = random_batch(config, 12, rng)
        y, yv = rng.integers(0, 3, 24), rng.integers(0, 3, 12)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, epochs=12, patience=3, seed=0)
        state = fit_arrays(train, y, config, cfg, val, yv)
        hist = state.history
        assert state.best_epoch == int(np.argmin(hist["val_loss"]))
        from nextact.transformer.training import evaluate_batch
        loss, _ = evaluate_batch(val, yv, state.params, config)
        assert loss == pytest.approx(min(hist["val_loss"]), abs=1e-12)

    def test_seeded_training_is_reproducible(self, tiny):
        config, _ = tiny
        rng = np.random.default_rng(0)
        train = random_batch(config, 16, rng)
        y = rng.integers(0, 3, 16)
        cfg = TrainConfig(batch_size=4, epochs=3, seed=11)
        a = fit_arrays(train, y, config, cfg)
        b = fit_arrays(train, y, config, cfg)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])


def _grammar_dataset(n_traces=80, seed=0):
    log = generate_synthetic_log(SyntheticLogSpec(n_traces=n_traces, seed=seed,
                                                  grammar="first-event", n_starts=3))
    encs = fit_encoders(log, ["activity"])
    return generate_prefix_samples(log, encs)


class TestEstimator:
    def test_sklearn_params(self):
        est = DAWTransformerClassifier(embed_dim=8, num_heads=2)
        assert clone(est).get_params()["embed_dim"] == 8
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((1, 5)))

    def test_profiles(self):
        full = DAWTransformerClassifier.from_profile("paper")
        assert (full.embed_dim, full.num_heads, full.ff_dim, full.batch_size,
                full.epochs) == (256, 8, 256, 2, 50)
        assert set(PROFILES) == {"paper", "desk"}

    def test_fit_predict_and_checkpoint(self, tmp_path):
        ds = _grammar_dataset()
        X, y = ds.to_matrix(), ds.targets
        est = DAWTransformerClassifier(layout=ds.layout, classes=np.arange(len(ds.class_names)),
                                       embed_dim=8, num_heads=2, ff_dim=16, epochs=5,
                                       batch_size=16, random_state=0)
        est.fit(X, y, groups=[s.case_id for s in ds.samples])
        proba = est.predict_proba(X)
        assert proba.shape == (len(X), len(ds.class_names))
        path = tmp_path / "model.json"
        est.save(path, manifest_hash="abc")
        loaded = DAWTransformerClassifier.load(path, manifest_hash="abc")
        np.testing.assert_array_equal(loaded.predict_proba(X), proba)
        with pytest.raises(ManifestMismatchError):
            DAWTransformerClassifier.load(path, manifest_hash="other")
        ranked = est.predict_next(X[0], ds.class_names)
        assert len(ranked) == len(ds.class_names)
        assert ranked[0][1] == max(p for _, p in ranked)
        with pytest.raises(ManifestMismatchError):
            est.predict_next(X[0][:-1])

    def test_groups_must_align_with_samples(self):
        ds = _grammar_dataset(20)
        est = DAWTransformerClassifier(layout=ds.layout, epochs=1)
        with pytest.raises(ValueError, match="groups"):
            est.fit(ds.to_matrix(), ds.targets, groups=ds.case_ids)

    def test_predict_next_on_samples(self):
        ds = _grammar_dataset(30)
        config = TransformerConfig.from_layout(ds.layout, len(ds.class_names),
                                               embed_dim=8, num_heads=2, ff_dim=8)
        state = TrainState.fresh(init_params(config, 0))
        ranked = predict_next(state, ds.samples[0], config, ds.class_names)
        assert sorted(n for n, _ in ranked) == sorted(ds.class_names)
        with pytest.raises(ManifestMismatchError):
            predict_next(state, ds.samples[0], config, ds.class_names[:-1])
