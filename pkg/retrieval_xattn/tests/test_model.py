import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from retrieval_xattn.errors import (
    ArgumentError,
    ConfigValidationError,
    ProviderError,
    VocabError,
    WindowError,
)
from retrieval_xattn.knn_index import Datastore
from retrieval_xattn.model import (
    BOS,
    EOS,
    DecoderCache,
    Gradients,
    HeadGradients,
    ModelConfig,
    ModelWeights,
    decode_step,
    encode_window,
    greedy_generate,
    monolithic_logits,
    monolithic_loss,
    parameter_shapes,
    teacher_forced_loss,
)
from retrieval_xattn.numerics import Rng, grad_check
from retrieval_xattn.retrieval_attention import RetrievalCrossAttention

from .conftest import random_datastore, random_weights


class CountingProvider:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def begin_pass(self, log_from=0):
        self.inner.begin_pass(log_from)

    def attend(self, hp, h_d, steps):
        self.calls.append((hp.layer, hp.head, h_d.shape[0]))
        return self.inner.attend(hp, h_d, steps)

    def attend_backward(self, hp, cache, d_context):
        return self.inner.attend_backward(hp, cache, d_context)


class ConstantProvider:
    """Returns the same context for every query; no gradients to the encoder side."""

    def __init__(self, d_head, value=0.25):
        self.d_head = d_head
        self.value = value

    def begin_pass(self, log_from=0):
        pass

    def attend(self, hp, h_d, steps):
        return np.full((h_d.shape[0], self.d_head), self.value, dtype=h_d.dtype), h_d

    def attend_backward(self, hp, cache, d_context):
        z = np.zeros_like
        return HeadGradients(z(hp.wq), z(hp.bq), z(hp.wk), z(hp.bk), z(hp.wv), z(hp.bv), np.zeros_like(cache))


class FailingProvider(ConstantProvider):
    def attend(self, hp, h_d, steps):
        raise RuntimeError("index offline")


def _full(weights, source):
    return RetrievalCrossAttention(Datastore(encode_window(weights, source), np.arange(len(source))).freeze(), "full")


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_model, cfg.window, cfg.d_head) == (32, 16, 16)

    @pytest.mark.parametrize("overrides", [
        {"window": 10},
        {"window": 2},
        {"d_model": 30, "n_heads": 4},
        {"vocab_size": 3},
        {"n_heads": 0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigValidationError):
            ModelConfig(**overrides)

    def test_dict_round_trip(self):
        cfg = ModelConfig(d_model=8, n_heads=4, window=12)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigValidationError):
            ModelConfig.from_dict({"d_modle": 8})


class TestWeights:
    def test_parameters_match_shapes(self, tiny_config):
        weights = ModelWeights.initialize(tiny_config)
        shapes = parameter_shapes(tiny_config)
        assert list(weights.params) == list(shapes)
        for name, shape in shapes.items():
            assert weights[name].shape == shape

    def test_every_decoder_layer_has_n_heads_projections(self):
        cfg = ModelConfig(d_model=16, n_heads=4, n_dec_layers=3, d_ff=32)
        projections = ModelWeights.initialize(cfg).head_projections()
        assert [(hp.layer, hp.head) for hp in projections] == [(l, h) for l in range(3) for h in range(4)]
        hp = projections[5]
        assert hp.wq.shape == (16, 4) and hp.bq.shape == (4,) and hp.wo.shape == (4, 16)

    def test_head_projection_is_a_view(self, tiny_weights):
        hp = tiny_weights.head_projection(0, 1)
        assert np.shares_memory(hp.wk, tiny_weights["dec.0.cross.wk"])

    def test_head_projection_out_of_range(self, tiny_weights):
        with pytest.raises(ArgumentError):
            tiny_weights.head_projection(1, 0)

    def test_initialization_is_seeded(self, tiny_config):
        a = ModelWeights.initialize(tiny_config, Rng(5))
        b = ModelWeights.initialize(tiny_config, Rng(5))
        for name in a.params:
            assert_array_equal(a[name], b[name])


class TestEncodeWindow:
    def test_single_token(self, tiny_weights):
        assert encode_window(tiny_weights, [7]).shape == (1, 16)

    def test_deterministic(self, tiny_weights):
        tokens = [4, 9, 12, 5, 30]
        assert_array_equal(encode_window(tiny_weights, tokens), encode_window(tiny_weights, tokens))

    def test_positional_sensitivity(self, tiny_weights):
        a = encode_window(tiny_weights, [4, 9, 12, 5])
        b = encode_window(tiny_weights, [5, 12, 9, 4])
        assert not np.allclose(a[::-1], b)

    def test_too_long(self, tiny_weights):
        with pytest.raises(WindowError):
            encode_window(tiny_weights, list(range(4, 13)))

    def test_unknown_token(self, tiny_weights):
        with pytest.raises(VocabError):
            encode_window(tiny_weights, [4, 32])


class TestDecodeStep:
    def test_logits_shape(self, tiny_weights):
        logits = decode_step(tiny_weights, [BOS, 5], _full(tiny_weights, [4, 5, 6]))
        assert logits.shape == (32,)

    def test_full_provider_matches_monolithic_forward(self, tiny_weights):
        source = [4, 11, 7, 19, 23, 5, 8, 30]
        prefix = [BOS, 9, 14, 6]
        expected = monolithic_logits(tiny_weights, source, prefix)[-1]
        assert_allclose(decode_step(tiny_weights, prefix, _full(tiny_weights, source)), expected, atol=1e-5)

    def test_identical_contexts_give_identical_logits(self, tiny_weights):
        a = decode_step(tiny_weights, [BOS, 5, 6], ConstantProvider(8))
        b = decode_step(tiny_weights, [BOS, 5, 6], ConstantProvider(8))
        assert_array_equal(a, b)

    def test_cached_steps_match_uncached(self, tiny_weights):
        cross = _full(tiny_weights, [4, 11, 7, 19, 23])
        prefix = [BOS, 9, 14, 6, 21]
        cache = DecoderCache()
        for t in range(1, len(prefix) + 1):
            cached = decode_step(tiny_weights, prefix[:t], cross, cache)
            assert_allclose(cached, decode_step(tiny_weights, prefix[:t], cross), atol=1e-10)
        assert cache.length == len(prefix)

    def test_provider_called_once_per_layer_per_head_per_step(self):
        cfg = ModelConfig(d_model=16, n_heads=2, n_dec_layers=2, d_ff=32, window=8, vocab_size=32)
        weights = random_weights(cfg)
        counting = CountingProvider(_full(weights, [4, 5, 6, 7]))
        cache = DecoderCache()
        prefix = [BOS, 9, 10]
        for t in range(1, 4):
            counting.calls.clear()
            decode_step(weights, prefix[:t], counting, cache)
            assert sorted(counting.calls) == [(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]

    def test_cache_ahead_of_prefix(self, tiny_weights):
        cross = _full(tiny_weights, [4, 5])
        cache = DecoderCache()
        decode_step(tiny_weights, [BOS, 5], cross, cache)
        with pytest.raises(ArgumentError):
            decode_step(tiny_weights, [BOS, 5], cross, cache)

    def test_provider_failure_carries_layer_and_head(self, tiny_weights):
        with pytest.raises(ProviderError) as err:
            decode_step(tiny_weights, [BOS], FailingProvider(8))
        assert err.value.layer == 0 and err.value.head == 0
        assert "index offline" in str(err.value)
        assert isinstance(err.value.__cause__, RuntimeError)


class TestGreedyGenerate:
    def test_zero_budget(self, tiny_weights):
        assert greedy_generate(tiny_weights, _full(tiny_weights, [4, 5]), 0) == []

    def test_eos_first(self, tiny_weights):
        rigged = tiny_weights.copy()
        rigged.params["out_bias"][0, EOS] = 1e3
        assert greedy_generate(rigged, _full(rigged, [4, 5]), 5) == []

    def test_dominant_token(self, tiny_weights):
        rigged = tiny_weights.copy()
        rigged.params["out_bias"][0, 5] = 1e3
        assert greedy_generate(rigged, _full(rigged, [4, 5]), 5) == [5] * 5

    def test_budget_capped_by_window(self, tiny_weights):
        rigged = tiny_weights.copy()
        rigged.params["out_bias"][0, 5] = 1e3
        assert len(greedy_generate(rigged, _full(rigged, [4, 5]), 100)) == 7

    def test_ties_go_to_lowest_id(self, tiny_weights):
        rigged = tiny_weights.copy()
        rigged.params["tok_emb"][:] = 0.0
        rigged.params["out_bias"][0, 9] = 1.0
        rigged.params["out_bias"][0, 7] = 1.0
        assert greedy_generate(rigged, _full(rigged, [4, 5]), 2) == [7, 7]

    def test_negative_budget(self, tiny_weights):
        with pytest.raises(ArgumentError):
            greedy_generate(tiny_weights, _full(tiny_weights, [4]), -1)


class TestTeacherForcedLoss:
    def test_perfect_fit(self, tiny_weights):
        rigged = tiny_weights.copy()
        rigged.params["out_bias"][0, EOS] = 50.0
        loss, _ = teacher_forced_loss(rigged, _full(rigged, [4, 5, 6]), [BOS, EOS])
        assert loss < 1e-3

    def test_uniform_logits(self, tiny_weights):
        flat = tiny_weights.copy()
        flat.params["tok_emb"][:] = 0.0
        loss, _ = teacher_forced_loss(flat, _full(flat, [4, 5, 6]), [BOS, 7, 8, EOS])
        assert loss == pytest.approx(math.log(32), abs=1e-4)

    def test_matches_monolithic_loss(self, tiny_weights):
        source, target = [4, 11, 7, 19, 23], [BOS, 9, 14, 6, EOS]
        loss, _ = teacher_forced_loss(tiny_weights, _full(tiny_weights, source), target)
        assert loss == pytest.approx(monolithic_loss(tiny_weights, source, target), abs=1e-10)

    @pytest.mark.parametrize("target", [[BOS], [5, 6, EOS], [BOS, 6, 7], [BOS] + [5] * 8 + [EOS]])
    def test_malformed_target(self, tiny_weights, target):
        with pytest.raises(ArgumentError):
            teacher_forced_loss(tiny_weights, _full(tiny_weights, [4, 5]), target)

    def test_gradients_cover_every_parameter(self, tiny_weights):
        _, grads = teacher_forced_loss(tiny_weights, _full(tiny_weights, [4, 5, 6]), [BOS, 9, EOS])
        assert isinstance(grads, Gradients)
        assert set(grads.params) == set(tiny_weights.params)
        assert grads.global_norm() > 0

    @pytest.mark.parametrize("name", [
        "tok_emb", "pos_emb", "dec.0.self.wq", "dec.0.self.bv", "dec.0.cross.wq", "dec.0.cross.wk",
        "dec.0.cross.wv", "dec.0.cross.wo", "dec.0.ln2.g", "dec.0.ff.w1", "dec.ln_f.b", "out_bias",
    ])
    def test_decoder_gradients(self, name):
        cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, window=8, vocab_size=12, init_std=0.3)
        weights = random_weights(cfg, seed=3)
        ds = random_datastore(6, 8, seed=3)
        target = [BOS, 5, 9, 6, EOS]
        _, grads = teacher_forced_loss(weights, RetrievalCrossAttention(ds, "full"), target)

        def loss_at(x):
            perturbed = weights.copy()
            perturbed.params[name] = x
            return teacher_forced_loss(perturbed, RetrievalCrossAttention(ds, "full"), target)[0]

        assert grad_check(loss_at, grads.params[name], weights[name], eps=1e-5) < 1e-3

    def test_memory_gradient(self):
        cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, window=8, vocab_size=12, init_std=0.3)
        weights = random_weights(cfg, seed=4)
        ds = random_datastore(6, 8, seed=4)
        target = [BOS, 5, 9, EOS]
        cross = RetrievalCrossAttention(ds, "retrieval", 3)
        _, grads = teacher_forced_loss(weights, cross, target)
        cross.freeze()

        def loss_at(memory):
            return teacher_forced_loss(weights, cross.with_memory(memory), target)[0]

        assert grads.memory.shape == ds.vectors.shape
        assert grad_check(loss_at, grads.memory, np.array(ds.vectors), eps=1e-5) < 1e-3
