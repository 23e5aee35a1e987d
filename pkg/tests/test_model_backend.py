import hashlib
import json
import math

import numpy as np
import pytest

from errors import ChecksumError, ConfigError, FormatError, LengthError, ShapeError, VersionError
from services.model_backend import (
    ByteTokenizer, InjectionHook, MicroTransformer, ModelConfig, PositionPolicy,
    decode_weights, encode_weights, init_micro_model, load_backend, load_tokenizer, load_weights, save_weights,
)
from services.prompting import encode_question
from utils.container import HEADER


def reference_forward(model, token_ids):
    """Full-sequence forward with batched matrices and a causal mask."""
    c = model.config
    w = {name: np.asarray(t, dtype=np.float64) for name, t in model.weights.items()}
    ids = np.asarray(token_ids)
    length, heads, d_head = len(ids), c.n_heads, c.d_model // c.n_heads

    def norm(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    x = w['tok_emb'][ids] + w['pos_emb'][:length]
    future = np.triu(np.ones((length, length), dtype=bool), k=1)
    for layer in range(c.n_layers):
        p = f'blocks.{layer}.'
        a = norm(x, w[p + 'ln1.g'], w[p + 'ln1.b'])
        qkv = a @ w[p + 'attn.w_qkv'] + w[p + 'attn.b_qkv']
        q, k, v = (m.reshape(length, heads, d_head).transpose(1, 0, 2) for m in np.split(qkv, 3, axis=-1))
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(d_head)
        scores[:, future] = -np.inf
        weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
        weights /= weights.sum(axis=-1, keepdims=True)
        context = (weights @ v).transpose(1, 0, 2).reshape(length, c.d_model)
        x = x + context @ w[p + 'attn.w_o'] + w[p + 'attn.b_o']
        hidden = norm(x, w[p + 'ln2.g'], w[p + 'ln2.b']) @ w[p + 'mlp.w_in'] + w[p + 'mlp.b_in']
        hidden = 0.5 * hidden * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (hidden + 0.044715 * hidden ** 3)))
        x = x + hidden @ w[p + 'mlp.w_out'] + w[p + 'mlp.b_out']
    return norm(x, w['ln_f.g'], w['ln_f.b']) @ w['head.w'] + w['head.b']


def random_vector(d_model, seed=0):
    return np.random.default_rng(seed).standard_normal(d_model)


class TestByteTokenizer:
    def test_empty(self):
        assert ByteTokenizer().tokenize("") == []

    def test_byte_identity(self):
        assert ByteTokenizer().tokenize("ab") == [97, 98]

    def test_round_trip_non_ascii(self, trace_a_text):
        tokenizer = ByteTokenizer()
        for text in (trace_a_text, "héllo wörld → 42", "\\boxed{\\frac{1}{2}}"):
            assert tokenizer.detokenize(tokenizer.tokenize(text)) == text

    def test_special_ids_are_dropped(self):
        tokenizer = ByteTokenizer()
        assert tokenizer.detokenize([tokenizer.bos_id, 104, 105, tokenizer.eos_id]) == "hi"

    def test_load_tokenizer(self):
        assert load_tokenizer('micro').vocab_size == 259
        with pytest.raises(ConfigError):
            load_tokenizer('nope')


class TestInitMicroModel:
    def test_same_seed_same_weights(self, tiny_config):
        assert init_micro_model(tiny_config).fingerprint == init_micro_model(tiny_config).fingerprint

    def test_different_seed_different_weights(self, tiny_config):
        first = ModelConfig(**dict(tiny_config.to_dict(), seed=1))
        second = ModelConfig(**dict(tiny_config.to_dict(), seed=2))
        assert init_micro_model(first).fingerprint != init_micro_model(second).fingerprint

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            init_micro_model(ModelConfig(d_model=30, n_heads=4))

    def test_vocabulary_must_cover_byte_tokenizer(self):
        with pytest.raises(ConfigError, match='vocab_size'):
            ModelConfig(vocab_size=100).validate()
        ModelConfig(vocab_size=ByteTokenizer.vocab_size).validate()
        ModelConfig(vocab_size=300).validate()

    def test_norm_parameters_are_identity(self, tiny_model):
        weights = tiny_model.weights
        assert np.all(weights['blocks.0.ln1.g'] == 1.0)
        assert np.all(weights['blocks.0.attn.b_qkv'] == 0.0)
        assert weights['tok_emb'].dtype == np.float32


class TestForward:
    def test_matches_batched_oracle(self, tiny_model):
        ids = encode_question(tiny_model.tokenizer, "What is 2 + 3?")
        logits, states = tiny_model.forward(ids)
        assert logits.shape == (len(ids), 259)
        assert states.values.shape == (4, len(ids), 32)
        np.testing.assert_allclose(logits, reference_forward(tiny_model, ids), rtol=0, atol=1e-9)

    def test_three_tokens_match_oracle(self, tiny_model):
        ids = [256, 72, 105]
        np.testing.assert_allclose(tiny_model.forward(ids)[0], reference_forward(tiny_model, ids), atol=1e-9)

    def test_zero_lambda_is_identity(self, tiny_model):
        ids = encode_question(tiny_model.tokenizer, "How many?")
        base_logits, base_states = tiny_model.forward(ids)
        hook = InjectionHook(layer=2, vector=random_vector(32), lam=0.0,
                             position_policy=PositionPolicy.ALL_POSITIONS)
        logits, states = tiny_model.forward(ids, hook=hook)
        assert np.array_equal(logits, base_logits)
        assert np.array_equal(states.values, base_states.values)

    @pytest.mark.parametrize('lam', [1.0, -5.0, 14.0])
    def test_injection_exact_at_hooked_layer(self, tiny_model, lam):
        ids = encode_question(tiny_model.tokenizer, "How many?")
        vector = random_vector(32, seed=4)
        _, base = tiny_model.forward(ids)
        hook = InjectionHook(layer=1, vector=vector, lam=lam, position_policy=PositionPolicy.ALL_POSITIONS)
        _, hooked = tiny_model.forward(ids, hook=hook)
        np.testing.assert_allclose(hooked[1] - base[1], np.tile(lam * vector, (len(ids), 1)), rtol=0, atol=1e-6)
        assert np.array_equal(hooked[0], base[0])

    def test_generated_only_skips_prompt_positions(self, tiny_model):
        ids = encode_question(tiny_model.tokenizer, "How many?")
        hook = InjectionHook(layer=1, vector=random_vector(32), lam=3.0)
        base_logits, _ = tiny_model.forward(ids)
        logits, _ = tiny_model.forward(ids, hook=hook, prompt_length=len(ids))
        assert np.array_equal(logits, base_logits)

        prompt_length = len(ids) - 3
        _, base = tiny_model.forward(ids)
        _, hooked = tiny_model.forward(ids, hook=hook, prompt_length=prompt_length)
        assert np.array_equal(hooked[1][:prompt_length], base[1][:prompt_length])
        assert not np.array_equal(hooked[1][prompt_length:], base[1][prompt_length:])

    def test_wrong_vector_shape(self, tiny_model):
        hook = InjectionHook(layer=0, vector=np.ones(31), lam=1.0)
        with pytest.raises(ShapeError):
            tiny_model.forward([256, 1], hook=hook)

    def test_hook_layer_out_of_range(self, tiny_model):
        hook = InjectionHook(layer=4, vector=np.ones(32), lam=1.0)
        with pytest.raises(ConfigError):
            tiny_model.forward([256, 1], hook=hook)

    def test_length_limits(self, tiny_model):
        with pytest.raises(LengthError):
            tiny_model.forward([])
        with pytest.raises(LengthError):
            tiny_model.forward([0] * 513)


class TestGreedyGenerate:
    def test_zero_budget(self, tiny_model):
        assert tiny_model.greedy_generate([256, 1, 2], 0) == []

    def test_cached_matches_uncached(self, tiny_model, questions):
        for question in questions[:2]:
            ids = encode_question(tiny_model.tokenizer, question)
            cached = tiny_model.greedy_generate(ids, 24, use_cache=True)
            assert cached == tiny_model.greedy_generate(ids, 24, use_cache=False)

    def test_cached_matches_uncached_with_hook(self, tiny_model, questions):
        ids = encode_question(tiny_model.tokenizer, questions[0])
        hook = InjectionHook(layer=2, vector=random_vector(32, seed=9), lam=6.0)
        assert tiny_model.greedy_generate(ids, 24, hook=hook) == \
            tiny_model.greedy_generate(ids, 24, hook=hook, use_cache=False)

    def test_zero_lambda_hook_is_identity(self, tiny_model, questions):
        hook = InjectionHook(layer=1, vector=random_vector(32, seed=2), lam=0.0)
        for question in questions:
            ids = encode_question(tiny_model.tokenizer, question)
            assert tiny_model.greedy_generate(ids, 32, hook=hook) == tiny_model.greedy_generate(ids, 32)

    def test_first_token_is_never_steered(self, tiny_model, questions):
        ids = encode_question(tiny_model.tokenizer, questions[1])
        hook = InjectionHook(layer=3, vector=random_vector(32, seed=5), lam=50.0)
        steered = tiny_model.greedy_generate(ids, 4, hook=hook)
        plain = tiny_model.greedy_generate(ids, 4)
        assert steered[:1] == plain[:1]

    def test_matches_argmax_of_forward(self, tiny_model, questions):
        ids = encode_question(tiny_model.tokenizer, questions[2])
        generated = tiny_model.greedy_generate(ids, 6)
        for step, token in enumerate(generated):
            logits, _ = tiny_model.forward(ids + generated[:step])
            assert token == int(np.argmax(logits[-1]))

    def test_eos_stops_decoding(self, tiny_config):
        weights = {name: np.array(t) for name, t in init_micro_model(tiny_config).weights.items()}
        weights['head.w'][:] = 0.0
        weights['head.b'][:] = 0.0
        weights['head.b'][257] = 1.0
        model = MicroTransformer(tiny_config, weights)
        assert model.greedy_generate([256, 65], 10) == []

    def test_argmax_ties_go_to_lowest_id(self, tiny_config):
        weights = {name: np.array(t) for name, t in init_micro_model(tiny_config).weights.items()}
        weights['head.w'][:] = 0.0
        weights['head.b'][:] = 0.0
        model = MicroTransformer(tiny_config, weights)
        assert model.greedy_generate([256, 65], 3) == [0, 0, 0]

    def test_budget_beyond_context(self, tiny_model):
        with pytest.raises(LengthError):
            tiny_model.greedy_generate([256] * 500, 13)
        with pytest.raises(LengthError):
            tiny_model.greedy_generate([], 5)


class TestAttention:
    def test_attention_rows_are_causal_distributions(self, tiny_model):
        ids = encode_question(tiny_model.tokenizer, "What is 7 * 6?")
        attention = tiny_model.attention_weights(ids)
        length = len(ids)
        assert attention.shape == (4, 4, length, length)
        np.testing.assert_allclose(attention.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        assert np.all(attention >= 0.0)
        future = np.triu(np.ones((length, length), dtype=bool), k=1)
        assert not attention[:, :, future].any()

    def test_recording_attention_leaves_outputs_alone(self, tiny_model):
        ids = encode_question(tiny_model.tokenizer, "How many?")
        tiny_model.attention_weights(ids)
        np.testing.assert_allclose(tiny_model.forward(ids)[0], reference_forward(tiny_model, ids), atol=1e-9)

class TestWeightFiles:
    def test_round_trip_is_lossless(self, tiny_model, tmp_path):
        path = str(tmp_path / 'model.bin')
        fingerprint = save_weights(tiny_model, path)
        loaded = load_weights(path)
        assert fingerprint == tiny_model.fingerprint == loaded.fingerprint
        ids = [256, 10, 20, 30]
        assert np.array_equal(loaded.forward(ids)[0], tiny_model.forward(ids)[0])

    def test_load_backend(self, tiny_model, tmp_path):
        path = str(tmp_path / 'model.bin')
        save_weights(tiny_model, path)
        assert load_backend('micro', path).fingerprint == tiny_model.fingerprint
        with pytest.raises(ConfigError):
            load_backend('gguf', path)

    def test_truncated(self, tiny_model):
        data = encode_weights(tiny_model)
        with pytest.raises(FormatError):
            decode_weights(data[:-4])
        with pytest.raises(FormatError):
            decode_weights(data[:5])

    def _edit_manifest(self, data, edit):
        (length,) = HEADER.unpack_from(data, 0)
        manifest = json.loads(data[HEADER.size:HEADER.size + length])
        edit(manifest)
        encoded = json.dumps(manifest, sort_keys=True).encode('utf-8')
        return HEADER.pack(len(encoded)) + encoded + data[HEADER.size + length:]

    def test_wrong_shape_in_manifest(self, tiny_model):
        def edit(manifest):
            manifest['tensors'][0]['shape'] = [1, 1]
        with pytest.raises(FormatError):
            decode_weights(self._edit_manifest(encode_weights(tiny_model), edit))

    def test_config_disagrees_with_tensors(self, tiny_model):
        def edit(manifest):
            manifest['config']['d_ff'] = 16
        with pytest.raises(FormatError):
            decode_weights(self._edit_manifest(encode_weights(tiny_model), edit))

    def test_unknown_version(self, tiny_model):
        def edit(manifest):
            manifest['format_version'] = 99
        with pytest.raises(VersionError):
            decode_weights(self._edit_manifest(encode_weights(tiny_model), edit))

    def test_corrupted_payload(self, tiny_model):
        data = bytearray(encode_weights(tiny_model))
        data[-1] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode_weights(bytes(data))


class TestGoldenModel:
    """Checks on the default configuration, the model every pinned value is computed on."""

    def test_default_weights_checksum(self, golden_model, tmp_path, golden):
        assert golden_model.config == ModelConfig()
        path = str(tmp_path / 'model.bin')
        assert save_weights(golden_model, path) == golden_model.fingerprint
        with open(path, 'rb') as f:
            assert hashlib.sha256(f.read()).hexdigest() == golden_model.fingerprint
        golden.check('default_weights_sha256', golden_model.fingerprint)

    def test_zero_lambda_is_identity_on_fixture_prompts(self, golden_model, fixture_items):
        assert len(fixture_items) == 25
        hook = InjectionHook(layer=2, vector=random_vector(64, seed=11), lam=0.0)
        for item in fixture_items:
            ids = encode_question(golden_model.tokenizer, item['question'])
            assert golden_model.greedy_generate(ids, 16, hook=hook) == golden_model.greedy_generate(ids, 16)

    def test_cached_matches_uncached_over_64_tokens(self, golden_model, fixture_items):
        ids = encode_question(golden_model.tokenizer, fixture_items[0]['question'], bare=True)
        hook = InjectionHook(layer=1, vector=random_vector(64, seed=3), lam=4.0)
        for active in (None, hook):
            cached = golden_model.greedy_generate(ids, 64, hook=active, use_cache=True)
            assert cached == golden_model.greedy_generate(ids, 64, hook=active, use_cache=False)

    def test_logits_do_not_see_later_tokens(self, golden_model, fixture_items):
        ids = encode_question(golden_model.tokenizer, fixture_items[1]['question'], bare=True)
        cut = len(ids) // 2
        altered = ids[:cut] + [(token + 1) % 256 for token in ids[cut:]]
        logits, states = golden_model.forward(ids)
        altered_logits, altered_states = golden_model.forward(altered)
        assert np.array_equal(logits[:cut], altered_logits[:cut])
        assert np.array_equal(states.values[:, :cut], altered_states.values[:, :cut])
        assert not np.array_equal(logits[cut:], altered_logits[cut:])

    def test_attention_rows_sum_to_one(self, golden_model, fixture_items):
        ids = encode_question(golden_model.tokenizer, fixture_items[2]['question'], bare=True)
        attention = golden_model.attention_weights(ids)
        np.testing.assert_allclose(attention.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        future = np.triu(np.ones((len(ids), len(ids)), dtype=bool), k=1)
        assert not attention[:, :, future].any()
