"""
Backend contract for decoder-only language models, and the bundled
deterministic micro-transformer that implements it.

The micro model computes one position at a time against a KV cache. A full
forward pass and every decoding step run the same per-position arithmetic
on identically shaped arrays, so cached and uncached decoding agree bit for
bit. Activations are float64; weights are stored as float32.
"""
import logging
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from errors import ConfigError, FormatError, LengthError, ShapeError
from utils.container import decode_container, encode_container
from utils.file_utils import atomic_write, sha256_bytes

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = 'densesteer.weights'
WEIGHTS_FORMAT_VERSION = 1

LAYER_NORM_EPS = 1e-5


# ============================================================================
# Tokenizer
# ============================================================================

class ByteTokenizer:
    """Byte-level tokenizer: ids 0-255 are bytes, then BOS, EOS, PAD."""

    bos_id = 256
    eos_id = 257
    pad_id = 258
    vocab_size = 259

    def tokenize(self, text: str) -> List[int]:
        return list(text.encode('utf-8'))

    def detokenize(self, token_ids: Sequence[int]) -> str:
        """Decode byte ids; special ids are dropped, invalid UTF-8 replaced."""
        return bytes(int(i) for i in token_ids if 0 <= int(i) < 256).decode('utf-8', errors='replace')

    def special_ids(self) -> Dict[str, int]:
        return {'bos': self.bos_id, 'eos': self.eos_id, 'pad': self.pad_id}


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 259
    max_seq_len: int = 4096
    seed: int = 42

    def validate(self) -> None:
        """
        Check structural invariants.

        Raises:
            ConfigError: On any violation
        """
        problems = []
        for name in ('n_layers', 'd_model', 'n_heads', 'd_ff'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads != 0:
            problems.append(f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})")
        if self.vocab_size < ByteTokenizer.vocab_size:
            problems.append(f"vocab_size must be >= {ByteTokenizer.vocab_size} for the byte tokenizer")
        if self.max_seq_len < 2:
            problems.append("max_seq_len must be >= 2")
        if not 0 <= self.seed < 2 ** 64:
            problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise ConfigError(f"Invalid model config: {'; '.join(problems)}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> 'ModelConfig':
        try:
            return cls(**{name: int(data[name]) for name in cls.__dataclass_fields__})
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"incomplete model config: {e}") from e


class PositionPolicy(str, Enum):
    GENERATED_ONLY = 'generated-only'
    ALL_POSITIONS = 'all-positions'


@dataclass(frozen=True)
class InjectionHook:
    """Adds ``lam * vector`` to the output of block ``layer``."""

    layer: int
    vector: np.ndarray
    lam: float
    position_policy: PositionPolicy = PositionPolicy.GENERATED_ONLY

    def selects(self, position: int, prompt_length: int) -> bool:
        if self.position_policy == PositionPolicy.ALL_POSITIONS:
            return True
        return position >= prompt_length

    def validate_for(self, config: ModelConfig) -> None:
        """
        Raises:
            ShapeError: If the vector length is not d_model
            ConfigError: If the layer is outside the model
        """
        vector = np.asarray(self.vector)
        if vector.shape != (config.d_model,):
            raise ShapeError(f"hook vector shape {vector.shape} != ({config.d_model},)")
        if not 0 <= self.layer < config.n_layers:
            raise ConfigError(f"hook layer {self.layer} outside 0..{config.n_layers - 1}")


@dataclass(frozen=True)
class HiddenStates:
    """Block outputs (residual stream), shape [n_layers, T, d_model]."""

    values: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_positions(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.values[layer]


class LanguageModel(Protocol):
    """What the rest of the toolkit needs from a backend."""

    config: ModelConfig
    tokenizer: ByteTokenizer

    @property
    def fingerprint(self) -> str: ...

    def forward(
        self,
        token_ids: Sequence[int],
        hook: Optional[InjectionHook] = None,
        prompt_length: int = 0,
    ) -> Tuple[np.ndarray, HiddenStates]: ...

    def greedy_generate(
        self,
        prompt_ids: Sequence[int],
        max_new_tokens: int,
        hook: Optional[InjectionHook] = None,
        use_cache: bool = True,
    ) -> List[int]: ...


# ============================================================================
# Math
# ============================================================================

def softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean()
    centered = x - mean
    variance = (centered * centered).mean()
    return centered / math.sqrt(variance + LAYER_NORM_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Tensor names and shapes in container order."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ('tok_emb', (v, d)),
        ('pos_emb', (config.max_seq_len, d)),
    ]
    for layer in range(config.n_layers):
        prefix = f'blocks.{layer}.'
        shapes += [
            (prefix + 'ln1.g', (d,)),
            (prefix + 'ln1.b', (d,)),
            (prefix + 'attn.w_qkv', (d, 3 * d)),
            (prefix + 'attn.b_qkv', (3 * d,)),
            (prefix + 'attn.w_o', (d, d)),
            (prefix + 'attn.b_o', (d,)),
            (prefix + 'ln2.g', (d,)),
            (prefix + 'ln2.b', (d,)),
            (prefix + 'mlp.w_in', (d, ff)),
            (prefix + 'mlp.b_in', (ff,)),
            (prefix + 'mlp.w_out', (ff, d)),
            (prefix + 'mlp.b_out', (d,)),
        ]
    shapes += [
        ('ln_f.g', (d,)),
        ('ln_f.b', (d,)),
        ('head.w', (d, v)),
        ('head.b', (v,)),
    ]
    return shapes


class KVCache:
    """Per-session key/value storage, preallocated to a fixed capacity."""

    def __init__(self, config: ModelConfig, capacity: int):
        shape = (config.n_layers, config.n_heads, capacity, config.d_head)
        self.keys = np.zeros(shape, dtype=np.float64)
        self.values = np.zeros(shape, dtype=np.float64)
        self.length = 0
        self.capacity = capacity
        # Attention probabilities per layer and head, filled only when recording
        self.attention: Optional[np.ndarray] = None

    def record_attention(self) -> None:
        n_layers, n_heads, capacity, _ = self.keys.shape
        self.attention = np.zeros((n_layers, n_heads, capacity, capacity), dtype=np.float64)


# ============================================================================
# Micro transformer
# ============================================================================

class MicroTransformer:
    """Pre-norm causal decoder with learned positions and an untied head."""

    def __init__(self, config: ModelConfig, weights: Dict[str, np.ndarray]):
        """
        Args:
            config: Model configuration
            weights: float32 tensors named as in ``parameter_shapes``

        Raises:
            ConfigError: Invalid config
            FormatError: Missing, extra or misshapen tensors
        """
        config.validate()
        expected = dict(parameter_shapes(config))
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        if missing or extra:
            raise FormatError(f"weight set mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if tuple(weights[name].shape) != shape:
                raise FormatError(f"tensor {name}: shape {tuple(weights[name].shape)} != expected {shape}")

        self.config = config
        self.tokenizer = ByteTokenizer()
        self._weights: Dict[str, np.ndarray] = {}
        self._params: Dict[str, np.ndarray] = {}
        for name, _ in parameter_shapes(config):
            stored = np.array(weights[name], dtype=np.float32)
            stored.flags.writeable = False
            self._weights[name] = stored
            compute = stored.astype(np.float64)
            compute.flags.writeable = False
            self._params[name] = compute
        self._fingerprint: Optional[str] = None

    @property
    def weights(self) -> Dict[str, np.ndarray]:
        """Read-only float32 tensors in container order."""
        return dict(self._weights)

    @property
    def fingerprint(self) -> str:
        """SHA-256 of the serialized weight container."""
        if self._fingerprint is None:
            self._fingerprint = sha256_bytes(encode_weights(self))
        return self._fingerprint

    # ------------------------------------------------------------------
    # Per-position computation
    # ------------------------------------------------------------------

    def _block(self, layer: int, x: np.ndarray, position: int, cache: KVCache) -> np.ndarray:
        p = self._params
        prefix = f'blocks.{layer}.'
        n_heads, d_head = self.config.n_heads, self.config.d_head

        a = layer_norm(x, p[prefix + 'ln1.g'], p[prefix + 'ln1.b'])
        qkv = a @ p[prefix + 'attn.w_qkv'] + p[prefix + 'attn.b_qkv']
        q, k, v = np.split(qkv, 3)
        cache.keys[layer, :, position, :] = k.reshape(n_heads, d_head)
        cache.values[layer, :, position, :] = v.reshape(n_heads, d_head)

        # Contiguous copies: the reduction sees the same memory layout whatever the cache capacity
        keys = np.ascontiguousarray(cache.keys[layer, :, :position + 1, :])
        values = np.ascontiguousarray(cache.values[layer, :, :position + 1, :])
        scores = np.einsum('hjd,hd->hj', keys, q.reshape(n_heads, d_head)) / math.sqrt(d_head)
        probs = softmax(scores)
        if cache.attention is not None:
            cache.attention[layer, :, position, :position + 1] = probs
        context = np.einsum('hj,hjd->hd', probs, values).reshape(-1)
        x = x + context @ p[prefix + 'attn.w_o'] + p[prefix + 'attn.b_o']

        m = layer_norm(x, p[prefix + 'ln2.g'], p[prefix + 'ln2.b'])
        return x + gelu(m @ p[prefix + 'mlp.w_in'] + p[prefix + 'mlp.b_in']) @ p[prefix + 'mlp.w_out'] \
            + p[prefix + 'mlp.b_out']

    def _step(
        self,
        token_id: int,
        cache: KVCache,
        hook: Optional[InjectionHook],
        delta: Optional[np.ndarray],
        prompt_length: int,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Run one position; returns (logits, block outputs [n_layers, d])."""
        p = self._params
        position = cache.length
        if position >= cache.capacity:
            raise LengthError(f"position {position} exceeds cache capacity {cache.capacity}")
        if not 0 <= token_id < self.config.vocab_size:
            raise ShapeError(f"token id {token_id} outside vocabulary of {self.config.vocab_size}")

        inject = hook is not None and hook.selects(position, prompt_length)
        states = np.empty((self.config.n_layers, self.config.d_model), dtype=np.float64)
        x = p['tok_emb'][token_id] + p['pos_emb'][position]
        for layer in range(self.config.n_layers):
            x = self._block(layer, x, position, cache)
            if inject and layer == hook.layer:
                x = x + delta
            states[layer] = x
        cache.length = position + 1

        h = layer_norm(x, p['ln_f.g'], p['ln_f.b'])
        return h @ p['head.w'] + p['head.b'], states

    def _prepare_hook(self, hook: Optional[InjectionHook]) -> Optional[np.ndarray]:
        if hook is None:
            return None
        hook.validate_for(self.config)
        return float(hook.lam) * np.asarray(hook.vector, dtype=np.float64)

    # ------------------------------------------------------------------
    # Public contract
    # ------------------------------------------------------------------

    def forward(
        self,
        token_ids: Sequence[int],
        hook: Optional[InjectionHook] = None,
        prompt_length: int = 0,
    ) -> Tuple[np.ndarray, HiddenStates]:
        """
        Causal forward pass over a full sequence.

        Args:
            token_ids: Input ids, 1 <= T <= max_seq_len
            hook: Optional injection at one block output
            prompt_length: Positions below this are prompt under the
                generated-only policy

        Returns:
            (logits [T, vocab_size], HiddenStates [n_layers, T, d_model]),
            states holding post-injection values

        Raises:
            LengthError: Empty input or T > max_seq_len
            ShapeError: Hook vector length != d_model
        """
        length = len(token_ids)
        if length < 1:
            raise LengthError("forward needs at least one token")
        if length > self.config.max_seq_len:
            raise LengthError(f"sequence of {length} tokens exceeds max_seq_len {self.config.max_seq_len}")
        delta = self._prepare_hook(hook)

        cache = KVCache(self.config, length)
        logits = np.empty((length, self.config.vocab_size), dtype=np.float64)
        states = np.empty((self.config.n_layers, length, self.config.d_model), dtype=np.float64)
        for position, token_id in enumerate(token_ids):
            logits[position], states[:, position, :] = self._step(int(token_id), cache, hook, delta, prompt_length)
        return logits, HiddenStates(states)

    def attention_weights(self, token_ids: Sequence[int]) -> np.ndarray:
        """
        Attention probabilities of an unsteered forward pass.

        Returns:
            float64 array [n_layers, n_heads, T, T]; row t holds the weights
            query position t puts on keys 0..t, zeros beyond

        Raises:
            LengthError: Empty input or T > max_seq_len
        """
        length = len(token_ids)
        if length < 1:
            raise LengthError("forward needs at least one token")
        if length > self.config.max_seq_len:
            raise LengthError(f"sequence of {length} tokens exceeds max_seq_len {self.config.max_seq_len}")
        cache = KVCache(self.config, length)
        cache.record_attention()
        for token_id in token_ids:
            self._step(int(token_id), cache, None, None, 0)
        return cache.attention

    def greedy_generate(
        self,
        prompt_ids: Sequence[int],
        max_new_tokens: int,
        hook: Optional[InjectionHook] = None,
        use_cache: bool = True,
    ) -> List[int]:
        """
        Argmax decoding; ties go to the lowest token id.

        Decoding stops at EOS (not included in the output) or after
        max_new_tokens. The hook sees the prompt length, so the
        generated-only policy injects from the first generated position.

        Raises:
            LengthError: Empty prompt or prompt + max_new_tokens > max_seq_len
        """
        prompt_ids = [int(i) for i in prompt_ids]
        if not prompt_ids:
            raise LengthError("greedy_generate needs a non-empty prompt")
        if max_new_tokens < 0:
            raise LengthError(f"max_new_tokens must be >= 0, got {max_new_tokens}")
        total = len(prompt_ids) + max_new_tokens
        if total > self.config.max_seq_len:
            raise LengthError(
                f"prompt ({len(prompt_ids)}) + max_new_tokens ({max_new_tokens}) exceeds "
                f"max_seq_len {self.config.max_seq_len}"
            )
        if max_new_tokens == 0:
            return []

        prompt_length = len(prompt_ids)
        eos_id = self.tokenizer.eos_id
        generated: List[int] = []

        if use_cache:
            delta = self._prepare_hook(hook)
            cache = KVCache(self.config, total)
            for token_id in prompt_ids:
                logits, _ = self._step(token_id, cache, hook, delta, prompt_length)
            while True:
                next_id = int(np.argmax(logits))
                if next_id == eos_id:
                    break
                generated.append(next_id)
                if len(generated) == max_new_tokens:
                    break
                logits, _ = self._step(next_id, cache, hook, delta, prompt_length)
        else:
            while len(generated) < max_new_tokens:
                logits, _ = self.forward(prompt_ids + generated, hook=hook, prompt_length=prompt_length)
                next_id = int(np.argmax(logits[-1]))
                if next_id == eos_id:
                    break
                generated.append(next_id)

        return generated


# ============================================================================
# Construction and persistence
# ============================================================================

def init_micro_model(config: ModelConfig) -> MicroTransformer:
    """
    Deterministically initialize a micro model from ``config.seed``.

    Generator: numpy PCG64 seeded with the config seed, drawing float64
    standard normals that are scaled and rounded to float32. Fill order:
    token embedding, positional embedding, then per layer attention
    (w_qkv, w_o) and MLP (w_in, w_out) matrices, then the output head.
    Norm gains are ones; norm and linear biases are zeros (no draws).

    Raises:
        ConfigError: On invalid config
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    def draw(shape: Tuple[int, ...], std: float) -> np.ndarray:
        return (rng.standard_normal(shape, dtype=np.float64) * std).astype(np.float32)

    drawn: Dict[str, np.ndarray] = {
        'tok_emb': draw((v, d), 0.02),
        'pos_emb': draw((config.max_seq_len, d), 0.01),
    }
    for layer in range(config.n_layers):
        prefix = f'blocks.{layer}.'
        drawn[prefix + 'attn.w_qkv'] = draw((d, 3 * d), 1.0 / math.sqrt(d))
        drawn[prefix + 'attn.w_o'] = draw((d, d), 1.0 / math.sqrt(d))
        drawn[prefix + 'mlp.w_in'] = draw((d, ff), 1.0 / math.sqrt(d))
        drawn[prefix + 'mlp.w_out'] = draw((ff, d), 1.0 / math.sqrt(ff))
    drawn['head.w'] = draw((d, v), 1.0 / math.sqrt(d))

    weights = {}
    for name, shape in parameter_shapes(config):
        if name in drawn:
            weights[name] = drawn[name]
        elif name.endswith('.g'):
            weights[name] = np.ones(shape, dtype=np.float32)
        else:
            weights[name] = np.zeros(shape, dtype=np.float32)

    model = MicroTransformer(config, weights)
    logger.info(
        f"[MODEL] Initialized micro model: {config.n_layers} layers, d_model={config.d_model}, "
        f"seed={config.seed}, fingerprint={model.fingerprint[:12]}"
    )
    return model


def encode_weights(model: MicroTransformer) -> bytes:
    return encode_container(
        WEIGHTS_MAGIC,
        WEIGHTS_FORMAT_VERSION,
        ((name, model.weights[name]) for name, _ in parameter_shapes(model.config)),
        {
            'config': model.config.to_dict(),
            'tokenizer': 'byte',
            'special_tokens': model.tokenizer.special_ids(),
        },
    )


def decode_weights(data: bytes) -> MicroTransformer:
    """
    Rebuild a model from container bytes.

    Shapes are checked against the manifest config before any model is
    constructed.

    Raises:
        FormatError: Bad magic, version, truncation or shapes
        ChecksumError: Declared sizes disagree with the payload
    """
    manifest, tensors = decode_container(data, WEIGHTS_MAGIC, (WEIGHTS_FORMAT_VERSION,))
    config = ModelConfig.from_dict(manifest.get('config') or {})
    try:
        config.validate()
    except ConfigError as e:
        raise FormatError(f"manifest config invalid: {e}") from e
    if manifest.get('special_tokens') != ByteTokenizer().special_ids():
        raise FormatError(f"unsupported special tokens {manifest.get('special_tokens')!r}")
    return MicroTransformer(config, dict(tensors))


def save_weights(model: MicroTransformer, path: str) -> str:
    """
    Write the weight container atomically.

    Returns:
        The model fingerprint (digest of the written bytes)
    """
    data = encode_weights(model)
    atomic_write(path, data)
    logger.info(f"[MODEL] Saved weights to {path} ({len(data)} bytes)")
    return sha256_bytes(data)


def load_weights(path: str) -> MicroTransformer:
    with open(path, 'rb') as f:
        data = f.read()
    model = decode_weights(data)
    logger.info(f"[MODEL] Loaded weights from {path} (fingerprint {model.fingerprint[:12]})")
    return model


BACKENDS: Dict[str, Callable[[str], LanguageModel]] = {
    'micro': load_weights,
}


def load_backend(name: str, path: str) -> LanguageModel:
    """
    Load a model through the named backend.

    Raises:
        ConfigError: Unknown backend name
    """
    try:
        loader = BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown backend {name!r} (available: {', '.join(sorted(BACKENDS))})")
    return loader(path)


TOKENIZERS: Dict[str, Callable[[], ByteTokenizer]] = {
    'micro': ByteTokenizer,
}


def load_tokenizer(name: str) -> ByteTokenizer:
    """
    Tokenizer of the named backend, without loading weights.

    Raises:
        ConfigError: Unknown backend name
    """
    try:
        return TOKENIZERS[name]()
    except KeyError:
        raise ConfigError(f"unknown backend {name!r} (available: {', '.join(sorted(TOKENIZERS))})")
