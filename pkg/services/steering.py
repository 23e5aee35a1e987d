"""
Mean-difference steering vectors: extraction from contrastive pairs,
packaging as an injection hook, and persistence.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence

import numpy as np

from errors import DomainError, EmptySet, EmptyTrace, FingerprintMismatch, FormatError, LengthError, ShapeError
from services.model_backend import InjectionHook, LanguageModel, PositionPolicy
from services.prompting import encode_question
from services.trace_core import ReasoningTrace, Tokenizer
from utils.container import decode_container, encode_container
from utils.file_utils import atomic_write

logger = logging.getLogger(__name__)

VECTOR_MAGIC = 'densesteer.vector'
VECTOR_FORMAT_VERSION = 1


class RewriterTag(str, Enum):
    RULE_BASED = 'rule-based'
    EXTERNAL = 'external'
    RANDOM_COMPRESSION = 'random-compression'
    REFERENCE = 'reference'


@dataclass(frozen=True)
class ContrastivePair:
    """Dense positive and sparse negative traces for one question."""

    question: str
    positive: ReasoningTrace
    negative: ReasoningTrace
    rewriter_tag: RewriterTag
    question_id: str = ''

    def __post_init__(self):
        if self.positive.question != self.question or self.negative.question != self.question:
            raise DomainError("positive and negative traces must answer the pair's question")
        if not self.positive.solution.strip() or not self.negative.solution.strip():
            raise EmptyTrace(f"pair {self.question_id or '<unnamed>'} has an empty trace")

    def to_record(self) -> Dict[str, str]:
        return {
            'question_id': self.question_id,
            'question': self.question,
            'negative': self.negative.solution,
            'positive': self.positive.solution,
            'rewriter_tag': RewriterTag(self.rewriter_tag).value,
        }

    @classmethod
    def from_record(cls, record: Dict[str, str], tokenizer: Tokenizer) -> 'ContrastivePair':
        question_id = str(record.get('question_id', ''))
        question = str(record['question'])
        return cls(
            question=question,
            positive=ReasoningTrace.from_solution(question, str(record['positive']), tokenizer, question_id),
            negative=ReasoningTrace.from_solution(question, str(record['negative']), tokenizer, question_id),
            rewriter_tag=RewriterTag(record.get('rewriter_tag', RewriterTag.RULE_BASED.value)),
            question_id=question_id,
        )


@dataclass(frozen=True)
class SteeringVector:
    """Direction for one layer; values are float32 (the storage precision)."""

    layer: int
    values: np.ndarray
    n_pairs: int
    model_fingerprint: str
    created_from: RewriterTag

    @property
    def d_model(self) -> int:
        return int(self.values.shape[0])


def final_token_state(model: LanguageModel, question: str, trace: ReasoningTrace, layer: int,
                      bare_prompt: bool = False) -> np.ndarray:
    """
    Residual-stream state at the trace's last token.

    The trace follows the CoT prompt (or the bare question when
    ``bare_prompt``); no hook is active.

    Raises:
        LengthError: Prompt + trace exceeds max_seq_len, or the trace is empty
    """
    if trace.n_tokens == 0:
        raise LengthError("cannot take the final-token state of an empty trace")
    ids = encode_question(model.tokenizer, question, bare=bare_prompt) + list(trace.token_ids)
    if len(ids) > model.config.max_seq_len:
        raise LengthError(f"prompt + trace = {len(ids)} tokens exceeds max_seq_len {model.config.max_seq_len}")
    _, states = model.forward(ids)
    return np.array(states[layer][-1], dtype=np.float64)


def mean_difference(differences: Sequence[np.ndarray]) -> np.ndarray:
    """Float64 mean, accumulated sequentially in index order."""
    if len(differences) == 0:
        raise EmptySet("mean_difference needs at least one difference")
    total = np.zeros_like(np.asarray(differences[0], dtype=np.float64))
    for difference in differences:
        total += np.asarray(difference, dtype=np.float64)
    return total / len(differences)


def pair_differences(model: LanguageModel, pairs: Sequence[ContrastivePair], layer: int,
                     workers: int = 1, bare_prompt: bool = False) -> List[np.ndarray]:
    """
    Per-pair float64 (positive - negative) final-token states at ``layer``, in pair order.

    Raises:
        EmptySet: No pairs
        ShapeError: Layer outside the model
        LengthError: A pair does not fit; the message names its index
    """
    if not pairs:
        raise EmptySet("extract_vector needs at least one contrastive pair")
    if not 0 <= layer < model.config.n_layers:
        raise ShapeError(f"layer {layer} outside 0..{model.config.n_layers - 1}")

    def difference(indexed) -> np.ndarray:
        index, pair = indexed
        try:
            positive = final_token_state(model, pair.question, pair.positive, layer, bare_prompt)
            negative = final_token_state(model, pair.question, pair.negative, layer, bare_prompt)
        except LengthError as e:
            raise LengthError(f"pair {index} ({pair.question_id or 'no id'}): {e}") from e
        return positive - negative

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(difference, enumerate(pairs)))


def extract_vector(model: LanguageModel, pairs: Sequence[ContrastivePair], layer: int,
                   workers: int = 1, bare_prompt: bool = False) -> SteeringVector:
    """
    Mean over pairs of (positive final-token state - negative final-token state).

    Per-pair states are computed concurrently; the reduction is sequential in
    pair order so the float sums are reproducible.

    Raises:
        EmptySet: No pairs
        LengthError: A pair does not fit; the message names its index
    """
    differences = pair_differences(model, pairs, layer, workers=workers, bare_prompt=bare_prompt)
    values = mean_difference(differences).astype(np.float32)
    tags = {RewriterTag(p.rewriter_tag) for p in pairs}
    created_from = tags.pop() if len(tags) == 1 else RewriterTag(pairs[0].rewriter_tag)
    logger.info(
        f"[VECTOR] Extracted layer-{layer} vector from {len(pairs)} pairs "
        f"(norm {float(np.linalg.norm(values)):.4f})"
    )
    return SteeringVector(
        layer=layer,
        values=values,
        n_pairs=len(pairs),
        model_fingerprint=model.fingerprint,
        created_from=created_from,
    )


def make_hook(vector: SteeringVector, lam: float, model: LanguageModel,
              position_policy: PositionPolicy = PositionPolicy.GENERATED_ONLY,
              force: bool = False) -> InjectionHook:
    """
    Package ``h + lam * v`` at the vector's layer.

    Raises:
        FingerprintMismatch: Vector extracted from other weights (unless ``force``)
        ShapeError: Vector length does not match the model
    """
    if vector.model_fingerprint != model.fingerprint:
        message = (
            f"vector fingerprint {vector.model_fingerprint[:12]} does not match "
            f"model {model.fingerprint[:12]}"
        )
        if not force:
            raise FingerprintMismatch(message)
        logger.warning(f"[VECTOR] {message}; continuing because force was requested")
    hook = InjectionHook(
        layer=vector.layer,
        vector=np.asarray(vector.values, dtype=np.float64),
        lam=float(lam),
        position_policy=PositionPolicy(position_policy),
    )
    hook.validate_for(model.config)
    return hook


def encode_vector(vector: SteeringVector) -> bytes:
    return encode_container(
        VECTOR_MAGIC,
        VECTOR_FORMAT_VERSION,
        [('values', np.asarray(vector.values, dtype=np.float32))],
        {
            'layer': vector.layer,
            'd_model': vector.d_model,
            'n_pairs': vector.n_pairs,
            'fingerprint': vector.model_fingerprint,
            'rewriter_tag': RewriterTag(vector.created_from).value,
        },
    )


def decode_vector(data: bytes) -> SteeringVector:
    """
    Raises:
        FormatError: Corrupt container or payload length != d_model * 4
        VersionError: Unknown format version
    """
    manifest, tensors = decode_container(data, VECTOR_MAGIC, (VECTOR_FORMAT_VERSION,))
    try:
        d_model = int(manifest['d_model'])
        layer = int(manifest['layer'])
        n_pairs = int(manifest['n_pairs'])
        fingerprint = str(manifest['fingerprint'])
        tag = RewriterTag(manifest['rewriter_tag'])
        values = tensors['values']
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"incomplete vector manifest: {e}") from e
    if values.shape != (d_model,) or manifest['payload_bytes'] != d_model * 4:
        raise FormatError(f"vector payload holds {values.size} values, manifest declares d_model={d_model}")
    if not np.all(np.isfinite(values)):
        raise FormatError("vector contains non-finite values")
    return SteeringVector(layer=layer, values=values, n_pairs=n_pairs,
                          model_fingerprint=fingerprint, created_from=tag)


def save_vector(vector: SteeringVector, path: str) -> None:
    atomic_write(path, encode_vector(vector))
    logger.info(f"[VECTOR] Saved layer-{vector.layer} vector to {path}")


def load_vector(path: str) -> SteeringVector:
    with open(path, 'rb') as f:
        return decode_vector(f.read())


def load_pairs(records: List[Dict[str, str]], tokenizer: Tokenizer) -> List[ContrastivePair]:
    return [ContrastivePair.from_record(record, tokenizer) for record in records]
