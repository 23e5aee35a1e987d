"""
Token-level negative log-likelihood of traces under a target model.

The question prompt is conditioned on and never scored; NLL is in nats.
"""
import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DomainError, EmptySet, EmptyTrace, LengthError
from services.model_backend import LanguageModel
from services.prompting import PromptStyle, encode_question
from services.trace_core import ReasoningTrace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NllResult:
    mean_nll: float
    per_token_nll: Tuple[float, ...]
    t_count: int


@dataclass(frozen=True)
class NllHistogram:
    bin_width: float
    rows: Tuple[Tuple[float, float, int], ...]

    @property
    def total(self) -> int:
        return sum(count for _, _, count in self.rows)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['bin_low', 'bin_high', 'count'])
        for low, high, count in self.rows:
            writer.writerow([repr(low), repr(high), count])
        return buffer.getvalue()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis."""
    peak = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - peak
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def token_nll(model: LanguageModel, prompt_ids: Sequence[int], trace_ids: Sequence[int]) -> NllResult:
    """
    Mean per-token NLL of ``trace_ids`` given ``prompt_ids``.

    One unhooked forward pass over prompt + trace; the token at combined
    position p is scored with the logits at p - 1.

    Raises:
        EmptyTrace: No trace tokens
        LengthError: Empty prompt, or combined length > max_seq_len
    """
    if len(trace_ids) == 0:
        raise EmptyTrace("token_nll needs at least one trace token")
    if len(prompt_ids) == 0:
        raise LengthError("token_nll needs a non-empty prompt to condition the first trace token")
    combined = [int(i) for i in prompt_ids] + [int(i) for i in trace_ids]
    if len(combined) > model.config.max_seq_len:
        raise LengthError(
            f"prompt + trace = {len(combined)} tokens exceeds max_seq_len {model.config.max_seq_len}"
        )

    logits, _ = model.forward(combined)
    start = len(prompt_ids)
    predicting = log_softmax(logits[start - 1:len(combined) - 1])
    targets = np.asarray(combined[start:], dtype=np.int64)
    per_token = -predicting[np.arange(len(targets)), targets]
    per_token = np.maximum(per_token, 0.0)
    return NllResult(
        mean_nll=float(np.sum(per_token) / len(targets)),
        per_token_nll=tuple(float(x) for x in per_token),
        t_count=len(targets),
    )


def score_trace(model: LanguageModel, trace: ReasoningTrace, bare_prompt: bool = False,
                prompt_style: PromptStyle = PromptStyle.COT) -> NllResult:
    """Score a trace conditioned on its question's prompt."""
    prompt_ids = encode_question(model.tokenizer, trace.question, bare=bare_prompt, style=prompt_style)
    return token_nll(model, prompt_ids, trace.token_ids)


def score_traces(model: LanguageModel, traces: Sequence[ReasoningTrace], workers: int = 1,
                 bare_prompt: bool = False) -> List[NllResult]:
    """Score many traces in parallel; results come back in input order."""
    logger.info(f"[SCORE] Scoring {len(traces)} traces with {workers} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda t: score_trace(model, t, bare_prompt=bare_prompt), traces))


def greedy_trace(model: LanguageModel, question: str, max_new_tokens: int, hook=None,
                 prompt_style: PromptStyle = PromptStyle.COT, question_id: str = '',
                 sample_index: int = 0) -> Tuple[List[int], ReasoningTrace]:
    """
    Greedy-decode a question under the CoT prompt.

    Returns:
        (prompt ids, trace built from the decoded text)
    """
    prompt_ids = encode_question(model.tokenizer, question, style=prompt_style)
    generated = model.greedy_generate(prompt_ids, max_new_tokens, hook=hook)
    trace = ReasoningTrace.from_solution(
        question=question,
        solution=model.tokenizer.detokenize(generated),
        tokenizer=model.tokenizer,
        question_id=question_id,
        sample_index=sample_index,
    )
    return prompt_ids, trace


def self_likelihood_baseline(model: LanguageModel, prompts: Sequence[str], max_new_tokens: int,
                             prompt_style: PromptStyle = PromptStyle.COT) -> float:
    """
    Mean NLL of the model's own greedy outputs under itself.

    Each question is decoded greedily and the decoded trace is scored with
    ``token_nll`` exactly as evaluation scores generations. Questions whose
    generation is empty carry no NLL and are skipped, as in evaluation.

    Raises:
        EmptySet: No prompts, or every generation was empty
    """
    if not prompts:
        raise EmptySet("self_likelihood_baseline needs at least one prompt")
    values = []
    for question in prompts:
        prompt_ids, trace = greedy_trace(model, question, max_new_tokens, prompt_style=prompt_style)
        if trace.n_tokens == 0:
            logger.warning("[SCORE] Empty generation skipped in baseline")
            continue
        values.append(token_nll(model, prompt_ids, trace.token_ids).mean_nll)
    if not values:
        raise EmptySet("every baseline generation was empty")
    baseline = float(np.mean(values))
    logger.info(f"[SCORE] Self-likelihood baseline over {len(values)} prompts: {baseline:.4f} nats")
    return baseline


def nll_histogram(results: Sequence[NllResult], bin_width: float,
                  value_range: Optional[Tuple[float, float]] = None) -> NllHistogram:
    """
    Histogram of mean NLL values over half-open bins [low, low + width).

    Without ``value_range`` the bins start at the multiple of ``bin_width``
    at or below the smallest value and extend past the largest. With a
    range, values outside it are dropped and every declared bin is emitted,
    even when all counts are zero.

    Raises:
        DomainError: Nonpositive bin width or empty range
        EmptySet: No results and no declared range
    """
    if not bin_width > 0:
        raise DomainError(f"bin_width must be > 0, got {bin_width}")
    values = np.array([r.mean_nll for r in results], dtype=np.float64)

    if value_range is None:
        if values.size == 0:
            raise EmptySet("nll_histogram needs at least one result or a declared range")
        first = int(math.floor(values.min() / bin_width))
        last = int(math.floor(values.max() / bin_width))
    else:
        low, high = value_range
        if not high > low:
            raise DomainError(f"histogram range must satisfy high > low, got {value_range}")
        first = int(math.floor(low / bin_width))
        last = int(math.ceil(high / bin_width)) - 1
        values = values[(values >= low) & (values < high)]

    n_bins = last - first + 1
    counts = np.zeros(n_bins, dtype=np.int64)
    if values.size:
        indices = np.floor(values / bin_width).astype(np.int64) - first
        indices = indices[(indices >= 0) & (indices < n_bins)]
        np.add.at(counts, indices, 1)

    rows = tuple(
        ((first + i) * bin_width, (first + i + 1) * bin_width, int(counts[i]))
        for i in range(n_bins)
    )
    return NllHistogram(bin_width=bin_width, rows=rows)
