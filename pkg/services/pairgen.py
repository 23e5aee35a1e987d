"""
Contrastive pair construction.

Negatives are the target model's own greedy traces. Positives come from a
rewriter: deterministic local step merging, a seeded random-compression
control, an external chat-completions model, or a reference model's greedy
output. Every pair is audited before it is kept.
"""
import hashlib
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rapidfuzz.distance import Levenshtein

from config import Config
from errors import (
    CacheMiss, ConfigError, DenseSteerError, DomainError, EmptyResponse, EmptySet,
    InsufficientPairs, NetworkError,
)
from rewriter_client import RewriterClient
from services.model_backend import LanguageModel
from services.prompting import PromptStyle, format_rewrite_prompt
from services.scoring import greedy_trace
from services.steering import ContrastivePair, RewriterTag
from services.sweep_eval import EvalItem, extract_boxed_answer, match, normalize_answer
from services.trace_core import ReasoningTrace, Tokenizer, density, join_steps

logger = logging.getLogger(__name__)

DEFAULT_CONNECTIVES: Tuple[str, ...] = ('So', 'Therefore', 'Thus', 'Then', 'Hence')
MERGE_JOINER = ' '

_MARKER = re.compile(r'<<.*?>>', re.DOTALL)

# Errors that abort pair construction instead of excluding one pair.
_FATAL = (NetworkError, CacheMiss, ConfigError)


class RewriterMode(str, Enum):
    RULE_BASED = 'rule-based'
    EXTERNAL = 'external'
    RANDOM_COMPRESSION = 'random-compression'
    REFERENCE = 'reference'


_MODE_TAGS = {
    RewriterMode.RULE_BASED: RewriterTag.RULE_BASED,
    RewriterMode.EXTERNAL: RewriterTag.EXTERNAL,
    RewriterMode.RANDOM_COMPRESSION: RewriterTag.RANDOM_COMPRESSION,
    RewriterMode.REFERENCE: RewriterTag.REFERENCE,
}


@dataclass(frozen=True)
class RewriterConfig:
    """
    Rewriter settings.

    Rule-based merging: a left-to-right scan merges steps i and i+1 when
    both are shorter than ``short_step_tokens`` tokens, or when step i+1
    starts with one of ``connectives`` (case-sensitive, whole word). A
    merged step is not merged again; the scan resumes after the pair.
    """

    mode: RewriterMode = RewriterMode.RULE_BASED
    max_merges_per_trace: int = 3
    short_step_tokens: int = 12
    connectives: Tuple[str, ...] = DEFAULT_CONNECTIVES
    merge_seed: Optional[int] = None
    k_merges: int = 1
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    credential_env: str = 'OPENAI_API_KEY'

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Missing mode requirements or out-of-range counts
        """
        mode = RewriterMode(self.mode)
        if self.max_merges_per_trace < 0:
            raise ConfigError(f"max_merges_per_trace must be >= 0, got {self.max_merges_per_trace}")
        if self.short_step_tokens < 0:
            raise ConfigError(f"short_step_tokens must be >= 0, got {self.short_step_tokens}")
        if mode == RewriterMode.EXTERNAL and (not self.endpoint or not self.model_name):
            raise ConfigError("external rewriter requires an endpoint and a model name")
        if mode == RewriterMode.RANDOM_COMPRESSION:
            if self.merge_seed is None:
                raise ConfigError("random-compression requires a merge seed")
            if self.k_merges < 1:
                raise ConfigError(f"k_merges must be >= 1, got {self.k_merges}")

    @property
    def tag(self) -> RewriterTag:
        return _MODE_TAGS[RewriterMode(self.mode)]

    @property
    def connective_pattern(self) -> 're.Pattern[str]':
        alternatives = '|'.join(re.escape(c) for c in self.connectives)
        return re.compile(rf'^(?:{alternatives})\b')


@dataclass(frozen=True)
class AuditReport:
    question_id: str
    steps_neg: float
    steps_pos: float
    density_neg: float
    density_pos: float
    edit_similarity: float
    adjacent_merge_ratio: float
    answer_preserved: bool
    markers_preserved: bool

    @property
    def passed(self) -> bool:
        return self.answer_preserved and self.markers_preserved

    def to_row(self) -> Dict[str, Any]:
        return {
            'question_id': self.question_id,
            'steps_neg': self.steps_neg,
            'steps_pos': self.steps_pos,
            'density_neg': self.density_neg,
            'density_pos': self.density_pos,
            'edit_similarity': self.edit_similarity,
            'adjacent_merge_ratio': self.adjacent_merge_ratio,
            'answer_preserved': self.answer_preserved,
            'markers_preserved': self.markers_preserved,
        }


# ============================================================================
# Rewriters
# ============================================================================

def _rebuild(trace: ReasoningTrace, steps: Sequence[str], tokenizer: Tokenizer) -> ReasoningTrace:
    return ReasoningTrace.from_solution(
        question=trace.question,
        solution=join_steps(steps),
        tokenizer=tokenizer,
        question_id=trace.question_id,
        sample_index=trace.sample_index,
    )


def rule_rewrite(trace: ReasoningTrace, config: RewriterConfig, tokenizer: Tokenizer) -> ReasoningTrace:
    """
    Deterministic local step merging.

    Args:
        trace: Original trace
        config: Threshold, connective list and merge cap
        tokenizer: Tokenizer that measures step length

    Returns:
        Rewritten trace; the input itself when nothing merges
    """
    steps = list(trace.steps)
    connective = config.connective_pattern
    merged: List[str] = []
    merges = 0
    i = 0
    while i < len(steps):
        if merges < config.max_merges_per_trace and i + 1 < len(steps):
            first, second = steps[i], steps[i + 1]
            both_short = (len(tokenizer.tokenize(first)) < config.short_step_tokens
                          and len(tokenizer.tokenize(second)) < config.short_step_tokens)
            if both_short or connective.match(second):
                merged.append(first + MERGE_JOINER + second)
                merges += 1
                i += 2
                continue
        merged.append(steps[i])
        i += 1

    if merges == 0:
        return trace
    return _rebuild(trace, merged, tokenizer)


def random_boundaries(n_steps: int, seed: int, k_merges: int) -> List[int]:
    """
    Boundaries to remove, ascending. Boundary b sits between steps b and b+1.

    Sampler: ``numpy.random.default_rng(seed).choice(n_steps - 1, k_merges,
    replace=False)``, sorted.
    """
    chosen = np.random.default_rng(seed).choice(n_steps - 1, size=k_merges, replace=False)
    return sorted(int(b) for b in chosen)


def random_compress(trace: ReasoningTrace, seed: int, k_merges: int, tokenizer: Tokenizer) -> ReasoningTrace:
    """
    Remove ``k_merges`` uniformly chosen step boundaries.

    Raises:
        DomainError: k_merges < 1 or k_merges >= n_steps
    """
    if k_merges < 1:
        raise DomainError(f"k_merges must be >= 1, got {k_merges}")
    if k_merges >= trace.n_steps:
        raise DomainError(f"k_merges={k_merges} needs more than {trace.n_steps} step(s)")

    removed = set(random_boundaries(trace.n_steps, seed, k_merges))
    steps = [trace.steps[0]]
    for boundary, step in enumerate(trace.steps[1:]):
        if boundary in removed:
            steps[-1] = steps[-1] + MERGE_JOINER + step
        else:
            steps.append(step)
    return _rebuild(trace, steps, tokenizer)


def external_rewrite(client: RewriterClient, question: str, trace: ReasoningTrace,
                     tokenizer: Tokenizer) -> ReasoningTrace:
    """
    Ask an external model for a conservative dense rewrite.

    Raises:
        EmptyResponse: The rewriter returned blank text
        NetworkError: Retries exhausted
        CacheMiss: Offline mode without a recorded response
    """
    text = client.complete(format_rewrite_prompt(question, trace.solution))
    if not text.strip():
        raise EmptyResponse(f"rewriter returned blank text for {trace.question_id or 'question'}")
    return ReasoningTrace.from_solution(
        question=question,
        solution=text.strip(),
        tokenizer=tokenizer,
        question_id=trace.question_id,
        sample_index=trace.sample_index,
    )


def trace_seed(merge_seed: int, question_id: str) -> int:
    """Per-question seed, so a question's compression does not depend on its position."""
    digest = hashlib.sha256(f"{merge_seed}:{question_id}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


# ============================================================================
# Audit
# ============================================================================

def edit_similarity(a: str, b: str) -> float:
    """1 - Levenshtein(a, b) / max(len(a), len(b)) over characters; 1.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


def adjacent_merge_ratio(steps_neg: int, steps_pos: int) -> float:
    """Fraction of the negative's step boundaries that the rewrite removed, clamped to [0, 1]."""
    ratio = (steps_neg - steps_pos) / max(steps_neg - 1, 1)
    return min(1.0, max(0.0, ratio))


def markers(text: str) -> Counter:
    return Counter(_MARKER.findall(text))


def audit(pair: ContrastivePair) -> AuditReport:
    """Mechanical rewrite checks for one pair."""
    negative, positive = pair.negative, pair.positive

    answer_neg = extract_boxed_answer(negative.solution)
    answer_pos = extract_boxed_answer(positive.solution)
    if answer_neg is None or answer_pos is None:
        answer_preserved = answer_neg is None and answer_pos is None
    else:
        answer_preserved = normalize_answer(answer_neg) == normalize_answer(answer_pos)

    return AuditReport(
        question_id=pair.question_id,
        steps_neg=float(negative.n_steps),
        steps_pos=float(positive.n_steps),
        density_neg=density(negative).rho,
        density_pos=density(positive).rho,
        edit_similarity=edit_similarity(negative.solution, positive.solution),
        adjacent_merge_ratio=adjacent_merge_ratio(negative.n_steps, positive.n_steps),
        answer_preserved=answer_preserved,
        markers_preserved=not (markers(negative.solution) - markers(positive.solution)),
    )


def summarize_audits(reports: Sequence[AuditReport]) -> Dict[str, float]:
    """
    Corpus-level audit table: mean steps and density for both sides, mean
    similarity and merge ratio, and preservation percentages.

    Raises:
        EmptySet: No reports
    """
    if not reports:
        raise EmptySet("summarize_audits needs at least one report")

    def mean(name: str) -> float:
        return float(np.mean([getattr(r, name) for r in reports]))

    return {
        'n_pairs': len(reports),
        'steps_neg': mean('steps_neg'),
        'steps_pos': mean('steps_pos'),
        'density_neg': mean('density_neg'),
        'density_pos': mean('density_pos'),
        'edit_similarity': mean('edit_similarity'),
        'adjacent_merge_ratio': mean('adjacent_merge_ratio'),
        'answer_preserved_pct': 100.0 * sum(r.answer_preserved for r in reports) / len(reports),
        'markers_preserved_pct': 100.0 * sum(r.markers_preserved for r in reports) / len(reports),
    }


# ============================================================================
# Service
# ============================================================================

class PairgenService:
    """Builds audited contrastive pairs from a target model's own outputs."""

    def __init__(
        self,
        model: LanguageModel,
        config: RewriterConfig,
        client: Optional[RewriterClient] = None,
        reference_model: Optional[LanguageModel] = None,
        max_new_tokens: int = 2048,
        prompt_style: PromptStyle = PromptStyle.COT,
        workers: int = 1,
        max_concurrency: int = 4,
    ):
        """
        Initialize the pair builder.

        Args:
            model: Target model (negatives and tokenization)
            config: Rewriter settings
            client: External rewriter client (built from config when omitted)
            reference_model: Source of positives in reference mode
            max_new_tokens: Generation budget for negatives
            prompt_style: Prompt used for generation
            workers: Concurrent generations
            max_concurrency: Concurrent external rewrite requests

        Raises:
            ConfigError: Invalid rewriter configuration
        """
        config.validate()
        self.model = model
        self.config = config
        self.max_new_tokens = max_new_tokens
        self.prompt_style = prompt_style
        self.workers = max(1, workers)
        self.max_concurrency = max(1, max_concurrency)
        self.reference_model = reference_model
        self.failures: Dict[str, str] = {}
        self.exclusions: List[Dict[str, str]] = []
        self._client = client

        if RewriterMode(config.mode) == RewriterMode.REFERENCE and reference_model is None:
            raise ConfigError("reference mode requires a reference model")

    @property
    def client(self) -> RewriterClient:
        """Get or create the external rewriter client."""
        if self._client is None:
            self._client = RewriterClient(
                base_url=self.config.endpoint,
                model=self.config.model_name,
                api_key_env=self.config.credential_env,
                cache_dir=Config.REWRITER_CACHE_DIR,
                offline=Config.OFFLINE,
                max_retries=Config.REWRITER_MAX_RETRIES,
                backoff_factor=Config.REWRITER_BACKOFF_FACTOR,
                timeout=Config.REWRITER_TIMEOUT,
            )
        return self._client

    @property
    def tokenizer(self) -> Tokenizer:
        return self.model.tokenizer

    def _generate_one(self, item: EvalItem) -> Optional[ReasoningTrace]:
        try:
            _, trace = greedy_trace(
                self.model, item.question, self.max_new_tokens,
                prompt_style=self.prompt_style, question_id=item.question_id,
            )
            return trace
        except DenseSteerError as e:
            logger.error(f"[GENERATE] Question {item.question_id} failed: {e}", exc_info=True)
            self.failures[item.question_id] = f"{type(e).__name__}: {e}"
            return None

    def generate_negatives(self, items: Sequence[EvalItem], samples_per_question: int = 1) -> List[ReasoningTrace]:
        """
        Greedy traces of the target model under the CoT prompt.

        Failed questions are recorded in ``self.failures`` and skipped.

        Args:
            items: Questions
            samples_per_question: Traces per question

        Returns:
            Traces in item order, samples numbered from 0
        """
        if not items:
            logger.warning("[GENERATE] No questions given; nothing to generate")
            return []
        if samples_per_question < 1:
            raise DomainError(f"samples_per_question must be >= 1, got {samples_per_question}")

        logger.info(f"[GENERATE] Generating {len(items)} question(s) with {self.workers} worker(s)")
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            generated = list(pool.map(self._generate_one, items))

        traces: List[ReasoningTrace] = []
        for trace in generated:
            if trace is None:
                continue
            # Greedy decoding is deterministic, so every sample equals the first.
            for sample_index in range(samples_per_question):
                traces.append(ReasoningTrace(
                    question=trace.question,
                    solution=trace.solution,
                    steps=trace.steps,
                    token_ids=trace.token_ids,
                    question_id=trace.question_id,
                    sample_index=sample_index,
                ))
        if self.failures:
            logger.warning(f"[GENERATE] {len(self.failures)} question(s) failed")
        return traces

    def rewrite(self, trace: ReasoningTrace) -> ReasoningTrace:
        """Positive for one negative under the configured mode."""
        mode = RewriterMode(self.config.mode)
        if mode == RewriterMode.RULE_BASED:
            return rule_rewrite(trace, self.config, self.tokenizer)
        if mode == RewriterMode.RANDOM_COMPRESSION:
            if trace.n_steps < 2:
                return trace
            k = min(self.config.k_merges, trace.n_steps - 1)
            return random_compress(trace, trace_seed(self.config.merge_seed, trace.question_id), k, self.tokenizer)
        if mode == RewriterMode.EXTERNAL:
            return external_rewrite(self.client, trace.question, trace, self.tokenizer)

        _, reference = greedy_trace(
            self.reference_model, trace.question, self.max_new_tokens,
            prompt_style=self.prompt_style, question_id=trace.question_id,
        )
        return ReasoningTrace.from_solution(trace.question, reference.solution, self.tokenizer, trace.question_id)

    def _exclude(self, question_id: str, reason: str) -> None:
        logger.warning(f"[PAIRS] Excluded {question_id}: {reason}")
        self.exclusions.append({'question_id': question_id, 'reason': reason})

    def _candidate(self, item: EvalItem, negative: Optional[ReasoningTrace],
                   require_correct_negative: bool) -> Optional[ContrastivePair]:
        if negative is None:
            self._exclude(item.question_id, self.failures.get(item.question_id, 'generation failed'))
            return None
        if not negative.solution.strip():
            self._exclude(item.question_id, 'empty negative trace')
            return None
        if require_correct_negative and not match(extract_boxed_answer(negative.solution), item.gold_answer):
            self._exclude(item.question_id, 'negative answer does not match gold')
            return None

        try:
            positive = self.rewrite(negative)
            pair = ContrastivePair(
                question=item.question,
                positive=positive,
                negative=negative,
                rewriter_tag=self.config.tag,
                question_id=item.question_id,
            )
        except _FATAL:
            raise
        except DenseSteerError as e:
            self._exclude(item.question_id, f"{type(e).__name__}: {e}")
            return None

        report = audit(pair)
        if not report.answer_preserved:
            self._exclude(item.question_id, 'answer not preserved')
            return None
        if not report.markers_preserved:
            self._exclude(item.question_id, 'markers not preserved')
            return None
        return pair

    def build_pairs(self, items: Sequence[EvalItem], n_pairs: int = 50,
                    negatives: Optional[Dict[str, ReasoningTrace]] = None,
                    require_correct_negative: bool = False) -> List[ContrastivePair]:
        """
        Build ``n_pairs`` audited pairs.

        Questions are taken in ascending question-id order; an excluded
        question is replaced by the next one, so the output does not depend
        on input order.

        Args:
            items: Question pool
            n_pairs: Pairs to emit
            negatives: Precomputed negatives by question id (generated when absent)
            require_correct_negative: Drop pairs whose negative answer misses the gold

        Returns:
            Pairs in question-id order

        Raises:
            InsufficientPairs: Exclusions exhausted the pool
            DomainError: n_pairs < 1
        """
        if n_pairs < 1:
            raise DomainError(f"n_pairs must be >= 1, got {n_pairs}")
        pool = sorted(items, key=lambda item: (item.question_id, item.question))
        negatives = dict(negatives or {})
        concurrency = self.max_concurrency if RewriterMode(self.config.mode) == RewriterMode.EXTERNAL else self.workers

        pairs: List[ContrastivePair] = []
        cursor = 0
        while len(pairs) < n_pairs and cursor < len(pool):
            batch = pool[cursor:cursor + n_pairs - len(pairs)]
            cursor += len(batch)

            missing = [item for item in batch if item.question_id not in negatives]
            if missing:
                for trace in self.generate_negatives(missing):
                    negatives[trace.question_id] = trace

            with ThreadPoolExecutor(max_workers=concurrency) as executor:
                candidates = list(executor.map(
                    lambda item: self._candidate(item, negatives.get(item.question_id), require_correct_negative),
                    batch,
                ))
            pairs.extend(pair for pair in candidates if pair is not None)
            logger.info(f"[PAIRS] {len(pairs)}/{n_pairs} pairs after {cursor} question(s)")

        if len(pairs) < n_pairs:
            raise InsufficientPairs(
                f"only {len(pairs)} of {n_pairs} pairs survived; "
                f"{len(self.exclusions)} question(s) excluded from a pool of {len(pool)}"
            )
        return pairs


def generate_negatives(model: LanguageModel, items: Sequence[EvalItem], samples_per_question: int = 1,
                       max_new_tokens: int = 2048, prompt_style: PromptStyle = PromptStyle.COT,
                       workers: int = 1) -> List[ReasoningTrace]:
    service = PairgenService(model, RewriterConfig(), max_new_tokens=max_new_tokens,
                             prompt_style=prompt_style, workers=workers)
    return service.generate_negatives(items, samples_per_question)


def build_pairs(model: LanguageModel, items: Sequence[EvalItem], config: RewriterConfig,
                n_pairs: int = 50, **kwargs) -> List[ContrastivePair]:
    """Build pairs with a one-off PairgenService; see ``PairgenService.build_pairs``."""
    service_keys = ('client', 'reference_model', 'max_new_tokens', 'prompt_style', 'workers', 'max_concurrency')
    service = PairgenService(model, config, **{k: kwargs.pop(k) for k in service_keys if k in kwargs})
    return service.build_pairs(items, n_pairs, **kwargs)
