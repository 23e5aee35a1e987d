"""
Reasoning traces and their structural metrics.

A step is a segment of the solution delimited by blank lines; reasoning
density is solution tokens per step. Everything here is immutable and pure.
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from errors import DomainError, EmptyTrace, InsufficientData

logger = logging.getLogger(__name__)

STEP_DELIMITER = '\n\n'

# A newline followed by one or more lines that are empty or whitespace-only.
_STEP_BOUNDARY = re.compile(r'\n(?:[^\S\n]*\n)+')


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> List[int]: ...

    def detokenize(self, token_ids: Sequence[int]) -> str: ...


def segment_steps(text: str) -> List[str]:
    """
    Split a solution into reasoning steps.

    Runs of two or more newlines (blank or whitespace-only lines in between)
    form one boundary. Segments are trimmed and empty ones dropped.

    Args:
        text: Solution text

    Returns:
        Ordered list of non-empty step texts
    """
    if not text:
        return []
    return [part.strip() for part in _STEP_BOUNDARY.split(text) if part.strip()]


def join_steps(steps: Iterable[str]) -> str:
    return STEP_DELIMITER.join(steps)


@dataclass(frozen=True)
class ReasoningTrace:
    """A question plus its step-segmented solution and solution token ids."""

    question: str
    solution: str
    steps: Tuple[str, ...]
    token_ids: Tuple[int, ...]
    question_id: str = ''
    sample_index: int = 0

    @classmethod
    def from_solution(
        cls,
        question: str,
        solution: str,
        tokenizer: Tokenizer,
        question_id: str = '',
        sample_index: int = 0,
    ) -> 'ReasoningTrace':
        """
        Build a trace, segmenting and tokenizing the solution.

        Args:
            question: Question text
            solution: Solution text (prompt excluded)
            tokenizer: Active backend tokenizer
            question_id: Grouping key for corpus statistics
            sample_index: Sample number within the question

        Returns:
            ReasoningTrace
        """
        return cls(
            question=question,
            solution=solution,
            steps=tuple(segment_steps(solution)),
            token_ids=tuple(tokenizer.tokenize(solution)),
            question_id=question_id,
            sample_index=sample_index,
        )

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_record(self) -> Dict[str, object]:
        """JSONL record in the trace corpus format."""
        return {
            'question_id': self.question_id,
            'question': self.question,
            'solution': self.solution,
            'sample_index': self.sample_index,
        }

    @classmethod
    def from_record(cls, record: Dict[str, object], tokenizer: Tokenizer) -> 'ReasoningTrace':
        return cls.from_solution(
            question=str(record.get('question', '')),
            solution=str(record.get('solution', '')),
            tokenizer=tokenizer,
            question_id=str(record.get('question_id', '')),
            sample_index=int(record.get('sample_index', 0)),
        )


@dataclass(frozen=True)
class DensityMetrics:
    rho: float
    n_tokens: int
    n_steps: int


@dataclass(frozen=True)
class CorpusStats:
    """Means and standard errors over question-level averages.

    SEM fields are None when fewer than two questions are present.
    """

    n_questions: int
    mean_steps: float
    mean_rho: float
    mean_tokens: float
    sem_steps: Optional[float] = None
    sem_rho: Optional[float] = None
    sem_tokens: Optional[float] = None

    @property
    def has_sem(self) -> bool:
        return self.sem_steps is not None

    def to_dict(self) -> Dict[str, object]:
        return {
            'n_questions': self.n_questions,
            'mean_steps': self.mean_steps,
            'mean_rho': self.mean_rho,
            'mean_tokens': self.mean_tokens,
            'sem_steps': self.sem_steps,
            'sem_rho': self.sem_rho,
            'sem_tokens': self.sem_tokens,
        }


def density(trace: ReasoningTrace) -> DensityMetrics:
    """
    Reasoning density: solution tokens per step.

    Raises:
        EmptyTrace: If the solution is empty or whitespace-only
    """
    if not trace.solution.strip() or trace.n_steps == 0:
        raise EmptyTrace(f"trace {trace.question_id or '<unnamed>'} has no steps; density undefined")
    return DensityMetrics(
        rho=trace.n_tokens / trace.n_steps,
        n_tokens=trace.n_tokens,
        n_steps=trace.n_steps,
    )


def das(rho: float, nll: float) -> float:
    """
    Density-alignment score, log(rho) - NLL (natural log, NLL in nats).

    Raises:
        DomainError: If rho <= 0 or nll is not finite
    """
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    if not math.isfinite(nll):
        raise DomainError(f"nll must be finite, got {nll}")
    return math.log(rho) - nll


def _sem(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def corpus_stats(traces: Sequence[ReasoningTrace], strict: bool = False) -> CorpusStats:
    """
    Corpus statistics over question-level averages.

    Samples are averaged per question first; means and SEMs are then taken
    across questions. Groups are reduced in sorted (question_id,
    sample_index) order so the result does not depend on input order.

    Args:
        traces: Traces tagged with question ids
        strict: Raise instead of returning absent SEMs for < 2 questions

    Returns:
        CorpusStats

    Raises:
        DomainError: If no traces are given
        InsufficientData: If strict and fewer than 2 questions are present
        EmptyTrace: If any trace is empty
    """
    if not traces:
        raise DomainError("corpus_stats needs at least one trace")

    groups: Dict[str, List[ReasoningTrace]] = {}
    for trace in traces:
        groups.setdefault(trace.question_id, []).append(trace)

    per_question = []
    for question_id in sorted(groups):
        samples = sorted(groups[question_id], key=lambda t: (t.sample_index, t.solution))
        metrics = [density(t) for t in samples]
        per_question.append((
            float(np.mean([m.n_steps for m in metrics])),
            float(np.mean([m.rho for m in metrics])),
            float(np.mean([m.n_tokens for m in metrics])),
        ))

    table = np.array(per_question, dtype=np.float64)
    n_questions = table.shape[0]
    means = table.mean(axis=0)

    if n_questions < 2:
        message = f"SEM undefined for {n_questions} question(s)"
        if strict:
            raise InsufficientData(message)
        logger.warning(f"[STATS] {message}; returning means only")
        return CorpusStats(
            n_questions=n_questions,
            mean_steps=float(means[0]),
            mean_rho=float(means[1]),
            mean_tokens=float(means[2]),
        )

    return CorpusStats(
        n_questions=n_questions,
        mean_steps=float(means[0]),
        mean_rho=float(means[1]),
        mean_tokens=float(means[2]),
        sem_steps=_sem(table[:, 0]),
        sem_rho=_sem(table[:, 1]),
        sem_tokens=_sem(table[:, 2]),
    )
