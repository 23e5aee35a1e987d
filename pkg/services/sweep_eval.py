"""
Evaluation harness: dataset ingestion, answer extraction and matching,
steered/unsteered evaluation, the layer x lambda sweep and its sensitivity
table.
"""
import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    DenseSteerError, DomainError, EmptyGrid, EmptySet, FormatError, MissingGold, ParseError,
)
from services.model_backend import InjectionHook, LanguageModel, PositionPolicy
from services.prompting import PromptStyle
from services.scoring import greedy_trace, token_nll
from services.steering import SteeringVector, make_hook
from services.trace_core import density
from utils.file_utils import atomic_open

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
GOLD_MARKER = '#### '
NUMERIC_TOLERANCE = 1e-6
SENSITIVITY_COLUMNS = ['layer', 'lambda', 'accuracy', 'mean_steps', 'mean_rho', 'mean_tokens', 'mean_nll']

_BOXED = re.compile(r'\\boxed')
_DECIMAL = re.compile(r'^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$')


class DatasetFormat(str, Enum):
    GSM8K = 'gsm8k-jsonl'
    PLAIN = 'plain-jsonl'


# ============================================================================
# Answers
# ============================================================================

def extract_boxed_answer(text: str) -> Optional[str]:
    """
    Contents of the last ``\\boxed{...}`` with balanced braces.

    An unterminated last occurrence falls back to the previous one.

    Args:
        text: Model output

    Returns:
        Boxed contents, or None when no complete span exists
    """
    if not text:
        return None
    for match in reversed(list(_BOXED.finditer(text))):
        index = match.end()
        while index < len(text) and text[index].isspace():
            index += 1
        if index >= len(text) or text[index] != '{':
            continue
        depth = 0
        for end in range(index, len(text)):
            if text[end] == '{':
                depth += 1
            elif text[end] == '}':
                depth -= 1
                if depth == 0:
                    return text[index + 1:end]
    return None


def normalize_answer(raw: Optional[str]) -> str:
    """Trim, drop commas, strip surrounding '$', lowercase."""
    if raw is None:
        return ''
    text = raw.strip().replace(',', '')
    text = text.strip('$').strip()
    return text.lower()


def _as_decimal(text: str) -> Optional[float]:
    if not _DECIMAL.match(text):
        return None
    return float(text)


def match(pred: Optional[str], gold: Optional[str]) -> bool:
    """
    Compare answers after normalization.

    Both sides numeric: absolute tolerance 1e-6. Otherwise exact string
    equality. No symbolic algebra ("0.50" does not match "1/2"). A missing
    prediction never matches.
    """
    if pred is None or gold is None:
        return False
    left, right = normalize_answer(pred), normalize_answer(gold)
    if not left or not right:
        return False
    left_number, right_number = _as_decimal(left), _as_decimal(right)
    if left_number is not None and right_number is not None:
        return abs(left_number - right_number) <= NUMERIC_TOLERANCE
    return left == right


# ============================================================================
# Datasets
# ============================================================================

@dataclass(frozen=True)
class EvalItem:
    question_id: str
    question: str
    gold_answer: str

    def __post_init__(self):
        if not self.gold_answer:
            raise MissingGold(f"item {self.question_id} has an empty gold answer")

    def to_record(self) -> Dict[str, str]:
        return {'question_id': self.question_id, 'question': self.question, 'answer': self.gold_answer}


def _gsm8k_gold(answer: str, line_number: int) -> str:
    position = answer.rfind(GOLD_MARKER)
    if position < 0:
        raise MissingGold(f"line {line_number}: answer field has no '{GOLD_MARKER.strip()}' marker")
    return answer[position + len(GOLD_MARKER):]


def ingest_dataset(path: str, fmt: DatasetFormat = DatasetFormat.GSM8K) -> List[EvalItem]:
    """
    Read an evaluation set.

    gsm8k-jsonl takes the text after the last "#### " in the answer field;
    plain-jsonl takes the answer field as is. Items without a
    ``question_id`` get ``q<line:06d>``.

    Args:
        path: JSONL file
        fmt: Dataset format

    Returns:
        Items in file order

    Raises:
        ParseError: Malformed line (message names the line number)
        MissingGold: gsm8k record without the marker, or an empty answer
    """
    fmt = DatasetFormat(fmt)
    items: List[EvalItem] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON in {path}: {e.msg}", line_number) from e
            if not isinstance(record, dict) or not isinstance(record.get('question'), str) \
                    or not isinstance(record.get('answer'), (str, int, float)):
                raise ParseError(f"expected an object with 'question' and 'answer' in {path}", line_number)

            answer = str(record['answer'])
            raw_gold = _gsm8k_gold(answer, line_number) if fmt == DatasetFormat.GSM8K else answer
            gold = normalize_answer(raw_gold)
            if not gold:
                raise MissingGold(f"line {line_number}: empty gold answer")
            question_id = str(record.get('question_id') or record.get('id') or f"q{line_number:06d}")
            items.append(EvalItem(question_id=question_id, question=record['question'], gold_answer=gold))
    logger.info(f"[EVAL] Ingested {len(items)} items from {path} ({fmt.value})")
    return items


def split_dataset(items: Sequence[EvalItem], validation_size: int,
                  seed: int = 0) -> Tuple[List[EvalItem], List[EvalItem]]:
    """
    Seeded validation/test split.

    A PCG64 permutation picks the validation members; both halves keep the
    input order.

    Raises:
        DomainError: validation_size outside 0..len(items)
    """
    if not 0 <= validation_size <= len(items):
        raise DomainError(f"validation_size {validation_size} outside 0..{len(items)}")
    chosen = set(np.random.default_rng(seed).permutation(len(items))[:validation_size].tolist())
    validation = [item for i, item in enumerate(items) if i in chosen]
    test = [item for i, item in enumerate(items) if i not in chosen]
    return validation, test


# ============================================================================
# Evaluation
# ============================================================================

@dataclass(frozen=True)
class EvalRecord:
    """Outcome for one item. Metric fields are None when undefined."""

    question_id: str
    prediction: Optional[str]
    correct: bool
    n_steps: Optional[int]
    rho: Optional[float]
    n_tokens: Optional[int]
    mean_nll: Optional[float]
    output: str = ''
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'question_id': self.question_id,
            'prediction': self.prediction,
            'correct': self.correct,
            'n_steps': self.n_steps,
            'rho': self.rho,
            'n_tokens': self.n_tokens,
            'mean_nll': self.mean_nll,
            'output': self.output,
            'error': self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalRecord':
        return cls(**{name: data.get(name) for name in (
            'question_id', 'prediction', 'correct', 'n_steps', 'rho', 'n_tokens', 'mean_nll', 'error',
        )}, output=data.get('output', ''))


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [float(v) for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def aggregate(records: Sequence[EvalRecord]) -> Dict[str, Any]:
    """
    Report aggregates from per-item records.

    Accuracy is over all items. The other means skip items where the metric
    is undefined (errors, empty generations).
    """
    if not records:
        raise EmptySet("cannot aggregate zero records")
    return {
        'n_items': len(records),
        'n_correct': sum(1 for r in records if r.correct),
        'n_errors': sum(1 for r in records if r.error),
        'accuracy': sum(1 for r in records if r.correct) / len(records),
        'mean_steps': _mean_defined([r.n_steps for r in records]),
        'mean_rho': _mean_defined([r.rho for r in records]),
        'mean_tokens': _mean_defined([r.n_tokens for r in records]),
        'mean_nll': _mean_defined([r.mean_nll for r in records]),
    }


@dataclass(frozen=True)
class EvalReport:
    records: Tuple[EvalRecord, ...]
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def aggregates(self) -> Dict[str, Any]:
        return aggregate(self.records)

    @property
    def accuracy(self) -> float:
        return self.aggregates['accuracy']

    @property
    def mean_nll(self) -> Optional[float]:
        return self.aggregates['mean_nll']

    @property
    def item_count(self) -> int:
        return len(self.records)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'config': dict(self.config),
            'aggregates': self.aggregates,
            'records': [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        """
        Raises:
            FormatError: Unknown schema version or missing records
        """
        if not isinstance(data, dict) or data.get('schema_version') != REPORT_SCHEMA_VERSION:
            raise FormatError(f"unsupported report schema {data.get('schema_version') if isinstance(data, dict) else data!r}")
        try:
            records = tuple(EvalRecord.from_dict(r) for r in data['records'])
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed report records: {e}") from e
        return cls(records=records, config=dict(data.get('config', {})))


def evaluate_item(model: LanguageModel, item: EvalItem, hook: Optional[InjectionHook],
                  max_new_tokens: int, prompt_style: PromptStyle = PromptStyle.COT) -> EvalRecord:
    """
    Generate, grade and measure one item.

    NLL is scored under the unhooked model. Domain errors become an
    incorrect record with an error tag.
    """
    try:
        prompt_ids, trace = greedy_trace(
            model, item.question, max_new_tokens, hook=hook,
            prompt_style=prompt_style, question_id=item.question_id,
        )
        prediction = extract_boxed_answer(trace.solution)
        # Whitespace-only output has tokens but no steps: NLL defined, rho not.
        rho = density(trace).rho if trace.n_steps > 0 else None
        nll = token_nll(model, prompt_ids, trace.token_ids).mean_nll if trace.n_tokens > 0 else None
        return EvalRecord(
            question_id=item.question_id,
            prediction=prediction,
            correct=match(prediction, item.gold_answer),
            n_steps=trace.n_steps,
            rho=rho,
            n_tokens=trace.n_tokens,
            mean_nll=nll,
            output=trace.solution,
        )
    except DenseSteerError as e:
        logger.error(f"[EVAL] Item {item.question_id} failed: {e}", exc_info=True)
        return EvalRecord(
            question_id=item.question_id, prediction=None, correct=False,
            n_steps=None, rho=None, n_tokens=None, mean_nll=None,
            error=f"{type(e).__name__}: {e}",
        )


def evaluate(model: LanguageModel, items: Sequence[EvalItem], hook: Optional[InjectionHook] = None,
             max_new_tokens: int = 2048, workers: int = 1,
             prompt_style: PromptStyle = PromptStyle.COT,
             vector_file: Optional[str] = None) -> EvalReport:
    """
    Evaluate a model, optionally steered, on a set of items.

    Args:
        model: Target model
        items: Evaluation items
        hook: Injection applied during generation only
        max_new_tokens: Generation budget per item
        workers: Concurrent items
        prompt_style: cot or dense
        vector_file: Echoed into the report config

    Returns:
        EvalReport with records in item order

    Raises:
        EmptySet: No items
    """
    if not items:
        raise EmptySet("evaluate needs at least one item")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = tuple(pool.map(
            lambda item: evaluate_item(model, item, hook, max_new_tokens, prompt_style), items,
        ))

    report = EvalReport(
        records=records,
        config={
            'layer': hook.layer if hook is not None else None,
            'lambda': hook.lam if hook is not None else None,
            'position_policy': PositionPolicy(hook.position_policy).value if hook is not None else None,
            'vector_file': vector_file,
            'model_fingerprint': model.fingerprint,
            'max_new_tokens': max_new_tokens,
            'prompt_style': PromptStyle(prompt_style).value,
        },
    )
    summary = report.aggregates
    logger.info(
        f"[EVAL] {summary['n_items']} items: accuracy {summary['accuracy']:.4f}, "
        f"{summary['n_errors']} error(s)"
    )
    return report


# ============================================================================
# Sweep
# ============================================================================

def lambda_grid(lambda_min: float = -20.0, lambda_max: float = 20.0, step: float = 2.0) -> List[float]:
    """
    Evenly spaced lambdas from min to max inclusive.

    Raises:
        DomainError: Nonpositive step or inverted range
    """
    if not step > 0:
        raise DomainError(f"lambda step must be > 0, got {step}")
    if lambda_min > lambda_max:
        raise DomainError(f"lambda_min {lambda_min} exceeds lambda_max {lambda_max}")
    count = int(math.floor((lambda_max - lambda_min) / step + 1e-9)) + 1
    # + 0.0 turns -0.0 into 0.0
    return [round(lambda_min + i * step, 10) + 0.0 for i in range(count)]


@dataclass(frozen=True)
class SensitivityRow:
    layer: int
    lam: float
    accuracy: float
    mean_steps: Optional[float]
    mean_rho: Optional[float]
    mean_tokens: Optional[float]
    mean_nll: Optional[float]

    @classmethod
    def from_report(cls, layer: int, lam: float, report: EvalReport) -> 'SensitivityRow':
        summary = report.aggregates
        return cls(
            layer=layer,
            lam=lam,
            accuracy=summary['accuracy'],
            mean_steps=summary['mean_steps'],
            mean_rho=summary['mean_rho'],
            mean_tokens=summary['mean_tokens'],
            mean_nll=summary['mean_nll'],
        )


@dataclass(frozen=True)
class SweepResult:
    """Every (layer, lambda) cell, the selected cell and how it was chosen."""

    cells: Dict[Tuple[int, float], EvalReport]
    selected: Tuple[int, float]
    tie_break_trail: Tuple[str, ...]

    @property
    def rows(self) -> List[SensitivityRow]:
        return [
            SensitivityRow.from_report(layer, lam, self.cells[(layer, lam)])
            for layer, lam in sorted(self.cells)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'selected': {'layer': self.selected[0], 'lambda': self.selected[1]},
            'tie_break_trail': list(self.tie_break_trail),
            'grid': [
                {'layer': layer, 'lambda': lam, 'aggregates': self.cells[(layer, lam)].aggregates}
                for layer, lam in sorted(self.cells)
            ],
        }


def select_best(rows: Sequence[SensitivityRow]) -> Tuple[Tuple[int, float], Tuple[str, ...]]:
    """
    Pick the best cell: highest accuracy, then lowest mean NLL (undefined
    counts as worst), then smallest |lambda|, then lowest layer.

    Returns:
        ((layer, lambda), trail of the narrowing steps)

    Raises:
        EmptyGrid: No rows
    """
    if not rows:
        raise EmptyGrid("cannot select from an empty grid")

    stages: List[Tuple[str, Callable[[SensitivityRow], float]]] = [
        ('accuracy', lambda r: -r.accuracy),
        ('mean_nll', lambda r: r.mean_nll if r.mean_nll is not None else math.inf),
        ('|lambda|', lambda r: abs(r.lam)),
        ('layer', lambda r: r.layer),
    ]
    candidates = list(rows)
    trail: List[str] = []
    for name, key in stages:
        best = min(key(r) for r in candidates)
        candidates = [r for r in candidates if key(r) == best]
        value = -best if name == 'accuracy' else best
        trail.append(f"{name}: {len(candidates)} cell(s) at {value!r}")
        if len(candidates) == 1:
            break
    chosen = candidates[0]
    return (chosen.layer, chosen.lam), tuple(trail)


def sweep(model: LanguageModel, vector_source: Callable[[int], SteeringVector],
          items: Sequence[EvalItem], layers: Sequence[int], lambdas: Sequence[float],
          max_new_tokens: int = 2048, workers: int = 1,
          position_policy: PositionPolicy = PositionPolicy.GENERATED_ONLY,
          prompt_style: PromptStyle = PromptStyle.COT) -> SweepResult:
    """
    Evaluate every (layer, lambda) cell on the validation items.

    Args:
        model: Target model
        vector_source: Returns the steering vector for a layer, extracted
            from one shared pair set
        items: Validation items (disjoint from any test set)
        layers: Candidate layers
        lambdas: Candidate coefficients
        max_new_tokens: Generation budget
        workers: Concurrent cells
        position_policy: Injection positions
        prompt_style: cot or dense

    Returns:
        SweepResult

    Raises:
        EmptyGrid: No layers or no lambdas
    """
    if not layers or not lambdas:
        raise EmptyGrid(f"sweep grid is empty ({len(layers)} layer(s) x {len(lambdas)} lambda(s))")
    if not items:
        raise EmptySet("sweep needs at least one validation item")

    vectors: Dict[int, SteeringVector] = {}
    for layer in sorted(set(layers)):
        vectors[layer] = vector_source(layer)
        logger.info(f"[SWEEP] Vector ready for layer {layer}")

    grid = [(layer, float(lam)) for layer in sorted(set(layers)) for lam in sorted(set(lambdas))]
    logger.info(f"[SWEEP] Evaluating {len(grid)} cells on {len(items)} items with {workers} worker(s)")

    def run_cell(cell: Tuple[int, float]) -> EvalReport:
        layer, lam = cell
        hook = make_hook(vectors[layer], lam, model, position_policy=position_policy)
        report = evaluate(model, items, hook=hook, max_new_tokens=max_new_tokens, prompt_style=prompt_style)
        logger.debug(f"[SWEEP] Cell layer={layer} lambda={lam}: accuracy {report.accuracy:.4f}")
        return report

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(run_cell, grid))
    cells = dict(zip(grid, reports))

    rows = [SensitivityRow.from_report(layer, lam, cells[(layer, lam)]) for layer, lam in grid]
    selected, trail = select_best(rows)
    logger.info(f"[SWEEP] Selected layer {selected[0]}, lambda {selected[1]} ({'; '.join(trail)})")
    return SweepResult(cells=cells, selected=selected, tie_break_trail=trail)


def _format_cell(value: Optional[float]) -> str:
    return '' if value is None else repr(float(value))


def _parse_cell(value: str) -> Optional[float]:
    return None if value == '' else float(value)


def write_sensitivity_rows(handle: IO, rows: Sequence[SensitivityRow]) -> None:
    """Write the sensitivity table to an open handle; floats use repr so they read back exactly."""
    writer = csv.writer(handle, lineterminator='\n')
    writer.writerow(SENSITIVITY_COLUMNS)
    for row in rows:
        writer.writerow([
            row.layer,
            repr(float(row.lam)),
            repr(float(row.accuracy)),
            _format_cell(row.mean_steps),
            _format_cell(row.mean_rho),
            _format_cell(row.mean_tokens),
            _format_cell(row.mean_nll),
        ])


def write_sensitivity_csv(rows: Sequence[SensitivityRow], path: str) -> None:
    with atomic_open(path, 'w') as f:
        write_sensitivity_rows(f, rows)
    logger.info(f"[SWEEP] Wrote {len(rows)} sensitivity rows to {path}")


def read_sensitivity_csv(path: str) -> List[SensitivityRow]:
    """
    Raises:
        ParseError: Wrong header or malformed row
    """
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SENSITIVITY_COLUMNS:
            raise ParseError(f"unexpected sensitivity header {header!r}", 1)
        rows = []
        for line_number, cells in enumerate(reader, start=2):
            try:
                rows.append(SensitivityRow(
                    layer=int(cells[0]),
                    lam=float(cells[1]),
                    accuracy=float(cells[2]),
                    mean_steps=_parse_cell(cells[3]),
                    mean_rho=_parse_cell(cells[4]),
                    mean_tokens=_parse_cell(cells[5]),
                    mean_nll=_parse_cell(cells[6]),
                ))
            except (IndexError, ValueError) as e:
                raise ParseError(f"malformed sensitivity row: {e}", line_number) from e
    return rows


# ============================================================================
# Averages
# ============================================================================

def weighted_accuracy(accuracies: Sequence[float], sizes: Sequence[int]) -> float:
    """
    Sample-weighted mean: sum(a_i * n_i) / sum(n_i).

    Raises:
        EmptySet: No entries, or all sizes zero
        DomainError: Mismatched lengths or a negative size
    """
    if not accuracies:
        raise EmptySet("weighted average over no reports")
    if len(accuracies) != len(sizes):
        raise DomainError(f"{len(accuracies)} accuracies but {len(sizes)} sizes")
    if any(n < 0 for n in sizes):
        raise DomainError("set sizes must be non-negative")
    total = sum(sizes)
    if total == 0:
        raise EmptySet("weighted average over zero items")
    return sum(a * n for a, n in zip(accuracies, sizes)) / total


def weighted_average(reports: Sequence[Tuple[EvalReport, int]]) -> float:
    """
    Sample-weighted accuracy over several evaluation sets.

    Args:
        reports: (report, item_count) pairs

    Raises:
        EmptySet: No reports
    """
    if not reports:
        raise EmptySet("weighted average over no reports")
    return weighted_accuracy([r.accuracy for r, _ in reports], [n for _, n in reports])
