"""
DenseSteer command-line entry point.

Each subcommand reads declared input files, writes declared output files
atomically and leaves a ``<output>.manifest.json`` next to every output.
Logs go to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
"""
import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import Config
from errors import ConfigError, DenseSteerError
from rewriter_client import RewriterClient
from services.model_backend import (
    BACKENDS, WEIGHTS_FORMAT_VERSION, LanguageModel, ModelConfig, PositionPolicy,
    init_micro_model, load_backend, load_tokenizer, save_weights,
)
from services.pairgen import PairgenService, RewriterConfig, RewriterMode, audit, summarize_audits
from services.prompting import PromptStyle
from services.scoring import greedy_trace, nll_histogram, score_traces, self_likelihood_baseline
from services.steering import (
    VECTOR_FORMAT_VERSION, SteeringVector, encode_vector, extract_vector, load_pairs, load_vector, make_hook,
    save_vector,
)
from services.sweep_eval import (
    REPORT_SCHEMA_VERSION, DatasetFormat, EvalItem, EvalReport, evaluate, ingest_dataset,
    lambda_grid, split_dataset, sweep, weighted_accuracy, write_sensitivity_rows,
)
from services.trace_core import ReasoningTrace, corpus_stats, das, density
from utils.file_utils import atomic_group, atomic_open, sha256_file
from utils.json_utils import (
    dumps_canonical, load_json_file, load_jsonl_file, save_json_file, save_jsonl_file, write_jsonl,
)
from utils.logging_config import setup_logging
from utils.validation import (
    parse_layers, validate_input_file, validate_lambda_grid, validate_layers, validate_positive_int,
)

__version__ = '0.1.0'

FORMAT_VERSIONS = {
    'weights': WEIGHTS_FORMAT_VERSION,
    'vector': VECTOR_FORMAT_VERSION,
    'report_schema': REPORT_SCHEMA_VERSION,
}

logger = logging.getLogger('densesteer')


class UsageError(Exception):
    """Invalid flag combination or value (exit code 2, nothing written)."""


# ============================================================================
# Run bookkeeping
# ============================================================================

@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    argv: List[str]
    config: Dict[str, Any]
    inputs: Dict[str, str]
    outputs: Dict[str, str]
    notes: Dict[str, Any]
    tool_version: str
    format_versions: Dict[str, int]
    duration_seconds: float

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RunContext:
    """Collects resolved settings and file checksums for the manifest."""

    subcommand: str
    argv: List[str]
    settings: Dict[str, Any] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    notes: Dict[str, Any] = field(default_factory=dict)

    def resolve(self, name: str, flag_value: Any, default: Any) -> Any:
        """Flag if given, else the environment/config-file value."""
        value = default if flag_value is None else flag_value
        self.settings[name] = value
        return value

    def read(self, path: str) -> str:
        self.inputs.append(path)
        return path

    def wrote(self, path: str) -> str:
        self.outputs.append(path)
        return path

    def discard_outputs(self) -> None:
        """Remove outputs a failed handler had already written, so none is left half-done."""
        for path in self.outputs:
            if os.path.isfile(path):
                os.remove(path)
                logger.warning(f"[RUN] Removed output {path} of the failed run")
        self.outputs.clear()

    def manifest(self, duration: float) -> RunManifest:
        return RunManifest(
            subcommand=self.subcommand,
            argv=self.argv,
            config={'flags': dict(self.settings), 'environment': Config.snapshot()},
            inputs={path: sha256_file(path) for path in self.inputs if os.path.isfile(path)},
            outputs={path: sha256_file(path) for path in self.outputs},
            notes=dict(self.notes),
            tool_version=__version__,
            format_versions=dict(FORMAT_VERSIONS),
            duration_seconds=round(duration, 6),
        )


def _check(result: Tuple[bool, Optional[str]]) -> None:
    is_valid, message = result
    if not is_valid:
        raise UsageError(message)


def _require_file(name: str, path: Optional[str]) -> str:
    _check(validate_input_file(name, path))
    return path


def _workers(args, run: RunContext) -> int:
    workers = run.resolve('workers', args.workers, Config.WORKERS)
    _check(validate_positive_int('--workers', workers))
    return workers


def _max_new_tokens(args, run: RunContext) -> int:
    value = run.resolve('max_new_tokens', args.max_new_tokens, Config.MAX_NEW_TOKENS)
    _check(validate_positive_int('--max-new-tokens', value, allow_zero=True))
    return value


def _prompt_style(args, run: RunContext) -> PromptStyle:
    value = run.resolve('prompt_style', args.prompt_style, Config.PROMPT_STYLE)
    try:
        return PromptStyle(value)
    except ValueError:
        raise UsageError(f"--prompt-style must be cot or dense, got {value!r}")


def _position_policy(args, run: RunContext) -> PositionPolicy:
    return PositionPolicy(run.resolve('position_policy', args.position_policy, Config.POSITION_POLICY))


def _load_model(run: RunContext, path: Optional[str], flag: str = '--model') -> LanguageModel:
    return load_backend(run.settings['backend'], run.read(_require_file(flag, path)))


def _load_items(args, run: RunContext) -> List[EvalItem]:
    path = run.read(_require_file('--dataset', args.dataset))
    return ingest_dataset(path, DatasetFormat(run.resolve('format', args.format, DatasetFormat.GSM8K.value)))


def _load_traces(run: RunContext, path: Optional[str], tokenizer) -> List[ReasoningTrace]:
    records = load_jsonl_file(run.read(_require_file('--traces', path)))
    return [ReasoningTrace.from_record(record, tokenizer) for record in records]


def _write_csv(run: RunContext, path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with atomic_open(path, 'w') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    run.wrote(path)


def _cell(value: Any) -> str:
    """CSV cell: repr for floats so values read back exactly, '' for None."""
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ============================================================================
# Subcommands
# ============================================================================

def cmd_init_model(args, run: RunContext) -> None:
    overrides = {
        name: getattr(args, name)
        for name in ('n_layers', 'd_model', 'n_heads', 'd_ff', 'max_seq_len', 'seed')
        if getattr(args, name) is not None
    }
    config = ModelConfig(**overrides)
    try:
        config.validate()
    except ConfigError as e:
        raise UsageError(str(e))
    run.settings['model_config'] = config.to_dict()

    model = init_micro_model(config)
    fingerprint = save_weights(model, args.out)
    run.wrote(args.out)
    run.notes['fingerprint'] = fingerprint
    logger.info(f"[MODEL] Initialized micro model {fingerprint[:12]} -> {args.out}")


def cmd_generate(args, run: RunContext) -> None:
    workers = _workers(args, run)
    max_new_tokens = _max_new_tokens(args, run)
    prompt_style = _prompt_style(args, run)
    _check(validate_positive_int('--samples', args.samples))
    model = _load_model(run, args.model)
    items = _load_items(args, run)

    service = PairgenService(model, RewriterConfig(), max_new_tokens=max_new_tokens,
                             prompt_style=prompt_style, workers=workers)
    traces = service.generate_negatives(items, samples_per_question=args.samples)
    save_jsonl_file(args.out, [trace.to_record() for trace in traces])
    run.wrote(args.out)
    run.notes['failures'] = dict(sorted(service.failures.items()))
    logger.info(f"[GENERATE] Wrote {len(traces)} traces to {args.out}")


def cmd_build_pairs(args, run: RunContext) -> None:
    workers = _workers(args, run)
    max_new_tokens = _max_new_tokens(args, run)
    prompt_style = _prompt_style(args, run)
    n_pairs = run.resolve('n_pairs', args.n_pairs, Config.N_PAIRS)
    _check(validate_positive_int('--n-pairs', n_pairs))

    mode = RewriterMode(args.rewriter)
    rewriter = RewriterConfig(
        mode=mode,
        max_merges_per_trace=run.resolve('max_merges', args.max_merges, Config.MAX_MERGES),
        short_step_tokens=run.resolve('short_step_tokens', args.short_step_tokens, Config.SHORT_STEP_TOKENS),
        merge_seed=run.resolve('seed', args.seed, None),
        k_merges=run.resolve('k_merges', args.k_merges, 1),
        endpoint=run.resolve('endpoint', args.endpoint, Config.REWRITER_BASE_URL),
        model_name=run.resolve('rewriter_model', args.rewriter_model, Config.REWRITER_MODEL),
        credential_env=run.resolve('api_key_env', args.api_key_env, Config.REWRITER_API_KEY_ENV),
    )
    try:
        rewriter.validate()
    except ConfigError as e:
        raise UsageError(str(e))
    if mode == RewriterMode.REFERENCE and not args.reference_model:
        raise UsageError("--reference-model is required with --rewriter reference")

    client = None
    if mode == RewriterMode.EXTERNAL:
        client = RewriterClient(
            base_url=rewriter.endpoint,
            model=rewriter.model_name,
            api_key_env=rewriter.credential_env,
            cache_dir=run.resolve('cache_dir', args.cache_dir, Config.REWRITER_CACHE_DIR),
            offline=run.resolve('offline', True if args.offline else None, Config.OFFLINE),
            max_retries=Config.REWRITER_MAX_RETRIES,
            backoff_factor=Config.REWRITER_BACKOFF_FACTOR,
            timeout=Config.REWRITER_TIMEOUT,
        )

    model = _load_model(run, args.model)
    reference = _load_model(run, args.reference_model, '--reference-model') if mode == RewriterMode.REFERENCE else None
    items = _load_items(args, run)
    negatives = None
    if args.negatives:
        traces = _load_traces(run, args.negatives, model.tokenizer)
        negatives = {t.question_id: t for t in traces if t.sample_index == 0}

    service = PairgenService(
        model, rewriter, client=client, reference_model=reference,
        max_new_tokens=max_new_tokens, prompt_style=prompt_style, workers=workers,
        max_concurrency=run.resolve('max_concurrency', args.max_concurrency, Config.REWRITER_MAX_CONCURRENCY),
    )
    pairs = service.build_pairs(items, n_pairs, negatives=negatives,
                                require_correct_negative=args.require_correct_negative)
    save_jsonl_file(args.out, [pair.to_record() for pair in pairs])
    run.wrote(args.out)
    run.notes['exclusions'] = sorted(service.exclusions, key=lambda e: e['question_id'])
    logger.info(f"[PAIRS] Wrote {len(pairs)} {rewriter.tag.value} pairs to {args.out}")


AUDIT_COLUMNS = [
    'question_id', 'steps_neg', 'steps_pos', 'density_neg', 'density_pos',
    'edit_similarity', 'adjacent_merge_ratio', 'answer_preserved', 'markers_preserved',
]


def cmd_audit_pairs(args, run: RunContext) -> None:
    tokenizer = load_tokenizer(run.settings['backend'])
    records = load_jsonl_file(run.read(_require_file('--pairs', args.pairs)))
    reports = [audit(pair) for pair in load_pairs(records, tokenizer)]

    rows = [[_cell(report.to_row()[column]) for column in AUDIT_COLUMNS] for report in reports]
    _write_csv(run, args.out, AUDIT_COLUMNS, rows)
    if args.summary:
        save_json_file(args.summary, summarize_audits(reports))
        run.wrote(args.summary)
    logger.info(f"[AUDIT] Audited {len(reports)} pairs -> {args.out}")


def cmd_extract_vector(args, run: RunContext) -> None:
    workers = _workers(args, run)
    _check(validate_positive_int('--limit', args.limit))
    model = _load_model(run, args.model)
    _check(validate_layers([args.layer], model.config.n_layers))
    records = load_jsonl_file(run.read(_require_file('--pairs', args.pairs)))
    pairs = load_pairs(records, model.tokenizer)
    if args.limit is not None:
        if args.limit > len(pairs):
            raise UsageError(f"--limit {args.limit} exceeds the {len(pairs)} available pairs")
        pairs = pairs[:args.limit]
    run.settings.update({'layer': args.layer, 'limit': args.limit, 'bare_prompt': args.bare_prompt})

    vector = extract_vector(model, pairs, args.layer, workers=workers, bare_prompt=args.bare_prompt)
    save_vector(vector, args.out)
    run.wrote(args.out)


def cmd_steer_generate(args, run: RunContext) -> None:
    workers = _workers(args, run)
    max_new_tokens = _max_new_tokens(args, run)
    prompt_style = _prompt_style(args, run)
    policy = _position_policy(args, run)
    run.settings.update({'lambda': args.lam, 'force': args.force})
    model = _load_model(run, args.model)
    vector = load_vector(run.read(_require_file('--vector', args.vector)))
    hook = make_hook(vector, args.lam, model, position_policy=policy, force=args.force)
    items = _load_items(args, run)

    def generate(item: EvalItem) -> Dict[str, Any]:
        _, trace = greedy_trace(model, item.question, max_new_tokens, hook=hook,
                                prompt_style=prompt_style, question_id=item.question_id)
        return dict(trace.to_record(), layer=vector.layer, **{'lambda': args.lam})

    with ThreadPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(generate, items))
    save_jsonl_file(args.out, records)
    run.wrote(args.out)
    logger.info(f"[GENERATE] Wrote {len(records)} steered traces (layer {vector.layer}, lambda {args.lam})")


def _parse_range(raw: Optional[str]) -> Optional[Tuple[float, float]]:
    if raw is None:
        return None
    try:
        low, high = (float(part) for part in raw.split(','))
    except ValueError:
        raise UsageError(f"--range must be LOW,HIGH, got {raw!r}")
    if not high > low:
        raise UsageError(f"--range needs HIGH > LOW, got {raw!r}")
    return low, high


def _non_empty(traces: Sequence[ReasoningTrace], label: str) -> List[ReasoningTrace]:
    kept = [t for t in traces if t.solution.strip()]
    if len(kept) < len(traces):
        logger.warning(f"[{label}] Skipping {len(traces) - len(kept)} empty trace(s)")
    return kept


def cmd_score_nll(args, run: RunContext) -> None:
    workers = _workers(args, run)
    bin_width = run.resolve('bin_width', args.bin_width, Config.NLL_BIN_WIDTH)
    if not bin_width > 0:
        raise UsageError(f"--bin-width must be > 0, got {bin_width}")
    value_range = _parse_range(args.range)
    run.settings.update({'bare_prompt': args.bare_prompt, 'range': args.range})
    max_new_tokens = _max_new_tokens(args, run) if args.baseline_out else None
    model = _load_model(run, args.model)
    traces = _non_empty(_load_traces(run, args.traces, model.tokenizer), 'SCORE')

    results = score_traces(model, traces, workers=workers, bare_prompt=args.bare_prompt)
    rows = [
        [t.question_id, t.sample_index, r.t_count, _cell(r.mean_nll)]
        for t, r in zip(traces, results)
    ]
    _write_csv(run, args.out, ['question_id', 'sample_index', 't_count', 'mean_nll'], rows)

    if args.histogram:
        histogram = nll_histogram(results, bin_width, value_range)
        with atomic_open(args.histogram, 'w') as f:
            f.write(histogram.to_csv())
        run.wrote(args.histogram)

    if args.baseline_out:
        questions = sorted({t.question_id: t.question for t in traces}.items())
        baseline = self_likelihood_baseline(model, [q for _, q in questions], max_new_tokens)
        save_json_file(args.baseline_out, {'self_likelihood_baseline': baseline, 'n_prompts': len(questions)})
        run.wrote(args.baseline_out)


def cmd_density(args, run: RunContext) -> None:
    _require_file('--traces', args.traces)
    out = args.out or f"{os.path.splitext(args.traces)[0]}.density.csv"
    tokenizer = load_tokenizer(run.settings['backend'])
    traces = _load_traces(run, args.traces, tokenizer)

    rows = []
    for trace in traces:
        if trace.solution.strip():
            metrics = density(trace)
            rows.append([trace.question_id, metrics.n_steps, metrics.n_tokens, _cell(metrics.rho)])
        else:
            logger.warning(f"[DENSITY] Trace {trace.question_id} is empty; rho left blank")
            rows.append([trace.question_id, 0, trace.n_tokens, ''])
    _write_csv(run, out, ['question_id', 'n_steps', 'n_tokens', 'rho'], rows)

    if args.stats:
        stats = corpus_stats(_non_empty(traces, 'DENSITY'), strict=args.strict)
        save_json_file(args.stats, stats.to_dict())
        run.wrote(args.stats)


def cmd_das(args, run: RunContext) -> None:
    scalar = args.rho is not None or args.nll is not None
    if scalar:
        if args.rho is None or args.nll is None:
            raise UsageError("--rho and --nll must be given together")
        if args.traces:
            raise UsageError("--traces cannot be combined with --rho/--nll")
        run.settings.update({'rho': args.rho, 'nll': args.nll})
        save_json_file(args.out, {'rho': args.rho, 'nll': args.nll, 'das': das(args.rho, args.nll)})
        run.wrote(args.out)
        return

    workers = _workers(args, run)
    model = _load_model(run, args.model)
    traces = _non_empty(_load_traces(run, args.traces, model.tokenizer), 'SCORE')
    results = score_traces(model, traces, workers=workers, bare_prompt=args.bare_prompt)
    rows = []
    for trace, result in zip(traces, results):
        rho = density(trace).rho
        rows.append([trace.question_id, trace.sample_index, _cell(rho), _cell(result.mean_nll),
                     _cell(das(rho, result.mean_nll))])
    _write_csv(run, args.out, ['question_id', 'sample_index', 'rho', 'mean_nll', 'das'], rows)


def cmd_evaluate(args, run: RunContext) -> None:
    workers = _workers(args, run)
    max_new_tokens = _max_new_tokens(args, run)
    prompt_style = _prompt_style(args, run)
    policy = _position_policy(args, run)
    if args.vector is None and (args.lam is not None or args.layer is not None):
        raise UsageError("--lambda/--layer require --vector")
    if args.vector is not None and args.lam is None:
        raise UsageError("--lambda is required with --vector")
    run.settings.update({'lambda': args.lam, 'layer': args.layer, 'force': args.force})

    model = _load_model(run, args.model)
    hook = None
    if args.vector:
        vector = load_vector(run.read(_require_file('--vector', args.vector)))
        if args.layer is not None and args.layer != vector.layer:
            raise UsageError(f"--layer {args.layer} does not match the vector's layer {vector.layer}")
        hook = make_hook(vector, args.lam, model, position_policy=policy, force=args.force)
    items = _load_items(args, run)

    report = evaluate(model, items, hook=hook, max_new_tokens=max_new_tokens, workers=workers,
                      prompt_style=prompt_style, vector_file=args.vector)
    save_json_file(args.out, report.to_dict())
    run.wrote(args.out)


def cmd_sweep(args, run: RunContext) -> None:
    workers = _workers(args, run)
    max_new_tokens = _max_new_tokens(args, run)
    prompt_style = _prompt_style(args, run)
    policy = _position_policy(args, run)
    lambda_min = run.resolve('lambda_min', args.lambda_min, Config.LAMBDA_MIN)
    lambda_max = run.resolve('lambda_max', args.lambda_max, Config.LAMBDA_MAX)
    lambda_step = run.resolve('lambda_step', args.lambda_step, Config.LAMBDA_STEP)
    _check(validate_lambda_grid(lambda_min, lambda_max, lambda_step))
    _check(validate_positive_int('--limit', args.limit))
    try:
        layers = parse_layers(args.layers) if args.layers else None
    except ValueError:
        raise UsageError(f"--layers must be comma-separated integers, got {args.layers!r}")

    model = _load_model(run, args.model)
    layers = layers if layers is not None else list(range(model.config.n_layers))
    _check(validate_layers(layers, model.config.n_layers))
    run.settings.update({'layers': layers, 'limit': args.limit, 'bare_prompt': args.bare_prompt})

    pairs = load_pairs(load_jsonl_file(run.read(_require_file('--pairs', args.pairs))), model.tokenizer)
    if args.limit is not None:
        if args.limit > len(pairs):
            raise UsageError(f"--limit {args.limit} exceeds the {len(pairs)} available pairs")
        pairs = pairs[:args.limit]
    items = _load_items(args, run)

    # Vectors are kept in memory and written with the sweep outputs once every layer succeeded
    vectors: Dict[int, SteeringVector] = {}

    def vector_source(layer: int) -> SteeringVector:
        vectors[layer] = extract_vector(model, pairs, layer, workers=workers, bare_prompt=args.bare_prompt)
        return vectors[layer]

    result = sweep(
        model, vector_source, items, layers, lambda_grid(lambda_min, lambda_max, lambda_step),
        max_new_tokens=max_new_tokens, workers=workers, position_policy=policy, prompt_style=prompt_style,
    )

    written = [args.out]
    with atomic_group() as stage:
        if args.vectors_dir:
            for layer, vector in sorted(vectors.items()):
                path = os.path.join(args.vectors_dir, f"layer{layer}.vec")
                stage(path, 'wb').write(encode_vector(vector))
                written.append(path)
        out = stage(args.out)
        out.write(dumps_canonical(result.to_dict(), indent=2))
        out.write('\n')
        if args.sensitivity_csv:
            write_sensitivity_rows(stage(args.sensitivity_csv), result.rows)
            written.append(args.sensitivity_csv)
    for path in written:
        run.wrote(path)
    logger.info(f"[SWEEP] Wrote {len(written)} output file(s) for {len(result.rows)} grid cells")


def _parse_entry(raw: str) -> Tuple[float, int]:
    try:
        accuracy, size = raw.split(':')
        return float(accuracy), int(size)
    except ValueError:
        raise UsageError(f"--entry must be ACCURACY:COUNT, got {raw!r}")


def cmd_avg(args, run: RunContext) -> None:
    entries = [_parse_entry(raw) for raw in args.entry or []]
    if not entries and not args.reports:
        raise UsageError("give at least one --reports file or --entry")

    sources: List[Dict[str, Any]] = []
    for path in args.reports or []:
        report = EvalReport.from_dict(load_json_file(run.read(_require_file('--reports', path))))
        sources.append({'source': path, 'accuracy': report.accuracy, 'n': report.item_count})
    for accuracy, size in entries:
        sources.append({'source': 'entry', 'accuracy': accuracy, 'n': size})

    value = weighted_accuracy([s['accuracy'] for s in sources], [s['n'] for s in sources])
    save_json_file(args.out, {
        'weighted_average': value,
        'total_items': sum(s['n'] for s in sources),
        'entries': sources,
    })
    run.wrote(args.out)
    logger.info(f"[EVAL] Sample-weighted average over {len(sources)} set(s): {value:.4f}")


def cmd_split(args, run: RunContext) -> None:
    size = run.resolve('validation_size', args.validation_size, Config.VALIDATION_SIZE)
    seed = run.resolve('split_seed', args.seed, Config.SPLIT_SEED)
    _check(validate_positive_int('--validation-size', size, allow_zero=True))
    items = _load_items(args, run)
    if size > len(items):
        raise UsageError(f"--validation-size {size} exceeds the {len(items)} items in the dataset")

    validation, test = split_dataset(items, size, seed)
    with atomic_group() as stage:
        write_jsonl(stage(args.validation_out), [item.to_record() for item in validation])
        write_jsonl(stage(args.test_out), [item.to_record() for item in test])
    run.wrote(args.validation_out)
    run.wrote(args.test_out)
    logger.info(f"[RUN] Split {len(items)} items into {len(validation)} validation / {len(test)} test")


# ============================================================================
# Parser
# ============================================================================

def _add_common(parser: argparse.ArgumentParser, *names: str) -> None:
    if 'model' in names:
        parser.add_argument('--model', required=True, help='Weight file')
    if 'dataset' in names:
        parser.add_argument('--dataset', required=True, help='Dataset JSONL')
        parser.add_argument('--format', choices=[f.value for f in DatasetFormat], default=None)
    if 'workers' in names:
        parser.add_argument('--workers', type=int, default=None)
    if 'max_new_tokens' in names:
        parser.add_argument('--max-new-tokens', type=int, default=None)
    if 'prompt_style' in names:
        parser.add_argument('--prompt-style', choices=[s.value for s in PromptStyle], default=None)
    if 'steering' in names:
        parser.add_argument('--position-policy', choices=[p.value for p in PositionPolicy], default=None)
        parser.add_argument('--force', action='store_true', help='Accept a vector from other weights')
    if 'bare_prompt' in names:
        parser.add_argument('--bare-prompt', action='store_true', help='Condition on the bare question')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='densesteer', description='Dense-reasoning steering toolkit')
    parser.add_argument(
        '--version', action='version',
        version=(f"densesteer {__version__} (weights format {WEIGHTS_FORMAT_VERSION}, "
                 f"vector format {VECTOR_FORMAT_VERSION}, report schema {REPORT_SCHEMA_VERSION})"),
    )
    parser.add_argument('--config', default=None, help='dotenv file; process environment wins over it')
    parser.add_argument('--backend', choices=sorted(BACKENDS), default=None)
    parser.add_argument('--log-level', default=None)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('init-model', help='Create deterministic micro-model weights')
    p.add_argument('--out', required=True)
    for name in ('n_layers', 'd_model', 'n_heads', 'd_ff', 'max_seq_len', 'seed'):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int, default=None)
    p.set_defaults(handler=cmd_init_model)

    p = sub.add_parser('generate', help='Greedy CoT traces of the target model')
    _add_common(p, 'model', 'dataset', 'workers', 'max_new_tokens', 'prompt_style')
    p.add_argument('--samples', type=int, default=1, help='Traces per question')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('build-pairs', help='Build audited contrastive pairs')
    _add_common(p, 'model', 'dataset', 'workers', 'max_new_tokens', 'prompt_style')
    p.add_argument('--rewriter', choices=[m.value for m in RewriterMode], default=RewriterMode.RULE_BASED.value)
    p.add_argument('--n-pairs', type=int, default=None)
    p.add_argument('--negatives', default=None, help='Precomputed traces JSONL')
    p.add_argument('--max-merges', type=int, default=None)
    p.add_argument('--short-step-tokens', type=int, default=None)
    p.add_argument('--seed', type=int, default=None, help='Merge seed (random-compression)')
    p.add_argument('--k-merges', type=int, default=None)
    p.add_argument('--endpoint', default=None)
    p.add_argument('--rewriter-model', default=None)
    p.add_argument('--api-key-env', default=None)
    p.add_argument('--cache-dir', default=None)
    p.add_argument('--max-concurrency', type=int, default=None)
    p.add_argument('--offline', action='store_true', help='Serve external rewrites from cache only')
    p.add_argument('--reference-model', default=None, help='Weights whose greedy output become positives')
    p.add_argument('--require-correct-negative', action='store_true')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_build_pairs)

    p = sub.add_parser('audit-pairs', help='Mechanical rewrite audit')
    p.add_argument('--pairs', required=True)
    p.add_argument('--out', required=True, help='Per-pair CSV')
    p.add_argument('--summary', default=None, help='Summary JSON')
    p.set_defaults(handler=cmd_audit_pairs)

    p = sub.add_parser('extract-vector', help='Mean-difference steering vector')
    _add_common(p, 'model', 'workers', 'bare_prompt')
    p.add_argument('--pairs', required=True)
    p.add_argument('--layer', type=int, required=True)
    p.add_argument('--limit', type=int, default=None, help='Use the first N pairs')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_extract_vector)

    p = sub.add_parser('steer-generate', help='Greedy traces under an injection')
    _add_common(p, 'model', 'dataset', 'workers', 'max_new_tokens', 'prompt_style', 'steering')
    p.add_argument('--vector', required=True)
    p.add_argument('--lambda', dest='lam', type=float, required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_steer_generate)

    p = sub.add_parser('score-nll', help='Token-level NLL of traces')
    _add_common(p, 'model', 'workers', 'bare_prompt', 'max_new_tokens')
    p.add_argument('--traces', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--histogram', default=None)
    p.add_argument('--bin-width', type=float, default=None)
    p.add_argument('--range', default=None, help='LOW,HIGH histogram range')
    p.add_argument('--baseline-out', default=None, help='Self-likelihood baseline JSON')
    p.set_defaults(handler=cmd_score_nll)

    p = sub.add_parser('density', help='Steps, tokens and density per trace')
    p.add_argument('--traces', required=True)
    p.add_argument('--out', default=None, help='Defaults to <traces>.density.csv')
    p.add_argument('--stats', default=None, help='Corpus statistics JSON')
    p.add_argument('--strict', action='store_true', help='Fail when SEM is undefined')
    p.set_defaults(handler=cmd_density)

    p = sub.add_parser('das', help='Density-alignment score')
    _add_common(p, 'workers', 'bare_prompt')
    p.add_argument('--model', default=None)
    p.add_argument('--traces', default=None)
    p.add_argument('--rho', type=float, default=None)
    p.add_argument('--nll', type=float, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_das)

    p = sub.add_parser('evaluate', help='Accuracy, density and NLL report')
    _add_common(p, 'model', 'dataset', 'workers', 'max_new_tokens', 'prompt_style', 'steering')
    p.add_argument('--vector', default=None)
    p.add_argument('--lambda', dest='lam', type=float, default=None)
    p.add_argument('--layer', type=int, default=None)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('sweep', help='Layer x lambda grid on a validation set')
    _add_common(p, 'model', 'dataset', 'workers', 'max_new_tokens', 'prompt_style', 'steering', 'bare_prompt')
    p.add_argument('--pairs', required=True)
    p.add_argument('--layers', default=None, help='Comma-separated; default all layers')
    p.add_argument('--lambda-min', type=float, default=None)
    p.add_argument('--lambda-max', type=float, default=None)
    p.add_argument('--lambda-step', type=float, default=None)
    p.add_argument('--limit', type=int, default=None, help='Use the first N pairs')
    p.add_argument('--vectors-dir', default=None, help='Also save the per-layer vectors')
    p.add_argument('--out', required=True)
    p.add_argument('--sensitivity-csv', default=None)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('avg', help='Sample-weighted average accuracy')
    p.add_argument('--reports', nargs='+', default=None)
    p.add_argument('--entry', action='append', default=None, help='ACCURACY:COUNT (repeatable)')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_avg)

    p = sub.add_parser('split', help='Seeded validation/test split')
    p.add_argument('--dataset', required=True)
    p.add_argument('--format', choices=[f.value for f in DatasetFormat], default=None)
    p.add_argument('--validation-size', type=int, default=None)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--validation-out', required=True)
    p.add_argument('--test-out', required=True)
    p.set_defaults(handler=cmd_split)

    return parser


# ============================================================================
# Main
# ============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0

    try:
        Config.load(args.config)
        Config.validate()
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"densesteer: error: {e}", file=sys.stderr)
        return 2

    setup_logging(
        level=args.log_level or Config.LOG_LEVEL,
        log_file=Config.LOG_FILE,
        use_timestamp=Config.USE_TIMESTAMPED_LOGS,
    )
    run = RunContext(subcommand=args.command, argv=argv)
    run.resolve('backend', args.backend, Config.BACKEND)
    logger.info(f"[RUN] densesteer {__version__} {args.command}")

    start = time.perf_counter()
    try:
        args.handler(args, run)
    except UsageError as e:
        logger.error(f"[RUN] Usage error: {e}")
        run.discard_outputs()
        parser.print_usage(sys.stderr)
        return 2
    except DenseSteerError as e:
        logger.error(f"[RUN] {args.command} failed: {type(e).__name__}: {e}")
        run.discard_outputs()
        return 1

    manifest = run.manifest(time.perf_counter() - start)
    for path in run.outputs:
        save_json_file(f"{path}.manifest.json", manifest.to_dict())
    logger.info(f"[RUN] {args.command} finished in {manifest.duration_seconds:.2f}s, {len(run.outputs)} output(s)")
    return 0


if __name__ == '__main__':
    sys.exit(main())
