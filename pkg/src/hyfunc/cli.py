"""Command-line entry point.

One binary, eight subcommands::

    hyfunc gen-data         write a synthetic library + train/test splits
    hyfunc embed            embed functions and queries into a store
    hyfunc train-retriever  fit the dual encoder on (query, function) pairs
    hyfunc train-lms        fit the value LM + projector
    hyfunc infer            decode calls for one query
    hyfunc eval             score a test split, emit report JSON + table
    hyfunc bench            end-to-end synthetic run with phase timings
    hyfunc template show    dump one function's compiled template

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric error. Logs go to stderr; results go to files or stdout.

Commands that build models accept ``--config config.json`` (a PipelineConfig
dump); explicit flags win over the file. All randomized commands take
``--seed``. ``HYFUNC_HTTP_ENDPOINT`` overrides any configured HTTP endpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from .embed import BACKENDS, EmbeddingStore, make_provider
from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateMaskError,
    DegenerateVectorError,
    DimError,
    EmptyInputError,
    GeneratorError,
    MatchError,
    MissingEmbeddingError,
    NumericsError,
    ParseError,
    ProviderError,
    SchemaError,
    ShapeError,
    TemplateError,
    VocabError,
)
from .lms import CallGenerator
from .pipeline import (
    Artifacts,
    PipelineConfig,
    SyntheticSpec,
    build_call_vocab,
    build_training_examples,
    evaluate,
    generate_synthetic,
    infer,
    offline_prepare,
    render_report_table,
)
from .retriever import FunctionRetriever
from .schema import (
    parse_dataset,
    parse_function_library,
    serialize_library,
    serialize_record,
)
from .template import compile_template, template_to_json

log = logging.getLogger("hyfunc")

_NUMERIC_ERRORS = (NumericsError, DegenerateVectorError, DegenerateMaskError)
_DATA_ERRORS = (ParseError, SchemaError, TemplateError, VocabError, AlignmentError,
                MatchError, ConfigError, MissingEmbeddingError, DimError, ShapeError,
                EmptyInputError, ProviderError, GeneratorError,
                json.JSONDecodeError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract here is 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(path: str, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _outfile(path: str) -> str:
    """Create the parent directory so save targets behave like _write."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _merged_config(args: argparse.Namespace, mapping: dict[str, str]) -> PipelineConfig:
    """Start from --config (or defaults), overlay explicitly given flags.

    Flags in `mapping` must default to None so absence is detectable.
    """
    if getattr(args, "config", None):
        config = PipelineConfig.from_json(_read(args.config))
    else:
        config = PipelineConfig()
    overrides = {}
    for attr, field in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = value
    return replace(config, **overrides) if overrides else config


def _load_pairs(path: str) -> list[tuple[str, str]]:
    pairs = []
    for i, line in enumerate(_read(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"bad JSON in pairs file: {e}", line=i) from e
        if (not isinstance(obj, dict) or not isinstance(obj.get("query"), str)
                or not isinstance(obj.get("function"), str)):
            raise ParseError('pairs rows need string "query" and "function"', line=i)
        pairs.append((obj["query"], obj["function"]))
    if not pairs:
        raise ParseError(f"pairs file {path} is empty")
    return pairs


def _load_split(library_path: str, data_path: str):
    lib = parse_function_library(_read(library_path))
    records = parse_dataset(_read(data_path), lib)
    return lib, records


def _records_jsonl(records) -> str:
    return "\n".join(serialize_record(r) for r in records) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(args.functions, args.queries_per_function, args.params_min,
                         args.params_max, args.values, args.noise, args.train_fraction)
    lib, train, test = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(str(out / "library.json"), serialize_library(lib) + "\n")
    _write(str(out / "train.jsonl"), _records_jsonl(train))
    _write(str(out / "test.jsonl"), _records_jsonl(test))
    log.info("wrote %d functions, %d train / %d test records to %s",
             len(lib.functions), len(train), len(test), out)
    return 0


def _cmd_embed(args) -> int:
    config = _merged_config(args, {
        "backend": "backend", "dim": "dim", "k": "k", "sigma": "sigma",
        "endpoint": "endpoint", "timeout": "timeout", "store_in": "store_path",
        "seed": "seed"})
    lib, records = _load_split(args.library, args.data)
    provider = make_provider(config.provider_config())
    store = EmbeddingStore()
    for f in lib.functions:
        store.put(f"fn:{f.name}", provider.embed_function(f, lib))
    pair_lines = []
    for rec in records:
        vecs = provider.distill_soft_tokens(rec.query, rec.id, lib)
        store.put(f"q:{rec.id}", vecs[0])
        for j in range(1, len(vecs)):
            store.put(f"q:{rec.id}#{j}", vecs[j])
        seen = set()
        for call in rec.ground_truth:
            if call.name not in seen:
                seen.add(call.name)
                pair_lines.append(json.dumps(
                    {"query": f"q:{rec.id}", "function": f"fn:{call.name}"}))
    store.save(_outfile(args.out))
    log.info("embedded %d functions and %d queries (dim %d) to %s",
             len(lib.functions), len(records), store.dim, args.out)
    if args.pairs:
        _write(args.pairs, "\n".join(pair_lines) + "\n")
        log.info("wrote %d training pairs to %s", len(pair_lines), args.pairs)
    return 0


def _cmd_train_retriever(args) -> int:
    config = _merged_config(args, {
        "hidden": "retriever_hidden_dim", "out_dim": "retriever_out_dim",
        "tau": "tau", "alpha": "alpha", "lr": "retriever_lr",
        "batch_size": "retriever_batch_size", "epochs": "retriever_epochs",
        "weight_decay": "retriever_weight_decay", "seed": "seed"})
    store = EmbeddingStore.load(args.store)
    pairs = _load_pairs(args.pairs)
    retriever = FunctionRetriever(
        dim=store.dim, hidden_dim=config.retriever_hidden_dim,
        out_dim=config.retriever_out_dim, tau=config.tau, alpha=config.alpha,
        lr=config.retriever_lr, batch_size=config.retriever_batch_size,
        epochs=config.retriever_epochs, weight_decay=config.retriever_weight_decay,
        seed=config.seed)
    t0 = time.perf_counter()
    retriever.fit(store, pairs)
    log.info("trained retriever on %d pairs, %d epochs in %.2fs (loss %.6f -> %.6f)",
             len(pairs), config.retriever_epochs, time.perf_counter() - t0,
             retriever.loss_curve_[0], retriever.loss_curve_[-1])
    retriever.save(_outfile(args.out))
    log.info("wrote %s", args.out)
    return 0


def _cmd_train_lms(args) -> int:
    config = _merged_config(args, {
        "embed_dim": "lm_embed_dim", "window": "lm_window", "hidden": "lm_hidden_dim",
        "proj": "proj_variant", "proj_hidden": "proj_hidden_dim", "lr": "lm_lr",
        "epochs": "lm_epochs", "weight_decay": "lm_weight_decay",
        "selective": "selective", "min_count": "min_count",
        "include_optional": "include_optional", "k": "k", "seed": "seed"})
    lib, records = _load_split(args.library, args.corpus)
    store = EmbeddingStore.load(args.store)
    vocab = build_call_vocab(config, lib, records)
    examples = build_training_examples(config, lib, records, vocab, store)
    if not examples:
        raise ConfigError("no ground-truth calls in the corpus to train on")
    generator = CallGenerator(
        dim=store.dim, embed_dim=config.lm_embed_dim, window=config.lm_window,
        hidden_dim=config.lm_hidden_dim, proj_variant=config.proj_variant,
        proj_hidden_dim=config.proj_hidden_dim, lr=config.lm_lr,
        epochs=config.lm_epochs, weight_decay=config.lm_weight_decay,
        selective=config.selective, seed=config.seed)
    t0 = time.perf_counter()
    generator.fit(examples, len(vocab))
    log.info("trained value LM on %d examples (vocab %d), %d epochs in %.2fs "
             "(loss %.6f -> %.6f)", len(examples), len(vocab), config.lm_epochs,
             time.perf_counter() - t0, generator.loss_curve_[0],
             generator.loss_curve_[-1])
    generator.save(_outfile(args.out))
    log.info("wrote %s", args.out)
    if args.vocab_out:
        vocab.save(_outfile(args.vocab_out))
        log.info("wrote %s", args.vocab_out)
    if args.config_out:
        _write(args.config_out, config.to_json() + "\n")
        log.info("wrote %s", args.config_out)
    return 0


def _cmd_infer(args) -> int:
    artifacts = Artifacts.load(args.artifacts)
    result = infer(artifacts, args.query, args.record_id)
    log.info("selected %s%s", list(result.retrieval.selected),
             " (fallback)" if result.retrieval.fallback_used else "")
    if args.trace:
        obj = [asdict(t) for t in result.traces]
        _write(args.trace, json.dumps(obj, sort_keys=True, indent=2) + "\n")
        log.info("wrote %s", args.trace)
    print(result.combined_text)
    return 0


def _cmd_eval(args) -> int:
    artifacts = Artifacts.load(args.artifacts)
    records = parse_dataset(_read(args.test), artifacts.lib)
    t0 = time.perf_counter()
    report = evaluate(artifacts, records, jobs=args.jobs,
                      include_baseline=args.baseline)
    log.info("evaluated %d records in %.2fs", len(records), time.perf_counter() - t0)
    if args.report:
        _write(args.report, report.to_json() + "\n")
        log.info("wrote %s", args.report)
    print(render_report_table(report))
    return 0


def _cmd_bench(args) -> int:
    config = _merged_config(args, {"seed": "seed"})
    spec = SyntheticSpec(args.functions, args.queries_per_function,
                         noise_sigma=args.noise)
    t0 = time.perf_counter()
    lib, train, test = generate_synthetic(spec, config.seed)
    t1 = time.perf_counter()
    log.info("gen-data: %d functions, %d/%d records in %.2fs",
             len(lib.functions), len(train), len(test), t1 - t0)
    artifacts = offline_prepare(config, lib, train, out_dir=args.out)
    t2 = time.perf_counter()
    log.info("offline prepare (embed + train): %.2fs", t2 - t1)
    report = evaluate(artifacts, test, jobs=args.jobs, include_baseline=args.baseline)
    t3 = time.perf_counter()
    log.info("evaluate: %d records in %.2fs (%.1f ms/record)",
             len(test), t3 - t2, 1000 * (t3 - t2) / len(test))
    if args.out:
        out = Path(args.out)
        _write(str(out / "train.jsonl"), _records_jsonl(train))
        _write(str(out / "test.jsonl"), _records_jsonl(test))
        _write(str(out / "report.json"), report.to_json() + "\n")
        log.info("artifacts + report under %s", out)
    print(render_report_table(report))
    return 0


def _cmd_template_show(args) -> int:
    lib = parse_function_library(_read(args.library))
    template = compile_template(lib.get(args.function), args.include_optional)
    print(template_to_json(template))
    print(template.canonical_text())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flag(p: _Parser) -> None:
    p.add_argument("--config", help="PipelineConfig JSON; explicit flags override it")


def build_parser() -> _Parser:
    parser = _Parser(prog="hyfunc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--functions", type=int, default=50)
    p.add_argument("--queries-per-function", type=int, default=20)
    p.add_argument("--params-min", type=int, default=2)
    p.add_argument("--params-max", type=int, default=2)
    p.add_argument("--values", type=int, default=20, help="value vocabulary size")
    p.add_argument("--noise", type=float, default=0.1, help="filler-word rate")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("embed", help="embed functions and queries into a store")
    p.add_argument("--library", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL to embed")
    p.add_argument("--out", required=True, help="store JSONL to write")
    p.add_argument("--pairs", help="also write (query, function) pairs JSONL here")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--dim", type=int)
    p.add_argument("--k", type=int, help="soft tokens per query")
    p.add_argument("--sigma", type=float, help="mock perturbation scale")
    p.add_argument("--endpoint", help="http backend base URL")
    p.add_argument("--timeout", type=float)
    p.add_argument("--store-in", help="source store for the file backend")
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("train-retriever", help="fit the dual encoder")
    p.add_argument("--store", required=True, help="embedding store JSONL")
    p.add_argument("--pairs", required=True, help="(query, function) pairs JSONL")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--hidden", type=int)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_train_retriever)

    p = sub.add_parser("train-lms", help="fit the value LM + projector")
    p.add_argument("--corpus", required=True, help="training dataset JSONL")
    p.add_argument("--library", required=True)
    p.add_argument("--store", required=True, help="embedding store JSONL")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--vocab-out", help="write the built vocabulary here")
    p.add_argument("--config-out", help="write the merged config here")
    p.add_argument("--selective", action=argparse.BooleanOptionalAction,
                   help="train on masked value positions only")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--proj", choices=("linear", "mlp"))
    p.add_argument("--proj-hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--min-count", type=int)
    p.add_argument("--include-optional", action=argparse.BooleanOptionalAction)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_train_lms)

    p = sub.add_parser("infer", help="decode calls for one query")
    p.add_argument("--artifacts", required=True, help="artifacts directory")
    p.add_argument("--query", required=True)
    p.add_argument("--record-id", help="store key hint for the file backend")
    p.add_argument("--trace", help="write decode traces as JSON here")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score a test split")
    p.add_argument("--artifacts", required=True, help="artifacts directory")
    p.add_argument("--test", required=True, help="test dataset JSONL")
    p.add_argument("--report", help="write the report JSON here")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--baseline", action="store_true",
                   help="also score the free-running baseline")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="end-to-end synthetic run with timings")
    p.add_argument("--out", help="persist artifacts + report to this directory")
    p.add_argument("--functions", type=int, default=50)
    p.add_argument("--queries-per-function", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("template", help="inspect compiled templates")
    tsub = p.add_subparsers(dest="template_command", required=True,
                            metavar="subcommand")
    ts = tsub.add_parser("show", help="print one template as JSON + text")
    ts.add_argument("--library", required=True)
    ts.add_argument("--function", required=True)
    ts.add_argument("--include-optional", action="store_true")
    ts.set_defaults(func=_cmd_template_show)

    return parser


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        print("run 'hyfunc --help' for usage", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help paths
        return int(e.code or 0)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as e:
        log.error("%s: %s", type(e).__name__, e)
        return 3
    except _DATA_ERRORS as e:
        log.error("%s: %s", type(e).__name__, e)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
