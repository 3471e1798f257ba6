"""End-to-end wiring: offline preparation, inference, evaluation, reports.

Artifacts directory layout (everything ``offline_prepare`` writes)::

    library.json    function library
    vocab.json      token list (index = id)
    store.jsonl     function + soft-token embeddings
    retriever.bin   dual-encoder checkpoint
    lms.bin         value LM + projector checkpoint
    config.json     the PipelineConfig that produced the above

Same config + same seed reproduce every file byte for byte. Timings are
never serialized into reports; the CLI logs them to stderr instead.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .decode import DecodeConfig, DecodeTrace, run_calls
from .embed import EmbeddingStore, ProviderConfig, make_provider
from .errors import ConfigError, MatchError
from .lms import CallGenerator, TrainingExample
from .retriever import FunctionRetriever, RetrievalResult
from .schema import (
    DatasetRecord,
    FunctionLibrary,
    FunctionSpec,
    ParamSpec,
    ToolCall,
    load_prompt_template,
    parse_function_library,
    render_context,
    serialize_call,
    serialize_function,
    serialize_library,
)
from .template import (
    build_value_mask,
    call_to_training_sequence,
    compile_template,
    validate_output,
)
from .tokenizer import Vocab, build_vocab, detokenize, segment


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob for one end-to-end run.

    The LM block defaults are the desk-scale preset (small embeddings, wide
    window, a few dozen epochs); the model classes themselves default to the
    larger documented sizes when used directly.
    """

    seed: int = 0
    # embedding provider
    backend: str = "mock"
    dim: int = 64
    k: int = 1
    sigma: float = 0.05
    endpoint: str | None = None
    timeout: float = 30.0
    store_path: str | None = None
    # retriever
    retriever_hidden_dim: int = 256
    retriever_out_dim: int = 128
    tau: float = 0.07
    alpha: float = 0.5
    retriever_lr: float = 1e-3
    retriever_batch_size: int = 256
    retriever_epochs: int = 100
    retriever_weight_decay: float = 0.01
    # value LM + projector
    lm_embed_dim: int = 16
    lm_window: int = 48
    lm_hidden_dim: int = 128
    proj_variant: str = "linear"
    proj_hidden_dim: int = 0
    lm_lr: float = 1e-3
    lm_epochs: int = 30
    lm_weight_decay: float = 0.01
    selective: bool = True
    # decoding and templating
    max_value_tokens: int = 32
    max_calls: int = 8
    include_optional: bool = False
    min_count: int = 1

    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(self.backend, self.dim, self.k, self.seed, self.sigma,
                              self.endpoint, self.timeout, self.store_path)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.max_value_tokens, self.max_calls)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_VERBS = ("fetch", "compute", "list", "check", "create",
          "update", "cancel", "find", "send", "rate")
_NOUNS = ("weather", "stock", "recipe", "flight", "hotel",
          "song", "route", "invoice", "ticket", "match")
_PARAM_WORDS = ("id", "name", "date", "count", "mode", "limit", "tag", "size")
_VALUE_WORDS = ("amber", "basil", "cedar", "dune", "ember", "flint", "grove",
                "hazel", "iris", "jade", "kelp", "lotus", "maple", "nectar",
                "onyx", "pearl", "quartz", "reef", "sage", "topaz", "umber",
                "violet", "willow", "zinc")
_NOISE_WORDS = ("please", "kindly", "quickly", "soon", "today", "now",
                "thanks", "really", "just", "maybe", "again", "once")


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated corpus; see generate_synthetic."""

    n_functions: int = 50
    queries_per_function: int = 20
    params_min: int = 2
    params_max: int = 2
    n_values: int = 20
    noise_sigma: float = 0.1
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_functions < 1 or self.queries_per_function < 1:
            raise ConfigError("need at least one function and one query per function")
        if not 1 <= self.params_min <= self.params_max <= len(_PARAM_WORDS):
            raise ConfigError(f"params range must lie in [1, {len(_PARAM_WORDS)}]")
        if self.n_values < 1:
            raise ConfigError("n_values must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in (0, 1]")


def _value_words(n: int) -> list[str]:
    words = list(_VALUE_WORDS[:n])
    words.extend(f"gem{i}" for i in range(len(words), n))
    return words


def generate_synthetic(spec: SyntheticSpec, seed: int = 0
                       ) -> tuple[FunctionLibrary, list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic toy corpus for training and evaluating the cascade.

    Every function gets a unique single-token name plus distinctive
    description words, so feature-hash embeddings separate them. Queries
    name the function and end with a flat ``param value`` block whose value
    words come verbatim from a closed vocabulary, so a fixed-window model
    can learn to copy them. Queries are split per function into disjoint
    train and test sets.
    """
    rng = np.random.default_rng(seed)
    values = _value_words(spec.n_values)
    functions: list[FunctionSpec] = []
    for i in range(spec.n_functions):
        verb = _VERBS[(i // len(_NOUNS)) % len(_VERBS)]
        noun = _NOUNS[i % len(_NOUNS)]
        rep = i // (len(_VERBS) * len(_NOUNS))
        fname = f"{verb}_{noun}" + (f"_{rep}" if rep else "")
        m = int(rng.integers(spec.params_min, spec.params_max + 1))
        params = tuple(
            ParamSpec(f"{fname}_{_PARAM_WORDS[j]}", "string",
                      f"the {_PARAM_WORDS[j]} to use", True)
            for j in range(m))
        functions.append(FunctionSpec(fname, f"{verb} the {noun} record", params))
    lib = FunctionLibrary(tuple(functions))

    n_noise = max(0, round(spec.noise_sigma * 10))
    n_train = max(1, round(spec.train_fraction * spec.queries_per_function))
    train: list[DatasetRecord] = []
    test: list[DatasetRecord] = []
    all_names = tuple(f.name for f in lib.functions)
    for f in lib.functions:
        verb, noun = f.description.split()[0], f.description.split()[2]
        for q in range(spec.queries_per_function):
            vals = [values[int(rng.integers(len(values)))] for _ in f.params]
            noise = [_NOISE_WORDS[int(rng.integers(len(_NOISE_WORDS)))]
                     for _ in range(n_noise)]
            block = " ".join(f"{p.name} {v}" for p, v in zip(f.params, vals))
            query = " ".join(["use", f.name, "to", verb, "the", noun, *noise, block])
            call = ToolCall(f.name, tuple((p.name, v) for p, v in zip(f.params, vals)))
            rec = DatasetRecord(f"{f.name}:q{q}", query, all_names, (call,))
            (train if q < n_train else test).append(rec)
    return lib, train, test


# ---------------------------------------------------------------------------
# offline preparation
# ---------------------------------------------------------------------------

@dataclass
class Artifacts:
    """Everything inference needs, as one loadable bundle."""

    config: PipelineConfig
    lib: FunctionLibrary
    vocab: Vocab
    store: EmbeddingStore
    retriever: FunctionRetriever
    generator: CallGenerator
    _fn_codes: np.ndarray | None = field(default=None, repr=False)

    def fn_codes(self) -> np.ndarray:
        if self._fn_codes is None:
            self._fn_codes = self.retriever.encode_library(self.store, self.lib)
        return self._fn_codes

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "library.json").write_text(serialize_library(self.lib) + "\n",
                                          encoding="utf-8")
        self.vocab.save(str(out / "vocab.json"))
        self.store.save(str(out / "store.jsonl"))
        self.retriever.save(str(out / "retriever.bin"))
        self.generator.save(str(out / "lms.bin"))
        (out / "config.json").write_text(self.config.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, art_dir: str | Path) -> "Artifacts":
        art = Path(art_dir)
        if not art.is_dir():
            raise ConfigError(f"artifacts directory {art} does not exist")
        config = PipelineConfig.from_json((art / "config.json").read_text(encoding="utf-8"))
        lib = parse_function_library((art / "library.json").read_text(encoding="utf-8"))
        vocab = Vocab.load(str(art / "vocab.json"))
        store = EmbeddingStore.load(str(art / "store.jsonl"))
        retriever = FunctionRetriever.load(str(art / "retriever.bin"))
        generator = CallGenerator.load(str(art / "lms.bin"))
        return cls(config, lib, vocab, store, retriever, generator)


def _provider_for(config: PipelineConfig, store: EmbeddingStore | None):
    return make_provider(config.provider_config(), store)


def _unique_call_names(rec: DatasetRecord) -> list[str]:
    names: list[str] = []
    for call in rec.ground_truth:
        if call.name not in names:
            names.append(call.name)
    return names


def _context_ids(vocab: Vocab, base_ids: list[int], prev_texts: list[str]) -> list[int]:
    """Base prompt plus previously emitted calls, comma-separated."""
    ids = list(base_ids)
    for text in prev_texts:
        ids.extend(vocab.encode(text))
        ids.append(vocab.id(","))
    return ids


def build_call_vocab(config: PipelineConfig, lib: FunctionLibrary,
                     records: list[DatasetRecord]) -> Vocab:
    """Vocabulary over everything the value LM will ever see or emit."""
    prompt = load_prompt_template("lms_generate")
    corpus = [serialize_library(lib)]
    corpus.extend(compile_template(f, config.include_optional).canonical_text()
                  for f in lib.functions)
    for rec in records:
        if rec.ground_truth:
            corpus.append(render_context(prompt, lib.subset(_unique_call_names(rec)),
                                         rec.query))
            corpus.extend(serialize_call(c) for c in rec.ground_truth)
        else:
            corpus.append(rec.query)
    return build_vocab(corpus, config.min_count)


def build_training_examples(config: PipelineConfig, lib: FunctionLibrary,
                            records: list[DatasetRecord], vocab: Vocab,
                            store: EmbeddingStore) -> list[TrainingExample]:
    """One teacher-forced example per ground-truth call."""
    prompt = load_prompt_template("lms_generate")
    examples: list[TrainingExample] = []
    for rec in records:
        if not rec.ground_truth:
            continue
        subset = lib.subset(_unique_call_names(rec))
        base_ids = vocab.encode(render_context(prompt, subset, rec.query))
        soft = np.stack([store.get(f"q:{rec.id}")] +
                        [store.get(f"q:{rec.id}#{j}") for j in range(1, config.k)])
        prev: list[str] = []
        for j, call in enumerate(rec.ground_truth):
            template = compile_template(lib.get(call.name), config.include_optional)
            target = call_to_training_sequence(template, call, vocab)
            mask = build_value_mask(template, target, vocab)
            examples.append(TrainingExample(
                f"{rec.id}#{j}", _context_ids(vocab, base_ids, prev), soft,
                target, mask))
            prev.append(serialize_call(call))
    return examples


def offline_prepare(config: PipelineConfig, lib: FunctionLibrary,
                    records: list[DatasetRecord],
                    out_dir: str | Path | None = None) -> Artifacts:
    """Embed, train the retriever, build the vocab, train the value LM.

    Fully deterministic for a fixed config: seeded inits, seeded shuffles,
    and insertion-ordered stores.
    """
    if not records:
        raise ConfigError("offline_prepare needs at least one training record")
    provider = _provider_for(config, None)

    store = EmbeddingStore()
    for f in lib.functions:
        store.put(f"fn:{f.name}", provider.embed_function(f, lib))
    for rec in records:
        vecs = provider.distill_soft_tokens(rec.query, rec.id, lib)
        store.put(f"q:{rec.id}", vecs[0])
        for j in range(1, len(vecs)):
            store.put(f"q:{rec.id}#{j}", vecs[j])

    pairs = [(f"q:{rec.id}", f"fn:{name}")
             for rec in records for name in _unique_call_names(rec)]
    if not pairs:
        raise ConfigError("no ground-truth calls to train on")
    retriever = FunctionRetriever(
        dim=store.dim, hidden_dim=config.retriever_hidden_dim,
        out_dim=config.retriever_out_dim, tau=config.tau, alpha=config.alpha,
        lr=config.retriever_lr, batch_size=config.retriever_batch_size,
        epochs=config.retriever_epochs, weight_decay=config.retriever_weight_decay,
        seed=config.seed)
    retriever.fit(store, pairs)

    vocab = build_call_vocab(config, lib, records)
    examples = build_training_examples(config, lib, records, vocab, store)
    if not examples:
        raise ConfigError("no ground-truth calls to train on")
    generator = CallGenerator(
        dim=store.dim, embed_dim=config.lm_embed_dim, window=config.lm_window,
        hidden_dim=config.lm_hidden_dim, proj_variant=config.proj_variant,
        proj_hidden_dim=config.proj_hidden_dim, lr=config.lm_lr,
        epochs=config.lm_epochs, weight_decay=config.lm_weight_decay,
        selective=config.selective, seed=config.seed)
    generator.fit(examples, len(vocab))

    artifacts = Artifacts(config, lib, vocab, store, retriever, generator)
    if out_dir is not None:
        artifacts.save(out_dir)
    return artifacts


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class InferResult:
    combined_text: str
    calls: list[ToolCall]
    retrieval: RetrievalResult
    traces: list[DecodeTrace]
    context_tokens: int


def _span_value_text(vocab: Vocab, token_ids: tuple[int, ...]) -> str:
    return detokenize([vocab.token(i) for i in token_ids if not vocab.is_control(i)])


def _calls_from_traces(vocab: Vocab, traces: list[DecodeTrace]) -> list[ToolCall]:
    calls = []
    for trace in traces:
        args = tuple((span.param_name, _span_value_text(vocab, span.token_ids))
                     for span in trace.spans)
        calls.append(ToolCall(trace.function_name, args))
    return calls


def infer(artifacts: Artifacts, query: str, record_id: str | None = None) -> InferResult:
    """Retrieve, template, and decode one query into calls."""
    config = artifacts.config
    lib, vocab = artifacts.lib, artifacts.vocab
    provider = _provider_for(config, artifacts.store)
    soft = np.stack(provider.distill_soft_tokens(query, record_id, lib))
    retrieval = artifacts.retriever.retrieve(soft[0], artifacts.store, lib,
                                             artifacts.fn_codes())
    selected = list(retrieval.selected)
    templates = [compile_template(lib.get(n), config.include_optional) for n in selected]
    prompt = load_prompt_template("lms_generate")
    base_ids = vocab.encode(render_context(prompt, lib.subset(selected), query))

    def factory(prev_texts: list[str]):
        return artifacts.generator.session(soft, _context_ids(vocab, base_ids, prev_texts))

    combined, traces = run_calls(factory, templates, vocab, config.decode_config())
    return InferResult(combined, _calls_from_traces(vocab, traces), retrieval,
                       traces, len(base_ids) + soft.shape[0])


def infer_free_running(artifacts: Artifacts, query: str,
                       record_id: str | None = None) -> list[ToolCall] | None:
    """Baseline: same models, no injection; greedy free-running decode.

    Each selected function gets a budget of template length plus the value
    allowance. Returns None as soon as any emission fails template
    validation, since the output is then not a well-formed call.
    """
    config = artifacts.config
    lib, vocab = artifacts.lib, artifacts.vocab
    provider = _provider_for(config, artifacts.store)
    soft = np.stack(provider.distill_soft_tokens(query, record_id, lib))
    retrieval = artifacts.retriever.retrieve(soft[0], artifacts.store, lib,
                                             artifacts.fn_codes())
    selected = list(retrieval.selected)
    prompt = load_prompt_template("lms_generate")
    base_ids = vocab.encode(render_context(prompt, lib.subset(selected), query))
    calls: list[ToolCall] = []
    prev: list[str] = []
    for name in selected:
        template = compile_template(lib.get(name), config.include_optional)
        session = artifacts.generator.session(soft, _context_ids(vocab, base_ids, prev))
        budget = len(template.canonical_tokens()) + config.max_value_tokens
        emitted: list[int] = []
        for _ in range(budget):
            tok = session.next()
            session.append([tok])
            emitted.append(tok)
        text = detokenize([vocab.token(i) for i in emitted if not vocab.is_control(i)])
        try:
            values = validate_output(template, text)
        except MatchError:
            return None
        calls.append(ToolCall(name, tuple(zip(template.slot_params, values))))
        prev.append(text)
    return calls


# ---------------------------------------------------------------------------
# metrics and reports
# ---------------------------------------------------------------------------

def exact_match(pred: list[ToolCall], truth: list[ToolCall]) -> bool:
    """Call lists match: same order of calls, argument order irrelevant."""
    if len(pred) != len(truth):
        return False
    return all(p.name == t.name and p.as_dict() == t.as_dict()
               for p, t in zip(pred, truth))


def retriever_metrics(selected_sets: list[set[str]], truth_sets: list[set[str]]
                      ) -> tuple[float, float, float, float]:
    """(exact-match rate, micro precision, micro recall, micro F1)."""
    if len(selected_sets) != len(truth_sets):
        raise ConfigError("selected and truth lists differ in length")
    if not selected_sets:
        raise ConfigError("no retrieval results to score")
    em = sum(s == t for s, t in zip(selected_sets, truth_sets)) / len(selected_sets)
    tp = sum(len(s & t) for s, t in zip(selected_sets, truth_sets))
    n_sel = sum(len(s) for s in selected_sets)
    n_tru = sum(len(t) for t in truth_sets)
    precision = tp / n_sel if n_sel else 0.0
    recall = tp / n_tru if n_tru else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return em, precision, recall, f1


@dataclass(frozen=True)
class StageReport:
    stage: str
    mechanism: str
    tokens_eliminated: int


@dataclass
class EvalReport:
    """Deterministic evaluation summary (no wall-clock fields)."""

    n_records: int
    call_em: float
    retriever_em: float
    precision: float
    recall: float
    f1: float
    tokens: dict[str, int]
    redundancy: list[StageReport]
    baseline_call_em: float | None = None

    def to_json(self) -> str:
        obj = asdict(self)
        return json.dumps(obj, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        obj["redundancy"] = [StageReport(**s) for s in obj["redundancy"]]
        return cls(**obj)


def _function_token_counts(lib: FunctionLibrary) -> dict[str, int]:
    return {f.name: len(segment(serialize_function(f))) for f in lib.functions}


def _eval_one(artifacts: Artifacts, rec: DatasetRecord, fn_tokens: dict[str, int],
              include_baseline: bool) -> dict:
    result = infer(artifacts, rec.query, rec.id)
    truth_names = {c.name for c in rec.ground_truth}
    selected = set(result.retrieval.selected)
    injected_text = generated_values = control = forced = 0
    for trace in result.traces:
        vocab = artifacts.vocab
        for e in trace.events:
            if vocab.is_control(e.token_id):
                control += 1
            elif e.origin == "injected":
                injected_text += 1
            else:
                generated_values += 1
        forced += trace.forced_closes
    out = {
        "em": exact_match(result.calls, list(rec.ground_truth)),
        "selected": selected,
        "truth": truth_names,
        "input": result.context_tokens,
        "injected": injected_text,
        "generated": generated_values + forced,
        "control": control,
        "forced_closes": forced,
        "context_stage": sum(n for name, n in fn_tokens.items() if name not in selected),
    }
    if include_baseline:
        base_calls = infer_free_running(artifacts, rec.query, rec.id)
        out["baseline_em"] = (base_calls is not None
                              and exact_match(base_calls, list(rec.ground_truth)))
    return out


def evaluate(artifacts: Artifacts, records: list[DatasetRecord], jobs: int = 1,
             include_baseline: bool = False) -> EvalReport:
    """Score a dataset; per-record work may fan out over threads.

    Results are reduced in record order, so the report does not depend on
    scheduling.
    """
    if not records:
        raise ConfigError("evaluate needs at least one record")
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    fn_tokens = _function_token_counts(artifacts.lib)
    artifacts.fn_codes()  # warm the shared cache before any fan-out
    if jobs == 1:
        rows = [_eval_one(artifacts, r, fn_tokens, include_baseline) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(
                lambda r: _eval_one(artifacts, r, fn_tokens, include_baseline), records))

    n = len(rows)
    tokens = {
        "input": sum(r["input"] for r in rows),
        "injected": sum(r["injected"] for r in rows),
        "generated": sum(r["generated"] for r in rows),
        "control": sum(r["control"] for r in rows),
        "forced_closes": sum(r["forced_closes"] for r in rows),
    }
    em, precision, recall, f1 = retriever_metrics(
        [r["selected"] for r in rows], [r["truth"] for r in rows])
    redundancy = [
        StageReport("Context Processing", "function embedding & retrieval",
                    sum(r["context_stage"] for r in rows)),
        StageReport("Full-Sequence Generation", "large-to-small model handoff",
                    tokens["generated"]),
        StageReport("Syntactic Generation", "dynamic template injection",
                    tokens["injected"]),
    ]
    baseline = None
    if include_baseline:
        baseline = sum(bool(r["baseline_em"]) for r in rows) / n
    return EvalReport(
        n_records=n,
        call_em=sum(bool(r["em"]) for r in rows) / n,
        retriever_em=em, precision=precision, recall=recall, f1=f1,
        tokens=tokens, redundancy=redundancy, baseline_call_em=baseline)


def render_report_table(report: EvalReport) -> str:
    """Fixed-width text table: headline metrics plus the three stages."""
    lines = [
        f"records            {report.n_records}",
        f"call exact match   {report.call_em:.4f}",
        f"retriever EM       {report.retriever_em:.4f}",
        f"precision/recall   {report.precision:.4f} / {report.recall:.4f}",
        f"F1                 {report.f1:.4f}",
        f"tokens: input      {report.tokens['input']}",
        f"tokens: injected   {report.tokens['injected']}",
        f"tokens: generated  {report.tokens['generated']}",
    ]
    if report.baseline_call_em is not None:
        lines.insert(2, f"baseline call EM   {report.baseline_call_em:.4f}")
    lines.append("")
    header = f"{'stage':<26} {'mechanism':<34} {'tokens eliminated':>18}"
    lines.append(header)
    lines.append("-" * len(header))
    avg = report.n_records or 1
    for s in report.redundancy:
        per = s.tokens_eliminated / avg
        lines.append(f"{s.stage:<26} {s.mechanism:<34} {s.tokens_eliminated:>18}"
                     f"  ({per:.2f}/record)")
    return "\n".join(lines)
