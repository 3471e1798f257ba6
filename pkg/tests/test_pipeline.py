import numpy as np
import pytest

from hyfunc import (
    Artifacts,
    ConfigError,
    DatasetRecord,
    EvalReport,
    PipelineConfig,
    StageReport,
    SyntheticSpec,
    ToolCall,
    build_call_vocab,
    build_training_examples,
    evaluate,
    exact_match,
    generate_synthetic,
    infer,
    offline_prepare,
    render_report_table,
    retriever_metrics,
    serialize_call,
)
from hyfunc.pipeline import build_call_vocab as _bcv  # noqa: F401  (re-export check)
from hyfunc.schema import load_prompt_template, render_context


# ---------------------------------------------------------------- synthetic

def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(n_functions=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(params_min=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(params_min=3, params_max=2)
    with pytest.raises(ConfigError):
        SyntheticSpec(n_values=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(train_fraction=0.0)


def test_generate_synthetic_counts_and_split():
    lib, train, test = generate_synthetic(SyntheticSpec(), seed=0)
    assert len(lib) == 50
    assert len(train) == 800 and len(test) == 200  # 16/4 per function
    names = [f.name for f in lib.functions]
    assert len(set(names)) == 50
    assert set(r.id for r in train).isdisjoint(r.id for r in test)


def test_generate_synthetic_is_deterministic():
    spec = SyntheticSpec(n_functions=7, queries_per_function=3)
    a = generate_synthetic(spec, seed=4)
    b = generate_synthetic(spec, seed=4)
    assert [f.name for f in a[0].functions] == [f.name for f in b[0].functions]
    assert [(r.id, r.query) for r in a[1]] == [(r.id, r.query) for r in b[1]]
    c = generate_synthetic(spec, seed=5)
    assert [r.query for r in a[1]] != [r.query for r in c[1]]


def test_generate_synthetic_queries_carry_the_answer():
    spec = SyntheticSpec(n_functions=5, queries_per_function=4, noise_sigma=0.3)
    lib, train, test = generate_synthetic(spec, seed=1)
    for rec in train + test:
        assert len(rec.ground_truth) == 1
        call = rec.ground_truth[0]
        words = rec.query.split()
        assert call.name in words
        # the query tail spells out the argument block verbatim
        tail = [w for pair in call.arguments for w in pair]
        assert words[-len(tail):] == tail
        assert rec.candidate_functions == tuple(f.name for f in lib.functions)


def test_generate_synthetic_noise_words():
    spec = SyntheticSpec(n_functions=2, queries_per_function=2, noise_sigma=0.5)
    _, train, _ = generate_synthetic(spec, seed=0)
    # use NAME to VERB the NOUN + 5 fillers + 2 params x (name, value)
    assert len(train[0].query.split()) == 6 + 5 + 4


# ---------------------------------------------------------------- metrics

def test_exact_match_cases():
    a = ToolCall("f", (("x", "1"), ("y", "2")))
    permuted = ToolCall("f", (("y", "2"), ("x", "1")))
    wrong_val = ToolCall("f", (("x", "1"), ("y", "3")))
    other = ToolCall("g", (("x", "1"), ("y", "2")))
    assert exact_match([a], [permuted])
    assert exact_match([a, other], [permuted, other])
    assert not exact_match([a], [wrong_val])
    assert not exact_match([a], [other])
    assert not exact_match([a], [a, a])
    assert not exact_match([a, other], [other, a])  # call order matters
    assert exact_match([], [])


def test_retriever_metrics_micro_math():
    em, p, r, f1 = retriever_metrics([{"a"}, {"a", "b"}], [{"a"}, {"b"}])
    assert em == 0.5
    assert p == pytest.approx(2 / 3)
    assert r == pytest.approx(1.0)
    assert f1 == pytest.approx(0.8)


def test_retriever_metrics_validation():
    with pytest.raises(ConfigError):
        retriever_metrics([{"a"}], [])
    with pytest.raises(ConfigError):
        retriever_metrics([], [])


# ---------------------------------------------------------------- builders

TINY = SyntheticSpec(n_functions=6, queries_per_function=6, noise_sigma=0.1)

TINY_CONFIG = PipelineConfig(
    dim=32, retriever_hidden_dim=64, retriever_out_dim=32,
    retriever_epochs=25, retriever_batch_size=36,
    lm_embed_dim=12, lm_hidden_dim=64, lm_epochs=10,
)


def test_build_call_vocab_covers_everything():
    lib, train, _ = generate_synthetic(TINY, seed=0)
    vocab = build_call_vocab(TINY_CONFIG, lib, train)
    unk = vocab.id("<unk>")
    for rec in train:
        for call in rec.ground_truth:
            assert unk not in vocab.encode(serialize_call(call))
        assert unk not in vocab.encode(rec.query)


def test_build_call_vocab_deterministic():
    lib, train, _ = generate_synthetic(TINY, seed=0)
    a = build_call_vocab(TINY_CONFIG, lib, train)
    b = build_call_vocab(TINY_CONFIG, lib, train)
    assert a == b


def _stored_examples(config, lib, records):
    from hyfunc import EmbeddingStore, make_provider

    provider = make_provider(config.provider_config())
    store = EmbeddingStore()
    for f in lib.functions:
        store.put(f"fn:{f.name}", provider.embed_function(f, lib))
    for rec in records:
        vecs = provider.distill_soft_tokens(rec.query, rec.id, lib)
        store.put(f"q:{rec.id}", vecs[0])
        for j in range(1, len(vecs)):
            store.put(f"q:{rec.id}#{j}", vecs[j])
    vocab = build_call_vocab(config, lib, records)
    return store, vocab, build_training_examples(config, lib, records, vocab, store)


def test_build_training_examples_shape_and_masks():
    lib, train, _ = generate_synthetic(TINY, seed=0)
    store, vocab, examples = _stored_examples(TINY_CONFIG, lib, train[:8])
    assert [ex.example_id for ex in examples] == [f"{r.id}#0" for r in train[:8]]
    close = vocab.id("</param>")
    for ex, rec in zip(examples, train[:8]):
        assert len(ex.mask) == len(ex.target_ids)
        assert ex.soft_tokens.shape == (TINY_CONFIG.k, TINY_CONFIG.dim)
        # masked positions are exactly the value words plus each close marker
        m = len(rec.ground_truth[0].arguments)
        assert sum(ex.mask) == 2 * m  # single-word values in this corpus
        closes = [i for i, t in enumerate(ex.target_ids) if t == close]
        assert all(ex.mask[i] == 1 for i in closes)


def test_build_training_examples_chains_multi_call_context():
    lib, train, _ = generate_synthetic(TINY, seed=0)
    one, two = train[0].ground_truth[0], train[1].ground_truth[0]
    rec = DatasetRecord("multi:0", train[0].query,
                        tuple(f.name for f in lib.functions), (one, two))
    store, vocab, examples = _stored_examples(TINY_CONFIG, lib, [rec])
    assert [ex.example_id for ex in examples] == ["multi:0#0", "multi:0#1"]
    first, second = examples
    expected = (list(first.context_ids) + vocab.encode(serialize_call(one))
                + [vocab.id(",")])
    assert list(second.context_ids) == expected


def test_build_training_examples_with_extra_soft_tokens():
    config = PipelineConfig(dim=32, k=3)
    lib, train, _ = generate_synthetic(TINY, seed=0)
    store, vocab, examples = _stored_examples(config, lib, train[:2])
    assert examples[0].soft_tokens.shape == (3, 32)


# ---------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def tiny_artifacts():
    lib, train, test = generate_synthetic(TINY, seed=0)
    artifacts = offline_prepare(TINY_CONFIG, lib, train)
    return artifacts, lib, train, test


def test_offline_prepare_requires_data():
    lib, train, _ = generate_synthetic(TINY, seed=0)
    with pytest.raises(ConfigError):
        offline_prepare(TINY_CONFIG, lib, [])
    gutted = [DatasetRecord(r.id, r.query, r.candidate_functions, ()) for r in train]
    with pytest.raises(ConfigError):
        offline_prepare(TINY_CONFIG, lib, gutted)


def test_artifacts_save_load_round_trip(tiny_artifacts, tmp_path):
    artifacts, lib, train, test = tiny_artifacts
    out = tmp_path / "artifacts"
    artifacts.save(out)
    expected_files = {"library.json", "vocab.json", "store.jsonl",
                      "retriever.bin", "lms.bin", "config.json"}
    assert {p.name for p in out.iterdir()} == expected_files

    loaded = Artifacts.load(out)
    rec = test[0]
    a = infer(artifacts, rec.query, rec.id)
    b = infer(loaded, rec.query, rec.id)
    assert a.combined_text == b.combined_text
    assert [t.final_text for t in a.traces] == [t.final_text for t in b.traces]


def test_artifacts_load_missing_dir(tmp_path):
    with pytest.raises(ConfigError):
        Artifacts.load(tmp_path / "nope")


def test_infer_shape_and_context_accounting(tiny_artifacts):
    artifacts, lib, train, test = tiny_artifacts
    rec = test[0]
    result = infer(artifacts, rec.query, rec.id)
    assert result.combined_text.startswith("[") and result.combined_text.endswith("]")
    assert len(result.calls) == len(result.traces) == len(result.retrieval.selected)
    prompt = load_prompt_template("lms_generate")
    base = artifacts.vocab.encode(render_context(
        prompt, lib.subset(list(result.retrieval.selected)), rec.query))
    assert result.context_tokens == len(base) + artifacts.config.k


def test_infer_is_deterministic(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    rec = test[1]
    a = infer(artifacts, rec.query, rec.id)
    b = infer(artifacts, rec.query, rec.id)
    assert a.combined_text == b.combined_text


def test_evaluate_thread_fanout_matches_serial(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    serial = evaluate(artifacts, test[:8], jobs=1)
    fanned = evaluate(artifacts, test[:8], jobs=2)
    assert serial.to_json() == fanned.to_json()


def test_evaluate_token_accounting_matches_traces(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    records = test[:6]
    report = evaluate(artifacts, records)
    vocab = artifacts.vocab

    injected = generated = control = forced = 0
    for rec in records:
        result = infer(artifacts, rec.query, rec.id)
        for trace in result.traces:
            forced += trace.forced_closes
            for e in trace.events:
                if vocab.is_control(e.token_id):
                    control += 1
                elif e.origin == "injected":
                    injected += 1
                else:
                    generated += 1
    assert report.tokens["injected"] == injected
    assert report.tokens["generated"] == generated + forced
    assert report.tokens["control"] == control
    assert report.tokens["forced_closes"] == forced
    assert report.n_records == len(records)


def test_evaluate_baseline_and_stages(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    report = evaluate(artifacts, test[:6], include_baseline=True)
    assert report.baseline_call_em is not None
    assert 0.0 <= report.baseline_call_em <= 1.0
    stages = [s.stage for s in report.redundancy]
    assert stages == ["Context Processing", "Full-Sequence Generation",
                      "Syntactic Generation"]
    assert report.redundancy[1].tokens_eliminated == report.tokens["generated"]
    assert report.redundancy[2].tokens_eliminated == report.tokens["injected"]


def test_evaluate_validation(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    with pytest.raises(ConfigError):
        evaluate(artifacts, [])
    with pytest.raises(ConfigError):
        evaluate(artifacts, test[:2], jobs=0)


def test_eval_report_json_round_trip(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    report = evaluate(artifacts, test[:4], include_baseline=True)
    again = EvalReport.from_json(report.to_json())
    assert again == report
    assert all(isinstance(s, StageReport) for s in again.redundancy)


def test_render_report_table(tiny_artifacts):
    artifacts, _, _, test = tiny_artifacts
    report = evaluate(artifacts, test[:4], include_baseline=True)
    table = render_report_table(report)
    assert "call exact match" in table
    assert "baseline call EM" in table
    assert "Context Processing" in table
    assert "dynamic template injection" in table
    assert "/record" in table


# ---------------------------------------------------------------- config

def test_pipeline_config_json_round_trip():
    cfg = PipelineConfig(dim=48, k=2, lm_epochs=3, endpoint="http://x")
    again = PipelineConfig.from_json(cfg.to_json())
    assert again == cfg


def test_pipeline_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        PipelineConfig.from_json('{"dim": 8, "warp_factor": 9}')


def test_pipeline_config_subconfigs():
    cfg = PipelineConfig(backend="mock", dim=16, k=2, sigma=0.1,
                         max_value_tokens=5, max_calls=2)
    pc = cfg.provider_config()
    assert (pc.backend, pc.dim, pc.k, pc.sigma) == ("mock", 16, 2, 0.1)
    dc = cfg.decode_config()
    assert (dc.max_value_tokens, dc.max_calls) == (5, 2)
