"""hyfunc: a desk-scale function-calling cascade.

Soft-token function retrieval (dual encoder), projector-guided value
generation (tiny fixed-window LM), and dynamic-templating decoding, plus a
synthetic corpus, training loops, and an evaluation harness. Everything is
seeded and deterministic; numpy is the only numeric dependency.
"""

from .decode import (
    DecodeConfig,
    DecodeEvent,
    DecodeTrace,
    ValueSpan,
    context_accounting,
    run_calls,
    run_dynamic_templating,
)
from .embed import (
    EmbeddingStore,
    FileEmbeddingProvider,
    HttpEmbeddingProvider,
    MockEmbeddingProvider,
    ProviderConfig,
    feature_hash,
    make_provider,
    mean_pool,
)
from .errors import (
    AlignmentError,
    ConfigError,
    DegenerateMaskError,
    DegenerateVectorError,
    DimError,
    EmptyInputError,
    GeneratorError,
    HyfuncError,
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
from .lms import (
    CallGenerator,
    Projector,
    TinyLM,
    TinyLMSession,
    TrainingExample,
    generate_next,
    lm_logits,
    selective_sft_loss,
    sft_loss,
    train_lms,
)
from .nn import (
    MLP2,
    OptimConfig,
    Param,
    adamw_step,
    grad_check,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)
from .pipeline import (
    Artifacts,
    EvalReport,
    InferResult,
    PipelineConfig,
    StageReport,
    SyntheticSpec,
    build_call_vocab,
    build_training_examples,
    evaluate,
    exact_match,
    generate_synthetic,
    infer,
    infer_free_running,
    offline_prepare,
    render_report_table,
    retriever_metrics,
)
from .retriever import (
    FunctionRetriever,
    RetrievalResult,
    RetrieverModel,
    cosine,
    encode_library,
    infonce_loss,
    retrieve,
    train_retriever,
)
from .schema import (
    DatasetRecord,
    FunctionLibrary,
    FunctionSpec,
    ParamSpec,
    ToolCall,
    parse_dataset,
    parse_function_library,
    serialize_call,
    serialize_calls,
    serialize_library,
    serialize_record,
)
from .template import (
    DynamicTemplate,
    Literal,
    Slot,
    build_value_mask,
    call_to_training_sequence,
    compile_template,
    template_from_json,
    template_to_json,
    validate_output,
)
from .tokenizer import (
    BOS_ID,
    CONTROL_IDS,
    EOS_ID,
    PAD_ID,
    PARAM_CLOSE_ID,
    PARAM_OPEN_ID,
    UNK_ID,
    Vocab,
    build_vocab,
    detokenize,
    segment,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "Artifacts", "BOS_ID", "CONTROL_IDS", "CallGenerator",
    "ConfigError",
    "DatasetRecord", "DecodeConfig", "DecodeEvent", "DecodeTrace",
    "DegenerateMaskError", "DegenerateVectorError", "DimError",
    "DynamicTemplate", "EOS_ID", "EmbeddingStore", "EmptyInputError",
    "EvalReport", "FileEmbeddingProvider", "FunctionLibrary",
    "FunctionRetriever", "FunctionSpec", "GeneratorError",
    "HttpEmbeddingProvider", "HyfuncError", "InferResult", "Literal", "MLP2",
    "MatchError", "MissingEmbeddingError", "MockEmbeddingProvider",
    "NumericsError", "OptimConfig", "PAD_ID", "PARAM_CLOSE_ID",
    "PARAM_OPEN_ID", "Param", "ParamSpec", "ParseError", "PipelineConfig",
    "Projector", "ProviderConfig", "ProviderError", "RetrievalResult",
    "RetrieverModel", "SchemaError", "ShapeError", "Slot", "StageReport",
    "SyntheticSpec", "TemplateError", "TinyLM", "TinyLMSession", "ToolCall",
    "TrainingExample", "UNK_ID", "ValueSpan", "Vocab", "VocabError",
    "adamw_step", "build_call_vocab", "build_training_examples",
    "build_value_mask", "build_vocab",
    "call_to_training_sequence", "compile_template", "context_accounting",
    "cosine", "detokenize", "encode_library", "evaluate", "exact_match",
    "feature_hash", "generate_next", "generate_synthetic", "grad_check",
    "infer", "infer_free_running", "infonce_loss", "lm_logits",
    "load_checkpoint", "lr_at",
    "make_provider", "mean_pool", "offline_prepare", "parse_dataset",
    "parse_function_library", "render_report_table", "retrieve",
    "retriever_metrics", "run_calls", "run_dynamic_templating",
    "save_checkpoint", "segment", "selective_sft_loss", "serialize_call",
    "serialize_calls", "serialize_library", "serialize_record", "sft_loss",
    "template_from_json", "template_to_json", "train_lms",
    "train_retriever", "validate_output",
]
