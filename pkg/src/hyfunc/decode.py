"""Template-driven decoding: inject what is fixed, generate what is not.

The driver walks a template's segments in two alternating modes. Literal
segments (and each opening ``<param>`` marker) are *injected*: appended to
the generator's context without asking it to predict anything. Inside a slot
the generator runs free, one ``next()`` at a time, until it emits
``</param>`` or hits the per-slot token budget, at which point the driver
force-injects the close and flags the span as truncated.

Every token the generator returns and the driver keeps is appended back, so
the generator's visible context is always exactly what the driver has woven
together (the driver is the single writer). Natural closes count as
generated events; literals, markers, and forced closes count as injected.

The output text is assembled from the template's own token strings plus the
decoded value tokens (control ids dropped), which is why
``template.validate_output`` accepts it no matter how the generator behaves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

from .errors import ConfigError, GeneratorError, HyfuncError
from .template import DynamicTemplate, Literal
from .tokenizer import PARAM_CLOSE_ID, PARAM_OPEN_ID, Vocab, detokenize


class GeneratorContract(Protocol):
    """What the decoder needs from a generator session.

    A session starts with its continuous prefix and context already in
    place. ``append`` extends the visible context; ``next`` predicts the
    token following everything appended so far without mutating anything.
    """

    def append(self, ids: list[int]) -> None: ...

    def next(self) -> int: ...


@dataclass(frozen=True)
class DecodeConfig:
    max_value_tokens: int = 32
    max_calls: int = 8

    def __post_init__(self):
        if self.max_value_tokens < 1 or self.max_calls < 1:
            raise ConfigError("max_value_tokens and max_calls must be >= 1")


@dataclass(frozen=True)
class DecodeEvent:
    token_id: int
    origin: str  # "injected" | "generated"


@dataclass(frozen=True)
class ValueSpan:
    param_name: str
    token_ids: tuple[int, ...]
    truncated: bool


@dataclass(frozen=True)
class DecodeTrace:
    function_name: str
    events: tuple[DecodeEvent, ...]
    spans: tuple[ValueSpan, ...]
    final_text: str

    @property
    def injected_ids(self) -> list[int]:
        return [e.token_id for e in self.events if e.origin == "injected"]

    @property
    def generated_ids(self) -> list[int]:
        return [e.token_id for e in self.events if e.origin == "generated"]

    @property
    def forced_closes(self) -> int:
        return sum(1 for s in self.spans if s.truncated)


def _append(gen, ids: list[int]) -> None:
    try:
        gen.append(ids)
    except Exception as exc:
        raise GeneratorError(f"generator append failed: {exc}") from exc


def _next(gen) -> int:
    try:
        tok = gen.next()
    except Exception as exc:
        raise GeneratorError(f"generator next failed: {exc}") from exc
    if not isinstance(tok, int) or isinstance(tok, bool):
        raise GeneratorError(f"generator returned {tok!r} instead of a token id")
    return tok


def run_dynamic_templating(gen: GeneratorContract, template: DynamicTemplate,
                           vocab: Vocab, cfg: DecodeConfig | None = None) -> DecodeTrace:
    """Decode one call; see the module docstring for the two-mode protocol."""
    cfg = cfg or DecodeConfig()
    events: list[DecodeEvent] = []
    spans: list[ValueSpan] = []
    text_tokens: list[str] = []
    for seg in template.segments:
        if isinstance(seg, Literal):
            ids = [vocab.id(t) for t in seg.tokens]
            _append(gen, ids)
            events.extend(DecodeEvent(i, "injected") for i in ids)
            text_tokens.extend(seg.tokens)
            continue
        _append(gen, [PARAM_OPEN_ID])
        events.append(DecodeEvent(PARAM_OPEN_ID, "injected"))
        value_ids: list[int] = []
        truncated = False
        while True:
            if len(value_ids) >= cfg.max_value_tokens:
                _append(gen, [PARAM_CLOSE_ID])
                events.append(DecodeEvent(PARAM_CLOSE_ID, "injected"))
                truncated = True
                break
            tok = _next(gen)
            _append(gen, [tok])
            events.append(DecodeEvent(tok, "generated"))
            if tok == PARAM_CLOSE_ID:
                break
            value_ids.append(tok)
        spans.append(ValueSpan(seg.param_name, tuple(value_ids), truncated))
        text_tokens.extend(
            vocab.token(i) for i in value_ids if not vocab.is_control(i))
    return DecodeTrace(template.function_name, tuple(events), tuple(spans),
                       detokenize(text_tokens))


def context_accounting(trace: DecodeTrace) -> tuple[int, int, int]:
    """(injected, generated, appended_without_prediction) event counts.

    The two origins partition the event list, and every injected token was
    appended without costing a prediction, so the third count equals the
    first.
    """
    injected = len(trace.injected_ids)
    generated = len(trace.generated_ids)
    return injected, generated, injected


def run_calls(gen_factory: Callable[[list[str]], GeneratorContract],
              templates: list[DynamicTemplate], vocab: Vocab,
              cfg: DecodeConfig | None = None) -> tuple[str, list[DecodeTrace]]:
    """Decode one call per template, feeding earlier calls to later sessions.

    ``gen_factory`` receives the list of already-decoded call texts and must
    return a fresh session whose context includes them. The combined text is
    rendered ``[call1, call2, ...]``.
    """
    cfg = cfg or DecodeConfig()
    if not templates:
        raise ConfigError("run_calls needs at least one template")
    if len(templates) > cfg.max_calls:
        raise ConfigError(f"{len(templates)} templates exceed max_calls={cfg.max_calls}")
    traces: list[DecodeTrace] = []
    texts: list[str] = []
    for template in templates:
        try:
            gen = gen_factory(list(texts))
        except HyfuncError:
            raise
        except Exception as exc:
            raise GeneratorError(f"generator factory failed: {exc}") from exc
        trace = run_dynamic_templating(gen, template, vocab, cfg)
        traces.append(trace)
        texts.append(trace.final_text)
    return "[" + ", ".join(texts) + "]", traces
