"""Call templates with literal segments and generated value slots.

A template freezes everything about a call that is already decided once the
function is chosen: name, parentheses, parameter names, separators. Only the
value between each ``<param>``/``</param>`` marker pair is left open. A
template stores literal segments as token *strings* so it is independent of
any particular vocabulary; ids are resolved where sequences are built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import AlignmentError, MatchError, SchemaError, TemplateError
from .schema import FunctionSpec, ToolCall
from .tokenizer import (
    PARAM_CLOSE,
    PARAM_CLOSE_ID,
    PARAM_OPEN,
    PARAM_OPEN_ID,
    Vocab,
    detokenize,
    segment,
)

_MARKER_PAIR = PARAM_OPEN + PARAM_CLOSE  # "<param></param>"


@dataclass(frozen=True)
class Literal:
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class Slot:
    param_name: str


@dataclass(frozen=True)
class DynamicTemplate:
    function_name: str
    segments: tuple[Literal | Slot, ...]

    @property
    def slot_params(self) -> tuple[str, ...]:
        return tuple(s.param_name for s in self.segments if isinstance(s, Slot))

    def canonical_tokens(self) -> list[str]:
        """Token strings with each slot rendered as the marker pair."""
        out: list[str] = []
        for seg in self.segments:
            if isinstance(seg, Literal):
                out.extend(seg.tokens)
            else:
                out.extend((PARAM_OPEN, PARAM_CLOSE))
        return out

    def canonical_text(self) -> str:
        return detokenize(self.canonical_tokens())

    def anchors(self) -> list[str]:
        """Literal text pieces between slots; len == number of slots + 1."""
        return self.canonical_text().split(_MARKER_PAIR)


def compile_template(spec: FunctionSpec, include_optional: bool = False) -> DynamicTemplate:
    """Freeze a function spec into a template.

    Required parameters always get a slot; optional ones only when
    include_optional is set. Parameter order follows the spec.
    """
    params = [p for p in spec.params if p.required or include_optional]
    segments: list[Literal | Slot] = []
    pending: list[str] = segment(spec.name) + ["("]
    for i, p in enumerate(params):
        if i > 0:
            pending.append(",")
        pending.extend(segment(p.name))
        pending.append("=")
        segments.append(Literal(tuple(pending)))
        pending = []
        segments.append(Slot(p.name))
    pending.append(")")
    segments.append(Literal(tuple(pending)))
    return DynamicTemplate(spec.name, tuple(segments))


def call_to_training_sequence(template: DynamicTemplate, call: ToolCall, v: Vocab) -> list[int]:
    """Token ids of the full call with values wrapped in marker pairs."""
    if call.name != template.function_name:
        raise TemplateError(
            f"call names {call.name!r} but template is for {template.function_name!r}"
        )
    call_params = {k for k, _ in call.arguments}
    slot_params = set(template.slot_params)
    if call_params != slot_params:
        raise TemplateError(
            f"call arguments {sorted(call_params)} do not cover template slots "
            f"{sorted(slot_params)}"
        )
    ids: list[int] = []
    for seg in template.segments:
        if isinstance(seg, Literal):
            ids.extend(v.id(t) for t in seg.tokens)
        else:
            value = call.value_of(seg.param_name)
            ids.append(PARAM_OPEN_ID)
            ids.extend(v.id(t) for t in segment(value))
            ids.append(PARAM_CLOSE_ID)
    return ids


def build_value_mask(template: DynamicTemplate, target: list[int], v: Vocab) -> list[int]:
    """0/1 mask over target: 1 on value tokens and each closing marker.

    Literal tokens and opening markers get 0. The target must have been laid
    out by this template; any disagreement raises AlignmentError at the first
    offending position.
    """
    mask: list[int] = []
    pos = 0
    for seg in template.segments:
        if isinstance(seg, Literal):
            for tok in seg.tokens:
                if pos >= len(target):
                    raise AlignmentError("target ends inside a literal segment", pos)
                if target[pos] != v.id(tok):
                    raise AlignmentError(
                        f"expected literal token {tok!r} (id {v.id(tok)}), "
                        f"got id {target[pos]}", pos)
                mask.append(0)
                pos += 1
        else:
            if pos >= len(target) or target[pos] != PARAM_OPEN_ID:
                raise AlignmentError(f"expected {PARAM_OPEN} marker", pos)
            mask.append(0)
            pos += 1
            while True:
                if pos >= len(target):
                    raise AlignmentError(f"slot {seg.param_name!r} never closes", pos)
                if target[pos] == PARAM_OPEN_ID:
                    raise AlignmentError(f"nested {PARAM_OPEN} inside slot", pos)
                mask.append(1)  # value token, or the close right below
                if target[pos] == PARAM_CLOSE_ID:
                    pos += 1
                    break
                pos += 1
    if pos != len(target):
        raise AlignmentError("target continues past the template", pos)
    return mask


def validate_output(template: DynamicTemplate, output: str) -> list[str]:
    """Match output text against the template, returning slot values in order.

    Inner values are captured with the shortest-span rule (each ends at the
    first occurrence of the next literal anchor); the last value runs up to
    the final anchor matched as a suffix, so a value containing the closing
    text cannot invalidate an otherwise well-formed output. Divergence from
    the anchors raises MatchError with the first bad character offset.
    """
    anchors = template.anchors()
    head = anchors[0]
    if not output.startswith(head):
        limit = min(len(head), len(output))
        offset = next((i for i in range(limit) if output[i] != head[i]), limit)
        raise MatchError(f"output does not start with {head!r}", offset)
    if len(anchors) == 1:
        if len(output) != len(head):
            raise MatchError("trailing text after the template ends", len(head))
        return []
    pos = len(head)
    values: list[str] = []
    for anchor in anchors[1:-1]:
        idx = output.find(anchor, pos)
        if idx < 0:
            raise MatchError(f"anchor {anchor!r} not found", pos)
        values.append(output[pos:idx])
        pos = idx + len(anchor)
    tail = anchors[-1]
    end = len(output) - len(tail)
    if end < pos or not output.endswith(tail):
        raise MatchError(f"output does not end with {tail!r}", max(pos, 0))
    values.append(output[pos:end])
    return values


def template_to_json(template: DynamicTemplate) -> str:
    segs = []
    for seg in template.segments:
        if isinstance(seg, Literal):
            segs.append({"kind": "literal", "tokens": list(seg.tokens)})
        else:
            segs.append({"kind": "slot", "param": seg.param_name})
    return json.dumps({"function_name": template.function_name, "segments": segs},
                      ensure_ascii=False, indent=2)


def template_from_json(text: str) -> DynamicTemplate:
    obj = json.loads(text)
    segments: list[Literal | Slot] = []
    for seg in obj["segments"]:
        if seg["kind"] == "literal":
            segments.append(Literal(tuple(seg["tokens"])))
        elif seg["kind"] == "slot":
            segments.append(Slot(seg["param"]))
        else:
            raise SchemaError(f"unknown segment kind {seg['kind']!r}")
    return DynamicTemplate(obj["function_name"], tuple(segments))
