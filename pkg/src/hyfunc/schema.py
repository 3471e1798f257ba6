"""Function-library and dataset schemas, call serialization, prompt rendering.

File formats
------------
Function library: a JSON array of objects::

    {"name": "get_weather",
     "description": "Look up current weather",
     "parameters": [
        {"name": "location", "type": "string", "description": "...",
         "required": true},
        {"name": "units", "type": "enum", "enum_values": ["C", "F"],
         "required": false}]}

Dataset: JSON lines, one record per line::

    {"id": "r1", "query": "...", "candidate_functions": ["get_weather"],
     "ground_truth": [{"name": "get_weather",
                       "arguments": {"location": "\"Palo Alto\""}}]}

Argument values are stored as literal strings, quotes included, exactly as
they appear in the rendered call text. ``candidate_functions`` may be
omitted, in which case the whole library is the candidate set.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import ParseError, SchemaError, TemplateError

TYPE_TAGS = ("string", "integer", "number", "boolean", "array", "object", "enum")

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")
_PARAM_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

PROMPT_KINDS = ("lml_distill", "lms_generate")
# placeholders each prompt kind must substitute
_PLACEHOLDERS = {
    "lml_distill": ("functions", "question"),
    "lms_generate": ("functions", "query", "response"),
}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type_tag: str
    description: str = ""
    required: bool = True
    enum_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    description: str
    params: tuple[ParamSpec, ...]

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise SchemaError(f"function {self.name!r} has no parameter {name!r}")


@dataclass(frozen=True)
class FunctionLibrary:
    functions: tuple[FunctionSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {f.name: f for f in self.functions})

    def __len__(self) -> int:
        return len(self.functions)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> FunctionSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown function {name!r}") from None

    def index_of(self, name: str) -> int:
        for i, f in enumerate(self.functions):
            if f.name == name:
                return i
        raise SchemaError(f"unknown function {name!r}")

    def subset(self, names: list[str]) -> "FunctionLibrary":
        """Sub-library in the given order; names must resolve."""
        return FunctionLibrary(tuple(self.get(n) for n in names))


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: tuple[tuple[str, str], ...]  # ordered (param, literal value)

    def value_of(self, param: str) -> str | None:
        for k, v in self.arguments:
            if k == param:
                return v
        return None

    def as_dict(self) -> dict[str, str]:
        return dict(self.arguments)


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    query: str
    candidate_functions: tuple[str, ...]
    ground_truth: tuple[ToolCall, ...]


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    body: str = field(repr=False)


def _parse_param(obj: dict, fn_name: str) -> ParamSpec:
    if not isinstance(obj, dict):
        raise SchemaError(f"function {fn_name!r}: parameter entries must be objects")
    name = obj.get("name")
    if not isinstance(name, str) or not _PARAM_RE.match(name):
        raise SchemaError(f"function {fn_name!r}: bad parameter name {name!r}")
    type_tag = obj.get("type")
    if type_tag not in TYPE_TAGS:
        raise SchemaError(
            f"function {fn_name!r}, parameter {name!r}: unknown type {type_tag!r} "
            f"(expected one of {TYPE_TAGS})"
        )
    enum_values = obj.get("enum_values", [])
    if type_tag == "enum":
        if not enum_values or not all(isinstance(v, str) for v in enum_values):
            raise SchemaError(
                f"function {fn_name!r}, parameter {name!r}: enum needs non-empty "
                "string enum_values"
            )
    elif enum_values:
        raise SchemaError(
            f"function {fn_name!r}, parameter {name!r}: enum_values only valid for enum type"
        )
    required = obj.get("required", True)
    if not isinstance(required, bool):
        raise SchemaError(f"function {fn_name!r}, parameter {name!r}: required must be boolean")
    description = obj.get("description", "")
    if not isinstance(description, str):
        raise SchemaError(f"function {fn_name!r}, parameter {name!r}: description must be a string")
    return ParamSpec(name, type_tag, description, required, tuple(enum_values))


def parse_function_library(text: str) -> FunctionLibrary:
    """Parse a JSON function library; see module docstring for the format."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"library is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(data, list):
        raise SchemaError("library must be a JSON array of function objects")
    if not data:
        raise SchemaError("library must contain at least one function")
    functions = []
    seen: set[str] = set()
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise SchemaError(f"library entry {i} is not an object")
        name = obj.get("name")
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise SchemaError(f"library entry {i}: bad function name {name!r}")
        if name in seen:
            raise SchemaError(f"duplicate function name {name!r}")
        seen.add(name)
        description = obj.get("description", "")
        if not isinstance(description, str):
            raise SchemaError(f"function {name!r}: description must be a string")
        raw_params = obj.get("parameters", [])
        if not isinstance(raw_params, list):
            raise SchemaError(f"function {name!r}: parameters must be an array")
        params = [_parse_param(p, name) for p in raw_params]
        pnames = [p.name for p in params]
        if len(set(pnames)) != len(pnames):
            raise SchemaError(f"function {name!r}: duplicate parameter names")
        functions.append(FunctionSpec(name, description, tuple(params)))
    return FunctionLibrary(tuple(functions))


def _param_to_obj(p: ParamSpec) -> dict:
    obj: dict = {"name": p.name, "type": p.type_tag}
    if p.description:
        obj["description"] = p.description
    obj["required"] = p.required
    if p.enum_values:
        obj["enum_values"] = list(p.enum_values)
    return obj


def _function_to_obj(f: FunctionSpec) -> dict:
    return {
        "name": f.name,
        "description": f.description,
        "parameters": [_param_to_obj(p) for p in f.params],
    }


def serialize_library(lib: FunctionLibrary) -> str:
    """Canonical JSON text; parse_function_library inverts it exactly."""
    return json.dumps([_function_to_obj(f) for f in lib.functions], ensure_ascii=False, indent=2)


def serialize_function(spec: FunctionSpec) -> str:
    """One function as a single JSON line (used in prompts and token counts)."""
    return json.dumps(_function_to_obj(spec), ensure_ascii=False)


def parse_dataset(text: str, lib: FunctionLibrary) -> list[DatasetRecord]:
    """Parse JSONL dataset records and resolve every name against the library."""
    records: list[DatasetRecord] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"dataset record is not valid JSON: {exc.msg}",
                             line=lineno, offset=exc.pos) from exc
        if not isinstance(obj, dict):
            raise SchemaError(f"dataset line {lineno}: record must be an object")
        rid = obj.get("id")
        if not isinstance(rid, str) or not rid:
            raise SchemaError(f"dataset line {lineno}: missing or empty id")
        if rid in seen_ids:
            raise SchemaError(f"dataset line {lineno}: duplicate record id {rid!r}")
        seen_ids.add(rid)
        query = obj.get("query")
        if not isinstance(query, str) or not query:
            raise SchemaError(f"record {rid!r}: missing or empty query")
        candidates = obj.get("candidate_functions")
        if candidates is None:
            candidates = [f.name for f in lib.functions]
        if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
            raise SchemaError(f"record {rid!r}: candidate_functions must be an array of names")
        for c in candidates:
            if c not in lib:
                raise SchemaError(f"record {rid!r}: unknown candidate function {c!r}")
        raw_calls = obj.get("ground_truth", [])
        if not isinstance(raw_calls, list):
            raise SchemaError(f"record {rid!r}: ground_truth must be an array")
        calls = []
        for call_obj in raw_calls:
            if not isinstance(call_obj, dict) or not isinstance(call_obj.get("name"), str):
                raise SchemaError(f"record {rid!r}: ground_truth entries need a name")
            cname = call_obj["name"]
            if cname not in lib:
                raise SchemaError(f"record {rid!r}: unknown ground-truth function {cname!r}")
            spec = lib.get(cname)
            args = call_obj.get("arguments", {})
            if not isinstance(args, dict):
                raise SchemaError(f"record {rid!r}: arguments must be an object")
            pairs = []
            for k, v in args.items():
                spec.param(k)  # raises SchemaError on unknown parameter
                if not isinstance(v, str):
                    raise SchemaError(
                        f"record {rid!r}: argument {k!r} must be a literal string "
                        f"(got {type(v).__name__})"
                    )
                pairs.append((k, v))
            calls.append(ToolCall(cname, tuple(pairs)))
        records.append(DatasetRecord(rid, query, tuple(candidates), tuple(calls)))
    return records


def serialize_record(rec: DatasetRecord) -> str:
    obj = {
        "id": rec.id,
        "query": rec.query,
        "candidate_functions": list(rec.candidate_functions),
        "ground_truth": [
            {"name": c.name, "arguments": dict(c.arguments)} for c in rec.ground_truth
        ],
    }
    return json.dumps(obj, ensure_ascii=False)


def serialize_call(call: ToolCall) -> str:
    """Canonical single-call text: ``name(p1=v1, p2=v2)``."""
    args = ", ".join(f"{k}={v}" for k, v in call.arguments)
    return f"{call.name}({args})"


def serialize_calls(calls: list[ToolCall]) -> str:
    """Bracketed multi-call text: ``[call1, call2]``."""
    return "[" + ", ".join(serialize_call(c) for c in calls) + "]"


def load_prompt_template(kind: str) -> PromptTemplate:
    if kind not in PROMPT_KINDS:
        raise TemplateError(f"unknown prompt kind {kind!r} (expected one of {PROMPT_KINDS})")
    body = resources.files("hyfunc.assets").joinpath(f"{kind}.txt").read_text(encoding="utf-8")
    for ph in _PLACEHOLDERS[kind]:
        if "{" + ph + "}" not in body:
            raise TemplateError(f"prompt asset {kind!r} lost its {{{ph}}} placeholder")
    return PromptTemplate(kind, body)


def _functions_json(lib: FunctionLibrary) -> str:
    return "\n".join(serialize_function(f) for f in lib.functions)


def render_prompt(template: PromptTemplate, lib: FunctionLibrary, query: str,
                  response: str | None = None) -> str:
    """Substitute placeholders; the query appears verbatim exactly once."""
    values = {"functions": _functions_json(lib)}
    if template.kind == "lml_distill":
        values["question"] = query
    else:
        values["query"] = query
        if response is None:
            raise TemplateError(f"prompt kind {template.kind!r} requires a response value")
        values["response"] = response
    try:
        return template.body.format_map(values)
    except (KeyError, IndexError, ValueError) as exc:
        raise TemplateError(f"prompt asset {template.kind!r} failed to render: {exc}") from exc


def render_context(template: PromptTemplate, lib: FunctionLibrary, query: str) -> str:
    """Rendered prompt up to (excluding) the response slot.

    This is the generation context: it ends right where the call text starts.
    """
    if template.kind != "lms_generate":
        raise TemplateError(f"prompt kind {template.kind!r} has no response slot")
    head = template.body.split("{response}", 1)[0]
    try:
        return head.format_map({"functions": _functions_json(lib), "query": query})
    except (KeyError, IndexError, ValueError) as exc:
        raise TemplateError(f"prompt asset {template.kind!r} failed to render: {exc}") from exc
