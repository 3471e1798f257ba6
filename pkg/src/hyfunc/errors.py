"""Exception types shared across the package.

Everything raised on purpose derives from HyfuncError so callers (and the
CLI exit-code mapping) can distinguish our failures from genuine bugs.
"""

from __future__ import annotations


class HyfuncError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(HyfuncError):
    """Malformed input text (JSON, JSONL, store files, checkpoints)."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"offset {offset}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class SchemaError(HyfuncError):
    """Structurally valid input that violates a schema constraint."""


class TemplateError(HyfuncError):
    """Prompt or call template cannot be built or rendered."""


class VocabError(HyfuncError):
    """Token id out of range or vocabulary file is inconsistent."""


class AlignmentError(HyfuncError):
    """Target token sequence does not match the template skeleton."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class MatchError(HyfuncError):
    """Output text diverges from the template's literal anchors."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ShapeError(HyfuncError):
    """Operands have incompatible dimensions."""


class NumericsError(HyfuncError):
    """Non-finite value encountered where finite math is required."""


class DimError(HyfuncError):
    """Embedding dimensionality disagrees with the store or model."""


class EmptyInputError(HyfuncError):
    """An operation received zero rows/items where at least one is required."""


class DegenerateVectorError(HyfuncError):
    """Cosine similarity requested against a zero-norm vector."""


class DegenerateMaskError(HyfuncError):
    """Selective loss mask selects no positions."""


class MissingEmbeddingError(HyfuncError):
    """Store lookup failed for a required key."""

    def __init__(self, key: str):
        super().__init__(f"no embedding stored under key {key!r}")
        self.key = key


class ProviderError(HyfuncError):
    """Embedding backend failed (HTTP error, malformed response, timeout)."""


class GeneratorError(HyfuncError):
    """A generator raised while the decoder was driving it."""


class ConfigError(HyfuncError):
    """Invalid configuration or precondition on a pipeline entry point."""
