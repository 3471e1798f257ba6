"""Shared builders for the test suite. No global fixtures with state."""

from __future__ import annotations

import numpy as np
import pytest

from hyfunc import (
    FunctionLibrary,
    FunctionSpec,
    ParamSpec,
    Vocab,
    build_vocab,
)
from hyfunc.tokenizer import PARAM_CLOSE_ID


def weather_spec() -> FunctionSpec:
    return FunctionSpec(
        "get_weather",
        "Look up current weather conditions",
        (
            ParamSpec("location", "string", "city name"),
            ParamSpec("time", "string", "time of day"),
        ),
    )


def email_spec() -> FunctionSpec:
    return FunctionSpec(
        "send_email",
        "Send a short email",
        (
            ParamSpec("to", "string", "recipient"),
            ParamSpec("cc", "string", "carbon copy", required=False),
        ),
    )


def ping_spec() -> FunctionSpec:
    return FunctionSpec("ping", "No-argument health check", ())


def small_lib() -> FunctionLibrary:
    return FunctionLibrary((weather_spec(), email_spec(), ping_spec()))


def vocab_over(*texts: str) -> Vocab:
    return build_vocab(list(texts))


class ScriptedGenerator:
    """Replays a fixed list of token ids and records every append."""

    def __init__(self, script: list[int]):
        self.script = list(script)
        self.cursor = 0
        self.appended: list[int] = []

    def append(self, ids: list[int]) -> None:
        self.appended.extend(ids)

    def next(self) -> int:
        if self.cursor >= len(self.script):
            raise AssertionError("script exhausted")
        tok = self.script[self.cursor]
        self.cursor += 1
        return tok


class UniformRandomGenerator:
    """Emits uniformly random ids over the whole vocab, control ids included."""

    def __init__(self, vocab_size: int, seed: int):
        self.vocab_size = vocab_size
        self.rng = np.random.default_rng(seed)

    def append(self, ids: list[int]) -> None:
        pass

    def next(self) -> int:
        return int(self.rng.integers(self.vocab_size))


class NeverClosingGenerator:
    """Always emits the same ordinary token; relies on the budget guard."""

    def __init__(self, token_id: int):
        self.token_id = token_id

    def append(self, ids: list[int]) -> None:
        pass

    def next(self) -> int:
        return self.token_id


class InstantClosingGenerator:
    """Closes every slot immediately, producing empty values."""

    def append(self, ids: list[int]) -> None:
        pass

    def next(self) -> int:
        return PARAM_CLOSE_ID


@pytest.fixture
def rng():
    return np.random.default_rng(0)
