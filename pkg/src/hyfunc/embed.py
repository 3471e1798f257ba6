"""Embedding providers and the on-disk embedding store.

Three interchangeable backends produce function embeddings and soft-token
query embeddings:

- ``mock``: seeded feature hashing of token strings; fully offline and
  deterministic, used by the synthetic pipeline and the tests.
- ``file``: lookups in a pre-populated EmbeddingStore (keys ``fn:<name>``
  and ``q:<record-id>``, extra soft tokens under ``q:<id>#<j>``).
- ``http``: POST ``<endpoint>/embed`` with
  ``{"mode": "function"|"soft_token", "texts": [...], "k": K}`` expecting
  ``{"embeddings": [[...], ...]}``; function mode returns per-token states
  that get mean-pooled. The endpoint can come from the
  ``HYFUNC_HTTP_ENDPOINT`` environment variable.

Store files are JSON lines: ``{"key": ..., "dim": D, "values": [...]}``.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    ConfigError,
    DimError,
    EmptyInputError,
    MissingEmbeddingError,
    ParseError,
    ProviderError,
)
from .schema import FunctionLibrary, FunctionSpec, serialize_function
from .tokenizer import segment
from .validation import as_matrix, as_vector, require_finite

ENDPOINT_ENV_VAR = "HYFUNC_HTTP_ENDPOINT"
BACKENDS = ("mock", "file", "http")


class EmbeddingStore:
    """In-memory key -> vector map with a fixed dimension once non-empty."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._data: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def keys(self) -> list[str]:
        return list(self._data.keys())

    def put(self, key: str, vec) -> None:
        arr = require_finite(as_vector(vec, f"embedding {key!r}"), f"embedding {key!r}")
        if self.dim is None:
            self.dim = arr.shape[0]
        elif arr.shape[0] != self.dim:
            raise DimError(f"embedding {key!r} has dim {arr.shape[0]}, store uses {self.dim}")
        self._data[key] = arr.copy()

    def get(self, key: str) -> np.ndarray:
        try:
            return self._data[key]
        except KeyError:
            raise MissingEmbeddingError(key) from None

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, arr in self._data.items():
                fh.write(json.dumps(
                    {"key": key, "dim": int(arr.shape[0]), "values": arr.tolist()},
                    ensure_ascii=False))
                fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "EmbeddingStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"store line is not valid JSON: {exc.msg}",
                                     line=lineno, offset=exc.pos) from exc
                if not isinstance(obj, dict) or "key" not in obj or "values" not in obj:
                    raise ParseError("store line needs key/dim/values fields", line=lineno)
                values = obj["values"]
                if obj.get("dim") != len(values):
                    raise ParseError(f"store entry {obj['key']!r}: dim field disagrees "
                                     f"with values length", line=lineno)
                store.put(obj["key"], np.asarray(values, dtype=np.float64))
        return store


def feature_hash(tokens: list[str], dim: int, seed: int = 0) -> np.ndarray:
    """Signed token-count hashing into ``dim`` buckets, unit-normalized.

    Each token string is hashed (keyed blake2b, so stable across processes)
    to a bucket index and a sign; counts accumulate and the result is scaled
    to unit norm. An empty token list embeds to the zero vector.
    """
    if dim < 1:
        raise DimError(f"dim must be >= 1, got {dim}")
    key = int(seed).to_bytes(8, "little", signed=True)
    acc = np.zeros(dim)
    for tok in tokens:
        digest = hashlib.blake2b(tok.encode("utf-8"), key=key, digest_size=16).digest()
        idx = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] & 1 else -1.0
        acc[idx] += sign
    norm = float(np.linalg.norm(acc))
    return acc / norm if norm > 0.0 else acc


def mean_pool(states) -> np.ndarray:
    """Column-wise mean over a k x d matrix of per-token states."""
    mat = as_matrix(states, "states")
    if mat.shape[0] == 0:
        raise EmptyInputError("mean_pool needs at least one row")
    return mat.mean(axis=0)


def _function_text(spec: FunctionSpec) -> str:
    return f"{spec.name} {spec.description}"


class MockEmbeddingProvider:
    """Deterministic offline backend built on feature hashing.

    Soft-token vectors beyond the first are seeded unit-norm perturbations of
    the first, so they stay close (high pairwise cosine) but distinct.
    """

    def __init__(self, dim: int, k: int = 1, seed: int = 0, sigma: float = 0.05):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        self.dim = dim
        self.k = k
        self.seed = seed
        self.sigma = sigma

    def embed_function(self, spec: FunctionSpec,
                       lib: FunctionLibrary | None = None) -> np.ndarray:
        return feature_hash(segment(_function_text(spec)), self.dim, self.seed)

    def distill_soft_tokens(self, query: str, record_id: str | None = None,
                            lib: FunctionLibrary | None = None) -> list[np.ndarray]:
        base = feature_hash(segment(query), self.dim, self.seed)
        out = [base]
        for j in range(1, self.k):
            material = f"{self.seed}|{j}|{query}".encode("utf-8")
            digest = hashlib.blake2b(material, digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = base + self.sigma * rng.standard_normal(self.dim)
            norm = float(np.linalg.norm(vec))
            out.append(vec / norm if norm > 0.0 else vec)
        return out


class FileEmbeddingProvider:
    """Reads pre-computed embeddings from an EmbeddingStore."""

    def __init__(self, store: EmbeddingStore, k: int = 1):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        self.store = store
        self.k = k

    def embed_function(self, spec: FunctionSpec,
                       lib: FunctionLibrary | None = None) -> np.ndarray:
        return self.store.get(f"fn:{spec.name}")

    def distill_soft_tokens(self, query: str, record_id: str | None = None,
                            lib: FunctionLibrary | None = None) -> list[np.ndarray]:
        if record_id is None:
            raise ConfigError("file backend needs a record id to look up soft tokens")
        out = [self.store.get(f"q:{record_id}")]
        for j in range(1, self.k):
            out.append(self.store.get(f"q:{record_id}#{j}"))
        return out


class HttpEmbeddingProvider:
    """Talks to an embedding service; results are cached after first fetch."""

    def __init__(self, endpoint: str, k: int = 1, timeout: float = 30.0,
                 max_inflight: int = 4):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        if max_inflight < 1:
            raise ConfigError(f"max_inflight must be >= 1, got {max_inflight}")
        self.endpoint = endpoint.rstrip("/")
        self.k = k
        self.timeout = timeout
        self._sem = threading.Semaphore(max_inflight)
        self._cache: dict[tuple, list[np.ndarray]] = {}
        self._cache_lock = threading.Lock()

    def _post(self, mode: str, text: str, k: int) -> list[np.ndarray]:
        cache_key = (mode, text, k)
        with self._cache_lock:
            if cache_key in self._cache:
                return self._cache[cache_key]
        payload = {"mode": mode, "texts": [text], "k": k}
        try:
            with self._sem:
                resp = requests.post(f"{self.endpoint}/embed", json=payload,
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderError(f"embed request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderError(f"embed request returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProviderError("embed response is not valid JSON") from exc
        rows = data.get("embeddings") if isinstance(data, dict) else None
        if not isinstance(rows, list) or not rows:
            raise ProviderError("embed response missing a non-empty embeddings array")
        try:
            vecs = [require_finite(as_vector(r, "embedding"), "embedding") for r in rows]
        except Exception as exc:
            raise ProviderError(f"embed response rows are not numeric vectors: {exc}") from exc
        if len({v.shape[0] for v in vecs}) != 1:
            raise ProviderError("embed response rows have inconsistent dimensions")
        with self._cache_lock:
            self._cache[cache_key] = vecs
        return vecs

    def embed_function(self, spec: FunctionSpec,
                       lib: FunctionLibrary | None = None) -> np.ndarray:
        states = self._post("function", serialize_function(spec), self.k)
        return mean_pool(np.stack(states))

    def distill_soft_tokens(self, query: str, record_id: str | None = None,
                            lib: FunctionLibrary | None = None) -> list[np.ndarray]:
        vecs = self._post("soft_token", query, self.k)
        if len(vecs) != self.k:
            raise ProviderError(f"asked for {self.k} soft tokens, got {len(vecs)}")
        return vecs


@dataclass(frozen=True)
class ProviderConfig:
    backend: str = "mock"
    dim: int = 64
    k: int = 1
    seed: int = 0
    sigma: float = 0.05
    endpoint: str | None = None
    timeout: float = 30.0
    store_path: str | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r} (expected one of {BACKENDS})")


def make_provider(cfg: ProviderConfig, store: EmbeddingStore | None = None):
    if cfg.backend == "mock":
        return MockEmbeddingProvider(cfg.dim, cfg.k, cfg.seed, cfg.sigma)
    if cfg.backend == "file":
        if store is None:
            if cfg.store_path is None:
                raise ConfigError("file backend needs a store or store_path")
            store = EmbeddingStore.load(cfg.store_path)
        return FileEmbeddingProvider(store, cfg.k)
    # the environment variable wins over flag/config when both are set
    endpoint = os.environ.get(ENDPOINT_ENV_VAR) or cfg.endpoint
    if not endpoint:
        raise ConfigError(
            f"http backend needs an endpoint (flag/config or {ENDPOINT_ENV_VAR})")
    return HttpEmbeddingProvider(endpoint, cfg.k, cfg.timeout)
