import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from hyfunc import (
    ConfigError,
    DimError,
    EmbeddingStore,
    EmptyInputError,
    FileEmbeddingProvider,
    HttpEmbeddingProvider,
    MissingEmbeddingError,
    MockEmbeddingProvider,
    ParseError,
    ProviderConfig,
    ProviderError,
    feature_hash,
    make_provider,
    mean_pool,
    segment,
)
from hyfunc.embed import ENDPOINT_ENV_VAR

from conftest import weather_spec


# ---------------------------------------------------------------- hashing

def test_feature_hash_deterministic_and_unit_norm():
    a = feature_hash(["get", "weather"], 32)
    b = feature_hash(["get", "weather"], 32)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)


def test_feature_hash_empty_is_zero():
    np.testing.assert_array_equal(feature_hash([], 8), np.zeros(8))


def test_feature_hash_dim_error():
    with pytest.raises(DimError):
        feature_hash(["a"], 0)


def test_feature_hash_seed_changes_embedding():
    a = feature_hash(["weather"], 64, seed=0)
    b = feature_hash(["weather"], 64, seed=1)
    assert not np.array_equal(a, b)


def test_feature_hash_count_scaling_keeps_direction():
    # tripled counts rescale to the same unit vector
    once = feature_hash(["weather"], 64)
    thrice = feature_hash(["weather"] * 3, 64)
    assert float(once @ thrice) == pytest.approx(1.0, abs=1e-12)


def test_mean_pool_golden():
    pooled = mean_pool(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(pooled, [2.0, 3.0])


def test_mean_pool_empty_rejected():
    with pytest.raises(EmptyInputError):
        mean_pool(np.zeros((0, 4)))


# ---------------------------------------------------------------- store

def test_store_put_get_and_dim_lock():
    store = EmbeddingStore()
    store.put("a", [1.0, 2.0, 3.0])
    assert store.dim == 3
    np.testing.assert_array_equal(store.get("a"), [1.0, 2.0, 3.0])
    assert "a" in store and "b" not in store
    assert len(store) == 1
    with pytest.raises(DimError):
        store.put("b", [1.0, 2.0])
    with pytest.raises(MissingEmbeddingError):
        store.get("missing")


def test_store_save_load_exact(tmp_path):
    rng = np.random.default_rng(7)
    store = EmbeddingStore()
    store.put("fn:x", rng.normal(size=5))
    store.put("q:r1", rng.normal(size=5) / 3.0)
    path = tmp_path / "store.jsonl"
    store.save(str(path))
    loaded = EmbeddingStore.load(str(path))
    assert loaded.dim == 5
    assert sorted(loaded.keys()) == sorted(store.keys())
    for key in store.keys():
        # float64 survives the text round trip bit for bit
        np.testing.assert_array_equal(loaded.get(key), store.get(key))


def test_store_load_reports_bad_line(tmp_path):
    path = tmp_path / "store.jsonl"
    good = json.dumps({"key": "a", "dim": 2, "values": [0.0, 1.0]})
    path.write_text(good + "\n{broken\n")
    with pytest.raises(ParseError) as err:
        EmbeddingStore.load(str(path))
    assert "line 2" in str(err.value)


def test_store_load_rejects_dim_mismatch(tmp_path):
    path = tmp_path / "store.jsonl"
    path.write_text(json.dumps({"key": "a", "dim": 3, "values": [0.0, 1.0]}) + "\n")
    with pytest.raises(ParseError):
        EmbeddingStore.load(str(path))


def test_store_load_rejects_missing_fields(tmp_path):
    path = tmp_path / "store.jsonl"
    path.write_text(json.dumps({"key": "a", "values": [0.0]}) + "\n")
    with pytest.raises(ParseError):
        EmbeddingStore.load(str(path))


# ---------------------------------------------------------------- mock backend

def test_mock_function_embedding_is_hash_of_name_and_description():
    spec = weather_spec()
    provider = MockEmbeddingProvider(dim=32, seed=3)
    expected = feature_hash(segment(f"{spec.name} {spec.description}"), 32, 3)
    np.testing.assert_array_equal(provider.embed_function(spec), expected)


def test_mock_soft_tokens_shape_and_anchor():
    provider = MockEmbeddingProvider(dim=64, k=3, seed=0, sigma=0.05)
    vecs = provider.distill_soft_tokens("check the weather in berlin")
    assert len(vecs) == 3
    base = feature_hash(segment("check the weather in berlin"), 64, 0)
    np.testing.assert_array_equal(vecs[0], base)
    for v in vecs:
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    # perturbations stay close to the anchor but are not copies
    for v in vecs[1:]:
        assert 0.9 < float(base @ v) < 1.0


def test_mock_soft_tokens_deterministic_across_instances():
    a = MockEmbeddingProvider(dim=16, k=2, seed=5).distill_soft_tokens("q text")
    b = MockEmbeddingProvider(dim=16, k=2, seed=5).distill_soft_tokens("q text")
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_mock_rejects_bad_k():
    with pytest.raises(ConfigError):
        MockEmbeddingProvider(dim=8, k=0)


# ---------------------------------------------------------------- file backend

def _file_store():
    store = EmbeddingStore()
    store.put("fn:get_weather", [1.0, 0.0])
    store.put("q:r1", [0.5, 0.5])
    store.put("q:r1#1", [0.0, 1.0])
    return store


def test_file_provider_lookups():
    provider = FileEmbeddingProvider(_file_store(), k=2)
    np.testing.assert_array_equal(provider.embed_function(weather_spec()), [1.0, 0.0])
    vecs = provider.distill_soft_tokens("ignored", record_id="r1")
    np.testing.assert_array_equal(vecs[0], [0.5, 0.5])
    np.testing.assert_array_equal(vecs[1], [0.0, 1.0])


def test_file_provider_needs_record_id():
    provider = FileEmbeddingProvider(_file_store())
    with pytest.raises(ConfigError):
        provider.distill_soft_tokens("query")


def test_file_provider_missing_key():
    provider = FileEmbeddingProvider(_file_store(), k=3)
    with pytest.raises(MissingEmbeddingError):
        provider.distill_soft_tokens("q", record_id="r2")


# ---------------------------------------------------------------- http backend

class _Handler(BaseHTTPRequestHandler):
    """Scriptable embedding endpoint; behavior/hits are reset per test."""

    behavior: dict = {}
    hits: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length)) if length else {}
        type(self).hits.append((self.path, payload))
        spec = type(self).behavior
        status = spec.get("status", 200)
        raw = spec.get("raw")
        if raw is None:
            rows = spec.get("rows")
            if rows is None:
                dim = spec.get("dim", 4)
                count = spec.get("count", payload.get("k", 1))
                rows = [[float(i + j) for i in range(dim)] for j in range(count)]
            raw = json.dumps({"embeddings": rows})
        data = raw.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):
        pass


@pytest.fixture()
def embed_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.behavior = {}
    _Handler.hits = []
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    thread.join()


def test_http_function_embedding_mean_pools_rows(embed_server):
    _Handler.behavior = {"dim": 4, "count": 3}
    provider = HttpEmbeddingProvider(embed_server, k=3)
    vec = provider.embed_function(weather_spec())
    # rows are [0..3], [1..4], [2..5]; the pool is their column mean
    np.testing.assert_allclose(vec, [1.0, 2.0, 3.0, 4.0])
    path, payload = _Handler.hits[0]
    assert path == "/embed"
    assert payload["mode"] == "function"
    assert payload["k"] == 3


def test_http_soft_tokens_and_cache(embed_server):
    _Handler.behavior = {"dim": 3, "count": 2}
    provider = HttpEmbeddingProvider(embed_server, k=2)
    first = provider.distill_soft_tokens("same query")
    again = provider.distill_soft_tokens("same query")
    assert len(first) == 2
    for x, y in zip(first, again):
        np.testing.assert_array_equal(x, y)
    assert len(_Handler.hits) == 1  # second call served from cache
    provider.distill_soft_tokens("different query")
    assert len(_Handler.hits) == 2


@pytest.mark.parametrize("behavior", [
    {"status": 500},
    {"raw": "this is not json"},
    {"raw": json.dumps({"embeddings": []})},
    {"raw": json.dumps({"nope": 1})},
    {"rows": [["a", "b"]]},
    {"rows": [[1.0, 2.0], [1.0, 2.0, 3.0]]},
])
def test_http_bad_responses(embed_server, behavior):
    _Handler.behavior = behavior
    provider = HttpEmbeddingProvider(embed_server, k=2)
    with pytest.raises(ProviderError):
        provider.distill_soft_tokens("query")


def test_http_soft_token_count_mismatch(embed_server):
    _Handler.behavior = {"dim": 3, "count": 1}
    provider = HttpEmbeddingProvider(embed_server, k=2)
    with pytest.raises(ProviderError):
        provider.distill_soft_tokens("query")


def test_http_connection_failure():
    # grab a free port and leave it closed
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
    provider = HttpEmbeddingProvider(f"http://127.0.0.1:{port}", timeout=2.0)
    with pytest.raises(ProviderError):
        provider.distill_soft_tokens("query")


def test_http_rejects_bad_limits():
    with pytest.raises(ConfigError):
        HttpEmbeddingProvider("http://x", k=0)
    with pytest.raises(ConfigError):
        HttpEmbeddingProvider("http://x", max_inflight=0)


# ---------------------------------------------------------------- factory

def test_make_provider_mock():
    provider = make_provider(ProviderConfig(backend="mock", dim=16, k=2, seed=9))
    assert isinstance(provider, MockEmbeddingProvider)
    assert provider.dim == 16 and provider.k == 2 and provider.seed == 9


def test_make_provider_file_from_path(tmp_path):
    path = tmp_path / "store.jsonl"
    _file_store().save(str(path))
    provider = make_provider(ProviderConfig(backend="file", store_path=str(path), k=2))
    assert isinstance(provider, FileEmbeddingProvider)
    assert provider.store.dim == 2


def test_make_provider_file_needs_store():
    with pytest.raises(ConfigError):
        make_provider(ProviderConfig(backend="file"))


def test_make_provider_http_needs_endpoint(monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV_VAR, raising=False)
    with pytest.raises(ConfigError):
        make_provider(ProviderConfig(backend="http"))


def test_make_provider_env_var_overrides_configured_endpoint(monkeypatch):
    monkeypatch.setenv(ENDPOINT_ENV_VAR, "http://from-env:9999")
    provider = make_provider(
        ProviderConfig(backend="http", endpoint="http://from-config:1111"))
    assert isinstance(provider, HttpEmbeddingProvider)
    assert provider.endpoint == "http://from-env:9999"


def test_provider_config_rejects_unknown_backend():
    with pytest.raises(ConfigError):
        ProviderConfig(backend="carrier-pigeon")
