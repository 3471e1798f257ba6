"""Dual-encoder function retrieval trained with an in-batch contrastive loss.

Two small MLPs map pre-computed query and function embeddings into a shared
space; candidates scoring above ``alpha`` (raw cosine) are selected, with a
top-1 fallback so the selection is never empty. Ties break toward the
earlier library entry.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from .embed import EmbeddingStore
from .errors import ConfigError, DegenerateVectorError, EmptyInputError, ShapeError
from .nn import MLP2, OptimConfig, adamw_step, load_checkpoint, lr_at, save_checkpoint, softmax
from .schema import FunctionLibrary
from .validation import as_matrix, as_vector, require_finite


def cosine(a, b) -> float:
    """Cosine similarity of two vectors; zero-norm inputs are an error."""
    va = require_finite(as_vector(a, "a"), "a")
    vb = require_finite(as_vector(b, "b"), "b")
    if va.shape != vb.shape:
        raise ShapeError(f"cosine needs equal shapes, got {va.shape} and {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for a zero-norm vector")
    return float(va @ vb) / (na * nb)


def infonce_loss(z_q, z_f, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """In-batch contrastive loss over cosine similarities.

    Row i of the code matrices is a positive pair; every other row in the
    batch serves as a negative. Returns the scalar loss and its gradients
    with respect to both code batches. A batch of one has nothing to
    contrast against and gives exactly zero loss and zero gradients.
    """
    zq = require_finite(as_matrix(z_q, "z_q"), "z_q")
    zf = require_finite(as_matrix(z_f, "z_f"), "z_f")
    if zq.shape != zf.shape:
        raise ShapeError(f"batch shapes differ: {zq.shape} vs {zf.shape}")
    if zq.shape[0] == 0:
        raise EmptyInputError("infonce_loss needs at least one pair")
    if tau <= 0.0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    b = zq.shape[0]
    nq = np.linalg.norm(zq, axis=1, keepdims=True)
    nf = np.linalg.norm(zf, axis=1, keepdims=True)
    if np.any(nq == 0.0) or np.any(nf == 0.0):
        raise DegenerateVectorError("zero-norm row in contrastive batch")
    u = zq / nq
    v = zf / nf
    sim = u @ v.T
    logits = sim / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.trace(logp) / b)
    # d loss / d sim, then back through the cosine normalizations
    g = (softmax(logits) - np.eye(b)) / (b * tau)
    row = (g * sim).sum(axis=1, keepdims=True)
    col = (g * sim).sum(axis=0)[:, None]
    grad_zq = (g @ v - row * u) / nq
    grad_zf = (g.T @ u - col * v) / nf
    return loss, grad_zq, grad_zf


class RetrieverModel:
    """The pair of encoders plus the retrieval hyperparameters."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 tau: float, alpha: float, rng: np.random.Generator):
        if tau <= 0.0:
            raise ConfigError(f"tau must be > 0, got {tau}")
        if not -1.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must be a cosine threshold in [-1, 1], got {alpha}")
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.tau = tau
        self.alpha = alpha
        self.query_encoder = MLP2(in_dim, hidden_dim, out_dim, rng, "e_q")
        self.function_encoder = MLP2(in_dim, hidden_dim, out_dim, rng, "e_f")

    def params(self):
        return self.query_encoder.params() + self.function_encoder.params()

    def encode_query(self, e_q) -> np.ndarray:
        return self.query_encoder.forward(e_q)

    def encode_function(self, e_f) -> np.ndarray:
        return self.function_encoder.forward(e_f)


class RetrievalResult:
    """Scores for every candidate plus the thresholded selection."""

    def __init__(self, ranked: list[tuple[str, float]], selected: list[str],
                 fallback_used: bool):
        self.ranked = tuple(ranked)
        self.selected = tuple(selected)
        self.fallback_used = fallback_used

    def __repr__(self):
        return (f"RetrievalResult(selected={list(self.selected)}, "
                f"fallback_used={self.fallback_used})")


def encode_library(model: RetrieverModel, store: EmbeddingStore,
                   lib: FunctionLibrary) -> np.ndarray:
    """Encode every library function once; rows follow library order."""
    if len(lib) == 0:
        raise EmptyInputError("library is empty")
    raw = np.stack([store.get(f"fn:{f.name}") for f in lib.functions])
    return model.encode_function(raw)


def retrieve(model: RetrieverModel, e_q, store: EmbeddingStore, lib: FunctionLibrary,
             fn_codes: np.ndarray | None = None) -> RetrievalResult:
    """Score the query against every function and apply the threshold.

    Scores are raw cosines in the shared space. Selection keeps everything
    strictly above alpha, ordered by descending score with earlier library
    entries winning ties; when nothing clears the threshold the single best
    candidate is returned with fallback_used set.
    """
    if fn_codes is None:
        fn_codes = encode_library(model, store, lib)
    z_q = model.encode_query(as_vector(e_q, "e_q"))
    nq = float(np.linalg.norm(z_q))
    nf = np.linalg.norm(fn_codes, axis=1)
    if nq == 0.0 or np.any(nf == 0.0):
        raise DegenerateVectorError("zero-norm code vector during retrieval")
    scores = (fn_codes @ z_q) / (nf * nq)
    order = sorted(range(len(lib)), key=lambda i: (-scores[i], i))
    ranked = [(lib.functions[i].name, float(scores[i])) for i in order]
    selected = [name for name, s in ranked if s > model.alpha]
    fallback_used = not selected
    if fallback_used:
        selected = [ranked[0][0]]
    return RetrievalResult(ranked, selected, fallback_used)


def train_retriever(model: RetrieverModel, store: EmbeddingStore,
                    pairs: list[tuple[str, str]], cfg: OptimConfig | None = None,
                    batch_size: int = 256, epochs: int = 100,
                    seed: int = 0) -> list[float]:
    """Contrastive training over (query_key, fn_key) pairs from the store.

    Shuffles with a seeded generator each epoch; returns the per-epoch mean
    loss curve. Both encoders update jointly under one schedule.
    """
    if not pairs:
        raise EmptyInputError("no training pairs")
    if batch_size < 1 or epochs < 1:
        raise ConfigError("batch_size and epochs must be >= 1")
    x_q = np.stack([store.get(qk) for qk, _ in pairs])
    x_f = np.stack([store.get(fk) for _, fk in pairs])
    n = len(pairs)
    steps_per_epoch = math.ceil(n / batch_size)
    if cfg is None:
        cfg = OptimConfig(lr=1e-3, total_steps=epochs * steps_per_epoch)
    rng = np.random.default_rng(seed)
    params = model.params()
    curve: list[float] = []
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            zq, cache_q = model.query_encoder.forward_cached(x_q[idx])
            zf, cache_f = model.function_encoder.forward_cached(x_f[idx])
            loss, gq, gf = infonce_loss(zq, zf, model.tau)
            model.query_encoder.backward(cache_q, gq)
            model.function_encoder.backward(cache_f, gf)
            lr_now = lr_at(cfg, step)
            for p in params:
                adamw_step(p, cfg, lr_now)
            step += 1
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


class FunctionRetriever(BaseEstimator):
    """Estimator wrapper: fit on (query_key, fn_key) pairs, predict selections.

    Hyperparameters live in __init__ under matching attribute names so
    get_params/set_params work; fitted state gets a trailing underscore.
    """

    def __init__(self, dim: int = 64, hidden_dim: int = 256, out_dim: int = 128,
                 tau: float = 0.07, alpha: float = 0.5, lr: float = 1e-3,
                 batch_size: int = 256, epochs: int = 100,
                 weight_decay: float = 0.01, seed: int = 0):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.tau = tau
        self.alpha = alpha
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, store: EmbeddingStore, pairs: list[tuple[str, str]]):
        rng = np.random.default_rng(self.seed)
        self.model_ = RetrieverModel(self.dim, self.hidden_dim, self.out_dim,
                                     self.tau, self.alpha, rng)
        steps = self.epochs * math.ceil(max(len(pairs), 1) / self.batch_size)
        cfg = OptimConfig(lr=self.lr, total_steps=steps, weight_decay=self.weight_decay)
        self.loss_curve_ = train_retriever(self.model_, store, pairs, cfg,
                                           self.batch_size, self.epochs, self.seed)
        return self

    def _fitted(self) -> RetrieverModel:
        if not hasattr(self, "model_"):
            raise ConfigError("retriever is not fitted")
        return self.model_

    def retrieve(self, e_q, store: EmbeddingStore, lib: FunctionLibrary,
                 fn_codes: np.ndarray | None = None) -> RetrievalResult:
        return retrieve(self._fitted(), e_q, store, lib, fn_codes)

    def predict(self, e_q, store: EmbeddingStore, lib: FunctionLibrary) -> list[str]:
        """Selected function names for one query embedding."""
        return list(self.retrieve(e_q, store, lib).selected)

    def encode_library(self, store: EmbeddingStore, lib: FunctionLibrary) -> np.ndarray:
        return encode_library(self._fitted(), store, lib)

    def save(self, path: str) -> None:
        model = self._fitted()
        arrays = {p.name: p.value for p in model.params()}
        meta = {
            "kind": "retriever",
            "dims": [model.in_dim, model.hidden_dim, model.out_dim],
            "tau": model.tau,
            "alpha": model.alpha,
            "hyperparams": self.get_params(),
        }
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: str) -> "FunctionRetriever":
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "retriever":
            raise ConfigError(f"{path} is not a retriever checkpoint")
        est = cls(**meta["hyperparams"])
        in_dim, hidden_dim, out_dim = meta["dims"]
        model = RetrieverModel(in_dim, hidden_dim, out_dim, meta["tau"], meta["alpha"],
                               np.random.default_rng(0))
        for enc in (model.query_encoder, model.function_encoder):
            for p in enc.params():
                p.value[...] = arrays[p.name]
        est.model_ = model
        return est
