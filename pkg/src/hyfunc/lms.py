"""Small value-filling language model and its soft-token projector.

The model is deliberately tiny: a token embedding table and a two-layer MLP
head reading a fixed window of the last W stream positions. The stream is
``[projected soft tokens] ++ [context token embeddings] ++ [emitted token
embeddings]``, left-padded with the pad embedding while shorter than W. The
head's logits at a stream position predict the token that comes next, so
training is plain teacher forcing and generation is greedy argmax (ties
resolve to the lowest token id).

Losses: ``sft_loss`` is mean next-token NLL over the whole target;
``selective_sft_loss`` restricts both the loss and the gradients to masked
positions and normalizes by the mask weight. A uniform mask makes the two
numerically identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DegenerateMaskError, EmptyInputError, ShapeError
from .nn import (
    MLP2,
    OptimConfig,
    Param,
    adamw_step,
    glorot,
    load_checkpoint,
    log_softmax,
    lr_at,
    save_checkpoint,
    softmax,
)
from .tokenizer import PAD_ID
from .validation import require_finite


class Projector:
    """Maps raw soft-token embeddings (dim d) into the LM space (dim d')."""

    VARIANTS = ("linear", "mlp")

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 variant: str = "linear", hidden_dim: int = 0):
        if variant not in self.VARIANTS:
            raise ConfigError(f"unknown projector variant {variant!r}")
        self.in_dim, self.out_dim, self.variant = in_dim, out_dim, variant
        self.hidden_dim = hidden_dim or out_dim
        if variant == "linear":
            self.w = Param(glorot(rng, in_dim, out_dim, (in_dim, out_dim)), "proj.w")
            self.mlp = None
        else:
            self.mlp = MLP2(in_dim, self.hidden_dim, out_dim, rng, "proj")

    def params(self) -> list[Param]:
        return [self.w] if self.mlp is None else self.mlp.params()

    def _check(self, e_q) -> np.ndarray:
        vec = require_finite(np.asarray(e_q, dtype=np.float64), "e_q")
        if vec.shape != (self.in_dim,):
            raise ShapeError(f"projector expects dim ({self.in_dim},), got {vec.shape}")
        return vec

    def project(self, e_q) -> np.ndarray:
        vec = self._check(e_q)
        if self.mlp is None:
            return vec @ self.w.value
        return self.mlp.forward(vec)

    def project_cached(self, e_q) -> tuple[np.ndarray, tuple]:
        vec = self._check(e_q)
        if self.mlp is None:
            return vec @ self.w.value, (vec,)
        out, cache = self.mlp.forward_cached(vec[None, :])
        return out[0], cache

    def backward(self, cache: tuple, upstream: np.ndarray) -> np.ndarray:
        if self.mlp is None:
            (vec,) = cache
            self.w.grad += np.outer(vec, upstream)
            return self.w.value @ upstream
        return self.mlp.backward(cache, upstream[None, :])[0]


class TinyLM:
    """Fixed-window next-token model: embedding table + MLP head."""

    def __init__(self, vocab_size: int, embed_dim: int = 64, window: int = 32,
                 hidden_dim: int = 256, rng: np.random.Generator | None = None):
        if window < 2:
            raise ConfigError(f"window must be >= 2, got {window}")
        if vocab_size < 7:
            raise ConfigError(f"vocab_size must cover the reserved block, got {vocab_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.window = window
        self.hidden_dim = hidden_dim
        self.token_table = Param(
            glorot(rng, vocab_size, embed_dim, (vocab_size, embed_dim)), "lm.token_table")
        self.head = MLP2(window * embed_dim, hidden_dim, vocab_size, rng, "lm.head")

    def params(self) -> list[Param]:
        return [self.token_table] + self.head.params()

    def embed(self, ids: list[int]) -> np.ndarray:
        arr = np.asarray(ids, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise ShapeError("token id out of range for the embedding table")
        if arr.size == 0:
            return np.zeros((0, self.embed_dim))
        return self.token_table.value[arr]


@dataclass
class TrainingExample:
    """One teacher-forced target with its context and raw soft tokens.

    soft_tokens holds the *unprojected* k x d query vectors; projection
    happens inside the loss so projector gradients flow.
    """

    example_id: str
    context_ids: list[int]
    soft_tokens: np.ndarray
    target_ids: list[int]
    mask: list[int] = field(default_factory=list)


def _window_rows(stream: np.ndarray, pad_row: np.ndarray, window: int,
                 end_positions: list[int]) -> np.ndarray:
    """Flattened windows ending at each stream index (inclusive)."""
    padded = np.vstack([np.tile(pad_row, (window - 1, 1)), stream])
    rows = [padded[p:p + window].reshape(-1) for p in end_positions]
    return np.stack(rows)


def lm_logits(lm: TinyLM, prefix, ids: list[int]) -> np.ndarray:
    """Logits for each position of ids; row t's window ends at ids[t]."""
    pre = np.asarray(prefix, dtype=np.float64)
    pre = pre.reshape(-1, lm.embed_dim) if pre.size else np.zeros((0, lm.embed_dim))
    if not ids:
        return np.zeros((0, lm.vocab_size))
    stream = np.vstack([pre, lm.embed(ids)])
    k = pre.shape[0]
    ends = [k + t for t in range(len(ids))]
    x = _window_rows(stream, lm.token_table.value[PAD_ID], lm.window, ends)
    return lm.head.forward(x)


def _masked_loss(lm: TinyLM, proj: Projector, ex: TrainingExample,
                 mask: list[int], *, backprop: bool) -> float:
    """Shared NLL core: sum of masked next-token NLLs over the mask weight."""
    targets = list(ex.target_ids)
    if not targets:
        raise EmptyInputError("training example has an empty target")
    if len(mask) != len(targets):
        raise ShapeError(f"mask length {len(mask)} != target length {len(targets)}")
    positions = [t for t, m in enumerate(mask) if m]
    total_weight = len(positions)
    if total_weight == 0:
        raise DegenerateMaskError(f"example {ex.example_id!r}: mask selects no positions")

    soft = np.asarray(ex.soft_tokens, dtype=np.float64)
    if soft.ndim != 2:
        raise ShapeError(f"soft_tokens must be k x d, got shape {soft.shape}")
    k = soft.shape[0]
    if k < 1:
        raise EmptyInputError("at least one soft token is required")
    proj_pairs = [proj.project_cached(soft[i]) for i in range(k)]
    prefix = np.stack([p for p, _ in proj_pairs])

    ctx = list(ex.context_ids)
    stream = np.vstack([prefix, lm.embed(ctx), lm.embed(targets)])
    base = k + len(ctx)
    ends = [base + t - 1 for t in positions]
    w = lm.window
    pad_row = lm.token_table.value[PAD_ID]
    x = _window_rows(stream, pad_row, w, ends)

    if backprop:
        logits, head_cache = lm.head.forward_cached(x)
    else:
        logits = lm.head.forward(x)
    logp = log_softmax(logits)
    y = np.array([targets[t] for t in positions])
    loss = float(-logp[np.arange(len(positions)), y].sum() / total_weight)
    if not backprop:
        return loss

    dlogits = softmax(logits)
    dlogits[np.arange(len(positions)), y] -= 1.0
    dlogits /= total_weight
    dx = lm.head.backward(head_cache, dlogits)

    prefix_grads = np.zeros_like(prefix)
    table_grad = lm.token_table.grad
    d = lm.embed_dim
    for r, end in enumerate(ends):
        chunks = dx[r].reshape(w, d)
        for slot in range(w):
            s = end - w + 1 + slot
            if s < 0:
                table_grad[PAD_ID] += chunks[slot]
            elif s < k:
                prefix_grads[s] += chunks[slot]
            elif s < base:
                table_grad[ctx[s - k]] += chunks[slot]
            else:
                table_grad[targets[s - base]] += chunks[slot]
    for i in range(k):
        proj.backward(proj_pairs[i][1], prefix_grads[i])
    return loss


def sft_loss(lm: TinyLM, proj: Projector, ex: TrainingExample,
             backprop: bool = True) -> float:
    """Teacher-forced mean NLL over every target position."""
    return _masked_loss(lm, proj, ex, [1] * len(ex.target_ids), backprop=backprop)


def selective_sft_loss(lm: TinyLM, proj: Projector, ex: TrainingExample,
                       backprop: bool = True) -> float:
    """Teacher-forced NLL over masked positions only, normalized by mask weight."""
    return _masked_loss(lm, proj, ex, list(ex.mask), backprop=backprop)


def train_lms(lm: TinyLM, proj: Projector, examples: list[TrainingExample],
              cfg: OptimConfig | None = None, selective: bool = True,
              epochs: int = 1, seed: int = 0) -> list[float]:
    """Joint LM + projector training, one example per step (batch size 1).

    Returns the per-epoch mean loss curve. Order is shuffled each epoch with
    a seeded generator, so a fixed seed is bit-reproducible.
    """
    if not examples:
        raise EmptyInputError("no training examples")
    if cfg is None:
        cfg = OptimConfig(lr=2e-5, total_steps=epochs * len(examples))
    loss_fn = selective_sft_loss if selective else sft_loss
    params = lm.params() + proj.params()
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for idx in order:
            loss = loss_fn(lm, proj, examples[idx])
            lr_now = lr_at(cfg, step)
            for p in params:
                adamw_step(p, cfg, lr_now)
            step += 1
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return curve


class TinyLMSession:
    """Incremental generation state over a growing embedded stream.

    ``append`` extends the visible context (the embedded rows double as the
    model's recomputation cache); ``next`` is a pure prediction of the token
    after everything appended so far. The session never appends on its own,
    so the driver stays the single writer.
    """

    def __init__(self, lm: TinyLM, prefix: np.ndarray, context_ids: list[int]):
        prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, lm.embed_dim)
        if prefix.shape[0] < 1:
            raise EmptyInputError("session needs at least one prefix vector")
        self._lm = lm
        self._rows: list[np.ndarray] = [prefix[i] for i in range(prefix.shape[0])]
        self.append(list(context_ids))

    @property
    def context_length(self) -> int:
        """Prefix vectors plus every appended token."""
        return len(self._rows)

    def append(self, ids: list[int]) -> None:
        table = self._lm.token_table.value
        for i in ids:
            if not 0 <= i < self._lm.vocab_size:
                raise ShapeError(f"token id {i} out of range")
            self._rows.append(table[i])

    def next(self) -> int:
        w = self._lm.window
        rows = self._rows[-w:]
        if len(rows) < w:
            pad = [self._lm.token_table.value[PAD_ID]] * (w - len(rows))
            rows = pad + rows
        logits = self._lm.head.forward(np.concatenate(rows))
        return int(np.argmax(logits))


def generate_next(lm: TinyLM, session: TinyLMSession) -> int:
    """Greedy argmax over the session's current window (lowest id on ties)."""
    if session._lm is not lm:
        raise ConfigError("session belongs to a different model")
    return session.next()


class CallGenerator(BaseEstimator):
    """Estimator wrapper: fit the LM + projector, then open decode sessions."""

    def __init__(self, dim: int = 64, embed_dim: int = 64, window: int = 32,
                 hidden_dim: int = 256, proj_variant: str = "linear",
                 proj_hidden_dim: int = 0, lr: float = 2e-5, epochs: int = 1,
                 weight_decay: float = 0.01, selective: bool = True, seed: int = 0):
        self.dim = dim
        self.embed_dim = embed_dim
        self.window = window
        self.hidden_dim = hidden_dim
        self.proj_variant = proj_variant
        self.proj_hidden_dim = proj_hidden_dim
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.selective = selective
        self.seed = seed

    def fit(self, examples: list[TrainingExample], vocab_size: int):
        rng = np.random.default_rng(self.seed)
        self.lm_ = TinyLM(vocab_size, self.embed_dim, self.window, self.hidden_dim, rng)
        self.proj_ = Projector(self.dim, self.embed_dim, rng, self.proj_variant,
                               self.proj_hidden_dim)
        cfg = OptimConfig(lr=self.lr, total_steps=self.epochs * len(examples),
                          weight_decay=self.weight_decay)
        self.loss_curve_ = train_lms(self.lm_, self.proj_, examples, cfg,
                                     self.selective, self.epochs, self.seed)
        return self

    def _fitted(self) -> tuple[TinyLM, Projector]:
        if not hasattr(self, "lm_"):
            raise ConfigError("call generator is not fitted")
        return self.lm_, self.proj_

    def session(self, soft_tokens: np.ndarray, context_ids: list[int]) -> TinyLMSession:
        """Fresh generation session; soft tokens are projected here."""
        lm, proj = self._fitted()
        soft = np.asarray(soft_tokens, dtype=np.float64).reshape(-1, proj.in_dim)
        prefix = np.stack([proj.project(soft[i]) for i in range(soft.shape[0])])
        return TinyLMSession(lm, prefix, context_ids)

    def save(self, path: str) -> None:
        lm, proj = self._fitted()
        arrays = {p.name: p.value for p in lm.params() + proj.params()}
        meta = {
            "kind": "lms",
            "vocab_size": lm.vocab_size,
            "hyperparams": self.get_params(),
        }
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: str) -> "CallGenerator":
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "lms":
            raise ConfigError(f"{path} is not a call-generator checkpoint")
        est = cls(**meta["hyperparams"])
        rng = np.random.default_rng(est.seed)
        est.lm_ = TinyLM(meta["vocab_size"], est.embed_dim, est.window, est.hidden_dim, rng)
        est.proj_ = Projector(est.dim, est.embed_dim, rng, est.proj_variant,
                              est.proj_hidden_dim)
        for p in est.lm_.params() + est.proj_.params():
            p.value[...] = arrays[p.name]
        return est
