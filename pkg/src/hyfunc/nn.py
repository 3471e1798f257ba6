"""Minimal trainable-network stack: parameters, two-layer MLPs, AdamW,
warmup-cosine schedule, finite-difference gradient checking, checkpoints.

All math is float64 on numpy arrays (row-major). Gradients accumulate into
``Param.grad`` and are consumed (and zeroed) by ``adamw_step``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, ParseError, ShapeError
from .validation import as_matrix, require_finite

_MAGIC = b"HYNN1\x00"
_CHECKPOINT_VERSION = 1


class Param:
    """A trainable array with its gradient and AdamW state."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape: tuple[int, ...]) -> np.ndarray:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class MLP2:
    """x @ W1 + b1 -> relu -> @ W2 + b2, with hand-written backprop.

    ``forward`` is pure (safe to share a frozen model across threads);
    training goes through ``forward_cached`` + ``backward``. The rectifier
    derivative at exactly zero is taken as zero.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator, name: str = "mlp"):
        if min(in_dim, hidden_dim, out_dim) < 1:
            raise ShapeError(f"{name}: all dims must be >= 1")
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.w1 = Param(glorot(rng, in_dim, hidden_dim, (in_dim, hidden_dim)), f"{name}.w1")
        self.b1 = Param(np.zeros(hidden_dim), f"{name}.b1")
        self.w2 = Param(glorot(rng, hidden_dim, out_dim, (hidden_dim, out_dim)), f"{name}.w2")
        self.b2 = Param(np.zeros(out_dim), f"{name}.b2")

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]

    def _check(self, x: np.ndarray) -> None:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {x.shape[1]}")

    def forward(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        mat = as_matrix(arr[None, :] if single else arr, "input")
        self._check(mat)
        out = np.maximum(mat @ self.w1.value + self.b1.value, 0.0) @ self.w2.value + self.b2.value
        return out[0] if single else out

    def forward_cached(self, x) -> tuple[np.ndarray, tuple]:
        mat = as_matrix(x, "input")
        self._check(mat)
        z1 = mat @ self.w1.value + self.b1.value
        a1 = np.maximum(z1, 0.0)
        out = a1 @ self.w2.value + self.b2.value
        return out, (mat, z1, a1)

    def backward(self, cache: tuple, upstream) -> np.ndarray:
        x, z1, a1 = cache
        up = as_matrix(upstream, "upstream")
        if up.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"upstream shape {up.shape} does not match output "
                             f"({x.shape[0]}, {self.out_dim})")
        self.w2.grad += a1.T @ up
        self.b2.grad += up.sum(axis=0)
        dz1 = (up @ self.w2.value.T) * (z1 > 0.0)
        self.w1.grad += x.T @ dz1
        self.b1.grad += dz1.sum(axis=0)
        return dz1 @ self.w1.value.T


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise, max-subtracted for stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class OptimConfig:
    """AdamW + warmup-cosine settings. warmup defaults to 5% of total."""

    lr: float
    total_steps: int
    warmup_steps: int = -1  # -1: 5% of total_steps
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.total_steps < 0:
            raise ShapeError("lr must be > 0 and total_steps >= 0")
        if self.warmup_steps < 0:
            object.__setattr__(self, "warmup_steps", int(round(0.05 * self.total_steps)))
        if self.warmup_steps > self.total_steps:
            raise ShapeError("warmup_steps must not exceed total_steps")


def lr_at(cfg: OptimConfig, step: int) -> float:
    """Linear ramp 0 -> lr over warmup, then cosine decay lr -> 0 at total."""
    if step < 0:
        raise ShapeError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.total_steps <= cfg.warmup_steps:
        return cfg.lr if step < cfg.total_steps else 0.0
    t = min((step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps), 1.0)
    return cfg.lr * (1.0 + math.cos(math.pi * t)) / 2.0


def adamw_step(param: Param, cfg: OptimConfig, lr_now: float) -> None:
    """One decoupled-decay AdamW update; zeroes the gradient afterwards."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericsError(f"non-finite gradient on {param.name or 'param'}")
    param.step_count += 1
    t = param.step_count
    param.adam_m *= cfg.beta1
    param.adam_m += (1.0 - cfg.beta1) * g
    param.adam_v *= cfg.beta2
    param.adam_v += (1.0 - cfg.beta2) * g * g
    m_hat = param.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = param.adam_v / (1.0 - cfg.beta2 ** t)
    param.value -= lr_now * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                             + cfg.weight_decay * param.value)
    param.zero_grad()


def grad_check(loss_fn, params: list[Param], epsilon: float = 1e-5) -> float:
    """Max relative error between central differences and Param.grad.

    ``loss_fn`` must be a pure scalar function of the current param values;
    the analytic gradients to check against must already sit in ``.grad``.
    """
    max_rel = 0.0
    for p in params:
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + epsilon
            f_plus = float(loss_fn())
            flat_v[i] = orig - epsilon
            f_minus = float(loss_fn())
            flat_v[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(numeric), abs(flat_g[i]), 1e-8)
            max_rel = max(max_rel, abs(numeric - flat_g[i]) / denom)
    return max_rel


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary checkpoint: magic, JSON header, float64 LE payload.

    Writing the same values always produces the same bytes.
    """
    names = list(arrays.keys())
    header = {
        "version": _CHECKPOINT_VERSION,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            arr = np.ascontiguousarray(arrays[n], dtype=np.float64)
            require_finite(arr, f"checkpoint array {n!r}")
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    off = len(_MAGIC)
    if len(blob) < off + 4:
        raise ParseError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != _CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(blob):
            raise ParseError(f"{path}: truncated payload at array {entry['name']!r}")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        arrays[entry["name"]] = arr
        off += nbytes
    if off != len(blob):
        raise ParseError(f"{path}: trailing bytes after payload")
    return header["meta"], arrays
