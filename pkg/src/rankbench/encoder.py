"""Bi-encoder over a trainable subword-embedding table.

A text is encoded by mean-pooling the embeddings of its non-pad tokens and
L2-normalizing the result, so similarity is cosine similarity and the same
table encodes both queries and passages (tied encoder). Training uses a
multiple-negatives ranking loss: within a batch of (query, positive) pairs
every other positive acts as a negative.

Gradients are analytic end to end — through the softmax, the
normalization Jacobian, and the mean pooling — and the optimizer is AdamW
with decoupled weight decay under a linear-warmup cosine schedule.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .seeding import derive_seed
from .tokenizer import PAD_ID, TokenSequence

MODEL_MAGIC = b"RBBIMODL"
_VERSION = 1

TokenIds = "TokenSequence | list[int] | tuple[int, ...]"


@dataclass
class EmbeddingTable:
    weights: np.ndarray  # (vocab_size, dim) float64

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class Batch:
    queries: list[TokenSequence]
    positives: list[TokenSequence]

    def __post_init__(self) -> None:
        if len(self.queries) != len(self.positives):
            raise DataError(
                f"batch sides differ: {len(self.queries)} queries vs "
                f"{len(self.positives)} positives"
            )
        if not self.queries:
            raise DataError("empty batch")

    def __len__(self) -> int:
        return len(self.queries)


def init_table(vocab_size: int, dim: int, seed: int) -> EmbeddingTable:
    """Gaussian init with std 1/sqrt(dim); the pad row is zero."""
    if vocab_size < 2 or dim < 1:
        raise DataError(
            f"invalid table shape: vocab_size={vocab_size}, dim={dim}"
        )
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(vocab_size, dim))
    weights[PAD_ID] = 0.0
    return EmbeddingTable(weights)


def token_ids(tokens) -> list[int]:
    """Accept a TokenSequence or a plain id list."""
    if isinstance(tokens, TokenSequence):
        return list(tokens.ids)
    return list(tokens)


@dataclass
class _PoolCache:
    tokens: np.ndarray  # non-pad token ids, shape (T,)
    norm: float
    unit: np.ndarray  # pooled / ||pooled||


def _pool_one(weights: np.ndarray, tokens) -> _PoolCache:
    ids = np.asarray(
        [t for t in token_ids(tokens) if t != PAD_ID], dtype=np.int64
    )
    if ids.size == 0:
        raise DataError("cannot encode an empty (or all-pad) token sequence")
    if ids.max() >= weights.shape[0] or ids.min() < 0:
        raise DataError("token id outside the embedding table")
    pooled = weights[ids].mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise NumericError("degenerate embedding: pooled vector has norm ~0")
    return _PoolCache(ids, norm, pooled / norm)


def encode(table: EmbeddingTable, tokens) -> np.ndarray:
    """Unit-length pooled embedding of one token sequence."""
    return _pool_one(table.weights, tokens).unit


def encode_batch(table: EmbeddingTable, sequences: list) -> np.ndarray:
    """Stack of unit embeddings, shape (len(sequences), dim)."""
    return np.stack([encode(table, seq) for seq in sequences])


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product; equals cosine for the unit vectors encode returns."""
    return float(np.dot(a, b))


def _softmax_terms(
    scores: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the diagonal against each row, plus the
    gradient w.r.t. the score matrix."""
    batch = scores.shape[0]
    row_max = scores.max(axis=1, keepdims=True)
    exp = np.exp(scores - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    log_sum = np.log(denom[:, 0]) + row_max[:, 0]
    loss = float(np.mean(log_sum - np.diag(scores)))
    d_scores = (exp / denom - np.eye(batch)) / batch
    return loss, d_scores


def _accumulate(
    grad: np.ndarray, caches: list[_PoolCache], d_units: np.ndarray
) -> None:
    """Scatter embedding gradients back onto the table through the
    normalization Jacobian and the mean pooling."""
    for cache, d_unit in zip(caches, d_units):
        d_pooled = (
            d_unit - np.dot(d_unit, cache.unit) * cache.unit
        ) / cache.norm
        np.add.at(grad, cache.tokens, d_pooled / cache.tokens.size)


def _mnrl_forward_backward(
    weights: np.ndarray, batch: Batch, scale: float
) -> tuple[float, np.ndarray]:
    if scale <= 0:
        raise DataError(f"scale must be > 0, got {scale}")
    query_caches = [_pool_one(weights, seq) for seq in batch.queries]
    positive_caches = [_pool_one(weights, seq) for seq in batch.positives]
    query_emb = np.stack([cache.unit for cache in query_caches])
    positive_emb = np.stack([cache.unit for cache in positive_caches])
    loss, d_scores = _softmax_terms(scale * (query_emb @ positive_emb.T))
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grad = np.zeros_like(weights)
    _accumulate(grad, query_caches, scale * (d_scores @ positive_emb))
    _accumulate(grad, positive_caches, scale * (d_scores.T @ query_emb))
    return loss, grad


def mnrl_loss(table: EmbeddingTable, batch: Batch, scale: float = 20.0) -> float:
    """Multiple-negatives ranking loss of a batch.

    Query i's positive is scored against every positive in the batch; the
    loss is the mean softmax cross-entropy of picking the aligned one.
    ``scale`` multiplies the cosine similarities before the softmax
    (scale=1 is the unscaled definition).
    """
    loss, _ = _mnrl_forward_backward(table.weights, batch, scale)
    return loss


def mnrl_gradients(
    table: EmbeddingTable, batch: Batch, scale: float = 20.0
) -> np.ndarray:
    """Exact gradient of :func:`mnrl_loss` w.r.t. every embedding row."""
    _, grad = _mnrl_forward_backward(table.weights, batch, scale)
    return grad


def mnrl_loss_and_gradients(
    table: EmbeddingTable, batch: Batch, scale: float = 20.0
) -> tuple[float, np.ndarray]:
    """Loss and gradient in one forward/backward pass."""
    return _mnrl_forward_backward(table.weights, batch, scale)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamWState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place (bias-corrected, decoupled decay)."""
    if not np.isfinite(grads).all():
        raise NumericError("non-finite gradient")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps) + lr * weight_decay * params


def cosine_lr(
    step: int, total_steps: int, lr_max: float, warmup_ratio: float = 0.1
) -> float:
    """Linear warmup to ``lr_max``, then cosine decay to zero."""
    if total_steps < 1:
        raise DataError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise DataError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = int(warmup_ratio * total_steps)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    remaining = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / remaining
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    dim: int = 64
    lr: float = 5e-5
    batch_size: int = 128
    epochs: int = 4
    scale: float = 20.0
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    max_tokens: int = 512
    seed: int = 42

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise DataError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise DataError(
                f"batch_size must be >= 2 (in-batch negatives need a "
                f"second pair), got {self.batch_size}"
            )
        if self.scale <= 0:
            raise DataError(f"scale must be > 0, got {self.scale}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Preset that trains in seconds on a toy corpus."""
        return replace(cls(lr=1e-2, batch_size=32), **overrides)

    def digest(self) -> bytes:
        payload = ";".join(
            f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)
        )
        return hashlib.md5(payload.encode("utf-8")).digest()


def iter_batches(
    n_pairs: int, config: TrainConfig
) -> tuple[int, list[list[int]]]:
    """Plan the epoch/batch schedule: (total steps, per-epoch index lists).

    Pairs are reshuffled each epoch with a seed derived from the config
    seed; the final short batch of each epoch is dropped.
    """
    if n_pairs < config.batch_size:
        raise DataError(
            f"need at least batch_size={config.batch_size} pairs, "
            f"got {n_pairs}"
        )
    rng = random.Random(derive_seed(config.seed, "batches"))
    per_epoch = n_pairs // config.batch_size
    schedule: list[list[int]] = []
    order = list(range(n_pairs))
    for _ in range(config.epochs):
        rng.shuffle(order)
        for start in range(0, per_epoch * config.batch_size, config.batch_size):
            schedule.append(order[start : start + config.batch_size])
    return config.epochs * per_epoch, schedule


def train(
    table: EmbeddingTable,
    pairs: list[tuple],
    config: TrainConfig,
) -> tuple[EmbeddingTable, list[float]]:
    """Train a copy of ``table`` on (query tokens, positive tokens) pairs.

    Deterministic for a fixed seed: pairs are shuffled per epoch by a
    derived seed, batches have exactly ``batch_size`` items (the last
    partial batch each epoch is dropped), and the learning rate follows
    the warmup+cosine schedule. Returns the trained table and the
    per-step loss trace.
    """
    total_steps, schedule = iter_batches(len(pairs), config)
    weights = table.weights.copy()
    state = AdamWState.zeros_like(weights)
    losses: list[float] = []
    for step, indices in enumerate(schedule):
        batch = Batch(
            queries=[pairs[i][0] for i in indices],
            positives=[pairs[i][1] for i in indices],
        )
        try:
            loss, grads = _mnrl_forward_backward(weights, batch, config.scale)
        except (DataError, NumericError) as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        lr = cosine_lr(step, total_steps, config.lr, config.warmup_ratio)
        adamw_step(
            weights, grads, state, lr, weight_decay=config.weight_decay
        )
        losses.append(loss)
    return EmbeddingTable(weights), losses


def save_model(
    path: str | Path,
    table: EmbeddingTable,
    seed: int = 0,
    config_digest: bytes = b"\x00" * 16,
) -> None:
    """Write the table as little-endian float32 with an identifying header
    (vocab size, dim, seed, 16-byte config digest)."""
    if len(config_digest) != 16:
        raise DataError("config_digest must be 16 bytes")
    raw = np.ascontiguousarray(table.weights, dtype="<f4").tobytes()
    with open(path, "wb") as handle:
        handle.write(MODEL_MAGIC)
        handle.write(
            struct.pack("<IIIQ", _VERSION, table.vocab_size, table.dim, seed)
        )
        handle.write(config_digest)
        handle.write(raw)


def load_model(path: str | Path) -> tuple[EmbeddingTable, int, bytes]:
    """Read a model written by :func:`save_model`.

    Returns (table, seed, config digest); weights come back as float64.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise DataError(f"{path}: not an embedding model (bad magic)")
    header_fmt = "<IIIQ"
    header_size = struct.calcsize(header_fmt)
    offset = len(MODEL_MAGIC)
    if len(data) < offset + header_size + 16:
        raise DataError(f"{path}: truncated model file")
    version, vocab_size, dim, seed = struct.unpack_from(header_fmt, data, offset)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    offset += header_size
    config_digest = data[offset : offset + 16]
    offset += 16
    raw = data[offset:]
    if len(raw) != vocab_size * dim * 4:
        raise DataError(f"{path}: model payload has wrong size")
    weights = (
        np.frombuffer(raw, dtype="<f4")
        .astype(np.float64)
        .reshape(vocab_size, dim)
    )
    return EmbeddingTable(weights), seed, config_digest
