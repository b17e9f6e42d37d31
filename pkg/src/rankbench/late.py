"""Late-interaction (MaxSim) scoring, hard-negative mining, and reranking.

Queries and passages are represented as matrices of per-token unit
embeddings; relevance is the sum over query tokens of each token's best
match among the passage tokens. Because the encoder has no cross-token
contextualization, identical tokens match with similarity exactly 1.

Training shares the contract of the bi-encoder trainer but replaces the
pooled similarity with MaxSim over each query's candidate set (its
positive plus mined hard negatives, optionally joined by the other
in-batch positives). The gradient flows through the max via the argmax
branch; ties take the lowest passage-token index.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Document
from .encoder import (
    AdamWState,
    EmbeddingTable,
    TrainConfig,
    adamw_step,
    cosine_lr,
    iter_batches,
    token_ids,
)
from .errors import DataError, NumericError
from .tokenizer import BpeVocab, PAD_ID, dumps_vocab, encode, loads_vocab

TOKEN_MAGIC = b"RBTOKIDX"
_VERSION = 1


@dataclass
class MiningConfig:
    pool_size: int = 150
    n_negatives: int = 8
    seed: int = 42

    def __post_init__(self) -> None:
        if self.pool_size < 2:
            raise DataError(f"pool_size must be >= 2, got {self.pool_size}")
        if self.n_negatives < 1:
            raise DataError(
                f"n_negatives must be >= 1, got {self.n_negatives}"
            )
        if self.n_negatives > self.pool_size - 1:
            raise DataError(
                f"n_negatives ({self.n_negatives}) must be <= pool_size - 1 "
                f"({self.pool_size - 1})"
            )


@dataclass
class TokenEmbeddingIndex:
    doc_matrices: dict[int, np.ndarray]  # doc_id -> (n_j, dim) f32 unit rows
    table: EmbeddingTable
    vocab: BpeVocab
    max_tokens: int | None = 512

    @property
    def dim(self) -> int:
        return self.table.dim


@dataclass
class _TokenCache:
    ids: np.ndarray  # (T,) non-pad token ids
    norms: np.ndarray  # (T,) row norms before normalization
    units: np.ndarray  # (T, dim) unit rows


def _token_cache(weights: np.ndarray, tokens) -> _TokenCache:
    ids = np.asarray(
        [t for t in token_ids(tokens) if t != PAD_ID], dtype=np.int64
    )
    if ids.size == 0:
        raise DataError("cannot encode an empty (or all-pad) token sequence")
    if ids.max() >= weights.shape[0] or ids.min() < 0:
        raise DataError("token id outside the embedding table")
    rows = weights[ids]
    norms = np.linalg.norm(rows, axis=1)
    if (norms < 1e-12).any():
        raise NumericError("degenerate embedding: token row has norm ~0")
    return _TokenCache(ids, norms, rows / norms[:, None])


def encode_tokens(table: EmbeddingTable, tokens) -> np.ndarray:
    """Per-token unit embeddings, one row per non-pad token."""
    return _token_cache(table.weights, tokens).units


def maxsim_score(q_mat: np.ndarray, p_mat: np.ndarray) -> float:
    """Sum over query rows of the best similarity to any passage row."""
    if q_mat.size == 0 or p_mat.size == 0:
        raise DataError("maxsim_score requires non-empty matrices")
    sims = q_mat @ np.asarray(p_mat, dtype=np.float64).T
    return float(sims.max(axis=1).sum())


def build(
    table: EmbeddingTable,
    docs: list[Document],
    vocab: BpeVocab,
    max_tokens: int | None = 512,
) -> TokenEmbeddingIndex:
    """Materialize per-document token-embedding matrices."""
    if not docs:
        raise DataError("cannot build an index over zero documents")
    doc_matrices: dict[int, np.ndarray] = {}
    for doc in docs:
        if doc.doc_id in doc_matrices:
            raise DataError(f"duplicate doc id: {doc.doc_id}")
        tokens = encode(vocab, doc.text, max_tokens=max_tokens)
        try:
            doc_matrices[doc.doc_id] = encode_tokens(table, tokens).astype(
                np.float32
            )
        except (DataError, NumericError) as exc:
            raise type(exc)(f"doc {doc.doc_id}: {exc}") from exc
    return TokenEmbeddingIndex(doc_matrices, table, vocab, max_tokens)


def encode_query_tokens(index: TokenEmbeddingIndex, text: str) -> np.ndarray:
    """Query-side token matrix using the index's vocabulary and table."""
    tokens = encode(index.vocab, text, max_tokens=index.max_tokens)
    return encode_tokens(index.table, tokens)


def rerank(
    first_stage: list[tuple[int, float]],
    token_index: TokenEmbeddingIndex,
    q_mat: np.ndarray,
    k: int,
) -> list[tuple[int, float]]:
    """Rescore first-stage candidates by MaxSim and keep the top k.

    Never introduces documents outside the candidate list; ties break by
    ascending doc id.
    """
    if not first_stage:
        raise DataError("cannot rerank an empty candidate list")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    rescored: list[tuple[int, float]] = []
    for doc_id, _ in first_stage:
        p_mat = token_index.doc_matrices.get(doc_id)
        if p_mat is None:
            raise DataError(f"candidate doc {doc_id} missing from token index")
        rescored.append((doc_id, maxsim_score(q_mat, p_mat)))
    rescored.sort(key=lambda item: (-item[1], item[0]))
    return rescored[:k]


def mine_negatives(
    dense_results: list[tuple[int, float]],
    relevant: set[int],
    config: MiningConfig,
) -> tuple[list[int], bool]:
    """Sample hard negatives from the top of a first-stage ranking.

    Takes the top ``pool_size`` results, drops every relevant doc id, and
    samples ``n_negatives`` without replacement with the config seed. If
    fewer candidates remain, all are returned and the short-pool flag is
    set.
    """
    if not dense_results:
        raise DataError("cannot mine negatives from an empty ranking")
    pool = [doc_id for doc_id, _ in dense_results[: config.pool_size]]
    candidates = [doc_id for doc_id in pool if doc_id not in relevant]
    if not candidates:
        raise DataError("no non-relevant candidates in the mining pool")
    rng = random.Random(config.seed)
    if len(candidates) <= config.n_negatives:
        return rng.sample(candidates, len(candidates)), (
            len(candidates) < config.n_negatives
        )
    return rng.sample(candidates, config.n_negatives), False


def _scatter_row_grads(
    grad: np.ndarray, cache: _TokenCache, d_units: np.ndarray
) -> None:
    """Backpropagate per-row unit-embedding gradients onto the table."""
    inner = (d_units * cache.units).sum(axis=1, keepdims=True)
    d_rows = (d_units - inner * cache.units) / cache.norms[:, None]
    np.add.at(grad, cache.ids, d_rows)


def colbert_loss_and_gradients(
    weights_or_table,
    pairs: list[tuple],
    negatives: list[list],
    scale: float = 20.0,
    use_in_batch: bool = False,
) -> tuple[float, np.ndarray]:
    """MaxSim ranking loss of one batch and its table gradient.

    For pair i the candidate set is [positive_i] + negatives_i, extended
    by the other in-batch positives when ``use_in_batch`` is set. The loss
    is the mean softmax cross-entropy of ranking the positive first, with
    similarities scaled by ``scale``. A pair whose candidate set is a
    singleton contributes zero loss and zero gradient.
    """
    weights = (
        weights_or_table.weights
        if isinstance(weights_or_table, EmbeddingTable)
        else weights_or_table
    )
    if len(pairs) != len(negatives):
        raise DataError(
            f"{len(pairs)} pairs but {len(negatives)} negative lists"
        )
    if not pairs:
        raise DataError("empty batch")
    if scale <= 0:
        raise DataError(f"scale must be > 0, got {scale}")
    batch = len(pairs)
    query_caches = [_token_cache(weights, query) for query, _ in pairs]
    positive_caches = [_token_cache(weights, pos) for _, pos in pairs]
    negative_caches = [
        [_token_cache(weights, neg) for neg in negs] for negs in negatives
    ]

    loss = 0.0
    grad = np.zeros_like(weights)
    for i in range(batch):
        candidates = [positive_caches[i]] + negative_caches[i]
        if use_in_batch:
            candidates += [
                positive_caches[j] for j in range(batch) if j != i
            ]
        q_cache = query_caches[i]
        sims = [q_cache.units @ cand.units.T for cand in candidates]
        argmaxes = [sim.argmax(axis=1) for sim in sims]
        scores = np.array(
            [
                scale * sim[np.arange(sim.shape[0]), arg].sum()
                for sim, arg in zip(sims, argmaxes)
            ]
        )
        if not np.isfinite(scores).all():
            raise NumericError("non-finite MaxSim score")
        shifted = scores - scores.max()
        exp = np.exp(shifted)
        denom = exp.sum()
        loss += float(np.log(denom) + scores.max() - scores[0])
        d_scores = exp / denom
        d_scores[0] -= 1.0
        d_q_units = np.zeros_like(q_cache.units)
        for cand, arg, d_score in zip(candidates, argmaxes, d_scores):
            if d_score == 0.0:
                continue
            coef = d_score * scale / batch
            d_q_units += coef * cand.units[arg]
            d_cand_units = np.zeros_like(cand.units)
            np.add.at(d_cand_units, arg, coef * q_cache.units)
            _scatter_row_grads(grad, cand, d_cand_units)
        _scatter_row_grads(grad, q_cache, d_q_units)
    return loss / batch, grad


def train_colbert(
    table: EmbeddingTable,
    pairs: list[tuple],
    negatives: list[list],
    config: TrainConfig,
    use_in_batch: bool = False,
) -> tuple[EmbeddingTable, list[float]]:
    """Train a copy of ``table`` with the MaxSim ranking loss.

    Same schedule contract as the bi-encoder trainer: per-epoch seeded
    shuffle, fixed-size batches with the partial remainder dropped, AdamW
    under the warmup+cosine schedule. ``negatives`` holds each pair's
    mined negative token sequences, aligned with ``pairs``.
    """
    if len(pairs) != len(negatives):
        raise DataError(
            f"{len(pairs)} pairs but {len(negatives)} negative lists"
        )
    total_steps, schedule = iter_batches(len(pairs), config)
    weights = table.weights.copy()
    state = AdamWState.zeros_like(weights)
    losses: list[float] = []
    for step, indices in enumerate(schedule):
        batch_pairs = [pairs[i] for i in indices]
        batch_negatives = [negatives[i] for i in indices]
        try:
            loss, grads = colbert_loss_and_gradients(
                weights,
                batch_pairs,
                batch_negatives,
                scale=config.scale,
                use_in_batch=use_in_batch,
            )
        except (DataError, NumericError) as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        if not math.isfinite(loss):
            raise NumericError(f"step {step}: non-finite loss {loss}")
        lr = cosine_lr(step, total_steps, config.lr, config.warmup_ratio)
        adamw_step(weights, grads, state, lr, weight_decay=config.weight_decay)
        losses.append(loss)
    return EmbeddingTable(weights), losses


def save_index(path: str | Path, index: TokenEmbeddingIndex) -> None:
    """Write the token index: per-doc row counts plus packed unit rows,
    with the vocabulary and table embedded."""
    vocab_blob = dumps_vocab(index.vocab).encode("utf-8")
    table_raw = np.ascontiguousarray(index.table.weights, dtype="<f4").tobytes()
    doc_ids = sorted(index.doc_matrices)
    packed = b"".join(
        np.ascontiguousarray(index.doc_matrices[doc_id], dtype="<f4").tobytes()
        for doc_id in doc_ids
    )
    digest = hashlib.md5(table_raw + packed).digest()
    max_tokens = 0 if index.max_tokens is None else index.max_tokens
    with open(path, "wb") as handle:
        handle.write(TOKEN_MAGIC)
        handle.write(
            struct.pack(
                "<IIIIII",
                _VERSION,
                len(doc_ids),
                index.table.dim,
                max_tokens,
                index.table.vocab_size,
                len(vocab_blob),
            )
        )
        handle.write(vocab_blob)
        for doc_id in doc_ids:
            handle.write(
                struct.pack(
                    "<qI", doc_id, index.doc_matrices[doc_id].shape[0]
                )
            )
        handle.write(digest)
        handle.write(table_raw)
        handle.write(packed)


def load_index(path: str | Path) -> TokenEmbeddingIndex:
    path = Path(path)
    if not path.exists():
        raise DataError(f"index file not found: {path}")
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(TOKEN_MAGIC)] != TOKEN_MAGIC:
        raise DataError(f"{path}: not a token index (bad magic)")
    offset = len(TOKEN_MAGIC)
    header_fmt = "<IIIIII"
    header_size = struct.calcsize(header_fmt)
    if len(data) < offset + header_size:
        raise DataError(f"{path}: truncated index file")
    version, n_docs, dim, max_tokens, table_vocab, vocab_len = (
        struct.unpack_from(header_fmt, data, offset)
    )
    if version != _VERSION:
        raise DataError(f"{path}: unsupported index version {version}")
    offset += header_size
    if offset + vocab_len > len(data):
        raise DataError(f"{path}: truncated index file")
    vocab = loads_vocab(
        data[offset : offset + vocab_len].decode("utf-8"), source=str(path)
    )
    offset += vocab_len
    row_counts: list[tuple[int, int]] = []
    for _ in range(n_docs):
        if offset + 12 > len(data):
            raise DataError(f"{path}: truncated index file")
        doc_id, n_rows = struct.unpack_from("<qI", data, offset)
        if n_rows < 1:
            raise DataError(f"{path}: doc {doc_id} has no token rows")
        row_counts.append((doc_id, n_rows))
        offset += 12
    digest = data[offset : offset + 16]
    offset += 16
    table_bytes = table_vocab * dim * 4
    total_rows = sum(count for _, count in row_counts)
    raw = data[offset:]
    if len(raw) != table_bytes + total_rows * dim * 4:
        raise DataError(f"{path}: embedding payload has wrong size")
    if hashlib.md5(raw).digest() != digest:
        raise DataError(f"{path}: embedding payload fails integrity check")
    table = EmbeddingTable(
        np.frombuffer(raw[:table_bytes], dtype="<f4")
        .astype(np.float64)
        .reshape(table_vocab, dim)
    )
    rows = np.frombuffer(raw[table_bytes:], dtype="<f4").reshape(
        total_rows, dim
    )
    doc_matrices: dict[int, np.ndarray] = {}
    cursor = 0
    for doc_id, n_rows in row_counts:
        doc_matrices[doc_id] = rows[cursor : cursor + n_rows].copy()
        cursor += n_rows
    return TokenEmbeddingIndex(
        doc_matrices, table, vocab, None if max_tokens == 0 else max_tokens
    )
