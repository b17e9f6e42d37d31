"""Exact (brute-force) top-k retrieval over pooled passage embeddings.

The index stores one unit-norm row per document in float32; scoring
accumulates in float64 so top-k boundaries are reproducible. Index files
embed the vocabulary and the embedding table, so searching needs only the
index and the queries.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Document
from .encoder import EmbeddingTable, encode as encode_pooled
from .errors import DataError, NumericError
from .tokenizer import BpeVocab, dumps_vocab, encode, loads_vocab

DENSE_MAGIC = b"RBDENSEI"
_VERSION = 1


@dataclass
class DenseIndex:
    doc_ids: list[int]
    matrix: np.ndarray  # (n_docs, dim) float32, unit rows
    table: EmbeddingTable
    vocab: BpeVocab
    max_tokens: int | None = 512

    @property
    def n_docs(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build(
    table: EmbeddingTable,
    docs: list[Document],
    vocab: BpeVocab,
    max_tokens: int | None = 512,
) -> DenseIndex:
    """Encode every document into one unit row."""
    if not docs:
        raise DataError("cannot build an index over zero documents")
    doc_ids: list[int] = []
    rows: list[np.ndarray] = []
    seen: set[int] = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise DataError(f"duplicate doc id: {doc.doc_id}")
        seen.add(doc.doc_id)
        tokens = encode(vocab, doc.text, max_tokens=max_tokens)
        try:
            rows.append(encode_pooled(table, tokens))
        except (DataError, NumericError) as exc:
            raise type(exc)(f"doc {doc.doc_id}: {exc}") from exc
        doc_ids.append(doc.doc_id)
    matrix = np.stack(rows).astype(np.float32)
    return DenseIndex(doc_ids, matrix, table, vocab, max_tokens)


def encode_query(index: DenseIndex, text: str) -> np.ndarray:
    """Pooled unit embedding of a query, using the index's own
    vocabulary, table, and truncation limit."""
    tokens = encode(index.vocab, text, max_tokens=index.max_tokens)
    return encode_pooled(index.table, tokens)


def search(
    index: DenseIndex, q_vec: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """Top-k documents by dot product (cosine, given unit rows).

    Ties break by ascending doc id; the list has min(k, n_docs) entries.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    q_vec = np.asarray(q_vec, dtype=np.float64)
    if q_vec.shape != (index.dim,):
        raise DataError(
            f"query embedding has shape {q_vec.shape}, index dim is "
            f"{index.dim}"
        )
    scores = index.matrix @ q_vec
    ids = np.asarray(index.doc_ids, dtype=np.int64)
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def search_many(
    index: DenseIndex,
    q_vecs: list[np.ndarray],
    k: int,
    workers: int = 1,
) -> list[list[tuple[int, float]]]:
    """Search several queries; output order always matches input order."""
    if workers <= 1:
        return [search(index, q_vec, k) for q_vec in q_vecs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda q_vec: search(index, q_vec, k), q_vecs))


def save_index(path: str | Path, index: DenseIndex) -> None:
    """Write the index, embedded vocabulary, and embedding table."""
    vocab_blob = dumps_vocab(index.vocab).encode("utf-8")
    table_raw = np.ascontiguousarray(index.table.weights, dtype="<f4").tobytes()
    matrix_raw = np.ascontiguousarray(index.matrix, dtype="<f4").tobytes()
    digest = hashlib.md5(table_raw + matrix_raw).digest()
    max_tokens = 0 if index.max_tokens is None else index.max_tokens
    with open(path, "wb") as handle:
        handle.write(DENSE_MAGIC)
        handle.write(
            struct.pack(
                "<IIIIII",
                _VERSION,
                index.n_docs,
                index.dim,
                max_tokens,
                index.table.vocab_size,
                len(vocab_blob),
            )
        )
        handle.write(vocab_blob)
        for doc_id in index.doc_ids:
            handle.write(struct.pack("<q", doc_id))
        handle.write(digest)
        handle.write(table_raw)
        handle.write(matrix_raw)


def load_index(path: str | Path) -> DenseIndex:
    path = Path(path)
    if not path.exists():
        raise DataError(f"index file not found: {path}")
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(DENSE_MAGIC)] != DENSE_MAGIC:
        raise DataError(f"{path}: not a dense index (bad magic)")
    offset = len(DENSE_MAGIC)
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
    doc_ids: list[int] = []
    for _ in range(n_docs):
        if offset + 8 > len(data):
            raise DataError(f"{path}: truncated index file")
        (doc_id,) = struct.unpack_from("<q", data, offset)
        doc_ids.append(doc_id)
        offset += 8
    digest = data[offset : offset + 16]
    offset += 16
    table_bytes = table_vocab * dim * 4
    matrix_bytes = n_docs * dim * 4
    raw = data[offset:]
    if len(raw) != table_bytes + matrix_bytes:
        raise DataError(f"{path}: embedding payload has wrong size")
    if hashlib.md5(raw).digest() != digest:
        raise DataError(f"{path}: embedding payload fails integrity check")
    table = EmbeddingTable(
        np.frombuffer(raw[:table_bytes], dtype="<f4")
        .astype(np.float64)
        .reshape(table_vocab, dim)
    )
    matrix = (
        np.frombuffer(raw[table_bytes:], dtype="<f4").reshape(n_docs, dim).copy()
    )
    return DenseIndex(
        doc_ids, matrix, table, vocab, None if max_tokens == 0 else max_tokens
    )
