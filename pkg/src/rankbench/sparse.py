"""Okapi BM25 over an inverted index of subword token ids.

Documents and queries run through the same tokenizer, without truncation,
so lexical matching operates on exactly the token stream the dense models
see. Index files embed the vocabulary, making them self-contained search
artifacts.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Document, Query
from .errors import DataError
from .tokenizer import BpeVocab, dumps_vocab, encode, loads_vocab

SPARSE_MAGIC = b"RBSPARSE"
_VERSION = 1

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


@dataclass
class InvertedIndex:
    postings: dict[int, list[tuple[int, int]]]  # token -> [(doc_id, tf)]
    doc_len: dict[int, int]
    vocab: BpeVocab
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    avgdl: float = field(init=False)

    def __post_init__(self) -> None:
        if not self.doc_len:
            raise DataError("cannot build an index over zero documents")
        self.avgdl = sum(self.doc_len.values()) / len(self.doc_len)
        if self.avgdl == 0:
            raise DataError("corpus tokenizes to zero tokens")
        for token, entries in self.postings.items():
            self.postings[token] = sorted(entries)

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def df(self, token: int) -> int:
        return len(self.postings.get(token, ()))

    def tf(self, token: int, doc_id: int) -> int:
        entries = self.postings.get(token)
        if not entries:
            return 0
        position = bisect_left(entries, (doc_id, 0))
        if position < len(entries) and entries[position][0] == doc_id:
            return entries[position][1]
        return 0


def build(
    docs: list[Document],
    vocab: BpeVocab,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> InvertedIndex:
    """Index documents; tokenization is shared with the dense side and
    never truncates."""
    if not docs:
        raise DataError("cannot build an index over zero documents")
    postings: dict[int, list[tuple[int, int]]] = {}
    doc_len: dict[int, int] = {}
    for doc in docs:
        if doc.doc_id in doc_len:
            raise DataError(f"duplicate doc id: {doc.doc_id}")
        token_ids = encode(vocab, doc.text, max_tokens=None).ids
        doc_len[doc.doc_id] = len(token_ids)
        counts: dict[int, int] = {}
        for token in token_ids:
            counts[token] = counts.get(token, 0) + 1
        for token, tf in counts.items():
            postings.setdefault(token, []).append((doc.doc_id, tf))
    return InvertedIndex(postings, doc_len, vocab, k1=k1, b=b)


def idf(index: InvertedIndex, token: int) -> float:
    """Smoothed inverse document frequency; positive even when df = N."""
    df = index.df(token)
    return math.log((index.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_score(
    index: InvertedIndex, query_tokens: list[int], doc_id: int
) -> float:
    """BM25 score of one document; query tokens count with multiplicity."""
    if doc_id not in index.doc_len:
        raise DataError(f"doc id {doc_id} not in index")
    dl = index.doc_len[doc_id]
    norm = index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
    score = 0.0
    for token in query_tokens:
        tf = index.tf(token, doc_id)
        if tf == 0:
            continue
        score += idf(index, token) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def search_tokens(
    index: InvertedIndex, query_tokens: list[int], k: int
) -> list[tuple[int, float]]:
    """Top-k documents matching at least one query token.

    Sorted by descending score, ties by ascending doc id. When fewer than
    k documents score above zero, the list is shorter (no padding).
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    scores: dict[int, float] = {}
    for token in query_tokens:
        entries = index.postings.get(token)
        if not entries:
            continue
        token_idf = idf(index, token)
        for doc_id, tf in entries:
            dl = index.doc_len[doc_id]
            norm = index.k1 * (1.0 - index.b + index.b * dl / index.avgdl)
            contribution = token_idf * tf * (index.k1 + 1.0) / (tf + norm)
            scores[doc_id] = scores.get(doc_id, 0.0) + contribution
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def search(index: InvertedIndex, query: Query, k: int) -> list[tuple[int, float]]:
    """Tokenize the query with the index's own vocabulary and search."""
    tokens = encode(index.vocab, query.text, max_tokens=None).ids
    return search_tokens(index, list(tokens), k)


def save_index(path: str | Path, index: InvertedIndex) -> None:
    """Write the index in a little-endian binary format.

    Layout: magic, version, k1/b, the embedded vocabulary (length-prefixed
    text block), per-document ids and lengths, then postings keyed by
    token id.
    """
    vocab_blob = dumps_vocab(index.vocab).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(SPARSE_MAGIC)
        handle.write(struct.pack("<I", _VERSION))
        handle.write(struct.pack("<dd", index.k1, index.b))
        handle.write(struct.pack("<I", len(vocab_blob)))
        handle.write(vocab_blob)
        handle.write(struct.pack("<I", index.n_docs))
        for doc_id in sorted(index.doc_len):
            handle.write(struct.pack("<qI", doc_id, index.doc_len[doc_id]))
        handle.write(struct.pack("<I", len(index.postings)))
        for token in sorted(index.postings):
            entries = index.postings[token]
            handle.write(struct.pack("<II", token, len(entries)))
            for doc_id, tf in entries:
                handle.write(struct.pack("<qI", doc_id, tf))


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    if not path.exists():
        raise DataError(f"index file not found: {path}")
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(SPARSE_MAGIC)] != SPARSE_MAGIC:
        raise DataError(f"{path}: not a BM25 index (bad magic)")
    offset = len(SPARSE_MAGIC)

    def unpack(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise DataError(f"{path}: truncated index file")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (version,) = unpack("<I")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported index version {version}")
    k1, b = unpack("<dd")
    (vocab_size,) = unpack("<I")
    if offset + vocab_size > len(data):
        raise DataError(f"{path}: truncated index file")
    vocab = loads_vocab(
        data[offset : offset + vocab_size].decode("utf-8"), source=str(path)
    )
    offset += vocab_size
    (n_docs,) = unpack("<I")
    doc_len: dict[int, int] = {}
    for _ in range(n_docs):
        doc_id, length = unpack("<qI")
        doc_len[doc_id] = length
    (n_terms,) = unpack("<I")
    postings: dict[int, list[tuple[int, int]]] = {}
    for _ in range(n_terms):
        token, n_postings = unpack("<II")
        entries: list[tuple[int, int]] = []
        for _ in range(n_postings):
            doc_id, tf = unpack("<qI")
            if doc_id not in doc_len:
                raise DataError(f"{path}: posting references unknown document")
            entries.append((doc_id, tf))
        postings[token] = entries
    return InvertedIndex(postings, doc_len, vocab, k1=k1, b=b)
