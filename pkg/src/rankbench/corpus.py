"""Dataset construction: news articles -> (passages, queries, qrels).

Each article contributes its headline as a query and its body as the
matching passage, with binary relevance between the two. Exact duplicates
(same normalized headline+body) are dropped before pairing so a query
never has two interchangeable positives. The train/test split is
stratified over article categories.

Raw input is a 3-column TSV (headline, body, category). Articles are
numbered in input order after deduplication; article i yields query id i
and doc id i.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

# query_id -> {doc_id: relevance}
Qrels = dict[int, dict[int, int]]


@dataclass(frozen=True)
class RawArticle:
    headline: str
    body: str
    category: str


@dataclass(frozen=True)
class Document:
    doc_id: int
    text: str


@dataclass(frozen=True)
class Query:
    query_id: int
    text: str


@dataclass
class SplitConfig:
    test_fraction: float = 0.10
    seed: int = 13
    stratify_key: str = "category"

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError(
                f"test_fraction must be in (0, 1), got {self.test_fraction}"
            )


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def normalize_article(article: RawArticle) -> RawArticle:
    return RawArticle(
        _nfc(article.headline), _nfc(article.body), _nfc(article.category)
    )


def dedup(articles: list[RawArticle]) -> list[RawArticle]:
    """Keep the first occurrence of each (headline, body) pair.

    The key is the MD5 digest of the UTF-8 bytes of the NFC-normalized
    headline, a newline, and the NFC-normalized body. Input order is
    preserved among survivors.
    """
    seen: set[str] = set()
    kept: list[RawArticle] = []
    for article in articles:
        payload = _nfc(article.headline) + "\n" + _nfc(article.body)
        key = hashlib.md5(payload.encode("utf-8")).hexdigest()
        if key in seen:
            continue
        seen.add(key)
        kept.append(article)
    return kept


def build_pairs(
    articles: list[RawArticle],
) -> tuple[list[Document], list[Query], Qrels, dict[int, str], int]:
    """Turn deduplicated articles into a retrieval dataset.

    Article i yields Document(i, body) and Query(i, headline), with the
    query judged relevant to exactly that document. Articles whose
    headline or body is empty after trimming are skipped and counted.

    Returns (documents, queries, qrels, category-by-query-id, n_skipped).
    """
    documents: list[Document] = []
    queries: list[Query] = []
    qrels: Qrels = {}
    categories: dict[int, str] = {}
    skipped = 0
    next_id = 0
    for article in articles:
        headline = article.headline.strip()
        body = article.body.strip()
        if not headline or not body:
            skipped += 1
            continue
        documents.append(Document(next_id, body))
        queries.append(Query(next_id, headline))
        qrels[next_id] = {next_id: 1}
        categories[next_id] = article.category
        next_id += 1
    return documents, queries, qrels, categories, skipped


def _split_with_warnings(
    queries: list[Query],
    categories: dict[int, str],
    config: SplitConfig,
) -> tuple[set[int], set[int], list[str]]:
    if not queries:
        raise DataError("cannot split an empty query set")
    by_category: dict[str, list[int]] = {}
    for query in queries:
        if query.query_id not in categories:
            raise DataError(f"query {query.query_id} has no category")
        by_category.setdefault(categories[query.query_id], []).append(
            query.query_id
        )

    warnings: list[str] = []
    global_target = max(
        1, math.floor(len(queries) * config.test_fraction + 0.5)
    )

    takes: dict[str, int] = {}
    for category, ids in by_category.items():
        take = math.floor(len(ids) * config.test_fraction + 0.5)
        if take == 0:
            take = 1
            warnings.append(
                f"category {category!r} has only {len(ids)} queries; "
                "forcing one into the test split"
            )
        takes[category] = take

    largest = max(
        by_category, key=lambda category: (len(by_category[category]), category)
    )
    diff = global_target - sum(takes.values())
    if diff != 0:
        wanted = takes[largest] + diff
        clamped = min(max(wanted, 1), len(by_category[largest]))
        if clamped != wanted:
            warnings.append(
                f"could not fully rebalance the split in category "
                f"{largest!r}; global test-size target {global_target} "
                "is unreachable"
            )
        takes[largest] = clamped

    test_ids: set[int] = set()
    for category in sorted(by_category):
        ids = sorted(by_category[category])
        rng = random.Random(derive_seed(config.seed, f"split:{category}"))
        rng.shuffle(ids)
        test_ids.update(ids[: takes[category]])
    train_ids = {query.query_id for query in queries} - test_ids
    return train_ids, test_ids, warnings


def stratified_split(
    queries: list[Query],
    qrels: Qrels,
    categories: dict[int, str],
    config: SplitConfig,
) -> tuple[set[int], set[int]]:
    """Partition query ids into (train, test), stratified by category.

    Per category, round-half-up(test_fraction * n) queries go to the test
    side via a seeded shuffle, with at least one from every nonempty
    category (a warning is logged when that minimum kicks in); the largest
    category is then adjusted so the overall test count hits
    round-half-up(test_fraction * N). The result depends only on the seed
    and the id set, not on input order.
    """
    for query in queries:
        if query.query_id not in qrels:
            raise DataError(f"query {query.query_id} has no judgments")
    train_ids, test_ids, warnings = _split_with_warnings(
        queries, categories, config
    )
    for message in warnings:
        logger.warning(message)
    return train_ids, test_ids


# --- on-disk formats ------------------------------------------------------
#
# collection.tsv / queries.tsv:  one `id<TAB>text` line per entry
# qrels.txt:                     `query_id 0 doc_id relevance`
#
# Writing flattens tabs and newlines inside text to single spaces (the
# formats are line- and tab-delimited, so this is lossy by design).


def _clean_cell(text: str) -> str:
    return " ".join(text.split())


def _parse_int(value: str, path: Path, lineno: int, what: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise DataError(
            f"{path}:{lineno}: {what} must be an integer, got {value!r}"
        ) from exc


def load_raw_tsv(path: str | Path) -> list[RawArticle]:
    """Read raw articles from a 3-column TSV: headline, body, category.

    All fields are NFC-normalized on the way in.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"raw article file not found: {path}")
    articles: list[RawArticle] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields "
                    f"(headline, body, category), got {len(parts)}"
                )
            articles.append(normalize_article(RawArticle(*parts)))
    return articles


def write_raw_tsv(path: str | Path, articles: list[RawArticle]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for article in articles:
            handle.write(
                "\t".join(
                    (
                        _clean_cell(article.headline),
                        _clean_cell(article.body),
                        _clean_cell(article.category),
                    )
                )
                + "\n"
            )


def write_collection(path: str | Path, documents: list[Document]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for document in documents:
            handle.write(f"{document.doc_id}\t{_clean_cell(document.text)}\n")


def read_collection(path: str | Path) -> list[Document]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"collection file not found: {path}")
    documents: list[Document] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected `doc_id<TAB>text`, got "
                    f"{len(parts)} fields"
                )
            doc_id = _parse_int(parts[0], path, lineno, "doc_id")
            if doc_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate doc id {doc_id}")
            if not parts[1]:
                raise DataError(f"{path}:{lineno}: empty document text")
            seen.add(doc_id)
            documents.append(Document(doc_id, parts[1]))
    return documents


def write_queries(path: str | Path, queries: list[Query]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for query in queries:
            handle.write(f"{query.query_id}\t{_clean_cell(query.text)}\n")


def read_queries(path: str | Path) -> list[Query]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"query file not found: {path}")
    queries: list[Query] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected `query_id<TAB>text`, got "
                    f"{len(parts)} fields"
                )
            query_id = _parse_int(parts[0], path, lineno, "query_id")
            if query_id in seen:
                raise DataError(
                    f"{path}:{lineno}: duplicate query id {query_id}"
                )
            if not parts[1]:
                raise DataError(f"{path}:{lineno}: empty query text")
            seen.add(query_id)
            queries.append(Query(query_id, parts[1]))
    return queries


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for query_id in sorted(qrels):
            for doc_id in sorted(qrels[query_id]):
                handle.write(
                    f"{query_id} 0 {doc_id} {qrels[query_id][doc_id]}\n"
                )


def read_qrels(path: str | Path) -> Qrels:
    path = Path(path)
    if not path.exists():
        raise DataError(f"qrels file not found: {path}")
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected `query_id 0 doc_id "
                    f"relevance`, got {len(parts)} fields"
                )
            query_id = _parse_int(parts[0], path, lineno, "query_id")
            doc_id = _parse_int(parts[2], path, lineno, "doc_id")
            relevance = _parse_int(parts[3], path, lineno, "relevance")
            qrels.setdefault(query_id, {})[doc_id] = relevance
    return qrels


def write_dataset(
    documents: list[Document],
    queries: list[Query],
    qrels: Qrels,
    path: str | Path,
) -> None:
    """Write the dataset triple into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_collection(path / "collection.tsv", documents)
    write_queries(path / "queries.tsv", queries)
    write_qrels(path / "qrels.txt", qrels)


def read_dataset(path: str | Path) -> tuple[list[Document], list[Query], Qrels]:
    """Read a dataset directory back; validates cross references."""
    path = Path(path)
    documents = read_collection(path / "collection.tsv")
    queries = read_queries(path / "queries.tsv")
    qrels = read_qrels(path / "qrels.txt")
    doc_ids = {document.doc_id for document in documents}
    query_ids = {query.query_id for query in queries}
    for query_id, judged in qrels.items():
        if query_id not in query_ids:
            raise DataError(
                f"{path / 'qrels.txt'}: judgment references unknown "
                f"query id {query_id}"
            )
        for doc_id in judged:
            if doc_id not in doc_ids:
                raise DataError(
                    f"{path / 'qrels.txt'}: judgment references unknown "
                    f"doc id {doc_id}"
                )
        if not any(rel >= 1 for rel in judged.values()):
            raise DataError(
                f"{path / 'qrels.txt'}: query {query_id} has no relevant "
                "document"
            )
    return documents, queries, qrels


def ingest(
    raw_path: str | Path,
    out_dir: str | Path,
    config: SplitConfig | None = None,
) -> dict:
    """Run dataset construction end to end and write its artifacts.

    Writes into ``out_dir``: the full dataset (``collection.tsv``,
    ``queries.tsv``, ``qrels.txt``), per-split query/qrels files
    (``queries.train.tsv``, ``queries.test.tsv``, ``qrels.train.txt``,
    ``qrels.test.txt``), and ``pairs.train.tsv`` with `query_id,
    query_text, doc_id, doc_text` rows for training.

    Returns a summary dict with counts and any split warnings.
    """
    config = config or SplitConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    articles = load_raw_tsv(raw_path)
    if not articles:
        raise DataError(f"no articles found in {raw_path}")
    unique = dedup(articles)
    documents, queries, qrels, categories, skipped = build_pairs(unique)
    if not queries:
        raise DataError("no usable articles after deduplication and filtering")
    train_ids, test_ids, warnings = _split_with_warnings(
        queries, categories, config
    )
    for message in warnings:
        logger.warning(message)

    write_dataset(documents, queries, qrels, out_dir)

    queries_by_id = {query.query_id: query for query in queries}
    docs_by_id = {document.doc_id: document for document in documents}
    write_queries(
        out_dir / "queries.train.tsv",
        [queries_by_id[qid] for qid in sorted(train_ids)],
    )
    write_queries(
        out_dir / "queries.test.tsv",
        [queries_by_id[qid] for qid in sorted(test_ids)],
    )
    write_qrels(
        out_dir / "qrels.train.txt",
        {qid: rels for qid, rels in qrels.items() if qid in train_ids},
    )
    write_qrels(
        out_dir / "qrels.test.txt",
        {qid: rels for qid, rels in qrels.items() if qid in test_ids},
    )
    with open(out_dir / "pairs.train.tsv", "w", encoding="utf-8") as handle:
        for qid in sorted(train_ids):
            for doc_id in sorted(qrels[qid]):
                handle.write(
                    "\t".join(
                        (
                            str(qid),
                            _clean_cell(queries_by_id[qid].text),
                            str(doc_id),
                            _clean_cell(docs_by_id[doc_id].text),
                        )
                    )
                    + "\n"
                )

    return {
        "articles": len(articles),
        "duplicates_dropped": len(articles) - len(unique),
        "skipped_empty": skipped,
        "documents": len(documents),
        "queries": len(queries),
        "train_queries": len(train_ids),
        "test_queries": len(test_ids),
        "warnings": warnings,
    }


def read_pairs(path: str | Path) -> list[tuple[int, str, int, str]]:
    """Read training pairs written by :func:`ingest`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"pairs file not found: {path}")
    pairs: list[tuple[int, str, int, str]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(parts)}"
                )
            query_id = _parse_int(parts[0], path, lineno, "query_id")
            doc_id = _parse_int(parts[2], path, lineno, "doc_id")
            pairs.append((query_id, parts[1], doc_id, parts[3]))
    return pairs
