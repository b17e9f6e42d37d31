"""Dataset construction: normalization, dedup, pairing, split, file IO."""

import logging

import pytest

from rankbench import corpus
from rankbench.corpus import (
    Document,
    Query,
    RawArticle,
    SplitConfig,
    build_pairs,
    dedup,
    normalize_article,
    stratified_split,
)
from rankbench.errors import DataError


def _article(headline="h", body="b", category="news"):
    return RawArticle(headline, body, category)


class TestNormalizeAndDedup:
    def test_nfc_normalization(self):
        # U+0065 U+0301 (e + combining acute) composes to U+00E9
        decomposed = "café"
        article = normalize_article(RawArticle(decomposed, decomposed, "x"))
        assert article.headline == "café"
        assert article.body == "café"

    def test_dedup_drops_exact_copies_keeps_first(self):
        a = _article("h1", "b1")
        b = _article("h2", "b2")
        kept = dedup([a, b, _article("h1", "b1"), a])
        assert kept == [a, b]

    def test_dedup_is_nfc_aware(self):
        composed = _article("café", "body")
        decomposed = _article("café", "body")
        assert dedup([composed, decomposed]) == [composed]

    def test_different_category_same_text_is_still_duplicate(self):
        a = RawArticle("h", "b", "sports")
        b = RawArticle("h", "b", "politics")
        assert dedup([a, b]) == [a]

    def test_headline_body_boundary_matters(self):
        # ("ab", "c") and ("a", "bc") must not collide
        kept = dedup([_article("ab", "c"), _article("a", "bc")])
        assert len(kept) == 2


class TestBuildPairs:
    def test_sequential_ids_and_qrels(self):
        articles = [_article("q0", "d0"), _article("q1", "d1")]
        documents, queries, qrels, categories, skipped = build_pairs(articles)
        assert documents == [Document(0, "d0"), Document(1, "d1")]
        assert queries == [Query(0, "q0"), Query(1, "q1")]
        assert qrels == {0: {0: 1}, 1: {1: 1}}
        assert categories == {0: "news", 1: "news"}
        assert skipped == 0

    def test_empty_headline_or_body_is_skipped_and_counted(self):
        articles = [
            _article("", "body"),
            _article("head", "   "),
            _article("keep", "me"),
        ]
        documents, queries, _, _, skipped = build_pairs(articles)
        assert skipped == 2
        # surviving article still gets id 0
        assert documents == [Document(0, "me")]
        assert queries == [Query(0, "keep")]


def _queries_with_categories(sizes: dict[str, int]):
    queries = []
    categories = {}
    next_id = 0
    for category, count in sorted(sizes.items()):
        for _ in range(count):
            queries.append(Query(next_id, f"q{next_id}"))
            categories[next_id] = category
            next_id += 1
    qrels = {q.query_id: {q.query_id: 1} for q in queries}
    return queries, qrels, categories


class TestStratifiedSplit:
    def test_partition_covers_everything(self):
        queries, qrels, categories = _queries_with_categories(
            {"a": 40, "b": 30, "c": 30}
        )
        train, test = stratified_split(
            queries, qrels, categories, SplitConfig(seed=3)
        )
        assert train | test == {q.query_id for q in queries}
        assert train & test == set()

    def test_global_test_size_is_rounded_half_up(self):
        queries, qrels, categories = _queries_with_categories({"a": 25})
        _, test = stratified_split(
            queries, qrels, categories, SplitConfig(test_fraction=0.10)
        )
        # 2.5 rounds up to 3
        assert len(test) == 3

    def test_per_category_proportions(self):
        queries, qrels, categories = _queries_with_categories(
            {"a": 100, "b": 100}
        )
        _, test = stratified_split(
            queries, qrels, categories, SplitConfig(test_fraction=0.10)
        )
        by_cat = {"a": 0, "b": 0}
        for query_id in test:
            by_cat[categories[query_id]] += 1
        assert by_cat == {"a": 10, "b": 10}

    def test_tiny_category_contributes_at_least_one(self, caplog):
        queries, qrels, categories = _queries_with_categories(
            {"big": 96, "tiny": 4}
        )
        with caplog.at_level(logging.WARNING, logger="rankbench.corpus"):
            _, test = stratified_split(
                queries, qrels, categories, SplitConfig(test_fraction=0.10)
            )
        tiny_test = [q for q in test if categories[q] == "tiny"]
        assert len(tiny_test) == 1
        assert any("tiny" in record.message for record in caplog.records)

    def test_order_independence(self):
        queries, qrels, categories = _queries_with_categories(
            {"a": 37, "b": 17, "c": 5}
        )
        config = SplitConfig(seed=11)
        train1, test1 = stratified_split(queries, qrels, categories, config)
        reversed_queries = list(reversed(queries))
        train2, test2 = stratified_split(
            reversed_queries, qrels, categories, config
        )
        assert train1 == train2
        assert test1 == test2

    def test_seed_changes_split(self):
        queries, qrels, categories = _queries_with_categories({"a": 50})
        _, test1 = stratified_split(
            queries, qrels, categories, SplitConfig(seed=1)
        )
        _, test2 = stratified_split(
            queries, qrels, categories, SplitConfig(seed=2)
        )
        assert test1 != test2

    def test_same_seed_same_split(self):
        queries, qrels, categories = _queries_with_categories(
            {"a": 33, "b": 21}
        )
        results = [
            stratified_split(queries, qrels, categories, SplitConfig(seed=5))
            for _ in range(3)
        ]
        assert results[0] == results[1] == results[2]

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
    def test_bad_fraction_rejected(self, fraction):
        with pytest.raises(DataError):
            SplitConfig(test_fraction=fraction)

    def test_unjudged_query_rejected(self):
        queries, qrels, categories = _queries_with_categories({"a": 10})
        del qrels[3]
        with pytest.raises(DataError, match="no judgments"):
            stratified_split(queries, qrels, categories, SplitConfig())

    def test_empty_query_set_rejected(self):
        with pytest.raises(DataError):
            stratified_split([], {}, {}, SplitConfig())


class TestFileFormats:
    def test_raw_tsv_roundtrip(self, tmp_path):
        path = tmp_path / "raw.tsv"
        articles = [
            _article("head one", "body one", "a"),
            _article("head two", "body two", "b"),
        ]
        corpus.write_raw_tsv(path, articles)
        assert corpus.load_raw_tsv(path) == articles

    def test_raw_tsv_flattens_internal_whitespace(self, tmp_path):
        path = tmp_path / "raw.tsv"
        corpus.write_raw_tsv(path, [_article("a\tb", "c\nd", "e")])
        (article,) = corpus.load_raw_tsv(path)
        assert article == _article("a b", "c d", "e")

    def test_raw_tsv_wrong_column_count(self, tmp_path):
        path = tmp_path / "raw.tsv"
        path.write_text("only\ttwo\n", encoding="utf-8")
        with pytest.raises(DataError, match=r"raw\.tsv:1"):
            corpus.load_raw_tsv(path)

    def test_collection_roundtrip(self, tmp_path):
        path = tmp_path / "collection.tsv"
        documents = [Document(3, "three"), Document(10, "ten")]
        corpus.write_collection(path, documents)
        assert corpus.read_collection(path) == documents

    def test_collection_rejects_duplicate_ids(self, tmp_path):
        path = tmp_path / "collection.tsv"
        path.write_text("1\ta\n1\tb\n", encoding="utf-8")
        with pytest.raises(DataError, match="duplicate doc id 1"):
            corpus.read_collection(path)

    def test_collection_rejects_non_integer_id(self, tmp_path):
        path = tmp_path / "collection.tsv"
        path.write_text("x\ta\n", encoding="utf-8")
        with pytest.raises(DataError, match="must be an integer"):
            corpus.read_collection(path)

    def test_queries_roundtrip(self, tmp_path):
        path = tmp_path / "queries.tsv"
        queries = [Query(0, "zero"), Query(2, "two")]
        corpus.write_queries(path, queries)
        assert corpus.read_queries(path) == queries

    def test_qrels_roundtrip(self, tmp_path):
        path = tmp_path / "qrels.txt"
        qrels = {0: {0: 1, 5: 0}, 7: {7: 1}}
        corpus.write_qrels(path, qrels)
        assert corpus.read_qrels(path) == qrels
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "0 0 0 1"
        assert lines[1] == "0 0 5 0"

    def test_qrels_wrong_field_count(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("1 0 2\n", encoding="utf-8")
        with pytest.raises(DataError, match="qrels.txt:1"):
            corpus.read_qrels(path)

    def test_missing_file_errors_name_the_path(self, tmp_path):
        with pytest.raises(DataError, match="nope"):
            corpus.read_collection(tmp_path / "nope")

    def test_dataset_roundtrip_and_validation(self, tmp_path):
        documents, queries, qrels, _, _ = build_pairs(
            [_article(f"q{i}", f"d{i}") for i in range(4)]
        )
        corpus.write_dataset(documents, queries, qrels, tmp_path)
        got_docs, got_queries, got_qrels = corpus.read_dataset(tmp_path)
        assert got_docs == documents
        assert got_queries == queries
        assert got_qrels == qrels

    def test_dataset_rejects_unknown_doc_reference(self, tmp_path):
        documents, queries, qrels, _, _ = build_pairs([_article("q", "d")])
        corpus.write_dataset(documents, queries, qrels, tmp_path)
        with open(tmp_path / "qrels.txt", "a", encoding="utf-8") as handle:
            handle.write("0 0 99 1\n")
        with pytest.raises(DataError, match="unknown doc id 99"):
            corpus.read_dataset(tmp_path)

    def test_dataset_requires_a_relevant_doc_per_query(self, tmp_path):
        documents, queries, qrels, _, _ = build_pairs(
            [_article("q", "d"), _article("q2", "d2")]
        )
        qrels[1] = {0: 0}  # judged but nothing relevant
        corpus.write_dataset(documents, queries, qrels, tmp_path)
        with pytest.raises(DataError, match="no relevant"):
            corpus.read_dataset(tmp_path)


class TestIngest:
    def test_writes_expected_files(self, tmp_path):
        raw = tmp_path / "raw.tsv"
        corpus.write_raw_tsv(
            raw,
            [_article(f"query {i}", f"body {i}", f"c{i % 2}") for i in range(30)]
            + [_article("query 0", "body 0", "c0")],  # duplicate
        )
        summary = corpus.ingest(raw, tmp_path / "out", SplitConfig(seed=13))
        for name in (
            "collection.tsv",
            "queries.tsv",
            "qrels.txt",
            "queries.train.tsv",
            "queries.test.tsv",
            "qrels.train.txt",
            "qrels.test.txt",
            "pairs.train.tsv",
        ):
            assert (tmp_path / "out" / name).exists(), name
        assert summary["articles"] == 31
        assert summary["duplicates_dropped"] == 1
        assert summary["documents"] == 30
        assert summary["train_queries"] + summary["test_queries"] == 30

    def test_split_files_partition_queries(self, tmp_path):
        raw = tmp_path / "raw.tsv"
        corpus.write_raw_tsv(
            raw, [_article(f"q {i}", f"d {i}", "c") for i in range(40)]
        )
        corpus.ingest(raw, tmp_path / "out", SplitConfig(seed=1))
        train = {q.query_id for q in corpus.read_queries(tmp_path / "out" / "queries.train.tsv")}
        test = {q.query_id for q in corpus.read_queries(tmp_path / "out" / "queries.test.tsv")}
        everything = {q.query_id for q in corpus.read_queries(tmp_path / "out" / "queries.tsv")}
        assert train | test == everything
        assert not train & test

    def test_pairs_file_covers_train_qrels(self, tmp_path):
        raw = tmp_path / "raw.tsv"
        corpus.write_raw_tsv(
            raw, [_article(f"q {i}", f"d {i}", "c") for i in range(25)]
        )
        corpus.ingest(raw, tmp_path / "out", SplitConfig(seed=2))
        rows = corpus.read_pairs(tmp_path / "out" / "pairs.train.tsv")
        qrels_train = corpus.read_qrels(tmp_path / "out" / "qrels.train.txt")
        assert {(qid, did) for qid, _, did, _ in rows} == {
            (qid, did)
            for qid, judged in qrels_train.items()
            for did, rel in judged.items()
            if rel >= 1
        }

    def test_deterministic_artifacts(self, tmp_path):
        raw = tmp_path / "raw.tsv"
        corpus.write_raw_tsv(
            raw, [_article(f"q {i}", f"d {i}", f"c{i % 3}") for i in range(20)]
        )
        corpus.ingest(raw, tmp_path / "one", SplitConfig(seed=9))
        corpus.ingest(raw, tmp_path / "two", SplitConfig(seed=9))
        for name in ("collection.tsv", "queries.test.tsv", "pairs.train.tsv"):
            assert (tmp_path / "one" / name).read_bytes() == (
                tmp_path / "two" / name
            ).read_bytes()

    def test_empty_input_rejected(self, tmp_path):
        raw = tmp_path / "raw.tsv"
        raw.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            corpus.ingest(raw, tmp_path / "out")
