"""Acceptance gate: nine end-to-end properties the package must exhibit.

Each test prints one ``PASS``/``FAIL`` line (with its runtime against the
stated budget) so the gate can be read off the terminal at a glance.
"""

import math
import random
import time
from contextlib import contextmanager

import numpy as np

import oracles
from rankbench import (
    corpus,
    dense,
    encoder,
    evaluation,
    late,
    pipeline,
    sparse,
    synthetic,
    tokenizer,
)
from rankbench.corpus import Document
from rankbench.encoder import Batch, EmbeddingTable
from rankbench.tokenizer import TokenSequence


@contextmanager
def _criterion(capsys, number, title, budget_s=None):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, (
                f"criterion {number} took {elapsed:.1f}s, "
                f"budget {budget_s:.0f}s"
            )
    except BaseException:
        with capsys.disabled():
            print(f"FAIL criterion {number}: {title}")
        raise
    with capsys.disabled():
        if budget_s is None:
            print(f"PASS criterion {number}: {title} [{elapsed:.1f}s]")
        else:
            print(
                f"PASS criterion {number}: {title} "
                f"[{elapsed:.1f}s < {budget_s:.0f}s]"
            )


def _random_seq(rng, vocab_size, max_len):
    length = int(rng.integers(1, max_len + 1))
    return TokenSequence(
        tuple(int(i) for i in rng.integers(2, vocab_size, size=length)),
        False,
    )


def _max_relative_error(analytic, numeric):
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def _unit_rows(weights, seq):
    rows = weights[[t for t in seq.ids if t != 0]]
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _min_argmax_margin(weights, pairs, negatives, use_in_batch):
    """Smallest best-vs-second-best gap over every query token and
    candidate passage; infinity when no candidate has two rows."""
    margin = math.inf
    positives = [positive for _, positive in pairs]
    for i, (query, _) in enumerate(pairs):
        candidates = [positives[i]] + list(negatives[i])
        if use_in_batch:
            candidates += [p for j, p in enumerate(positives) if j != i]
        q_units = _unit_rows(weights, query)
        for candidate in candidates:
            sims = q_units @ _unit_rows(weights, candidate).T
            if sims.shape[1] < 2:
                continue
            top2 = np.sort(sims, axis=1)[:, -2:]
            margin = min(margin, float(np.min(top2[:, 1] - top2[:, 0])))
    return margin


def _char_vocab(texts):
    chars = {c for text in texts for word in text.split() for c in word}
    return tokenizer.train_bpe(texts, vocab_size=len(chars) + 2)


def _random_texts(rng, n_docs, alphabet, max_words, duplicate_rate=0.1):
    """Word soup with occasional exact duplicates to exercise tie rules."""
    texts = []
    while len(texts) < n_docs:
        if texts and rng.random() < duplicate_rate:
            texts.append(rng.choice(texts))
        else:
            n_words = rng.randint(1, max_words)
            texts.append(
                " ".join(rng.choice(alphabet) for _ in range(n_words))
            )
    return texts


def _assert_rankings_match(got, want, tie_tol=1e-9):
    """Both rankings carry the same docs in the same order, except inside
    groups of mathematically tied scores, where each implementation's own
    rounding may legitimately pick either order."""
    assert len(got) == len(want)
    np.testing.assert_allclose(
        [score for _, score in got],
        [score for _, score in want],
        atol=1e-12,
    )
    scores = [score for _, score in want]
    start = 0
    for end in range(1, len(want) + 1):
        if end < len(want) and abs(scores[end] - scores[end - 1]) <= tie_tol:
            continue
        got_group = sorted(doc_id for doc_id, _ in got[start:end])
        want_group = sorted(doc_id for doc_id, _ in want[start:end])
        assert got_group == want_group
        start = end


# Shipped-configuration pipeline runs, shared between criteria 4/5 and 6.
_SHIPPED: dict = {}


def _shipped_pipeline(kind, tmp_path_factory):
    if kind not in _SHIPPED:
        base = tmp_path_factory.mktemp(f"accept-{kind}")
        raw = base / "raw.tsv"
        corpus.write_raw_tsv(raw, synthetic.make_corpus(kind, seed=42))
        config = pipeline.load_config(
            overrides={"raw": str(raw), "workdir": str(base / "work")},
            env={},
        )
        summary = pipeline.run_pipeline(config)
        _SHIPPED[kind] = (config, summary, base / "work")
    return _SHIPPED[kind]


def test_01_gradient_correctness(capsys):
    title = "analytic gradients match central finite differences"
    with _criterion(capsys, 1, title, budget_s=30.0):
        rng = np.random.default_rng(101)

        worst_bi = 0.0
        for _ in range(60):
            vocab_size = int(rng.integers(6, 12))
            dim = int(rng.integers(2, 5))
            weights = rng.normal(0.0, 0.8, size=(vocab_size, dim))
            weights[0] = 0.0
            batch_size = int(rng.integers(2, 5))
            batch = Batch(
                queries=[
                    _random_seq(rng, vocab_size, 4) for _ in range(batch_size)
                ],
                positives=[
                    _random_seq(rng, vocab_size, 4) for _ in range(batch_size)
                ],
            )
            _, grads = encoder.mnrl_loss_and_gradients(
                EmbeddingTable(weights), batch, scale=20.0
            )
            numeric = oracles.finite_difference(
                lambda w: encoder.mnrl_loss(
                    EmbeddingTable(w), batch, scale=20.0
                ),
                weights.copy(),
                step=1e-6,
            )
            worst_bi = max(worst_bi, _max_relative_error(grads, numeric))
        assert worst_bi < 1e-5, f"bi-encoder gradient error {worst_bi:.2e}"

        worst_late = 0.0
        accepted = 0
        while accepted < 40:
            vocab_size = int(rng.integers(6, 12))
            batch_size = int(rng.integers(1, 4))
            weights = rng.normal(0.0, 0.8, size=(vocab_size, 3))
            weights[0] = 0.0
            pairs = [
                (_random_seq(rng, vocab_size, 4),
                 _random_seq(rng, vocab_size, 5))
                for _ in range(batch_size)
            ]
            negatives = [
                [
                    _random_seq(rng, vocab_size, 5)
                    for _ in range(int(rng.integers(0, 3)))
                ]
                for _ in range(batch_size)
            ]
            use_in_batch = bool(rng.integers(0, 2)) or batch_size == 1
            margin = _min_argmax_margin(
                weights, pairs, negatives, use_in_batch
            )
            if margin < 1e-3:
                continue  # the bound only holds away from max-ties
            _, grads = late.colbert_loss_and_gradients(
                weights, pairs, negatives, scale=20.0,
                use_in_batch=use_in_batch,
            )
            numeric = oracles.finite_difference(
                lambda w: late.colbert_loss_and_gradients(
                    w, pairs, negatives, scale=20.0,
                    use_in_batch=use_in_batch,
                )[0],
                weights.copy(),
                step=1e-6,
            )
            worst_late = max(worst_late, _max_relative_error(grads, numeric))
            accepted += 1
        assert worst_late < 1e-4, f"late gradient error {worst_late:.2e}"


def test_02_metric_oracle_equivalence(capsys):
    title = "ranking metrics match an independent reimplementation"
    with _criterion(capsys, 2, title, budget_s=10.0):
        rng = np.random.default_rng(202)
        oracle_fns = {
            "mrr": oracles.mrr,
            "ndcg": oracles.ndcg,
            "recall": oracles.recall,
        }
        for _ in range(1000):
            n_docs = int(rng.integers(1, 30))
            n_queries = int(rng.integers(1, 6))
            qrels = {}
            run = {}
            for query_id in range(n_queries):
                judged = rng.choice(
                    n_docs,
                    size=int(rng.integers(1, n_docs + 1)),
                    replace=False,
                )
                qrels[query_id] = {
                    int(doc): int(rng.integers(0, 2)) for doc in judged
                }
                if rng.random() < 0.85:
                    depth = int(rng.integers(1, n_docs + 1))
                    ranked = [int(d) for d in rng.permutation(n_docs)[:depth]]
                    run[query_id] = [
                        (doc_id, float(depth - position))
                        for position, doc_id in enumerate(ranked)
                    ]
            k = int(rng.integers(1, 20))
            evaluated = sorted(
                query_id
                for query_id, judged in qrels.items()
                if any(rel >= 1 for rel in judged.values())
            )
            for name, oracle in oracle_fns.items():
                got = evaluation.compute_metric(run, qrels, f"{name}@{k}")
                assert sorted(got.per_query) == evaluated
                assert got.n_skipped == len(qrels) - len(evaluated)
                total = 0.0
                for query_id in evaluated:
                    relevant = {
                        doc
                        for doc, rel in qrels[query_id].items()
                        if rel >= 1
                    }
                    ranked_ids = [d for d, _ in run.get(query_id, [])]
                    want = oracle(ranked_ids, relevant, k)
                    assert abs(got.per_query[query_id] - want) <= 1e-12
                    total += want
                want_mean = total / len(evaluated) if evaluated else 0.0
                assert abs(got.mean - want_mean) <= 1e-12

        # hand-derived values
        single_rel_at_2 = evaluation.compute_metric(
            {1: [(10, 2.0), (11, 1.0)]}, {1: {10: 0, 11: 1}}, "ndcg@10"
        )
        assert abs(single_rel_at_2.per_query[1] - 1.0 / math.log2(3.0)) < 1e-4
        ttest = evaluation.paired_t_test(
            [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]
        )
        assert abs(ttest.t - 1.7321) < 1e-4
        assert abs(ttest.p - 0.1817) < 1e-4


def test_03_retrieval_oracle_equivalence(capsys):
    title = "BM25, dense, and MaxSim ranking match brute force"
    with _criterion(capsys, 3, title, budget_s=60.0):
        rng = random.Random(303)
        nrng = np.random.default_rng(303)

        for trial in range(40):
            n_docs = 200 if trial == 0 else rng.randint(2, 200)
            texts = _random_texts(rng, n_docs, "abcdefg", max_words=12)
            vocab = _char_vocab(texts)
            docs = [Document(i, text) for i, text in enumerate(texts)]
            index = sparse.build(docs, vocab)
            doc_tokens = {
                doc.doc_id: list(
                    tokenizer.encode(vocab, doc.text, max_tokens=None).ids
                )
                for doc in docs
            }
            query_tokens = list(
                tokenizer.encode(
                    vocab,
                    " ".join(rng.choice("abcdefg") for _ in range(4)),
                    max_tokens=None,
                ).ids
            )
            k = rng.randint(1, 15)
            got = sparse.search_tokens(index, query_tokens, k)
            want = oracles.bm25_rank(doc_tokens, query_tokens, k)
            _assert_rankings_match(got, want)

        for trial in range(30):
            n_docs = rng.randint(2, 200)
            texts = _random_texts(rng, n_docs, "hijklm", max_words=8)
            vocab = _char_vocab(texts)
            docs = [Document(i, text) for i, text in enumerate(texts)]
            table = encoder.init_table(vocab.size, 6, seed=trial)
            index = dense.build(table, docs, vocab, max_tokens=32)
            doc_vecs = dict(zip(index.doc_ids, index.matrix))
            q_vec = nrng.normal(size=6)
            q_vec /= np.linalg.norm(q_vec)
            k = rng.randint(1, 20)
            got = dense.search(index, q_vec, k)
            want = oracles.dense_rank(doc_vecs, q_vec, k)
            _assert_rankings_match(got, want)

        for trial in range(30):
            n_docs = rng.randint(2, 120)
            texts = _random_texts(rng, n_docs, "nopqrs", max_words=4)
            vocab = _char_vocab(texts)
            docs = [Document(i, text) for i, text in enumerate(texts)]
            table = encoder.init_table(vocab.size, 5, seed=1000 + trial)
            index = late.build(table, docs, vocab, max_tokens=16)
            q_mat = late.encode_query_tokens(index, rng.choice(texts))
            candidates = [(doc.doc_id, 0.0) for doc in docs]
            got = late.rerank(candidates, index, q_mat, n_docs)
            want = oracles.maxsim_rank(
                [doc.doc_id for doc in docs],
                index.doc_matrices,
                q_mat,
                n_docs,
            )
            _assert_rankings_match(got, want)


def test_04_dense_beats_sparse_on_paraphrases(capsys, tmp_path_factory):
    title = "trained embeddings resolve paraphrases that word overlap misses"
    with _criterion(capsys, 4, title, budget_s=300.0):
        _, summary, _ = _shipped_pipeline("paraphrase", tmp_path_factory)
        mrr_dense = summary["evaluate"]["dense"]
        mrr_bm25 = summary["evaluate"]["bm25"]
        assert mrr_dense >= 0.9, f"dense MRR@10 {mrr_dense:.4f} < 0.9"
        assert mrr_bm25 <= 0.1, f"BM25 MRR@10 {mrr_bm25:.4f} > 0.1"


def test_05_reranking_beats_pooled_embeddings(capsys, tmp_path_factory):
    title = "token-level reranking lifts MRR over pooled retrieval"
    with _criterion(capsys, 5, title, budget_s=300.0):
        config, summary, _ = _shipped_pipeline(
            "token-overlap", tmp_path_factory
        )
        assert config.run_k == 150  # reranking the top-150 dense candidates
        mrr_dense = summary["evaluate"]["dense"]
        mrr_colbert = summary["evaluate"]["colbert"]
        assert mrr_colbert - mrr_dense >= 0.05, (
            f"rerank MRR@10 {mrr_colbert:.4f} vs dense {mrr_dense:.4f}"
        )


def test_06_rerank_recall_never_exceeds_candidates(capsys, tmp_path_factory):
    title = "reranked recall never exceeds its candidate set's recall"
    with _criterion(capsys, 6, title):
        checked = 0
        for kind in ("paraphrase", "token-overlap"):
            _, _, workdir = _shipped_pipeline(kind, tmp_path_factory)
            candidates = evaluation.read_run(workdir / "run.dense.trec")
            reranked = evaluation.read_run(workdir / "run.colbert.trec")
            qrels = corpus.read_qrels(workdir / "data" / "qrels.test.txt")
            for query_id, ranked in reranked.items():
                relevant = {
                    doc
                    for doc, rel in qrels[query_id].items()
                    if rel >= 1
                }
                pool = {doc for doc, _ in candidates[query_id]}
                pool_hits = len(relevant & pool)
                for k in (1, 5, 10, 50, 100):
                    top = {doc for doc, _ in ranked[:k]}
                    assert len(relevant & top) <= pool_hits
                    checked += 1
        assert checked > 0


def test_07_fertility_properties(capsys):
    title = "merge training strictly lowers fertility, floored at one"
    with _criterion(capsys, 7, title, budget_s=30.0):
        rng = random.Random(707)
        letters = "abcdefghijklmnopqrstuvwxyz"
        stock = set()
        while len(stock) < 900:
            stock.add(
                "".join(
                    rng.choice(letters) for _ in range(rng.randint(8, 14))
                )
            )
        stock = sorted(stock)
        texts = [
            " ".join(rng.choice(stock) for _ in range(12)) for _ in range(600)
        ]

        char_vocab = _char_vocab(texts)
        assert len(char_vocab.merges) == 0
        merged_vocab = tokenizer.train_bpe(
            texts, vocab_size=len(char_vocab.characters) + 2 + 4000
        )
        assert len(merged_vocab.merges) == 4000

        fertility_char = tokenizer.fertility(char_vocab, texts)
        fertility_merged = tokenizer.fertility(merged_vocab, texts)
        assert fertility_char >= 1.0
        assert fertility_merged >= 1.0
        assert fertility_merged < fertility_char

        # the floor holds on every shipped corpus generator too
        for kind in sorted(synthetic.CORPUS_MAKERS):
            articles = synthetic.make_corpus(kind, seed=7)
            corpus_texts = [
                f"{article.headline} {article.body}" for article in articles
            ][:120]
            vocab = tokenizer.train_bpe(corpus_texts, vocab_size=400)
            assert tokenizer.fertility(vocab, corpus_texts) >= 1.0

        # encoding and retraining are exactly reproducible
        for text in texts[:50]:
            first = tokenizer.encode(merged_vocab, text, max_tokens=None)
            second = tokenizer.encode(merged_vocab, text, max_tokens=None)
            assert first.ids == second.ids
        retrained = tokenizer.train_bpe(
            texts, vocab_size=len(char_vocab.characters) + 2 + 4000
        )
        assert retrained.merges == merged_vocab.merges
        assert retrained.id_to_token == merged_vocab.id_to_token


def test_08_pipeline_determinism(capsys, tmp_path_factory):
    title = "identical configs rebuild byte-identical runs and reports"
    with _criterion(capsys, 8, title, budget_s=600.0):
        base = tmp_path_factory.mktemp("accept-determinism")
        raw = base / "raw.tsv"
        corpus.write_raw_tsv(raw, synthetic.make_corpus("paraphrase", seed=42))
        workdirs = []
        for name in ("one", "two"):
            workdir = base / name
            config = pipeline.load_config(
                overrides={
                    "raw": str(raw),
                    "workdir": str(workdir),
                    "threads": "1",
                },
                env={},
            )
            pipeline.run_pipeline(config)
            workdirs.append(workdir)
        first, second = workdirs
        for name in (
            "run.bm25.trec",
            "run.dense.trec",
            "run.colbert.trec",
            "report.txt",
            "report.tsv",
            "sigtest.txt",
        ):
            assert (first / name).read_bytes() == (
                second / name
            ).read_bytes(), f"{name} differs between identical runs"


def test_09_grid_direction(capsys, tmp_path_factory):
    title = "every sweep cell trains, and longer training never loses"
    with _criterion(capsys, 9, title, budget_s=900.0):
        base = tmp_path_factory.mktemp("accept-grid")
        raw = base / "raw.tsv"
        corpus.write_raw_tsv(raw, synthetic.make_corpus("separable", seed=42))
        config = pipeline.load_config(
            overrides={"raw": str(raw), "workdir": str(base / "work")},
            env={},
        )
        cells, grid_path = pipeline.grid_search(
            config,
            lrs=[0.01, 0.001],
            batch_sizes=[16, 32],
            epoch_values=[3, 5],
        )
        assert len(cells) == 8
        assert all(cell["error"] is None for cell in cells)
        by_key = {
            (cell["lr"], cell["batch_size"], cell["epochs"]): cell["mrr@10"]
            for cell in cells
        }
        for lr in (0.01, 0.001):
            for batch_size in (16, 32):
                shorter = by_key[(lr, batch_size, 3)]
                longer = by_key[(lr, batch_size, 5)]
                assert longer >= shorter - 0.02, (
                    f"lr={lr} batch={batch_size}: "
                    f"5 epochs {longer:.4f} vs 3 epochs {shorter:.4f}"
                )
        assert grid_path.exists()
        rows = [line.split("\t") for line in grid_path.read_text().splitlines()[1:]]
        assert len(rows) == 8
        # every cell populated: three numeric metrics, empty error column
        for row in rows:
            assert row[6] == "-"
            for value in row[3:6]:
                assert 0.0 <= float(value) <= 1.0
