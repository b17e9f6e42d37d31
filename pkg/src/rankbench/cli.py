"""Command-line interface.

Exit codes: 0 on success, 1 for usage errors, 2 for data/validation
errors, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, corpus, dense, encoder, evaluation, late, sparse
from . import pipeline as pipeline_mod
from . import synthetic, tokenizer
from .errors import DataError, NumericError
from .figures import save_fertility_bars, save_metric_bars
from .seeding import derive_seed


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits with code 1 on usage errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _print(key: str, value) -> None:
    print(f"{key}\t{value}")


def _read_text_rows(paths: list[str]) -> list[str]:
    """Read `<id><TAB><text>` rows from one or more files, returning texts."""
    texts: list[str] = []
    for path in paths:
        texts.extend(item.text for item in corpus.read_queries(path))
    return texts


# --- command implementations -------------------------------------------------


def _cmd_ingest(args) -> int:
    split = corpus.SplitConfig(test_fraction=args.test_fraction, seed=args.seed)
    summary = corpus.ingest(args.raw, args.out, split)
    for key in (
        "articles",
        "duplicates_dropped",
        "skipped_empty",
        "documents",
        "queries",
        "train_queries",
        "test_queries",
    ):
        _print(key, summary[key])
    for warning in summary["warnings"]:
        print(f"warning\t{warning}", file=sys.stderr)
    return 0


def _cmd_tokenizer_train(args) -> int:
    texts = _read_text_rows(args.data)
    vocab = tokenizer.train_bpe(texts, args.vocab_size)
    tokenizer.save_vocab(args.out, vocab)
    _print("characters", len(vocab.characters))
    _print("merges", len(vocab.merges))
    _print("vocab_size", vocab.size)
    return 0


def _cmd_tokenizer_fertility(args) -> int:
    vocab = tokenizer.load_vocab(args.vocab)
    texts = _read_text_rows(args.data)
    value = tokenizer.fertility(vocab, texts)
    _print("fertility", f"{value:.6f}")
    if args.figure:
        save_fertility_bars(args.figure, {Path(args.vocab).stem: value})
        _print("figure", args.figure)
    return 0


def _cmd_tokenizer_compare(args) -> int:
    vocab_a = tokenizer.load_vocab(args.vocab_a)
    vocab_b = tokenizer.load_vocab(args.vocab_b)
    tokens_a, tokens_b = tokenizer.compare(vocab_a, vocab_b, args.text)
    _print("a", " ".join(tokens_a))
    _print("b", " ".join(tokens_b))
    _print("len_a", len(tokens_a))
    _print("len_b", len(tokens_b))
    return 0


def _cmd_index_bm25(args) -> int:
    docs = corpus.read_collection(args.collection)
    vocab = tokenizer.load_vocab(args.vocab)
    index = sparse.build(docs, vocab, k1=args.k1, b=args.b)
    sparse.save_index(args.out, index)
    _print("docs", index.n_docs)
    _print("terms", len(index.postings))
    _print("avgdl", f"{index.avgdl:.6f}")
    return 0


def _cmd_index_dense(args) -> int:
    table, _, _ = encoder.load_model(args.model)
    docs = corpus.read_collection(args.collection)
    vocab = tokenizer.load_vocab(args.vocab)
    index = dense.build(table, docs, vocab, args.max_tokens)
    dense.save_index(args.out, index)
    _print("docs", index.n_docs)
    _print("dim", index.dim)
    return 0


def _cmd_index_tokens(args) -> int:
    table, _, _ = encoder.load_model(args.model)
    docs = corpus.read_collection(args.collection)
    vocab = tokenizer.load_vocab(args.vocab)
    index = late.build(table, docs, vocab, args.max_tokens)
    late.save_index(args.out, index)
    _print("docs", len(index.doc_matrices))
    _print("dim", table.dim)
    return 0


def _train_config_from_args(args) -> encoder.TrainConfig:
    # Flags default to None so that explicit values win over the --desk
    # preset instead of being clobbered by it.
    overrides = {
        name: value
        for name, value in (
            ("dim", args.dim),
            ("lr", args.lr),
            ("batch_size", args.batch_size),
            ("epochs", args.epochs),
            ("scale", args.scale),
            ("weight_decay", args.weight_decay),
            ("warmup_ratio", args.warmup_ratio),
            ("max_tokens", args.max_tokens),
            ("seed", args.seed),
        )
        if value is not None
    }
    if args.desk:
        return encoder.TrainConfig.desk(**overrides)
    return encoder.TrainConfig(**overrides)


def _encode_pairs(vocab, rows, max_tokens):
    return [
        (
            tokenizer.encode(vocab, query_text, max_tokens),
            tokenizer.encode(vocab, doc_text, max_tokens),
        )
        for _, query_text, _, doc_text in rows
    ]


def _cmd_train_biencoder(args) -> int:
    vocab = tokenizer.load_vocab(args.vocab)
    rows = corpus.read_pairs(args.pairs)
    config = _train_config_from_args(args)
    pairs = _encode_pairs(vocab, rows, config.max_tokens)
    table = encoder.init_table(
        vocab.size, config.dim, derive_seed(config.seed, "init")
    )
    trained, losses = encoder.train(table, pairs, config)
    encoder.save_model(args.out, trained, config.seed, config.digest())
    _print("pairs", len(pairs))
    _print("steps", len(losses))
    _print("final_loss", f"{losses[-1]:.6f}" if losses else "nan")
    return 0


def _cmd_train_colbert(args) -> int:
    vocab = tokenizer.load_vocab(args.vocab)
    rows = corpus.read_pairs(args.pairs)
    config = _train_config_from_args(args)
    if args.init:
        table, _, _ = encoder.load_model(args.init)
        if table.dim != config.dim:
            raise DataError(
                f"--dim {config.dim} does not match initial model "
                f"dim {table.dim}"
            )
    else:
        table = encoder.init_table(
            vocab.size, config.dim, derive_seed(config.seed, "init")
        )
    docs = corpus.read_collection(args.collection)
    doc_tokens = {
        doc.doc_id: tokenizer.encode(vocab, doc.text, config.max_tokens)
        for doc in docs
    }
    negatives_by_query = pipeline_mod.read_negatives(args.negatives)
    pairs = []
    negatives = []
    for query_id, query_text, _, doc_text in rows:
        mined = negatives_by_query.get(query_id)
        if mined is None:
            raise DataError(f"no mined negatives for query {query_id}")
        missing = [doc_id for doc_id in mined if doc_id not in doc_tokens]
        if missing:
            raise DataError(
                f"mined negative {missing[0]} not in collection"
            )
        pairs.append(
            (
                tokenizer.encode(vocab, query_text, config.max_tokens),
                tokenizer.encode(vocab, doc_text, config.max_tokens),
            )
        )
        negatives.append([doc_tokens[doc_id] for doc_id in mined])
    trained, losses = late.train_colbert(
        table, pairs, negatives, config, use_in_batch=args.in_batch
    )
    encoder.save_model(args.out, trained, config.seed, config.digest())
    _print("pairs", len(pairs))
    _print("steps", len(losses))
    _print("final_loss", f"{losses[-1]:.6f}" if losses else "nan")
    return 0


def _cmd_mine_negatives(args) -> int:
    index = dense.load_index(args.index)
    queries = corpus.read_queries(args.queries)
    qrels = corpus.read_qrels(args.qrels)
    short_pools = 0
    with open(args.out, "w", encoding="utf-8") as handle:
        for query in queries:
            judged = qrels.get(query.query_id, {})
            relevant = {doc for doc, rel in judged.items() if rel >= 1}
            ranked = dense.search(
                index, dense.encode_query(index, query.text), args.pool_size
            )
            config = late.MiningConfig(
                pool_size=args.pool_size,
                n_negatives=args.n_negatives,
                seed=derive_seed(args.seed, f"mine:{query.query_id}"),
            )
            mined, short = late.mine_negatives(ranked, relevant, config)
            short_pools += int(short)
            handle.write(
                f"{query.query_id}\t"
                f"{' '.join(str(doc_id) for doc_id in mined)}\n"
            )
    _print("queries", len(queries))
    _print("short_pools", short_pools)
    return 0


def _sniff_magic(path: str) -> bytes:
    try:
        with open(path, "rb") as handle:
            return handle.read(8)
    except OSError as exc:
        raise DataError(f"cannot read index {path}: {exc}") from exc


def _cmd_search(args) -> int:
    magic = _sniff_magic(args.index)
    queries = corpus.read_queries(args.queries)
    run: evaluation.Run = {}
    if magic == sparse.SPARSE_MAGIC:
        index = sparse.load_index(args.index)
        tag = args.tag or "bm25"
        for query in queries:
            results = sparse.search(index, query, args.k)
            if results:
                run[query.query_id] = results
    elif magic == dense.DENSE_MAGIC:
        index = dense.load_index(args.index)
        tag = args.tag or "dense"
        embeddings = [
            dense.encode_query(index, query.text) for query in queries
        ]
        ranked = dense.search_many(
            index, embeddings, args.k, workers=args.threads
        )
        run = {
            query.query_id: results
            for query, results in zip(queries, ranked)
        }
    else:
        raise DataError(
            f"unrecognized index format in {args.index} "
            f"(magic {magic!r}); expected a BM25 or dense index"
        )
    evaluation.write_run(args.out, run, tag=tag)
    _print("queries", len(queries))
    _print("with_results", len(run))
    return 0


def _cmd_rerank(args) -> int:
    index = late.load_index(args.index)
    candidates = evaluation.read_run(args.run)
    queries = corpus.read_queries(args.queries)
    run: evaluation.Run = {}
    for query in queries:
        first_stage = candidates.get(query.query_id)
        if not first_stage:
            continue
        q_mat = late.encode_query_tokens(index, query.text)
        run[query.query_id] = late.rerank(first_stage, index, q_mat, args.k)
    evaluation.write_run(args.out, run, tag=args.tag)
    _print("queries", len(run))
    return 0


def _cmd_evaluate(args) -> int:
    cutoffs = tuple(int(part) for part in args.cutoffs.split(",") if part)
    report = evaluation.evaluate(args.run, args.qrels, cutoffs)
    sys.stdout.write(report.table_text())
    sys.stdout.write(report.flat_text())
    if args.out_prefix:
        prefix = Path(args.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(f"{prefix}.txt", "w", encoding="utf-8") as handle:
            handle.write(report.flat_text())
        with open(f"{prefix}.tsv", "w", encoding="utf-8") as handle:
            handle.write("metric\tquery_id\tvalue\n")
            for key in sorted(report.results):
                result = report.results[key]
                for query_id in sorted(result.per_query):
                    handle.write(
                        f"{key}\t{query_id}\t"
                        f"{result.per_query[query_id]:.6f}\n"
                    )
                handle.write(f"{key}\tmean\t{result.mean:.6f}\n")
        save_metric_bars(f"{prefix}.png", report, title=Path(args.run).name)
        _print("report_txt", f"{prefix}.txt")
        _print("report_tsv", f"{prefix}.tsv")
        _print("figure", f"{prefix}.png")
    return 0


def _cmd_sigtest(args) -> int:
    result, mean_a, mean_b = evaluation.sigtest(
        args.run_a, args.run_b, args.qrels, args.metric
    )
    _print("metric", args.metric)
    _print("mean_a", f"{mean_a:.6f}")
    _print("mean_b", f"{mean_b:.6f}")
    _print("t", f"{result.t:.6f}")
    _print("df", result.df)
    _print("p", f"{result.p:.6g}")
    _print("significant@0.05", "yes" if result.p < 0.05 else "no")
    if result.degenerate:
        _print("degenerate", "yes")
    return 0


def _cmd_grid(args) -> int:
    config = pipeline_mod.load_config(args.config)
    lrs = [float(part) for part in args.lrs.split(",") if part]
    batch_sizes = [int(part) for part in args.batch_sizes.split(",") if part]
    epoch_values = [int(part) for part in args.epochs.split(",") if part]
    cells, grid_path = pipeline_mod.grid_search(
        config, lrs, batch_sizes, epoch_values
    )
    _print("grid", grid_path)
    failures = sum(1 for cell in cells if cell["error"] is not None)
    _print("cells", len(cells))
    _print("failures", failures)
    return 0


def _cmd_run(args) -> int:
    overrides: dict[str, str] = {}
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    config = pipeline_mod.load_config(args.config, overrides=overrides)
    summary = pipeline_mod.run_pipeline(config, from_stage=args.from_stage)
    for stage, info in summary.items():
        details = " ".join(f"{key}={value}" for key, value in info.items())
        _print(stage, details)
    return 0


def _cmd_make_synthetic(args) -> int:
    articles = synthetic.make_corpus(args.kind, args.seed, args.n)
    corpus.write_raw_tsv(args.out, articles)
    _print("articles", len(articles))
    _print("out", args.out)
    return 0


# --- parser construction ------------------------------------------------------


def _add_train_flags(parser: _Parser) -> None:
    parser.add_argument("--dim", type=int, default=None, help="default 64")
    parser.add_argument("--lr", type=float, default=None,
                        help="default 5e-5 (1e-2 with --desk)")
    parser.add_argument("--batch-size", type=int, default=None,
                        help="default 128 (32 with --desk)")
    parser.add_argument("--epochs", type=int, default=None, help="default 4")
    parser.add_argument("--scale", type=float, default=None,
                        help="default 20.0")
    parser.add_argument("--weight-decay", type=float, default=None,
                        help="default 0.01")
    parser.add_argument("--warmup-ratio", type=float, default=None,
                        help="default 0.1")
    parser.add_argument("--max-tokens", type=int, default=None,
                        help="default 512")
    parser.add_argument("--seed", type=int, default=None, help="default 42")
    parser.add_argument(
        "--desk",
        action="store_true",
        help="use the small-scale preset (lr 1e-2, batch 32)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="rankbench", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", help="build a dataset from raw articles")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=13)
    p.set_defaults(func=_cmd_ingest)

    tok = sub.add_parser("tokenizer", help="subword vocabulary tools")
    tok_sub = tok.add_subparsers(dest="subcommand", parser_class=_Parser)
    tok_sub.required = True
    p = tok_sub.add_parser("train", help="learn a merge vocabulary")
    p.add_argument("--data", nargs="+", required=True,
                   help="id<TAB>text files (collection and/or queries)")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tokenizer_train)
    p = tok_sub.add_parser("fertility", help="tokens per word over a corpus")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--figure", default=None)
    p.set_defaults(func=_cmd_tokenizer_fertility)
    p = tok_sub.add_parser("compare", help="tokenize one text two ways")
    p.add_argument("--vocab-a", required=True)
    p.add_argument("--vocab-b", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=_cmd_tokenizer_compare)

    idx = sub.add_parser("index", help="build search indexes")
    idx_sub = idx.add_subparsers(dest="subcommand", parser_class=_Parser)
    idx_sub.required = True
    p = idx_sub.add_parser("bm25", help="build an inverted index")
    p.add_argument("--collection", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=sparse.DEFAULT_K1)
    p.add_argument("--b", type=float, default=sparse.DEFAULT_B)
    p.set_defaults(func=_cmd_index_bm25)
    p = idx_sub.add_parser("dense", help="embed passages into one matrix")
    p.add_argument("--collection", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=512)
    p.set_defaults(func=_cmd_index_dense)
    p = idx_sub.add_parser("tokens", help="store per-token passage vectors")
    p.add_argument("--collection", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tokens", type=int, default=512)
    p.set_defaults(func=_cmd_index_tokens)

    train = sub.add_parser("train", help="train embedding models")
    train_sub = train.add_subparsers(dest="subcommand", parser_class=_Parser)
    train_sub.required = True
    p = train_sub.add_parser("biencoder", help="contrastive bi-encoder")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_biencoder)
    p = train_sub.add_parser("colbert", help="late-interaction fine-tuning")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--negatives", required=True)
    p.add_argument("--init", default=None,
                   help="warm-start from a saved model")
    p.add_argument("--out", required=True)
    p.add_argument("--in-batch", action="store_true",
                   help="also use other in-batch positives as negatives")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_colbert)

    p = sub.add_parser("mine-negatives", help="sample hard negatives")
    p.add_argument("--index", required=True, help="dense index")
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool-size", type=int, default=150)
    p.add_argument("--n-negatives", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_mine_negatives)

    p = sub.add_parser("search", help="rank passages for queries")
    p.add_argument("--index", required=True,
                   help="BM25 or dense index (detected from the file)")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--tag", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("rerank", help="rescore a run with token matching")
    p.add_argument("--index", required=True, help="token index")
    p.add_argument("--run", required=True, help="first-stage run file")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--tag", default="colbert")
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("evaluate", help="score a run against judgments")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cutoffs", default="10,50,100")
    p.add_argument("--out-prefix", default=None,
                   help="also write PREFIX.txt, PREFIX.tsv, and PREFIX.png")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sigtest", help="paired t-test between two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="mrr@10")
    p.set_defaults(func=_cmd_sigtest)

    p = sub.add_parser("grid", help="sweep lr x batch size x epochs")
    p.add_argument("--config", required=True)
    p.add_argument("--lrs", default="0.01,0.001")
    p.add_argument("--batch-sizes", default="16,32")
    p.add_argument("--epochs", default="3,5")
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--from", dest="from_stage", default=None,
                   help="resume from this stage (prefix match)")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("make-synthetic", help="generate a toy corpus")
    p.add_argument("--kind", choices=sorted(synthetic.CORPUS_MAKERS),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=_cmd_make_synthetic)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
