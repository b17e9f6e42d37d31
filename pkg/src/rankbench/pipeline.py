"""End-to-end benchmarking pipeline and hyperparameter grid search.

The pipeline sequences dataset construction, tokenizer training, the
three retrieval systems (BM25, trained bi-encoder, MaxSim reranking), and
evaluation with significance tests. Every stage reads and writes plain
artifacts under one working directory, so a run can resume from any stage
(``--from``) as long as the artifacts it needs exist. All randomness
derives from the single config seed, making reruns byte-identical.

Configs are flat ``key = value`` files; environment variables of the form
``RB_<KEY>`` override file values.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

from . import corpus, dense, encoder, evaluation, late, sparse, tokenizer
from .errors import DataError
from .figures import save_grid_heatmaps, save_metric_bars
from .seeding import derive_seed

STAGES = [
    "ingest",
    "vocab",
    "bm25_index",
    "bm25_search",
    "train_biencoder",
    "dense_index",
    "dense_search",
    "mine",
    "train_colbert",
    "token_index",
    "rerank",
    "evaluate",
    "sigtest",
]

SYSTEMS = ("bm25", "dense", "colbert")


@dataclass
class PipelineConfig:
    raw: str = ""
    workdir: str = ""
    seed: int = 42
    test_fraction: float = 0.10
    vocab_size: int = 1000
    max_tokens: int = 512
    k1: float = 1.2
    b: float = 0.75
    dim: int = 64
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 20
    scale: float = 20.0
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    colbert_lr: float = 1e-3
    colbert_epochs: int = 3
    colbert_batch_size: int = 32
    colbert_in_batch: bool = False
    pool_size: int = 150
    n_negatives: int = 8
    run_k: int = 150
    rerank_k: int = 100
    cutoffs: tuple[int, ...] = (10, 50, 100)
    sigtest_metric: str = "mrr@10"
    threads: int = 1

    def __post_init__(self) -> None:
        if not self.cutoffs:
            raise DataError("cutoffs must not be empty")
        if self.run_k < max(max(self.cutoffs), self.pool_size):
            raise DataError(
                f"run_k ({self.run_k}) must cover the largest cutoff and "
                f"the mining pool ({max(max(self.cutoffs), self.pool_size)})"
            )
        if self.threads < 1:
            raise DataError(f"threads must be >= 1, got {self.threads}")

    def require_paths(self) -> None:
        if not self.raw:
            raise DataError("config is missing required key `raw`")
        if not self.workdir:
            raise DataError("config is missing required key `workdir`")


def _parse_value(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise DataError(
            f"bad value for config key {name!r}: {raw!r}"
        ) from exc


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    env: dict[str, str] | None = None,
) -> PipelineConfig:
    """Build a config from (in increasing precedence) defaults, a flat
    key=value file, ``RB_``-prefixed environment variables, and explicit
    overrides."""
    env = os.environ if env is None else env
    kinds: dict[str, type] = {}
    for field in fields(PipelineConfig):
        annotation = str(field.type)
        if annotation.startswith("tuple"):
            kinds[field.name] = tuple
        elif annotation == "int":
            kinds[field.name] = int
        elif annotation == "float":
            kinds[field.name] = float
        elif annotation == "bool":
            kinds[field.name] = bool
        else:
            kinds[field.name] = str
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise DataError(
                        f"{path}:{lineno}: expected `key = value`, got "
                        f"{stripped!r}"
                    )
                key, _, value = stripped.partition("=")
                key = key.strip()
                if key not in kinds:
                    raise DataError(
                        f"{path}:{lineno}: unknown config key {key!r}"
                    )
                values[key] = _parse_value(key, kinds[key], value)
    for name, kind in kinds.items():
        env_value = env.get(f"RB_{name.upper()}")
        if env_value is not None:
            values[name] = _parse_value(name, kind, env_value)
    for name, value in (overrides or {}).items():
        if name not in kinds:
            raise DataError(f"unknown config key {name!r}")
        values[name] = (
            value
            if not isinstance(value, str)
            else _parse_value(name, kinds[name], value)
        )
    return PipelineConfig(**values)


class Paths:
    """Artifact layout under the working directory."""

    def __init__(self, workdir: str | Path):
        self.workdir = Path(workdir)
        self.data = self.workdir / "data"
        self.figures = self.workdir / "figures"
        self.collection = self.data / "collection.tsv"
        self.queries_train = self.data / "queries.train.tsv"
        self.queries_test = self.data / "queries.test.tsv"
        self.qrels_train = self.data / "qrels.train.txt"
        self.qrels_test = self.data / "qrels.test.txt"
        self.pairs_train = self.data / "pairs.train.tsv"
        self.vocab = self.workdir / "vocab.txt"
        self.bm25_index = self.workdir / "idx.bm25"
        self.model_bi = self.workdir / "model.bi.bin"
        self.dense_index = self.workdir / "idx.dense"
        self.negatives = self.workdir / "negatives.tsv"
        self.model_colbert = self.workdir / "model.colbert.bin"
        self.token_index = self.workdir / "idx.tokens"
        self.runs = {
            "bm25": self.workdir / "run.bm25.trec",
            "dense": self.workdir / "run.dense.trec",
            "colbert": self.workdir / "run.colbert.trec",
        }
        self.report_txt = self.workdir / "report.txt"
        self.report_tsv = self.workdir / "report.tsv"
        self.sigtest_txt = self.workdir / "sigtest.txt"


def resolve_stage(prefix: str) -> str:
    matches = [stage for stage in STAGES if stage.startswith(prefix)]
    if not matches:
        raise DataError(
            f"unknown stage {prefix!r}; stages are: {', '.join(STAGES)}"
        )
    return matches[0]


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise DataError(
            f"[{stage}] missing artifact: {what} at {path} "
            "(run the earlier stages first)"
        )
    return path


def _wrap_stage(stage: str, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        if str(exc).startswith(f"[{stage}]"):
            raise
        raise type(exc)(f"[{stage}] {exc}") from exc


def _texts_of(path: Path) -> list[str]:
    return [item.text for item in corpus.read_queries(path)]


def _stage_ingest(config: PipelineConfig, paths: Paths) -> dict:
    split = corpus.SplitConfig(
        test_fraction=config.test_fraction,
        seed=derive_seed(config.seed, "split"),
    )
    return corpus.ingest(config.raw, paths.data, split)


def _stage_vocab(config: PipelineConfig, paths: Paths) -> dict:
    stage = "vocab"
    collection = corpus.read_collection(
        _require(paths.collection, "collection", stage)
    )
    train_queries = _texts_of(
        _require(paths.queries_train, "train queries", stage)
    )
    texts = [doc.text for doc in collection] + train_queries
    vocab = tokenizer.train_bpe(texts, config.vocab_size)
    tokenizer.save_vocab(paths.vocab, vocab)
    return {"characters": len(vocab.characters), "merges": len(vocab.merges)}


def _stage_bm25_index(config: PipelineConfig, paths: Paths) -> dict:
    stage = "bm25_index"
    docs = corpus.read_collection(_require(paths.collection, "collection", stage))
    vocab = tokenizer.load_vocab(_require(paths.vocab, "vocabulary", stage))
    index = sparse.build(docs, vocab, k1=config.k1, b=config.b)
    sparse.save_index(paths.bm25_index, index)
    return {"docs": index.n_docs, "terms": len(index.postings)}


def _stage_bm25_search(config: PipelineConfig, paths: Paths) -> dict:
    stage = "bm25_search"
    index = sparse.load_index(_require(paths.bm25_index, "BM25 index", stage))
    queries = corpus.read_queries(
        _require(paths.queries_test, "test queries", stage)
    )
    run: evaluation.Run = {}
    for query in queries:
        results = sparse.search(index, query, config.run_k)
        if results:
            run[query.query_id] = results
    evaluation.write_run(paths.runs["bm25"], run, tag="bm25")
    return {"queries": len(queries), "with_results": len(run)}


def _train_config(config: PipelineConfig, which: str) -> encoder.TrainConfig:
    if which == "bi":
        return encoder.TrainConfig(
            dim=config.dim,
            lr=config.lr,
            batch_size=config.batch_size,
            epochs=config.epochs,
            scale=config.scale,
            weight_decay=config.weight_decay,
            warmup_ratio=config.warmup_ratio,
            max_tokens=config.max_tokens,
            seed=derive_seed(config.seed, "train-bi"),
        )
    return encoder.TrainConfig(
        dim=config.dim,
        lr=config.colbert_lr,
        batch_size=config.colbert_batch_size,
        epochs=config.colbert_epochs,
        scale=config.scale,
        weight_decay=config.weight_decay,
        warmup_ratio=config.warmup_ratio,
        max_tokens=config.max_tokens,
        seed=derive_seed(config.seed, "train-colbert"),
    )


def _load_train_pairs(
    config: PipelineConfig, paths: Paths, vocab: tokenizer.BpeVocab, stage: str
) -> list[tuple[int, tokenizer.TokenSequence, int, tokenizer.TokenSequence]]:
    rows = corpus.read_pairs(_require(paths.pairs_train, "training pairs", stage))
    encoded = []
    for query_id, query_text, doc_id, doc_text in rows:
        encoded.append(
            (
                query_id,
                tokenizer.encode(vocab, query_text, config.max_tokens),
                doc_id,
                tokenizer.encode(vocab, doc_text, config.max_tokens),
            )
        )
    return encoded


def _stage_train_biencoder(config: PipelineConfig, paths: Paths) -> dict:
    stage = "train_biencoder"
    vocab = tokenizer.load_vocab(_require(paths.vocab, "vocabulary", stage))
    rows = _load_train_pairs(config, paths, vocab, stage)
    pairs = [(query, doc) for _, query, _, doc in rows]
    train_config = _train_config(config, "bi")
    table = encoder.init_table(
        vocab.size, config.dim, derive_seed(train_config.seed, "init")
    )
    trained, losses = encoder.train(table, pairs, train_config)
    encoder.save_model(
        paths.model_bi, trained, train_config.seed, train_config.digest()
    )
    return {
        "pairs": len(pairs),
        "steps": len(losses),
        "final_loss": losses[-1] if losses else math.nan,
    }


def _stage_dense_index(config: PipelineConfig, paths: Paths) -> dict:
    stage = "dense_index"
    table, _, _ = encoder.load_model(
        _require(paths.model_bi, "bi-encoder model", stage)
    )
    docs = corpus.read_collection(_require(paths.collection, "collection", stage))
    vocab = tokenizer.load_vocab(_require(paths.vocab, "vocabulary", stage))
    index = dense.build(table, docs, vocab, config.max_tokens)
    dense.save_index(paths.dense_index, index)
    return {"docs": index.n_docs, "dim": index.dim}


def _stage_dense_search(config: PipelineConfig, paths: Paths) -> dict:
    stage = "dense_search"
    index = dense.load_index(_require(paths.dense_index, "dense index", stage))
    queries = corpus.read_queries(
        _require(paths.queries_test, "test queries", stage)
    )
    embeddings = [dense.encode_query(index, query.text) for query in queries]
    results = dense.search_many(
        index, embeddings, config.run_k, workers=config.threads
    )
    run = {
        query.query_id: ranked
        for query, ranked in zip(queries, results)
    }
    evaluation.write_run(paths.runs["dense"], run, tag="dense")
    return {"queries": len(queries)}


def _stage_mine(config: PipelineConfig, paths: Paths) -> dict:
    stage = "mine"
    index = dense.load_index(_require(paths.dense_index, "dense index", stage))
    queries = corpus.read_queries(
        _require(paths.queries_train, "train queries", stage)
    )
    qrels = corpus.read_qrels(
        _require(paths.qrels_train, "train qrels", stage)
    )
    short_pools = 0
    with open(paths.negatives, "w", encoding="utf-8") as handle:
        for query in queries:
            judged = qrels.get(query.query_id, {})
            relevant = {doc for doc, rel in judged.items() if rel >= 1}
            ranked = dense.search(
                index, dense.encode_query(index, query.text), config.pool_size
            )
            mining = late.MiningConfig(
                pool_size=config.pool_size,
                n_negatives=config.n_negatives,
                seed=derive_seed(config.seed, f"mine:{query.query_id}"),
            )
            negatives, short = late.mine_negatives(ranked, relevant, mining)
            short_pools += int(short)
            handle.write(
                f"{query.query_id}\t"
                f"{' '.join(str(doc_id) for doc_id in negatives)}\n"
            )
    return {"queries": len(queries), "short_pools": short_pools}


def read_negatives(path: str | Path) -> dict[int, list[int]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"negatives file not found: {path}")
    negatives: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected `query_id<TAB>doc ids`"
                )
            try:
                query_id = int(parts[0])
                doc_ids = [int(token) for token in parts[1].split()]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed field") from exc
            negatives[query_id] = doc_ids
    return negatives


def _stage_train_colbert(config: PipelineConfig, paths: Paths) -> dict:
    stage = "train_colbert"
    vocab = tokenizer.load_vocab(_require(paths.vocab, "vocabulary", stage))
    table, _, _ = encoder.load_model(
        _require(paths.model_bi, "bi-encoder model", stage)
    )
    docs = corpus.read_collection(_require(paths.collection, "collection", stage))
    negatives_by_query = read_negatives(
        _require(paths.negatives, "mined negatives", stage)
    )
    doc_tokens = {
        doc.doc_id: tokenizer.encode(vocab, doc.text, config.max_tokens)
        for doc in docs
    }
    rows = _load_train_pairs(config, paths, vocab, stage)
    pairs = []
    negatives = []
    for query_id, query_tokens, doc_id, passage_tokens in rows:
        mined = negatives_by_query.get(query_id)
        if mined is None:
            raise DataError(f"no mined negatives for query {query_id}")
        resolved = []
        for negative_id in mined:
            if negative_id not in doc_tokens:
                raise DataError(
                    f"mined negative {negative_id} not in collection"
                )
            resolved.append(doc_tokens[negative_id])
        pairs.append((query_tokens, passage_tokens))
        negatives.append(resolved)
    train_config = _train_config(config, "colbert")
    trained, losses = late.train_colbert(
        table,
        pairs,
        negatives,
        train_config,
        use_in_batch=config.colbert_in_batch,
    )
    encoder.save_model(
        paths.model_colbert, trained, train_config.seed, train_config.digest()
    )
    return {
        "pairs": len(pairs),
        "steps": len(losses),
        "final_loss": losses[-1] if losses else math.nan,
    }


def _stage_token_index(config: PipelineConfig, paths: Paths) -> dict:
    stage = "token_index"
    table, _, _ = encoder.load_model(
        _require(paths.model_colbert, "late-interaction model", stage)
    )
    docs = corpus.read_collection(_require(paths.collection, "collection", stage))
    vocab = tokenizer.load_vocab(_require(paths.vocab, "vocabulary", stage))
    index = late.build(table, docs, vocab, config.max_tokens)
    late.save_index(paths.token_index, index)
    return {"docs": len(index.doc_matrices)}


def _stage_rerank(config: PipelineConfig, paths: Paths) -> dict:
    stage = "rerank"
    index = late.load_index(_require(paths.token_index, "token index", stage))
    candidates = evaluation.read_run(
        _require(paths.runs["dense"], "dense run", stage)
    )
    queries = corpus.read_queries(
        _require(paths.queries_test, "test queries", stage)
    )
    run: evaluation.Run = {}
    for query in queries:
        first_stage = candidates.get(query.query_id)
        if not first_stage:
            continue
        q_mat = late.encode_query_tokens(index, query.text)
        run[query.query_id] = late.rerank(
            first_stage, index, q_mat, config.rerank_k
        )
    evaluation.write_run(paths.runs["colbert"], run, tag="colbert")
    return {"queries": len(run)}


def _stage_evaluate(config: PipelineConfig, paths: Paths) -> dict:
    stage = "evaluate"
    qrels_path = _require(paths.qrels_test, "test qrels", stage)
    paths.figures.mkdir(parents=True, exist_ok=True)
    reports: dict[str, evaluation.EvalReport] = {}
    for system in SYSTEMS:
        run_path = _require(paths.runs[system], f"{system} run", stage)
        reports[system] = evaluation.evaluate(
            run_path, qrels_path, config.cutoffs
        )
    with open(paths.report_txt, "w", encoding="utf-8") as handle:
        for system in SYSTEMS:
            report = reports[system]
            handle.write(f"[{system}]\n")
            handle.write(report.table_text())
            handle.write(report.flat_text())
            handle.write("\n")
    with open(paths.report_tsv, "w", encoding="utf-8") as handle:
        handle.write("system\tmetric\tvalue\n")
        for system in SYSTEMS:
            report = reports[system]
            for key in sorted(report.results):
                handle.write(
                    f"{system}\t{key}\t{report.results[key].mean:.6f}\n"
                )
    for system in SYSTEMS:
        save_metric_bars(
            paths.figures / f"report.{system}.png",
            reports[system],
            title=system,
        )
    return {
        system: reports[system].results[f"mrr@{config.cutoffs[0]}"].mean
        for system in SYSTEMS
    }


def _stage_sigtest(config: PipelineConfig, paths: Paths) -> dict:
    stage = "sigtest"
    qrels_path = _require(paths.qrels_test, "test qrels", stage)
    for system in SYSTEMS:
        _require(paths.runs[system], f"{system} run", stage)
    comparisons = [
        ("dense", "bm25"),
        ("colbert", "dense"),
        ("colbert", "bm25"),
    ]
    out: dict = {}
    with open(paths.sigtest_txt, "w", encoding="utf-8") as handle:
        handle.write(f"metric\t{config.sigtest_metric}\n")
        for system_a, system_b in comparisons:
            result, mean_a, mean_b = evaluation.sigtest(
                paths.runs[system_a],
                paths.runs[system_b],
                qrels_path,
                config.sigtest_metric,
            )
            suffix = "\tdegenerate" if result.degenerate else ""
            handle.write(
                f"{system_a} vs {system_b}\t"
                f"mean_a={mean_a:.6f}\tmean_b={mean_b:.6f}\t"
                f"t={result.t:.6f}\tdf={result.df}\tp={result.p:.6g}\t"
                f"significant@0.05={'yes' if result.p < 0.05 else 'no'}"
                f"{suffix}\n"
            )
            out[f"{system_a} vs {system_b}"] = result.p
    return out


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "vocab": _stage_vocab,
    "bm25_index": _stage_bm25_index,
    "bm25_search": _stage_bm25_search,
    "train_biencoder": _stage_train_biencoder,
    "dense_index": _stage_dense_index,
    "dense_search": _stage_dense_search,
    "mine": _stage_mine,
    "train_colbert": _stage_train_colbert,
    "token_index": _stage_token_index,
    "rerank": _stage_rerank,
    "evaluate": _stage_evaluate,
    "sigtest": _stage_sigtest,
}


def run_pipeline(
    config: PipelineConfig, from_stage: str | None = None
) -> dict[str, dict]:
    """Run the pipeline, optionally starting at a later stage.

    ``from_stage`` may be any unambiguous stage-name prefix; earlier
    stages are skipped and must have left their artifacts behind.
    """
    config.require_paths()
    paths = Paths(config.workdir)
    paths.workdir.mkdir(parents=True, exist_ok=True)
    start = 0
    if from_stage is not None:
        start = STAGES.index(resolve_stage(from_stage))
    summary: dict[str, dict] = {}
    for stage in STAGES[start:]:
        summary[stage] = _wrap_stage(stage, _STAGE_FNS[stage], config, paths)
    return summary


# --- grid search -----------------------------------------------------------


def grid_search(
    config: PipelineConfig,
    lrs: list[float],
    batch_sizes: list[int],
    epoch_values: list[int],
) -> tuple[list[dict], Path]:
    """Train and evaluate the bi-encoder over a (lr, batch, epochs) grid.

    Reuses the ingest/vocab artifacts (building them if absent). Each
    cell trains from the same derived seed per (lr, batch) so epoch
    settings differ only by training length. Failures are recorded per
    cell and the sweep continues. Writes ``grid.tsv`` plus one heatmap
    per metric and epoch setting, and returns (cells, grid path).
    """
    if not lrs or not batch_sizes or not epoch_values:
        raise DataError("grid axes must be non-empty")
    config.require_paths()
    paths = Paths(config.workdir)
    paths.workdir.mkdir(parents=True, exist_ok=True)
    if not paths.collection.exists():
        _wrap_stage("ingest", _stage_ingest, config, paths)
    if not paths.vocab.exists():
        _wrap_stage("vocab", _stage_vocab, config, paths)

    vocab = tokenizer.load_vocab(paths.vocab)
    docs = corpus.read_collection(paths.collection)
    test_queries = corpus.read_queries(paths.queries_test)
    qrels = corpus.read_qrels(paths.qrels_test)
    rows = _load_train_pairs(config, paths, vocab, "grid")
    pairs = [(query, doc) for _, query, _, doc in rows]

    cells: list[dict] = []
    for lr in lrs:
        for batch_size in batch_sizes:
            cell_seed = derive_seed(config.seed, f"grid:{lr:g}:{batch_size}")
            for epochs in epoch_values:
                cell: dict = {
                    "lr": lr,
                    "batch_size": batch_size,
                    "epochs": epochs,
                    "error": None,
                }
                try:
                    train_config = encoder.TrainConfig(
                        dim=config.dim,
                        lr=lr,
                        batch_size=batch_size,
                        epochs=epochs,
                        scale=config.scale,
                        weight_decay=config.weight_decay,
                        warmup_ratio=config.warmup_ratio,
                        max_tokens=config.max_tokens,
                        seed=cell_seed,
                    )
                    table = encoder.init_table(
                        vocab.size, config.dim, derive_seed(cell_seed, "init")
                    )
                    trained, _ = encoder.train(table, pairs, train_config)
                    index = dense.build(trained, docs, vocab, config.max_tokens)
                    run = {
                        query.query_id: dense.search(
                            index, dense.encode_query(index, query.text), 10
                        )
                        for query in test_queries
                    }
                    report = evaluation.evaluate_run(run, qrels, (10,))
                    for key, result in report.results.items():
                        cell[key] = result.mean
                except Exception as exc:  # record and continue
                    cell["error"] = str(exc)
                cells.append(cell)

    grid_path = paths.workdir / "grid.tsv"
    with open(grid_path, "w", encoding="utf-8") as handle:
        handle.write(
            "lr\tbatch_size\tepochs\tmrr@10\tndcg@10\trecall@10\terror\n"
        )
        for cell in cells:
            if cell["error"] is None:
                metrics = "\t".join(
                    f"{cell[key]:.6f}"
                    for key in ("mrr@10", "ndcg@10", "recall@10")
                )
                error = "-"
            else:
                metrics = "\t".join(["-"] * 3)
                error = " ".join(str(cell["error"]).split())
            handle.write(
                f"{cell['lr']:g}\t{cell['batch_size']}\t{cell['epochs']}\t"
                f"{metrics}\t{error}\n"
            )
    paths.figures.mkdir(parents=True, exist_ok=True)
    save_grid_heatmaps(
        paths.figures / "grid", cells, lrs, batch_sizes, epoch_values
    )
    return cells, grid_path
