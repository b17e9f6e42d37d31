"""IR evaluation: MRR@k, NDCG@k (binary), Recall@k, and paired t-tests.

Run files use the TREC interchange format. A query is evaluated if it has
at least one relevant judgment; queries judged but absent from the run
score zero on every metric (dropping them would inflate means), while
queries with no relevant judgment are excluded and counted. Runs that
mention queries without judgments are rejected.

The t-distribution tail probability is computed here via the regularized
incomplete beta function (continued fraction), to absolute accuracy
around 1e-8, so the package needs no statistics dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .corpus import Qrels, read_qrels
from .errors import DataError, NumericError

Run = dict[int, list[tuple[int, float]]]


def write_run(path: str | Path, run: Run, tag: str = "rankbench") -> None:
    """Write `query_id Q0 doc_id rank score tag` lines, ranks from 1."""
    with open(path, "w", encoding="utf-8") as handle:
        for query_id in sorted(run):
            for rank, (doc_id, score) in enumerate(run[query_id], start=1):
                handle.write(
                    f"{query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n"
                )


def read_run(path: str | Path) -> Run:
    """Read a TREC run file, validating ranks, uniqueness, and score order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"run file not found: {path}")
    rows: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(
                    f"{path}:{lineno}: expected `query_id Q0 doc_id rank "
                    f"score tag`, got {len(parts)} fields"
                )
            try:
                query_id = int(parts[0])
                doc_id = int(parts[2])
                rank = int(parts[3])
                score = float(parts[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed field") from exc
            rows.setdefault(query_id, []).append((rank, doc_id, score))
    run: Run = {}
    for query_id, entries in rows.items():
        entries.sort(key=lambda entry: entry[0])
        seen: set[int] = set()
        previous_score = math.inf
        for position, (rank, doc_id, score) in enumerate(entries, start=1):
            if rank != position:
                raise DataError(
                    f"{path}: query {query_id} ranks are not contiguous "
                    f"from 1 (found rank {rank} at position {position})"
                )
            if doc_id in seen:
                raise DataError(
                    f"{path}: query {query_id} lists doc {doc_id} twice"
                )
            if score > previous_score:
                raise DataError(
                    f"{path}: query {query_id} scores increase with rank"
                )
            seen.add(doc_id)
            previous_score = score
        run[query_id] = [(doc_id, score) for _, doc_id, score in entries]
    return run


@dataclass
class MetricResult:
    per_query: dict[int, float]
    mean: float
    n_skipped: int  # judged queries with no relevant doc, excluded


def _evaluated_queries(run: Run, qrels: Qrels) -> tuple[list[int], int]:
    for query_id in run:
        if query_id not in qrels:
            raise DataError(
                f"run contains query {query_id} with no judgments"
            )
    evaluated = []
    skipped = 0
    for query_id in qrels:
        if any(rel >= 1 for rel in qrels[query_id].values()):
            evaluated.append(query_id)
        else:
            skipped += 1
    return sorted(evaluated), skipped


def _relevant(qrels: Qrels, query_id: int) -> set[int]:
    return {doc for doc, rel in qrels[query_id].items() if rel >= 1}


def _metric(
    run: Run, qrels: Qrels, k: int, per_query_fn
) -> MetricResult:
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    evaluated, skipped = _evaluated_queries(run, qrels)
    per_query: dict[int, float] = {}
    for query_id in evaluated:
        ranked = [doc_id for doc_id, _ in run.get(query_id, [])][:k]
        per_query[query_id] = per_query_fn(ranked, _relevant(qrels, query_id))
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(per_query, mean, skipped)


def mrr_at_k(run: Run, qrels: Qrels, k: int) -> MetricResult:
    """Reciprocal rank of the first relevant doc in the top k, else 0."""

    def value(ranked: list[int], relevant: set[int]) -> float:
        for position, doc_id in enumerate(ranked, start=1):
            if doc_id in relevant:
                return 1.0 / position
        return 0.0

    return _metric(run, qrels, k, value)


def ndcg_at_k(run: Run, qrels: Qrels, k: int) -> MetricResult:
    """Binary-gain NDCG with 1/log2(rank+1) discounting."""

    def value(ranked: list[int], relevant: set[int]) -> float:
        dcg = sum(
            1.0 / math.log2(position + 1)
            for position, doc_id in enumerate(ranked, start=1)
            if doc_id in relevant
        )
        ideal = sum(
            1.0 / math.log2(position + 1)
            for position in range(1, min(k, len(relevant)) + 1)
        )
        return dcg / ideal

    return _metric(run, qrels, k, value)


def recall_at_k(run: Run, qrels: Qrels, k: int) -> MetricResult:
    """Fraction of the relevant docs that appear in the top k."""

    def value(ranked: list[int], relevant: set[int]) -> float:
        return len(relevant.intersection(ranked)) / len(relevant)

    return _metric(run, qrels, k, value)


_METRICS = {"mrr": mrr_at_k, "ndcg": ndcg_at_k, "recall": recall_at_k}


def parse_metric_key(key: str) -> tuple[str, int]:
    """Split a key like ``mrr@10`` into its metric name and cutoff."""
    name, _, cutoff = key.partition("@")
    name = name.lower()
    if name not in _METRICS or not cutoff:
        raise DataError(
            f"unknown metric {key!r}; expected one of "
            f"{'/'.join(sorted(_METRICS))} with a cutoff, e.g. mrr@10"
        )
    try:
        k = int(cutoff)
    except ValueError as exc:
        raise DataError(f"bad cutoff in metric {key!r}") from exc
    return name, k


def compute_metric(run: Run, qrels: Qrels, key: str) -> MetricResult:
    name, k = parse_metric_key(key)
    return _METRICS[name](run, qrels, k)


# --- significance ---------------------------------------------------------


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    max_iterations = 300
    eps = 3e-16
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + numerator / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise NumericError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued-fraction expansion."""
    if a <= 0.0 or b <= 0.0:
        raise DataError(f"beta parameters must be > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise DataError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_sf_two_tailed(t: float, df: int) -> float:
    """Two-tailed tail probability of Student's t with ``df`` degrees."""
    if df < 1:
        raise DataError(f"degrees of freedom must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(
        df / 2.0, 0.5, df / (df + t * t)
    )


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    degenerate: bool = False  # zero-variance differences


def paired_t_test(values_a: list[float], values_b: list[float]) -> TTestResult:
    """Two-tailed paired t-test on aligned per-query values.

    Zero-variance differences short-circuit: all-equal inputs give
    (t=0, p=1); a constant nonzero difference gives p=0 with the
    degeneracy flag set.
    """
    if len(values_a) != len(values_b):
        raise DataError(
            f"paired t-test needs aligned inputs, got {len(values_a)} "
            f"and {len(values_b)}"
        )
    n = len(values_a)
    if n < 2:
        raise DataError(f"paired t-test needs n >= 2, got {n}")
    diffs = [a - b for a, b in zip(values_a, values_b)]
    mean = sum(diffs) / n
    variance = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(variance)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, df, 1.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), df, 0.0, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, df, t_sf_two_tailed(t, df))


# --- reports --------------------------------------------------------------


@dataclass
class EvalReport:
    cutoffs: list[int]
    results: dict[str, MetricResult]  # keyed "mrr@10", "ndcg@10", ...
    n_queries: int
    n_skipped: int

    def flat_text(self) -> str:
        """Machine-readable `key<TAB>value` lines."""
        lines = [f"n_queries\t{self.n_queries}", f"n_skipped\t{self.n_skipped}"]
        for key in sorted(self.results):
            lines.append(f"{key}\t{self.results[key].mean:.6f}")
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        """Aligned table: MRR and NDCG at the first cutoff, recall at all."""
        first = self.cutoffs[0]
        headers = [f"MRR@{first}", f"NDCG@{first}"] + [
            f"Recall@{k}" for k in self.cutoffs
        ]
        values = [
            self.results[f"mrr@{first}"].mean,
            self.results[f"ndcg@{first}"].mean,
        ] + [self.results[f"recall@{k}"].mean for k in self.cutoffs]
        cells = [f"{value:.4f}" for value in values]
        widths = [
            max(len(header), len(cell))
            for header, cell in zip(headers, cells)
        ]
        header_row = "  ".join(
            header.rjust(width) for header, width in zip(headers, widths)
        )
        value_row = "  ".join(
            cell.rjust(width) for cell, width in zip(cells, widths)
        )
        return header_row + "\n" + value_row + "\n"


def evaluate_run(
    run: Run, qrels: Qrels, cutoffs: tuple[int, ...] = (10, 50, 100)
) -> EvalReport:
    """All three metrics at each cutoff."""
    if not cutoffs:
        raise DataError("need at least one cutoff")
    results: dict[str, MetricResult] = {}
    for k in cutoffs:
        results[f"mrr@{k}"] = mrr_at_k(run, qrels, k)
        results[f"ndcg@{k}"] = ndcg_at_k(run, qrels, k)
        results[f"recall@{k}"] = recall_at_k(run, qrels, k)
    any_result = next(iter(results.values()))
    return EvalReport(
        list(cutoffs),
        results,
        n_queries=len(any_result.per_query),
        n_skipped=any_result.n_skipped,
    )


def evaluate(
    run_path: str | Path,
    qrels_path: str | Path,
    cutoffs: tuple[int, ...] = (10, 50, 100),
) -> EvalReport:
    return evaluate_run(read_run(run_path), read_qrels(qrels_path), cutoffs)


def sigtest(
    run_a_path: str | Path,
    run_b_path: str | Path,
    qrels_path: str | Path,
    metric_key: str = "mrr@10",
) -> tuple[TTestResult, float, float]:
    """Paired t-test between two runs on one metric.

    Returns (test result, mean of run A, mean of run B); pairs align on
    the shared evaluated query set.
    """
    qrels = read_qrels(qrels_path)
    result_a = compute_metric(read_run(run_a_path), qrels, metric_key)
    result_b = compute_metric(read_run(run_b_path), qrels, metric_key)
    query_ids = sorted(result_a.per_query)
    values_a = [result_a.per_query[qid] for qid in query_ids]
    values_b = [result_b.per_query[qid] for qid in query_ids]
    return paired_t_test(values_a, values_b), result_a.mean, result_b.mean
