"""Desk-scale passage retrieval benchmarking.

Dataset construction from headline/body articles, subword tokenization,
BM25, a trainable bi-encoder, token-level MaxSim reranking, and an
evaluation harness with paired significance tests — all reproducible
from a single seed.
"""

__version__ = "0.1.0"

from .errors import DataError, NumericError, RankbenchError

__all__ = [
    "DataError",
    "NumericError",
    "RankbenchError",
    "__version__",
]
