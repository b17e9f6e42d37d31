"""Deterministic seed derivation.

Every stage of the pipeline draws its randomness from a seed derived from
the run's master seed plus a stable label, so stages can be re-run in
isolation (or in a different order) and still see identical streams.
"""

import hashlib


def derive_seed(seed: int, label: str) -> int:
    """Derive a child seed from ``seed`` and a stage label.

    The derivation is a truncated MD5 over the decimal seed and the label,
    which keeps it stable across platforms and Python versions (unlike
    ``hash()``).
    """
    digest = hashlib.md5(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
