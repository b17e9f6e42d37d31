import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rankbench import corpus, synthetic


@pytest.fixture(scope="session")
def separable_dataset(tmp_path_factory) -> Path:
    """A small ingested dataset shared by CLI and pipeline tests."""
    root = tmp_path_factory.mktemp("separable")
    articles = synthetic.make_separable_corpus(seed=7, n_articles=120)
    corpus.write_raw_tsv(root / "raw.tsv", articles)
    corpus.ingest(root / "raw.tsv", root / "data", corpus.SplitConfig(seed=13))
    return root
