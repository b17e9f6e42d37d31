"""Synthetic corpora with known retrieval structure.

Three generators, each a pure function of a seed:

- paraphrase corpus: every query word and its passage-side "synonym" are
  spelled from disjoint alphabets, so a query shares zero tokens with any
  passage. Lexical retrieval is blind here by construction while a
  trained embedding model can align the synonym pairs.
- token-overlap corpus: each article is identified by a rare key word
  (one unique character) that appears in both headline and body, diluted
  by a long stream of shared distractor words. Pooled embeddings wash the
  key out; token-level matching sees it with similarity exactly 1.
- separable corpus: headline words are a subset of the body words, so
  relevance is a plain word-overlap signal that a bag-of-subwords
  encoder learns quickly and cleanly.

Each generator appends a few exact duplicate articles so the ingest
deduplication path is exercised end to end.
"""

from __future__ import annotations

import random

from .corpus import RawArticle
from .errors import DataError
from .seeding import derive_seed

_CATEGORIES = ("c0", "c1", "c2", "c3")

# Disjoint alphabets for the paraphrase corpus: queries never share a
# character (hence never a token) with passages.
_QUERY_ALPHABET = "bdgkpt"
_PASSAGE_ALPHABET = "flmnrs"
# Distractor words for the token-overlap corpus.
_DISTRACTOR_ALPHABET = "aeiouhw"
# Word stock for the separable corpus.
_SEPARABLE_ALPHABET = "acdeimnorstu"


def _make_words(
    rng: random.Random, alphabet: str, count: int, lengths: tuple[int, int]
) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        length = rng.randint(*lengths)
        word = "".join(rng.choice(alphabet) for _ in range(length))
        if word in seen:
            continue
        seen.add(word)
        words.append(word)
    return words


def _add_duplicates(
    articles: list[RawArticle], rng: random.Random, count: int
) -> list[RawArticle]:
    originals = rng.sample(articles, min(count, len(articles)))
    return articles + [
        RawArticle(a.headline, a.body, a.category) for a in originals
    ]


def make_paraphrase_corpus(seed: int, n_articles: int = 200) -> list[RawArticle]:
    """Queries and passages with zero lexical overlap.

    Forty synonym pairs (query-side word, passage-side word) are spelled
    from disjoint alphabets. Each article gets a signature of three
    distinct pairs: the headline uses the query-side words, the body the
    passage-side words (each twice, shuffled). Signatures are unique, so
    exactly one passage is relevant per query.
    """
    if n_articles < 8:
        raise DataError(f"n_articles must be >= 8, got {n_articles}")
    rng = random.Random(derive_seed(seed, "paraphrase"))
    n_pairs = 40
    query_words = _make_words(rng, _QUERY_ALPHABET, n_pairs, (5, 5))
    passage_words = _make_words(rng, _PASSAGE_ALPHABET, n_pairs, (5, 5))

    signatures: list[tuple[int, ...]] = []
    seen: set[frozenset[int]] = set()
    while len(signatures) < n_articles:
        signature = tuple(rng.sample(range(n_pairs), 3))
        key = frozenset(signature)
        if key in seen:
            continue
        seen.add(key)
        signatures.append(signature)

    articles: list[RawArticle] = []
    for i, signature in enumerate(signatures):
        headline_words = [query_words[j] for j in signature]
        rng.shuffle(headline_words)
        body_words = [passage_words[j] for j in signature] * 2
        rng.shuffle(body_words)
        articles.append(
            RawArticle(
                " ".join(headline_words),
                " ".join(body_words),
                _CATEGORIES[i % len(_CATEGORIES)],
            )
        )
    return _add_duplicates(articles, rng, 3)


def make_token_overlap_corpus(
    seed: int, n_articles: int = 120
) -> list[RawArticle]:
    """Relevance carried by one rare token buried in distractor text.

    Article i's key word is a unique character (from the Ethiopic block,
    so keys can never share subwords with each other or with the
    distractors). The headline is the key word alone; the body holds the
    key word once inside roughly 45 distractor words drawn from a shared
    30-word stock.
    """
    if n_articles < 8:
        raise DataError(f"n_articles must be >= 8, got {n_articles}")
    if n_articles > 300:
        raise DataError(
            f"n_articles must be <= 300 (one unique key character each), "
            f"got {n_articles}"
        )
    rng = random.Random(derive_seed(seed, "token-overlap"))
    distractors = _make_words(rng, _DISTRACTOR_ALPHABET, 30, (4, 6))
    keys = [chr(0x1200 + i) for i in range(n_articles)]

    articles: list[RawArticle] = []
    for i, key in enumerate(keys):
        body_words = [rng.choice(distractors) for _ in range(45)]
        body_words.insert(rng.randrange(len(body_words) + 1), key)
        articles.append(
            RawArticle(
                key,
                " ".join(body_words),
                _CATEGORIES[i % len(_CATEGORIES)],
            )
        )
    return _add_duplicates(articles, rng, 2)


def make_separable_corpus(seed: int, n_articles: int = 240) -> list[RawArticle]:
    """Plain word-overlap relevance that an embedding model learns fast.

    Each article's headline is four distinct words from a 300-word stock;
    the body repeats those four words (reshuffled) plus two extra random
    words. Signatures are unique four-word sets.
    """
    if n_articles < 8:
        raise DataError(f"n_articles must be >= 8, got {n_articles}")
    rng = random.Random(derive_seed(seed, "separable"))
    words = _make_words(rng, _SEPARABLE_ALPHABET, 300, (4, 7))

    signatures: list[tuple[int, ...]] = []
    seen: set[frozenset[int]] = set()
    while len(signatures) < n_articles:
        signature = tuple(rng.sample(range(len(words)), 4))
        key = frozenset(signature)
        if key in seen:
            continue
        seen.add(key)
        signatures.append(signature)

    articles: list[RawArticle] = []
    for i, signature in enumerate(signatures):
        headline_words = [words[j] for j in signature]
        rng.shuffle(headline_words)
        body_words = [words[j] for j in signature] + [
            rng.choice(words) for _ in range(2)
        ]
        rng.shuffle(body_words)
        articles.append(
            RawArticle(
                " ".join(headline_words),
                " ".join(body_words),
                _CATEGORIES[i % len(_CATEGORIES)],
            )
        )
    return _add_duplicates(articles, rng, 3)


CORPUS_MAKERS = {
    "paraphrase": make_paraphrase_corpus,
    "token-overlap": make_token_overlap_corpus,
    "separable": make_separable_corpus,
}


def make_corpus(name: str, seed: int, n_articles: int | None = None):
    maker = CORPUS_MAKERS.get(name)
    if maker is None:
        raise DataError(
            f"unknown synthetic corpus {name!r}; choose from "
            f"{', '.join(sorted(CORPUS_MAKERS))}"
        )
    if n_articles is None:
        return maker(seed)
    return maker(seed, n_articles)
