"""Byte-pair-encoding tokenizer with a subword-fertility diagnostic.

Merges are learned inside word boundaries only, so fertility (subword
tokens per word) is well defined. The word segmenter understands both
ASCII conventions and Ethiopic-script punctuation (the wordspace and the
sentence marks), letting fertility be compared across scripts that do not
share delimiters.
"""

from __future__ import annotations

import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1
N_SPECIALS = 2

# U+1361 is the Ethiopic wordspace; it separates words like ASCII space.
_ETHIOPIC_WORDSPACE = "፡"
# Section mark (U+1360), the sentence/phrase marks U+1362..U+1368, and
# the quotation/dash characters common in Ethiopic-script news text.
_EDGE_PUNCTUATION = (
    string.punctuation
    + "፠።፣፤፥፦፧፨"
    + "«»“”‘’„‟‹›—–…"
)


def word_segment(text: str) -> list[str]:
    """Split NFC-normalized text into words.

    Words are separated by Unicode whitespace or the Ethiopic wordspace;
    punctuation (ASCII plus Ethiopic marks) is stripped from word edges.
    Empty results are dropped.
    """
    normalized = unicodedata.normalize("NFC", text)
    pieces = normalized.replace(_ETHIOPIC_WORDSPACE, " ").split()
    words = []
    for piece in pieces:
        word = piece.strip(_EDGE_PUNCTUATION)
        if word:
            words.append(word)
    return words


@dataclass
class BpeVocab:
    """A learned BPE vocabulary: base characters plus ordered merges.

    Token ids are dense: PAD=0, UNK=1, then the character inventory, then
    one id per merge in training order (merges whose joined string
    collides with an existing token reuse its id).
    """

    characters: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(repr=False, compare=False)
    id_to_token: list[str] = field(repr=False, compare=False)
    _word_cache: dict[str, tuple[str, ...]] = field(
        default_factory=dict, repr=False, compare=False
    )

    @classmethod
    def from_parts(
        cls, characters: list[str], merges: list[tuple[str, str]]
    ) -> "BpeVocab":
        id_to_token = [PAD_TOKEN, UNK_TOKEN]
        token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for token in characters:
            if token in token_to_id:
                raise DataError(f"duplicate character in vocabulary: {token!r}")
            token_to_id[token] = len(id_to_token)
            id_to_token.append(token)
        for left, right in merges:
            token = left + right
            if token not in token_to_id:
                token_to_id[token] = len(id_to_token)
                id_to_token.append(token)
        return cls(characters, merges, token_to_id, id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool


def _merge_symbols(symbols: list[str], left: str, right: str) -> list[str]:
    """Replace adjacent (left, right) pairs left-to-right, non-overlapping."""
    joined = left + right
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus: list[str], vocab_size: int) -> BpeVocab:
    """Learn a BPE vocabulary of (at most) ``vocab_size`` tokens.

    Starting from the character inventory (plus the two specials), each
    round merges the most frequent adjacent symbol pair within words,
    weighted by word frequency; ties break by the lexicographically
    smallest merged string. Training stops when the vocabulary is full or
    the best pair occurs fewer than twice.
    """
    word_freq: dict[str, int] = {}
    for text in corpus:
        for word in word_segment(text):
            word_freq[word] = word_freq.get(word, 0) + 1
    if not word_freq:
        raise DataError("cannot train a vocabulary on a corpus with no words")

    characters = sorted({char for word in word_freq for char in word})
    if vocab_size < len(characters) + N_SPECIALS:
        raise DataError(
            f"vocab_size {vocab_size} is below the minimum "
            f"{len(characters) + N_SPECIALS} (distinct characters + specials)"
        )
    budget = vocab_size - len(characters) - N_SPECIALS

    pieces: dict[str, list[str]] = {word: list(word) for word in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(budget):
        pair_counts: dict[tuple[str, str], int] = {}
        for word, symbols in pieces.items():
            freq = word_freq[word]
            for i in range(len(symbols) - 1):
                pair = (symbols[i], symbols[i + 1])
                pair_counts[pair] = pair_counts.get(pair, 0) + freq
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(
            (pair for pair, count in pair_counts.items() if count == best_count),
            key=lambda pair: (pair[0] + pair[1], pair[0]),
        )
        merges.append(best)
        left, right = best
        joined = left + right
        for word in pieces:
            if joined in word:
                pieces[word] = _merge_symbols(pieces[word], left, right)

    return BpeVocab.from_parts(characters, merges)


def encode_word(vocab: BpeVocab, word: str) -> tuple[str, ...]:
    """Encode one word into subword symbols by replaying the merges.

    Characters outside the vocabulary survive as single-character symbols
    (they map to UNK when converted to ids). Results are cached per word.
    """
    cached = vocab._word_cache.get(word)
    if cached is not None:
        return cached
    symbols = list(word)
    for left, right in vocab.merges:
        if len(symbols) < 2:
            break
        if left + right not in word:
            continue
        symbols = _merge_symbols(symbols, left, right)
    result = tuple(symbols)
    vocab._word_cache[word] = result
    return result


def encode(
    vocab: BpeVocab, text: str, max_tokens: int | None = 512
) -> TokenSequence:
    """Encode text into token ids, truncating at ``max_tokens`` if set."""
    if max_tokens is not None and max_tokens < 1:
        raise DataError(f"max_tokens must be >= 1 or None, got {max_tokens}")
    ids: list[int] = []
    for word in word_segment(text):
        for symbol in encode_word(vocab, word):
            if max_tokens is not None and len(ids) >= max_tokens:
                return TokenSequence(tuple(ids), True)
            ids.append(vocab.token_to_id.get(symbol, UNK_ID))
    return TokenSequence(tuple(ids), False)


def tokenize_words(vocab: BpeVocab, text: str) -> list[str]:
    """Subword symbol strings for a text, in order (no truncation)."""
    symbols: list[str] = []
    for word in word_segment(text):
        symbols.extend(encode_word(vocab, word))
    return symbols


def fertility(vocab: BpeVocab, corpus: list[str]) -> float:
    """Average subword tokens per word over the corpus (no truncation)."""
    total_tokens = 0
    total_words = 0
    for text in corpus:
        for word in word_segment(text):
            total_words += 1
            total_tokens += len(encode_word(vocab, word))
    if total_words == 0:
        raise DataError("fertility is undefined on a corpus with no words")
    return total_tokens / total_words


def compare(
    vocab_a: BpeVocab, vocab_b: BpeVocab, text: str
) -> tuple[list[str], list[str]]:
    """Side-by-side token listings of one text under two vocabularies."""
    return tokenize_words(vocab_a, text), tokenize_words(vocab_b, text)


def dumps_vocab(vocab: BpeVocab) -> str:
    """Serialize a vocabulary to the line-oriented text format.

    Format: a `characters<TAB>n` header followed by n character lines,
    then a `merges<TAB>m` header followed by m `left<TAB>right` lines.
    The two special tokens (pad=0, unk=1) are implicit.
    """
    lines = [f"characters\t{len(vocab.characters)}"]
    lines.extend(vocab.characters)
    lines.append(f"merges\t{len(vocab.merges)}")
    lines.extend(f"{left}\t{right}" for left, right in vocab.merges)
    return "\n".join(lines) + "\n"


def loads_vocab(text: str, source: str = "vocabulary") -> BpeVocab:
    lines = text.split("\n")
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise DataError(f"{source}: truncated vocabulary data")
        line = lines[pos]
        pos += 1
        return line

    header = take().split("\t")
    if len(header) != 2 or header[0] != "characters":
        raise DataError(f"{source}: expected `characters<TAB>n` header")
    try:
        n_chars = int(header[1])
    except ValueError as exc:
        raise DataError(f"{source}: bad character count {header[1]!r}") from exc
    characters = [take() for _ in range(n_chars)]
    header = take().split("\t")
    if len(header) != 2 or header[0] != "merges":
        raise DataError(f"{source}: expected `merges<TAB>m` header")
    try:
        n_merges = int(header[1])
    except ValueError as exc:
        raise DataError(f"{source}: bad merge count {header[1]!r}") from exc
    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        parts = take().split("\t")
        if len(parts) != 2:
            raise DataError(f"{source}: expected `left<TAB>right` merge line")
        merges.append((parts[0], parts[1]))
    return BpeVocab.from_parts(characters, merges)


def save_vocab(path: str | Path, vocab: BpeVocab) -> None:
    """Write a vocabulary as a text file (see :func:`dumps_vocab`)."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(dumps_vocab(vocab))


def load_vocab(path: str | Path) -> BpeVocab:
    path = Path(path)
    if not path.exists():
        raise DataError(f"vocabulary file not found: {path}")
    with open(path, encoding="utf-8") as handle:
        return loads_vocab(handle.read(), source=str(path))
