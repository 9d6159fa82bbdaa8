"""Tokenization, document truncation, and encoder-budget splitting.

The default tokenizer lowercases and splits on whitespace/punctuation;
encoder-specific subword tokenizers can be plugged in by building a
Vocabulary over their token strings and bypassing `tokenize`.

Long documents are split into segments that each fit the encoder budget
alongside the full query: segment lengths differ by at most one token
("as even as possible") and concatenated spans reconstruct the document.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import BudgetExceededError

OOV_ID = 0

_TOKEN_RE = re.compile(r"[^\W_]+")


def split_words(text: str) -> list[str]:
    """Lowercased word tokens: maximal runs of letters/digits."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenizedText:
    """Parallel surface tokens and vocabulary ids; may be empty."""

    tokens: tuple[str, ...]
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.ids):
            raise ValueError(
                f"tokens/ids length mismatch: {len(self.tokens)} vs {len(self.ids)}"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def slice(self, start: int, end: int) -> "TokenizedText":
        return TokenizedText(self.tokens[start:end], self.ids[start:end])


class Vocabulary:
    """token -> id table with a reserved out-of-vocabulary id 0."""

    def __init__(self, tokens: list[str] | None = None):
        self._ids: dict[str, int] = {}
        for token in tokens or []:
            if token not in self._ids:
                self._ids[token] = len(self._ids) + 1

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        """Collect tokens from an iterable of raw strings, first-seen order."""
        vocab = cls()
        for text in texts:
            for token in split_words(text):
                vocab.add(token)
        return vocab

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._ids) + 1
        return self._ids[token]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, OOV_ID)

    def tokens(self) -> list[str]:
        """Tokens in id order (id = position + 1)."""
        return sorted(self._ids, key=self._ids.__getitem__)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, token: str) -> bool:
        return token in self._ids


def tokenize(text: str, vocab: Vocabulary) -> TokenizedText:
    """Deterministic lowercase word tokenization against a vocabulary."""
    tokens = split_words(text)
    return TokenizedText(tuple(tokens), tuple(vocab.id_of(t) for t in tokens))


def truncate_doc(doc: TokenizedText, limit: int) -> TokenizedText:
    """Keep the first `limit` tokens; idempotent, order preserving."""
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    if len(doc) <= limit:
        return doc
    return doc.slice(0, limit)


@dataclass(frozen=True)
class SplitPlan:
    """Contiguous half-open spans covering [0, doc_len), each within capacity."""

    segments: tuple[tuple[int, int], ...]
    capacity: int

    def __post_init__(self):
        prev_end = 0
        for start, end in self.segments:
            if start != prev_end or end < start:
                raise ValueError(f"spans must tile the document, got {self.segments}")
            if end - start > self.capacity:
                raise ValueError(f"span ({start},{end}) exceeds capacity {self.capacity}")
            prev_end = end

    @property
    def doc_len(self) -> int:
        return self.segments[-1][1] if self.segments else 0

    def __len__(self) -> int:
        return len(self.segments)


def plan_splits(
    doc_len: int,
    query_len: int,
    model_limit: int,
    control_tokens: int = 3,
) -> SplitPlan:
    """Plan document segments that fit `model_limit` alongside the full query.

    capacity = model_limit - query_len - control_tokens. The document is cut
    into ceil(doc_len / capacity) spans whose lengths differ by at most one.
    An empty document yields a single empty span so downstream encoding still
    produces a classification vector.
    """
    if doc_len < 0 or query_len < 0 or control_tokens < 0:
        raise ValueError("lengths must be non-negative")
    capacity = model_limit - query_len - control_tokens
    if capacity < 1:
        raise BudgetExceededError(
            f"query ({query_len} tokens) plus {control_tokens} control tokens "
            f"leaves no room in the {model_limit}-token budget"
        )
    if doc_len == 0:
        return SplitPlan(((0, 0),), capacity)
    n_segments = -(-doc_len // capacity)
    base, extra = divmod(doc_len, n_segments)
    spans = []
    start = 0
    for i in range(n_segments):
        length = base + (1 if i < extra else 0)
        spans.append((start, start + length))
        start += length
    return SplitPlan(tuple(spans), capacity)
