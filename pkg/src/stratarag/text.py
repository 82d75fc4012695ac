"""Small text utilities: approximate tokenization and canonical forms.

The token counter is a whitespace-and-punctuation approximation, not a model
tokenizer; everything downstream (chunk sizing, budget packing, recall) uses
the same approximation so the numbers stay comparable.
"""

from __future__ import annotations

import re

# A token is a run of word characters or a single non-space symbol.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
# Recall-style tokens: alphanumeric runs only, case folded by the caller.
_WORD_RE = re.compile(r"[0-9A-Za-z]+")
_WS_RE = re.compile(r"\s+")


def tokenize(text: str) -> list[str]:
    """Split into approximate tokens (words and single punctuation marks)."""
    return _TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character (start, end) span of each approximate token."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    return len(_TOKEN_RE.findall(text))


def word_tokens(text: str) -> list[str]:
    """Casefolded alphanumeric tokens, used by overlap metrics."""
    return [t.casefold() for t in _WORD_RE.findall(text)]


def canonical_text(text: str) -> str:
    """Casefold and collapse runs of whitespace to single spaces."""
    return _WS_RE.sub(" ", text.casefold()).strip()


def canonical_name(name: str) -> str:
    """Entity-name canonical form: trimmed, whitespace collapsed, uppercased."""
    return _WS_RE.sub(" ", name.strip()).upper()
