"""Word-level normalization and n-gram utilities.

Shared by decontamination (10-gram overlap against holdout benchmarks) and
the reference-leak containment check in the reflection workflow. The
normalization rule is versioned so index runs stay auditable.
"""

from __future__ import annotations

import re

NORMALIZATION_RULE = "lower-punct-split-v1"

# \w+ keeps words/numbers together; any other non-space char becomes its own
# token, so punctuation differences never mask an overlap.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, drop whitespace."""
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[int, int, str]]:
    """Like normalize_tokens but with (start, end) character spans into text."""
    return [(m.start(), m.end(), m.group().lower()) for m in _TOKEN_RE.finditer(text)]


def ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    """All contiguous n-token windows, in order. Empty if len(tokens) < n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def has_ngram_overlap(a: str, b: str, n: int) -> bool:
    """True iff some n-gram (post-normalization) occurs in both texts."""
    grams_a = ngrams(normalize_tokens(a), n)
    if not grams_a:
        return False
    grams_b = set(ngrams(normalize_tokens(b), n))
    return any(g in grams_b for g in grams_a)


def redact_ngram_overlaps(text: str, reference: str, n: int, marker: str = "[redacted]") -> str:
    """Replace every n-gram of ``text`` that also occurs in ``reference``.

    Overlapping matched windows are merged into one redacted span. A single
    pass suffices: any surviving window would consist solely of untouched
    tokens and would therefore itself have been a match.
    """
    spans = token_spans(text)
    tokens = [t for _, _, t in spans]
    ref_grams = set(ngrams(normalize_tokens(reference), n))
    hit = [False] * len(tokens)
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i : i + n]) in ref_grams:
            for j in range(i, i + n):
                hit[j] = True
    if not any(hit):
        return text
    out: list[str] = []
    cursor = 0
    i = 0
    while i < len(tokens):
        if hit[i]:
            start = spans[i][0]
            while i < len(tokens) and hit[i]:
                i += 1
            end = spans[i - 1][1]
            out.append(text[cursor:start])
            out.append(marker)
            cursor = end
        else:
            i += 1
    out.append(text[cursor:])
    return "".join(out)
