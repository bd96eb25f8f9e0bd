"""Edit-distance based error rates and attack success rate."""

from __future__ import annotations

from typing import Sequence

from .exceptions import EmptyReferenceError
from .validation import normalize_text


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance (unit-cost insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cer(ref: str, hyp: str) -> float:
    """Character error rate in percent; may exceed 100."""
    ref, hyp = normalize_text(ref), normalize_text(hyp)
    if not ref:
        raise EmptyReferenceError("CER needs a non-empty reference")
    return 100.0 * edit_distance(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent over whitespace tokens; may exceed 100."""
    ref_words, hyp_words = normalize_text(ref).split(), normalize_text(hyp).split()
    if not ref_words:
        raise EmptyReferenceError("WER needs at least one reference word")
    return 100.0 * edit_distance(ref_words, hyp_words) / len(ref_words)


def untargeted_success(original_ref: str, hyp: str) -> bool:
    """True when strictly more than half of the reference characters are wrong."""
    return cer(original_ref, hyp) > 50.0


def sroa(results: Sequence[bool]) -> float:
    results = list(results)
    if not results:
        raise ValueError("success rate of an empty result list is undefined")
    return 100.0 * sum(bool(r) for r in results) / len(results)
