"""Input checks shared by the estimators."""

from __future__ import annotations

import re

import numpy as np

from .audio import AudioClip
from .exceptions import CharsetError, SampleRateMismatchError

VOCAB = "abcdefghijklmnopqrstuvwxyz "
BLANK = len(VOCAB)
_NON_VOCAB = re.compile(r"[^a-z ]")


def check_clips(X, sample_rate: int | None = None) -> list[AudioClip]:
    """Accept one clip or an iterable of clips; optionally enforce a sample rate."""
    if isinstance(X, AudioClip):
        X = [X]
    clips = list(X)
    for c in clips:
        if not isinstance(c, AudioClip):
            raise TypeError(f"expected AudioClip, got {type(c).__name__}")
        if sample_rate is not None and c.sample_rate != sample_rate:
            raise SampleRateMismatchError(
                f"clip {c.id!r} is {c.sample_rate} Hz, expected {sample_rate}"
            )
    return clips


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace (also trims the ends)."""
    return " ".join(text.lower().split())


def check_transcript(text: str) -> str:
    text = normalize_text(text)
    if not text:
        raise CharsetError("empty transcript")
    bad = _NON_VOCAB.search(text)
    if bad:
        raise CharsetError(f"transcript {text!r} has out-of-vocabulary symbol {bad.group()!r}")
    return text


def encode_text(text: str) -> np.ndarray:
    return np.array([VOCAB.index(ch) for ch in check_transcript(text)], dtype=np.int64)


def decode_tokens(tokens) -> str:
    return "".join(VOCAB[int(t)] for t in tokens)


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
