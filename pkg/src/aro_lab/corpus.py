"""Synthetic tone-complex speech corpus, manifest ingestion and attack triples."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import PCM16_SCALE, AudioClip, read_wav, to_pcm16, write_wav
from .exceptions import CharsetError, ManifestError, PoolExhaustedError, SampleRateMismatchError
from .validation import check_random_state, check_transcript

SAMPLE_RATE = 8000
LETTER_SECONDS = 0.04
GAP_SECONDS = 0.04
EDGE_SECONDS = 0.10
RAMP_SECONDS = 0.01
NOISE_STD = 0.002
MIN_SECONDS, MAX_SECONDS = 0.3, 3.0

# No doubled letters: CTC would need a blank between them.
WORD_POOL = (
    "the and for are but not you all any can her was one our out day get has him his how "
    "man new now old see two way who boy did its let put say she too use cat dog red sun "
    "big run sit top cup hat pen map box fox jump blue green black white night light house "
    "mouse water river stone cloud rain snow wind fire earth plant tiger zebra quick brown "
    "lazy over under after right left north south west east fast slow word voice sound "
    "music radio alarm phone"
).split()
WORD_POOL = tuple(w for w in WORD_POOL if all(a != b for a, b in zip(w, w[1:])))

_TONE_GRID = np.geomspace(250.0, 3400.0, 9)
_PAIRS = list(itertools.combinations(range(len(_TONE_GRID)), 2))
# Fixed letter -> tone-pair assignment (independent of any seed).
_LETTER_PAIRS = {
    ch: _PAIRS[i] for ch, i in zip("abcdefghijklmnopqrstuvwxyz",
                                   np.random.default_rng(1234).permutation(len(_PAIRS))[:26])
}


@dataclass(frozen=True)
class Utterance:
    clip: AudioClip
    transcript: str

    def __post_init__(self):
        object.__setattr__(self, "transcript", check_transcript(self.transcript))
        if not MIN_SECONDS <= self.clip.duration <= MAX_SECONDS:
            raise ValueError(
                f"utterance {self.clip.id!r} lasts {self.clip.duration:.3f}s, "
                f"outside [{MIN_SECONDS}, {MAX_SECONDS}]"
            )

    @property
    def id(self) -> str:
        return self.clip.id


@dataclass(frozen=True)
class AttackTriple:
    source: Utterance
    target_text: str
    target_audio: AudioClip

    def __post_init__(self):
        if self.target_text == self.source.transcript:
            raise ValueError("target text must differ from the source transcript")

    @property
    def id(self) -> str:
        return self.source.id


def _word_tone(word: str) -> float:
    """Per-word low-level carrier frequency, stable across runs."""
    h = sum((i + 1) * (ord(c) - 96) for i, c in enumerate(word))
    return 180.0 + 37.0 * (h % 60)


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp] = 0.15 + 0.85 * r
    env[-ramp:] = (0.15 + 0.85 * r)[::-1]
    return env


def word_waveform(word: str, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Deterministic signature: per letter two fixed tones plus a weak per-word tone."""
    n = int(round(LETTER_SECONDS * sample_rate))
    env = _envelope(n, int(round(RAMP_SECONDS * sample_rate)))
    carrier = _word_tone(word)
    segments = []
    for k, ch in enumerate(word):
        t = (np.arange(n) + k * n) / sample_rate
        lo, hi = _LETTER_PAIRS[ch]
        seg = (np.sin(2 * np.pi * _TONE_GRID[lo] * t)
               + 0.8 * np.sin(2 * np.pi * _TONE_GRID[hi] * t)
               + 0.2 * np.sin(2 * np.pi * carrier * t))
        segments.append(env * seg)
    return np.concatenate(segments) / 2.0


def synth_corpus(word_count: int = 20, utterance_count: int = 250, seed: int = 0,
                 sample_rate: int = SAMPLE_RATE) -> list[Utterance]:
    """Reproducible corpus of 1-4 word utterances over a seeded lexicon."""
    if word_count < 10:
        raise ValueError("lexicon needs at least 10 words")
    if word_count > len(WORD_POOL):
        raise ValueError(f"lexicon can hold at most {len(WORD_POOL)} words")
    rng = check_random_state(seed)
    lexicon = [WORD_POOL[i] for i in sorted(rng.choice(len(WORD_POOL), word_count, replace=False))]
    waves = {w: word_waveform(w, sample_rate) for w in lexicon}
    gap = np.zeros(int(round(GAP_SECONDS * sample_rate)))
    edge = np.zeros(int(round(EDGE_SECONDS * sample_rate)))
    out = []
    for i in range(utterance_count):
        words = [lexicon[j] for j in rng.integers(len(lexicon), size=rng.integers(1, 5))]
        parts = [edge]
        for k, w in enumerate(words):
            if k:
                parts.append(gap)
            parts.append(waves[w])
        parts.append(edge)
        signal = np.concatenate(parts)
        signal = signal / np.max(np.abs(signal)) * rng.uniform(0.4, 0.8)
        signal = signal + NOISE_STD * rng.standard_normal(signal.size)
        # Snap to the 16-bit grid so WAV round trips are exact.
        signal = to_pcm16(signal) / PCM16_SCALE
        clip = AudioClip(f"utt{i:04d}", sample_rate, signal)
        out.append(Utterance(clip, " ".join(words)))
    return out


def split_corpus(corpus, n_holdout: int, seed: int):
    """Seeded shuffle; returns ``(rest, holdout)`` each in original corpus order."""
    corpus = list(corpus)
    if not 0 < n_holdout < len(corpus):
        raise ValueError(f"cannot hold out {n_holdout} of {len(corpus)} utterances")
    order = np.random.default_rng(seed).permutation(len(corpus))
    held = set(order[:n_holdout].tolist())
    rest = [u for i, u in enumerate(corpus) if i not in held]
    return rest, [u for i, u in enumerate(corpus) if i in held]


def make_triples(corpus, target_pool_size: int = 50, seed: int = 0) -> list[AttackTriple]:
    """Hold out a target pool and pair every other utterance with a differing pool member."""
    corpus = list(corpus)
    if len(corpus) <= target_pool_size:
        raise ValueError("corpus must be larger than the target pool")
    sources, pool = split_corpus(corpus, target_pool_size, seed)
    rng = np.random.default_rng([seed, 1])
    triples = []
    for src in sources:
        candidates = [p for p in pool if p.transcript != src.transcript]
        if not candidates:
            raise PoolExhaustedError(f"no target differs from {src.transcript!r}")
        tgt = candidates[int(rng.integers(len(candidates)))]
        triples.append(AttackTriple(src, tgt.transcript, tgt.clip))
    return triples


def load_manifest(path, sample_rate: int = SAMPLE_RATE) -> list[Utterance]:
    """Read ``<wav_path>\\t<transcript>`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ManifestError(f"{path}:{lineno}: expected <wav_path>TAB<transcript>")
        wav_path, transcript = line.split("\t", 1)
        if not transcript.strip():
            raise ManifestError(f"{path}:{lineno}: empty transcript")
        try:
            transcript = check_transcript(transcript)
        except CharsetError as exc:
            raise CharsetError(f"{path}:{lineno}: {exc}") from None
        wav = Path(wav_path)
        wav = wav if wav.is_absolute() else base / wav
        if not wav.is_file():
            raise ManifestError(f"{path}:{lineno}: missing audio file {wav}")
        clip = read_wav(wav)
        if clip.sample_rate != sample_rate:
            raise SampleRateMismatchError(
                f"{path}:{lineno}: {wav} is {clip.sample_rate} Hz, expected {sample_rate}"
            )
        out.append(Utterance(clip, transcript))
    return out


def write_corpus(corpus, directory, manifest_name: str = "manifest.tsv") -> Path:
    """Write one WAV per utterance plus a manifest readable by :func:`load_manifest`."""
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        rel = Path("wav") / f"{utt.id}.wav"
        write_wav(utt.clip, directory / rel)
        lines.append(f"{rel.as_posix()}\t{utt.transcript}\n")
    manifest = directory / manifest_name
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest
