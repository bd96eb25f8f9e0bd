"""Waveform containers, WAV I/O and peak/energy level arithmetic."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    DegenerateSilenceError,
    InfiniteSNRError,
    LengthMismatchError,
    UnsupportedChannelsError,
    UnsupportedEncodingError,
    WavFormatError,
)

PCM16_SCALE = 32768.0
_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _frozen(samples) -> np.ndarray:
    arr = np.array(samples, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with nominal amplitude range [-1, 1]."""

    id: str
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        samples = _frozen(self.samples)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.size < 1:
            raise ValueError("an AudioClip needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"clip {self.id!r} contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples, id: str | None = None) -> "AudioClip":
        return AudioClip(self.id if id is None else id, self.sample_rate, samples)


@dataclass(frozen=True)
class Perturbation:
    """Additive waveform offset for a host clip of the same length."""

    delta: np.ndarray = field(repr=False)

    def __post_init__(self):
        delta = _frozen(self.delta)
        object.__setattr__(self, "delta", delta)
        if not np.all(np.isfinite(delta)):
            raise ValueError("perturbation contains non-finite values")

    def __len__(self) -> int:
        return self.delta.size

    @classmethod
    def zeros_like(cls, clip: AudioClip) -> "Perturbation":
        return cls(np.zeros(len(clip)))


def _check_lengths(x: AudioClip, delta: Perturbation) -> None:
    if len(delta) != len(x):
        raise LengthMismatchError(
            f"perturbation has {len(delta)} samples, clip {x.id!r} has {len(x)}"
        )


# --- WAV I/O ---------------------------------------------------------------------


def read_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM or 32-bit float WAV file.

    Integer samples are divided by 32768. The clip id is the file stem.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and size >= 26:
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, block_align, bits = fmt
    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: {channels} channels, only mono is supported")
    if sample_rate <= 0:
        raise WavFormatError(f"{path}: invalid sample rate {sample_rate}")
    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2") / PCM16_SCALE
    elif audio_format == _WAVE_FORMAT_FLOAT and bits == 32:
        samples = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: format tag {audio_format} with {bits} bits is not supported"
        )
    if samples.size == 0:
        raise WavFormatError(f"{path}: empty data chunk")
    return AudioClip(path.stem, int(sample_rate), samples)


def to_pcm16(samples) -> np.ndarray:
    """Clamp to [-1, 1] and round to the nearest 16-bit step."""
    scaled = np.rint(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path) -> None:
    """Write ``clip`` as 16-bit PCM mono."""
    with open(path, "wb") as raw, wave.open(raw, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(to_pcm16(clip.samples).tobytes())


# --- levels ------------------------------------------------------------------------


def peak_db(samples) -> float:
    """Peak level in dB: max over samples of 20*log10(|sample|)."""
    peak = float(np.max(np.abs(np.asarray(samples, dtype=np.float64))))
    if peak == 0.0:
        raise DegenerateSilenceError("peak level of an all-zero signal is undefined")
    return 20.0 * np.log10(peak)


def distortion_db(delta: Perturbation, x: AudioClip) -> float:
    """Perturbation peak relative to the clip peak, in dB (more negative is quieter)."""
    _check_lengths(x, delta)
    return peak_db(delta.delta) - peak_db(x.samples)


def snr_db(x: AudioClip, delta: Perturbation) -> float:
    """Energy ratio 10*log10(sum x^2 / sum delta^2)."""
    _check_lengths(x, delta)
    noise = float(np.dot(delta.delta, delta.delta))
    if noise == 0.0:
        raise InfiniteSNRError("zero perturbation energy gives unbounded SNR")
    return 10.0 * np.log10(float(np.dot(x.samples, x.samples)) / noise)


def apply(x: AudioClip, delta: Perturbation) -> AudioClip:
    """Elementwise x + delta, clamped to [-1, 1]."""
    _check_lengths(x, delta)
    return x.with_samples(np.clip(x.samples + delta.delta, -1.0, 1.0))
