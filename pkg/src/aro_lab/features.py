"""Differentiable speech front-end: framing, power spectrum, log-mel, MFCC.

The DFT is a pair of fixed cosine/sine basis matmuls so the whole pipeline
stays inside :mod:`aro_lab.diffgraph`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import diffgraph as dg
from .exceptions import ClipTooShortError, SampleRateMismatchError
from .validation import check_clips

LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 8000
    frame_length: int = 200
    hop: int = 80
    fft_bins: int = 256
    mel_bands: int = 26
    mfcc_coeffs: int = 13

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_length <= self.fft_bins:
            raise ValueError(
                "need 0 < hop <= frame_length <= fft_bins, got "
                f"{self.hop}, {self.frame_length}, {self.fft_bins}"
            )
        if not self.mel_bands >= self.mfcc_coeffs >= 1:
            raise ValueError("need mel_bands >= mfcc_coeffs >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def spectrum_bins(self) -> int:
        return self.fft_bins // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_length:
            raise ClipTooShortError(
                f"{num_samples} samples is shorter than one {self.frame_length}-sample frame"
            )
        return (num_samples - self.frame_length) // self.hop + 1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --- fixed matrices ----------------------------------------------------------


@lru_cache(maxsize=None)
def hann_window(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


@lru_cache(maxsize=None)
def dft_basis(frame_length: int, fft_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine bases of a zero-padded real DFT, (frame_length, fft_bins//2+1) each."""
    n = np.arange(frame_length)[:, None]
    k = np.arange(fft_bins // 2 + 1)[None, :]
    phase = 2.0 * np.pi * n * k / fft_bins
    return np.cos(phase), np.sin(phase)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters on the mel scale, shape (spectrum_bins, mel_bands)."""
    bin_hz = np.arange(cfg.spectrum_bins) * cfg.sample_rate / cfg.fft_bins
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(cfg.sample_rate / 2.0), cfg.mel_bands + 2))
    fb = np.zeros((cfg.spectrum_bins, cfg.mel_bands))
    for m in range(cfg.mel_bands):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        fb[:, m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


@lru_cache(maxsize=None)
def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal type-II DCT, shape (n_in, n_out), applied as ``x @ D``."""
    m = np.arange(n_in)[:, None]
    k = np.arange(n_out)[None, :]
    d = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * m + 1) / (2 * n_in))
    d[:, 0] = np.sqrt(1.0 / n_in)
    return d


# --- graph builders ---------------------------------------------------------------


def frame_indices(num_samples: int, cfg: FeatureConfig) -> np.ndarray:
    t = cfg.num_frames(num_samples)
    return np.arange(t)[:, None] * cfg.hop + np.arange(cfg.frame_length)[None, :]


def frame_signal(samples: dg.Node, cfg: FeatureConfig, window: bool = True) -> dg.Node:
    """Overlapping frames, shape (T, frame_length), Hann-windowed by default."""
    samples = samples if isinstance(samples, dg.Node) else dg.constant(samples)
    idx = frame_indices(samples.shape[0], cfg)
    frames = dg.take(samples, idx)
    if not window:
        return frames
    win = np.broadcast_to(hann_window(cfg.frame_length), frames.shape)
    return dg.mul(frames, dg.constant(win))


def power_spectrum(frames: dg.Node, cfg: FeatureConfig) -> dg.Node:
    cos_b, sin_b = dft_basis(cfg.frame_length, cfg.fft_bins)
    re = dg.matmul(frames, dg.constant(cos_b))
    im = dg.matmul(frames, dg.constant(sin_b))
    return dg.add(dg.square(re), dg.square(im))


def log_mel(power: dg.Node, cfg: FeatureConfig) -> dg.Node:
    mel = dg.matmul(power, dg.constant(mel_filterbank(cfg)))
    return dg.log(dg.add_scalar(mel, LOG_FLOOR))


def mfcc(log_mel_matrix: dg.Node, cfg: FeatureConfig) -> dg.Node:
    return dg.matmul(log_mel_matrix, dg.constant(dct_matrix(cfg.mel_bands, cfg.mfcc_coeffs)))


def extract(samples, cfg: FeatureConfig, kind: str = "mfcc") -> dg.Node:
    """Samples -> log-mel or MFCC feature matrix (T, D)."""
    lm = log_mel(power_spectrum(frame_signal(samples, cfg), cfg), cfg)
    if kind == "logmel":
        return lm
    if kind == "mfcc":
        return mfcc(lm, cfg)
    raise ValueError(f"unknown feature kind {kind!r}")


def feature_dim(cfg: FeatureConfig, kind: str) -> int:
    return cfg.mfcc_coeffs if kind == "mfcc" else cfg.mel_bands


class FrontEnd(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of clips -> list of (T, D) feature arrays."""

    def __init__(self, kind="mfcc", sample_rate=8000, frame_length=200, hop=80,
                 fft_bins=256, mel_bands=26, mfcc_coeffs=13):
        self.kind = kind
        self.sample_rate = sample_rate
        self.frame_length = frame_length
        self.hop = hop
        self.fft_bins = fft_bins
        self.mel_bands = mel_bands
        self.mfcc_coeffs = mfcc_coeffs

    @property
    def config(self) -> FeatureConfig:
        return FeatureConfig(self.sample_rate, self.frame_length, self.hop,
                             self.fft_bins, self.mel_bands, self.mfcc_coeffs)

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = self.config
        out = []
        for clip in check_clips(X):
            if clip.sample_rate != cfg.sample_rate:
                raise SampleRateMismatchError(
                    f"clip {clip.id!r} is {clip.sample_rate} Hz, front-end expects {cfg.sample_rate}"
                )
            out.append(extract(clip.samples, cfg, self.kind).value)
        return out
