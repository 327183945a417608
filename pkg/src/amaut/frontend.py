"""Log-Mel front end and horizontal tokenisation.

Window and hop are given in milliseconds so the same parameters apply at any
sample rate; nothing here resamples.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .audio_io import AudioClip
from .errors import ConfigError, TooShortError


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 128
    win_ms: float = 25.0
    hop_ms: float = 10.0
    f_min: float = 0.0
    f_max: Optional[float] = None  # None -> Nyquist
    log_floor: float = 1e-10
    n_fft: Optional[int] = None  # None -> auto, see fft_size()

    def __post_init__(self):
        if self.n_mels < 8:
            raise ConfigError(f"n_mels must be >= 8, got {self.n_mels}")
        if self.win_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("win_ms and hop_ms must be positive")
        if self.hop_ms > self.win_ms:
            raise ConfigError(f"hop_ms ({self.hop_ms}) exceeds win_ms ({self.win_ms})")
        if self.f_min < 0:
            raise ConfigError("f_min must be >= 0")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def validate_for(self, sample_rate: int) -> None:
        hi = self.upper_hz(sample_rate)
        if not self.f_min < hi <= sample_rate / 2:
            raise ConfigError(
                f"need f_min < f_max <= {sample_rate / 2} Hz, got f_min={self.f_min}, f_max={hi}"
            )
        if self.win_samples(sample_rate) < 2 or self.hop_samples(sample_rate) < 1:
            raise ConfigError(f"window/hop round to zero samples at {sample_rate} Hz")

    def upper_hz(self, sample_rate: int) -> float:
        return sample_rate / 2 if self.f_max is None else float(self.f_max)

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def n_frames(self, n_samples: int, sample_rate: int) -> int:
        win, hop = self.win_samples(sample_rate), self.hop_samples(sample_rate)
        if n_samples < win:
            return 0
        return 1 + (n_samples - win) // hop

    def fft_size(self, sample_rate: int) -> int:
        """FFT length used for a given rate.

        Auto mode picks the smallest power of two that holds the window and
        whose bin spacing does not exceed the narrowest gap between adjacent
        Mel points, so every triangle has at least one non-zero weight.
        """
        if self.n_fft is not None:
            return self.n_fft
        edges = mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.upper_hz(sample_rate)),
                                      self.n_mels + 2))
        min_gap = float(np.min(np.diff(edges)))
        need = max(self.win_samples(sample_rate), math.ceil(sample_rate / min_gap))
        return 1 << (need - 1).bit_length()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TokenMatrix:
    """F x T log-Mel matrix (frequency channels by time frames)."""

    values: np.ndarray
    params: MelParams
    sample_rate: int

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    # sequence view used by horizontal tokenisation
    @property
    def seq_len(self) -> int:
        return self.T

    @property
    def channels(self) -> int:
        return self.F

    def tokens(self) -> np.ndarray:
        """T x F view: one F-dimensional token per time frame."""
        return self.values.T

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, params: MelParams, sample_rate: int) -> "TokenMatrix":
        return cls(np.asarray(tokens).T, params, sample_rate)


@lru_cache(maxsize=64)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float,
                   f_max: float) -> np.ndarray:
    """Triangular HTK-scale filters as an (n_mels, n_fft//2 + 1) matrix."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=64)
def _hann(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def mel_spectrogram(clip: AudioClip, params: MelParams = MelParams()) -> TokenMatrix:
    """Log power Mel spectrogram of a mono clip (periodic Hann, no centring)."""
    if clip.channels != 1:
        raise ValueError(f"mel_spectrogram expects mono input, got {clip.channels} channels")
    sr = clip.sample_rate
    params.validate_for(sr)
    win, hop = params.win_samples(sr), params.hop_samples(sr)
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < win:
        raise TooShortError(
            f"clip has {x.size} samples; at least {win} ({params.win_ms} ms at {sr} Hz) required"
        )
    n_fft = params.fft_size(sr)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * _hann(win), n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(sr, n_fft, params.n_mels, float(params.f_min), params.upper_hz(sr))
    mel = power @ fb.T
    return TokenMatrix(np.log(mel + params.log_floor).T, params, sr)


def horizontal_tokenize(spec: TokenMatrix) -> TokenMatrix:
    """Split along time: T tokens, each carrying the F frequency bins as channels.

    Storage is untouched; downstream code reads ``seq_len``/``channels`` or
    ``tokens()``.
    """
    return spec
