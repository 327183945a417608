"""Waveform-level view generators for multiview training, TTDA and TTAu.

Every transform takes an explicit ``numpy.random.Generator`` so a view is a
pure function of (input, parameters, generator state).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .audio_io import AudioClip
from .errors import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

MAX_SHIFT_FRAC = 0.17
NOISE_RATIO = 0.015
SNR_DB = 50.0
PEAK_FLOOR = 1e-6

KINDS = (
    "time_shift_left",
    "time_shift_right",
    "time_shift_random_dir",
    "gaussian_noise",
    "background_mix",
    "identity",
)

# number of views each named recipe must produce
RECIPE_SIZES = {"train4": 4, "ttda2": 2, "ttau2": 2, "train1": 1}


def sample_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, stream, epoch, sample) so workers cannot collide."""
    return np.random.default_rng([seed, stream, epoch, index])


def _mono(clip: AudioClip) -> None:
    if clip.channels != 1:
        raise ValueError(f"augmentations expect mono input, got {clip.channels} channels")


def time_shift(clip: AudioClip, frac: float, direction: str) -> AudioClip:
    """Translate by ``round(frac * N)`` samples, zero-filling the vacated end."""
    _mono(clip)
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"shift fraction must be in [0, 1], got {frac}")
    if direction not in ("left", "right"):
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    x = clip.samples
    n = x.size
    s = int(round(frac * n))
    if s == 0:
        return clip
    out = np.zeros_like(x)
    if direction == "right":
        out[s:] = x[:n - s]
    else:
        out[:n - s] = x[s:]
    return clip.with_samples(out)


def gaussian_noise(clip: AudioClip, ratio: float, rng: np.random.Generator) -> AudioClip:
    """Add white noise with std ``ratio * peak(|x|)`` (peak floored at 1e-6)."""
    _mono(clip)
    if ratio < 0:
        raise ValueError(f"noise ratio must be >= 0, got {ratio}")
    if ratio == 0:
        return clip
    x = clip.samples
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    sigma = ratio * max(peak, PEAK_FLOOR)
    noise = rng.normal(0.0, sigma, size=x.size)
    return clip.with_samples((x + noise).astype(x.dtype))


def _noise_segment(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if noise.size >= n:
        start = int(rng.integers(0, noise.size - n + 1))
        return noise[start:start + n]
    start = int(rng.integers(0, noise.size))
    reps = -(-(start + n) // noise.size)
    return np.tile(noise, reps)[start:start + n]


def background_mix(clip: AudioClip, noise: AudioClip, snr_db: float,
                   rng: np.random.Generator) -> AudioClip:
    """Add a random excerpt of ``noise`` scaled to the requested SNR.

    Powers are mean squared amplitudes. Noise shorter than the clip is tiled.
    """
    _mono(clip)
    _mono(noise)
    if noise.sample_rate != clip.sample_rate:
        raise ValueError(
            f"noise rate {noise.sample_rate} Hz differs from clip rate {clip.sample_rate} Hz"
        )
    if noise.samples.size == 0 or not np.any(noise.samples):
        raise DegenerateInputError("background noise clip has zero power")
    x = clip.samples.astype(np.float64)
    seg = _noise_segment(noise.samples.astype(np.float64), x.size, rng)
    p_signal = float(np.mean(x * x))
    p_noise = float(np.mean(seg * seg))
    if p_noise == 0.0:
        raise DegenerateInputError("selected background noise excerpt has zero power")
    if p_signal == 0.0:
        warnings.warn("signal has zero power; background mix skipped", RuntimeWarning)
        return clip
    if math.isinf(snr_db):
        return clip
    scale = math.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clip.with_samples((x + scale * seg).astype(clip.samples.dtype))


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    max_shift_frac: float = MAX_SHIFT_FRAC
    noise_ratio: float = NOISE_RATIO
    snr_db: float = SNR_DB
    noise_source: Optional[AudioClip] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.max_shift_frac <= MAX_SHIFT_FRAC:
            raise ConfigError(
                f"max_shift_frac must lie in [0, {MAX_SHIFT_FRAC}], got {self.max_shift_frac}"
            )
        if self.noise_ratio < 0:
            raise ConfigError(f"noise_ratio must be >= 0, got {self.noise_ratio}")
        if self.kind == "background_mix" and self.noise_source is None:
            raise ConfigError("background_mix requires a noise_source")

    def apply(self, clip: AudioClip, rng: np.random.Generator) -> AudioClip:
        kind = self.kind
        if kind == "identity":
            return clip
        if kind.startswith("time_shift"):
            frac = float(rng.uniform(0.0, self.max_shift_frac))
            if kind == "time_shift_random_dir":
                direction = "right" if rng.random() < 0.5 else "left"
            else:
                direction = kind.rsplit("_", 1)[1]
            return time_shift(clip, frac, direction)
        if kind == "gaussian_noise":
            return gaussian_noise(clip, self.noise_ratio, rng)
        return background_mix(clip, self.noise_source, self.snr_db, rng)


@dataclass
class ViewSet:
    views: list[AudioClip]
    recipe: str

    def __post_init__(self):
        expected = RECIPE_SIZES.get(self.recipe)
        if expected is not None and len(self.views) != expected:
            raise ValueError(f"recipe {self.recipe} needs {expected} views, got {len(self.views)}")

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)


def recipe_specs(recipe: str, noise_bank: Sequence[AudioClip] = (), *,
                 max_shift_frac: float = MAX_SHIFT_FRAC,
                 noise_ratio: float = NOISE_RATIO,
                 snr_db: float = SNR_DB) -> list[AugmentationSpec]:
    """The augmentation list behind a named recipe.

    ``train1`` is the single random-shift view used as the one-view baseline.
    """
    if recipe == "train4":
        if len(noise_bank) < 2:
            raise ConfigError("recipe train4 needs a noise bank of at least 2 clips")
        return [
            AugmentationSpec("time_shift_random_dir", max_shift_frac=max_shift_frac),
            AugmentationSpec("gaussian_noise", noise_ratio=noise_ratio),
            AugmentationSpec("background_mix", snr_db=snr_db, noise_source=noise_bank[0]),
            AugmentationSpec("background_mix", snr_db=snr_db, noise_source=noise_bank[1]),
        ]
    if recipe in ("ttda2", "ttau2"):
        return [
            AugmentationSpec("time_shift_right", max_shift_frac=max_shift_frac),
            AugmentationSpec("time_shift_left", max_shift_frac=max_shift_frac),
        ]
    if recipe == "train1":
        return [AugmentationSpec("time_shift_random_dir", max_shift_frac=max_shift_frac)]
    raise ConfigError(f"unknown recipe {recipe!r}")


def make_view_set(clip: AudioClip, recipe: str, rng: np.random.Generator,
                  noise_bank: Sequence[AudioClip] = (), **params) -> ViewSet:
    specs = recipe_specs(recipe, noise_bank, **params)
    return ViewSet([spec.apply(clip, rng) for spec in specs], recipe)


def apply_specs(clip: AudioClip, specs: Sequence[AugmentationSpec],
                rng: np.random.Generator) -> ViewSet:
    return ViewSet([spec.apply(clip, rng) for spec in specs], "custom")
