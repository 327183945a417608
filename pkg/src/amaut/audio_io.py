"""Audio ingestion: WAV decoding, channel folding, manifests, synthetic corpus."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DecodeError,
    DegenerateInputError,
    ManifestError,
    UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

MANIFEST_HEADER = "#classes:"


class ClampWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Interleaved PCM samples normalised to [-1, 1].

    ``samples`` is a flat array in frame-major order: for a stereo clip the
    layout is ``L0 R0 L1 R1 ...``.
    """

    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D (interleaved), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if samples.size % self.channels:
            raise ValueError(
                f"{samples.size} samples is not a multiple of {self.channels} channels"
            )
        object.__setattr__(self, "samples", samples)

    @property
    def n_frames(self) -> int:
        return self.samples.size // self.channels

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate

    def frames(self) -> np.ndarray:
        """View as an (n_frames, channels) array."""
        return self.samples.reshape(self.n_frames, self.channels)

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate, self.channels)


# ---------------------------------------------------------------------------
# WAV


def _parse_fmt(body: bytes) -> tuple[int, int, int, int, int]:
    if len(body) < 16:
        raise DecodeError(f"'fmt ' chunk too short ({len(body)} bytes, need 16)")
    fmt_tag, channels, rate, _byte_rate, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    if fmt_tag == WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise DecodeError("'fmt ' chunk: WAVE_FORMAT_EXTENSIBLE header truncated")
        # first two bytes of the SubFormat GUID carry the actual format tag
        fmt_tag = struct.unpack("<H", body[24:26])[0]
    if channels < 1:
        raise DecodeError(f"'fmt ' chunk declares {channels} channels")
    if rate < 1:
        raise DecodeError(f"'fmt ' chunk declares sample rate {rate}")
    return fmt_tag, channels, rate, block_align, bits


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string holding 16-bit int or 32-bit float PCM."""
    if len(data) < 12:
        raise DecodeError("RIFF header truncated")
    riff, _size, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF":
        raise DecodeError(f"RIFF chunk: bad magic {riff!r}")
    if wave != b"WAVE":
        raise DecodeError(f"RIFF chunk: form type {wave!r} is not WAVE")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, csize = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + csize]
        name = cid.decode("latin-1")
        if len(body) < csize:
            raise DecodeError(
                f"'{name}' chunk declares {csize} bytes but only {len(body)} remain"
            )
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            payload = body
        pos += 8 + csize + (csize & 1)

    if fmt is None:
        raise DecodeError("'fmt ' chunk missing")
    if payload is None:
        raise DecodeError("'data' chunk missing")

    fmt_tag, channels, rate, block_align, bits = fmt
    if fmt_tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, width = np.dtype("<i2"), 2
    elif fmt_tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, width = np.dtype("<f4"), 4
    else:
        raise UnsupportedFormatError(
            f"unsupported codec: format tag 0x{fmt_tag:04x} with {bits} bits per sample"
        )
    if block_align != width * channels:
        raise DecodeError(
            f"'fmt ' chunk: block_align {block_align} inconsistent with "
            f"{channels} x {bits}-bit samples"
        )
    if len(payload) % block_align:
        raise DecodeError(
            f"'data' chunk length {len(payload)} is not a multiple of block_align {block_align}"
        )

    raw = np.frombuffer(payload, dtype=dtype)
    if dtype.kind == "i":
        samples = raw.astype(np.float32) / np.float32(32768.0)
    else:
        samples = raw.astype(np.float32)
        if not np.all(np.isfinite(samples)):
            raise DecodeError("'data' chunk contains non-finite float samples")
        n_out = int(np.count_nonzero(np.abs(samples) > 1.0))
        if n_out:
            warnings.warn(f"{n_out} float samples outside [-1, 1] were clamped", ClampWarning)
            samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, rate, channels)


def encode_wav(clip: AudioClip, sample_format: str = "pcm16") -> bytes:
    """Serialise a clip to RIFF/WAVE bytes (``pcm16`` or ``float32``)."""
    if sample_format == "pcm16":
        q = np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0)
        body = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    elif sample_format == "float32":
        body = np.asarray(clip.samples, dtype="<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise UnsupportedFormatError(f"cannot encode sample format {sample_format!r}")
    block_align = clip.channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH", tag, clip.channels, clip.sample_rate,
        clip.sample_rate * block_align, block_align, bits,
    )
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(body)) + body
    if len(body) & 1:
        chunks += b"\x00"
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def read_wav(path) -> AudioClip:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_wav(data)
    except DecodeError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def write_wav(path, clip: AudioClip, sample_format: str = "pcm16") -> None:
    Path(path).write_bytes(encode_wav(clip, sample_format))


def stereo_to_mono(clip: AudioClip) -> AudioClip:
    """Average the channels of each frame into a single channel."""
    if clip.samples.size == 0:
        raise DegenerateInputError("cannot fold an empty clip to mono")
    if clip.channels == 1:
        return clip
    mono = clip.frames().mean(axis=1, dtype=np.float64).astype(clip.samples.dtype)
    return AudioClip(mono, clip.sample_rate, 1)


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class DatasetManifest:
    entries: list[tuple[str, Optional[int]]]
    class_names: list[str]
    sample_rate_hint: Optional[int] = None
    root: Optional[Path] = None

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ManifestError(f"need at least 2 classes, got {len(self.class_names)}")
        if not self.entries:
            raise ManifestError("manifest has no entries")
        for path, label in self.entries:
            if label is not None and not 0 <= label < self.n_classes:
                raise ManifestError(f"label {label} of {path!r} outside 0..{self.n_classes - 1}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> list[int]:
        out = []
        for path, label in self.entries:
            if label is None:
                raise ManifestError("manifest was loaded in feature-only mode; labels unavailable")
            out.append(label)
        return out

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry_path: str) -> Path:
        p = Path(entry_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def load_clips(self) -> list[AudioClip]:
        return [read_wav(self.resolve(p)) for p, _ in self.entries]


def load_manifest(path, with_labels: bool = True) -> DatasetManifest:
    """Parse a ``#classes:`` headed CSV manifest.

    With ``with_labels=False`` the label column is never parsed, so callers
    doing unsupervised work cannot observe it even by accident.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    class_names = None
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(MANIFEST_HEADER):
            if class_names is not None:
                raise ManifestError(f"{path}:{lineno}: duplicate {MANIFEST_HEADER} header")
            class_names = [n.strip() for n in line[len(MANIFEST_HEADER):].split(";")]
            if any(not n for n in class_names):
                raise ManifestError(f"{path}:{lineno}: empty class name in header")
            continue
        if class_names is None:
            raise ManifestError(f"{path}:{lineno}: entry before {MANIFEST_HEADER} header")
        if "," not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'path,label'")
        clip_path, label_text = line.rsplit(",", 1)
        label = None
        if with_labels:
            try:
                label = int(label_text)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: label {label_text!r} is not an integer") from None
            if not 0 <= label < len(class_names):
                raise ManifestError(
                    f"{path}:{lineno}: label {label} outside 0..{len(class_names) - 1}"
                )
        entries.append((clip_path.strip(), label))

    if class_names is None:
        raise ManifestError(f"{path}: missing {MANIFEST_HEADER} header")
    return DatasetManifest(entries, class_names, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_HEADER + ";".join(manifest.class_names)]
    lines += [f"{p},{label}" for p, label in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic toy corpus of tone-burst classes.

    Class ``k`` is a Hann-enveloped sinusoid near ``base_freq * freq_ratio**k``
    with random onset, phase, amplitude and a small relative frequency jitter.
    """

    n_classes: int = 3
    clips_per_class: int = 10
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    base_freq: float = 440.0
    freq_ratio: float = 2 ** (1 / 3)
    freq_jitter: float = 0.005
    noise_amp: float = 0.002
    burst_frac: tuple[float, float] = (0.4, 0.7)

    def __post_init__(self):
        if self.n_classes < 1 or self.clips_per_class < 1:
            raise ValueError("n_classes and clips_per_class must be >= 1")
        if not 0.5 <= self.duration_s <= 12.0:
            raise ValueError(f"duration_s must lie in [0.5, 12], got {self.duration_s}")
        if self.sample_rate < 1:
            raise ValueError("sample_rate must be positive")
        top = self.base_freq * self.freq_ratio ** (self.n_classes - 1) * (1 + self.freq_jitter)
        if top >= self.sample_rate / 2:
            raise ValueError(f"class frequency {top:.0f} Hz exceeds Nyquist")

    def class_freq(self, k: int) -> float:
        return self.base_freq * self.freq_ratio ** k


def synth_clip(spec: SynthSpec, label: int, index: int) -> AudioClip:
    rng = np.random.default_rng([spec.seed, label, index])
    n = int(round(spec.duration_s * spec.sample_rate))
    freq = spec.class_freq(label) * (1.0 + rng.uniform(-spec.freq_jitter, spec.freq_jitter))
    phase = rng.uniform(0.0, 2 * np.pi)
    amp = rng.uniform(0.3, 0.8)
    burst = max(2, int(round(n * rng.uniform(*spec.burst_frac))))
    onset = int(rng.integers(0, n - burst + 1))

    t = np.arange(burst) / spec.sample_rate
    x = np.zeros(n)
    x[onset:onset + burst] = amp * np.hanning(burst) * np.sin(2 * np.pi * freq * t + phase)
    x += spec.noise_amp * rng.standard_normal(n)
    # snap to the 16-bit grid so in-memory and on-disk corpora agree exactly
    q = np.clip(np.round(x * 32768.0), -32768, 32767)
    return AudioClip((q / 32768.0).astype(np.float32), spec.sample_rate, 1)


def generate_synth_corpus(spec: SynthSpec) -> tuple[DatasetManifest, list[AudioClip]]:
    """Build ``n_classes * clips_per_class`` clips, interleaved by class."""
    entries, clips = [], []
    for i in range(spec.clips_per_class):
        for k in range(spec.n_classes):
            entries.append((f"c{k}_{i:05d}.wav", k))
            clips.append(synth_clip(spec, k, i))
    names = [f"tone{k}" for k in range(spec.n_classes)]
    if spec.n_classes < 2:
        # a one-class corpus is legal to generate but not a valid manifest
        names.append("unused")
    manifest = DatasetManifest(entries, names, sample_rate_hint=spec.sample_rate)
    return manifest, clips


def write_corpus(out_dir, manifest: DatasetManifest, clips: Sequence[AudioClip],
                 manifest_name: str = "manifest.csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (p, _), clip in zip(manifest.entries, clips):
        write_wav(out_dir / p, clip)
    mpath = out_dir / manifest_name
    write_manifest(manifest, mpath)
    return mpath


def generate_noise_bank(sample_rate: int, duration_s: float = 3.0, seed: int = 0) -> list[AudioClip]:
    """Two stand-in background recordings: a pink-noise bed and a warbling harmonic tone."""
    rng = np.random.default_rng([seed, 0xB6])
    n = int(round(duration_s * sample_rate))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    f[0] = f[1]
    pink = np.fft.irfft(spectrum / np.sqrt(f), n)
    pink *= 0.5 / np.max(np.abs(pink))

    t = np.arange(n) / sample_rate
    f0 = 600.0 + 250.0 * np.sin(2 * np.pi * 1.3 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    warble = sum(np.sin(h * phase) / h for h in (1, 2, 3))
    warble = warble * (0.5 + 0.5 * np.abs(np.sin(2 * np.pi * 0.7 * t))) + 0.05 * rng.standard_normal(n)
    warble *= 0.5 / np.max(np.abs(warble))
    return [AudioClip(pink.astype(np.float32), sample_rate), AudioClip(warble.astype(np.float32), sample_rate)]
