import io
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amaut.audio_io import (
    AudioClip,
    SynthSpec,
    decode_wav,
    encode_wav,
    generate_synth_corpus,
    load_manifest,
    stereo_to_mono,
    write_manifest,
)
from amaut.errors import DecodeError, DegenerateInputError, ManifestError, UnsupportedFormatError


def _stdlib_wav(frames: np.ndarray, rate: int) -> bytes:
    """16-bit WAV written by the stdlib ``wave`` module (independent encoder)."""
    frames = np.atleast_2d(frames.T).T
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(frames.shape[1])
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(frames.astype("<i2").tobytes())
    return buf.getvalue()


def _stdlib_read(data: bytes) -> tuple[np.ndarray, int, int]:
    with wave.open(io.BytesIO(data), "rb") as w:
        raw = w.readframes(w.getnframes())
        return np.frombuffer(raw, "<i2"), w.getframerate(), w.getnchannels()


class TestDecode:
    def test_mono_one_second(self):
        words = np.arange(16000, dtype=np.int64) % 2000 - 1000
        clip = decode_wav(_stdlib_wav(words, 16000))
        assert clip.sample_rate == 16000
        assert clip.channels == 1
        assert clip.samples.size == 16000

    def test_full_scale_mapping(self):
        clip = decode_wav(_stdlib_wav(np.array([32767, -32768, 0]), 8000))
        assert clip.samples[0] == pytest.approx(32767 / 32768)
        assert clip.samples[1] == -1.0
        assert clip.samples[2] == 0.0

    def test_stereo_ramps_match_reference_parser(self):
        n = 500
        left = np.arange(n) * 60 - 15000
        right = 15000 - np.arange(n) * 45
        data = _stdlib_wav(np.stack([left, right], axis=1), 22050)
        clip = decode_wav(data)
        ref, rate, ch = _stdlib_read(data)
        assert (rate, ch) == (22050, 2)
        np.testing.assert_array_equal(clip.samples, ref.astype(np.float32) / 32768)
        np.testing.assert_array_equal(clip.frames()[:, 0] * 32768, left)
        np.testing.assert_array_equal(clip.frames()[:, 1] * 32768, right)

    def test_float32_and_clamp(self):
        clip = AudioClip(np.array([0.5, -0.25, 1.5, -2.0], dtype=np.float32), 8000)
        with pytest.warns(UserWarning, match="clamped"):
            out = decode_wav(encode_wav(clip, "float32"))
        np.testing.assert_array_equal(out.samples, [0.5, -0.25, 1.0, -1.0])

    def test_skips_unknown_chunks(self):
        data = _stdlib_wav(np.array([1, 2, 3]), 8000)
        extra = b"LIST" + struct.pack("<I", 3) + b"abc\x00"
        spliced = data[:12] + extra + data[12:]
        np.testing.assert_array_equal(decode_wav(spliced).samples * 32768, [1, 2, 3])

    def test_bad_magic_names_chunk(self):
        with pytest.raises(DecodeError, match="RIFF"):
            decode_wav(b"RIFX" + b"\x00" * 40)

    def test_truncated_data_chunk(self):
        data = _stdlib_wav(np.arange(100), 8000)
        with pytest.raises(DecodeError, match="'data'"):
            decode_wav(data[:-20])

    def test_missing_fmt(self):
        body = b"data" + struct.pack("<I", 2) + b"\x00\x00"
        with pytest.raises(DecodeError, match="'fmt '"):
            decode_wav(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)

    def test_unsupported_codec(self):
        data = bytearray(_stdlib_wav(np.arange(10), 8000))
        data[34:36] = struct.pack("<H", 24)  # bits per sample
        data[32:34] = struct.pack("<H", 3)  # block align
        with pytest.raises(UnsupportedFormatError):
            decode_wav(bytes(data))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=400),
           st.integers(1, 3), st.sampled_from([8000, 16000, 44100, 48000]))
    def test_pcm16_round_trip_bit_exact(self, words, channels, rate):
        words = words[: len(words) - len(words) % channels] or [0] * channels
        clip = decode_wav(_stdlib_wav(np.array(words).reshape(-1, channels), rate))
        again = decode_wav(encode_wav(clip))
        np.testing.assert_array_equal(again.samples, clip.samples)
        assert encode_wav(again) == encode_wav(clip)
        np.testing.assert_array_equal(np.round(again.samples * 32768), words)


class TestStereoToMono:
    def test_mono_identity(self):
        clip = AudioClip(np.array([0.1, 0.2], dtype=np.float32), 8000)
        assert stereo_to_mono(clip) is clip

    def test_two_frame_average(self):
        # channel 0 = [1, 3], channel 1 = [3, 1]
        clip = AudioClip(np.array([1.0, 3.0, 3.0, 1.0]), 8000, channels=2)
        np.testing.assert_array_equal(stereo_to_mono(clip).samples, [2.0, 2.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 1000), st.integers(0, 2**32 - 1))
    def test_matches_per_frame_mean(self, channels, frames, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, frames * channels)
        mono = stereo_to_mono(AudioClip(x, 16000, channels))
        assert mono.channels == 1 and mono.n_frames == frames
        for j in range(frames):
            expected = sum(x[j * channels + i] for i in range(channels)) / channels
            assert mono.samples[j] == pytest.approx(expected, abs=1e-15)

    def test_empty_clip(self):
        with pytest.raises(DegenerateInputError):
            stereo_to_mono(AudioClip(np.zeros(0), 8000, 2))


class TestManifest:
    def _write(self, tmp_path, text):
        p = tmp_path / "m.csv"
        p.write_text(text)
        return p

    def test_two_entries(self, tmp_path):
        m = load_manifest(self._write(tmp_path, "#classes:yes;no\na.wav,0\nb.wav,1\n"))
        assert m.entries == [("a.wav", 0), ("b.wav", 1)]
        assert m.class_names == ["yes", "no"]

    def test_label_out_of_range_reports_line(self, tmp_path):
        p = self._write(tmp_path, "#classes:yes;no\na.wav,0\nb.wav,2\n")
        with pytest.raises(ManifestError, match=r"m\.csv:3"):
            load_manifest(p)

    def test_duplicate_header(self, tmp_path):
        p = self._write(tmp_path, "#classes:a;b\n#classes:a;b\nx.wav,0\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    def test_needs_two_classes_and_entries(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(self._write(tmp_path, "#classes:a\nx.wav,0\n"))
        with pytest.raises(ManifestError):
            load_manifest(self._write(tmp_path, "#classes:a;b\n"))

    def test_feature_only_mode_never_parses_labels(self, tmp_path):
        p = self._write(tmp_path, "#classes:a;b\nx.wav,TRIPWIRE\ny.wav,99\n")
        m = load_manifest(p, with_labels=False)
        assert [e[1] for e in m.entries] == [None, None]
        with pytest.raises(ManifestError):
            m.labels
        with pytest.raises(ManifestError):
            load_manifest(p)

    def test_thirty_thousand_entries(self, tmp_path):
        # AudioMNIST-sized manifest
        lines = ["#classes:" + ";".join(str(d) for d in range(10))]
        lines += [f"spk{i // 500:02d}/{i}.wav,{i % 10}" for i in range(30000)]
        m = load_manifest(self._write(tmp_path, "\n".join(lines)))
        assert len(m) == 30000
        assert m.entries[12345] == ("spk24/12345.wav", 5)

    def test_write_read_round_trip(self, tmp_path):
        m, _ = generate_synth_corpus(SynthSpec(n_classes=3, clips_per_class=2))
        write_manifest(m, tmp_path / "out.csv")
        again = load_manifest(tmp_path / "out.csv")
        assert again.entries == m.entries and again.class_names == m.class_names


class TestSynthCorpus:
    def test_counts(self):
        m, clips = generate_synth_corpus(SynthSpec(n_classes=3, clips_per_class=10))
        assert len(clips) == 30
        assert np.bincount(m.labels).tolist() == [10, 10, 10]

    def test_deterministic(self):
        spec = SynthSpec(n_classes=2, clips_per_class=3, seed=42)
        _, a = generate_synth_corpus(spec)
        _, b = generate_synth_corpus(spec)
        for x, y in zip(a, b):
            assert x.samples.tobytes() == y.samples.tobytes()

    def test_different_seed_differs(self):
        _, a = generate_synth_corpus(SynthSpec(n_classes=2, clips_per_class=1, seed=1))
        _, b = generate_synth_corpus(SynthSpec(n_classes=2, clips_per_class=1, seed=2))
        assert not np.array_equal(a[0].samples, b[0].samples)

    @pytest.mark.parametrize("jitter", [0.0, 0.005])
    def test_class0_spectral_peak(self, jitter):
        spec = SynthSpec(n_classes=2, clips_per_class=3, sample_rate=16000, freq_jitter=jitter)
        _, clips = generate_synth_corpus(spec)
        for clip in clips[::2]:  # class 0
            x = clip.samples.astype(np.float64)
            n = x.size
            # direct DFT magnitude around the expected peak, 1 Hz bins
            k = np.arange(300, 600)
            basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
            peak = k[np.argmax(np.abs(basis @ x))] * 16000 / n
            assert abs(peak - 440.0) <= 1.0 + 440.0 * jitter

    def test_samples_on_16bit_grid(self):
        _, clips = generate_synth_corpus(SynthSpec(n_classes=2, clips_per_class=2))
        for c in clips:
            assert np.all(np.abs(c.samples) <= 1.0)
            np.testing.assert_array_equal(decode_wav(encode_wav(c)).samples, c.samples)

    def test_duration_bounds(self):
        with pytest.raises(ValueError):
            SynthSpec(duration_s=0.2)
        with pytest.raises(ValueError):
            SynthSpec(duration_s=13.0)
