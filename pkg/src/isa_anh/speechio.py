"""PCM WAV reading and log-mel spectrogram features."""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

N_MELS = 80
BINARY_MAGIC = b"LMS1"
_HEADER = struct.Struct("<IIdd")


class UnsupportedFormatError(ValueError):
    pass


class WavParseError(ValueError):
    pass


class ClipTooShortError(ValueError):
    pass


@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if np.isnan(self.samples).any():
            raise ValueError("clip contains NaN samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LmsSequence:
    frames: np.ndarray  # T x bins
    hop_ms: float
    window_ms: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"expected T x {N_MELS} frames, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("log-mel frames must be finite")

    def __len__(self) -> int:
        return self.frames.shape[0]


def read_wav(path) -> AudioClip:
    """Read 16-bit PCM mono or stereo; stereo channels are averaged."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, count = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(count)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(msg) from exc
        raise WavParseError(msg) from exc
    except EOFError as exc:
        raise WavParseError("truncated WAV header") from exc
    if width != 2:
        raise UnsupportedFormatError(f"only 16-bit PCM is supported, got {8 * width}-bit")
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"only mono or stereo is supported, got {channels} channels")
    if count == 0 or len(raw) < count * channels * width:
        raise WavParseError(f"expected {count} frames, data chunk holds {len(raw) // (channels * width)}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64).reshape(-1, channels)
    return AudioClip(rate, pcm.mean(axis=1) / 32768.0)


def write_wav(path, clip: AudioClip) -> None:
    """16-bit mono writer, mostly for tests and demos."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0 Hz to Nyquist, shape ``n_mels x (n_fft//2 + 1)``."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(length: int, window: int, hop: int) -> int:
    return 1 + (length - window) // hop


def log_mel(
    clip: AudioClip,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_mels: int = N_MELS,
    floor: float = 1e-10,
) -> LmsSequence:
    sr = clip.sample_rate
    window = round(sr * window_ms / 1000)
    hop = round(sr * hop_ms / 1000)
    if window < 1 or hop < 1:
        raise ValueError("window and hop must cover at least one sample")
    if clip.samples.size < window:
        raise ClipTooShortError(f"clip has {clip.samples.size} samples, window needs {window}")
    n_fft = max(512, 1 << (window - 1).bit_length())
    T = frame_count(clip.samples.size, window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = clip.samples[idx] * get_window("hann", window)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(sr, n_fft, n_mels).T
    return LmsSequence(np.log(np.maximum(energies, floor)), float(hop_ms), float(window_ms))


def write_lms_jsonl(path, lms: LmsSequence) -> None:
    """One JSON header line followed by one line per frame."""
    with open(path, "w") as fh:
        header = {"T": len(lms), "bins": lms.frames.shape[1], "hop_ms": lms.hop_ms, "window_ms": lms.window_ms}
        fh.write(json.dumps(header) + "\n")
        fh.writelines(json.dumps(row.tolist()) + "\n" for row in lms.frames)


def read_lms_jsonl(path) -> LmsSequence:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    frames = np.array([json.loads(line) for line in lines[1:]], dtype=np.float64).reshape(header["T"], header["bins"])
    return LmsSequence(frames, header["hop_ms"], header["window_ms"])


def write_lms_binary(path, lms: LmsSequence) -> None:
    """``LMS1`` magic, then ``<IIdd`` (T, bins, hop_ms, window_ms), then little-endian float64 frames."""
    T, bins = lms.frames.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(_HEADER.pack(T, bins, lms.hop_ms, lms.window_ms))
        fh.write(lms.frames.astype("<f8").tobytes())


def read_lms_binary(path) -> LmsSequence:
    blob = Path(path).read_bytes()
    start = len(BINARY_MAGIC) + _HEADER.size
    if blob[: len(BINARY_MAGIC)] != BINARY_MAGIC or len(blob) < start:
        raise WavParseError("not an LMS1 file")
    T, bins, hop_ms, window_ms = _HEADER.unpack_from(blob, len(BINARY_MAGIC))
    body = np.frombuffer(blob, dtype="<f8", offset=start)
    if body.size != T * bins:
        raise WavParseError(f"expected {T * bins} values, found {body.size}")
    return LmsSequence(body.reshape(T, bins).copy(), hop_ms, window_ms)
