"""Deterministic signal processing.

STFT analysis/resynthesis, power-law magnitude compression, and
non-overlapping fixed-length chunking. Everything here is a pure function
on immutable inputs; no learned state.

Conventions: periodic Hann window, centered analysis with reflect padding
of half a window at both ends, frame count T = floor(len / hop). The
inverse transform is weighted overlap-add (synthesis window = analysis
window) normalized per sample by the summed squared window, so
istft(stft(x)) recovers x up to float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_WINDOW_LEN = 512
DEFAULT_HOP = 125
DEFAULT_CHUNK_SECONDS = 0.5
COMPRESSION_POWER = 0.3

_OLA_EPS = 1e-8


@dataclass
class Waveform:
    """1-D sampled audio signal, float32 amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class ComplexSpectrogram:
    """F x T complex STFT grid plus the analysis geometry needed to invert it."""

    bins: np.ndarray
    frame_hop: int = DEFAULT_HOP
    window_len: int = DEFAULT_WINDOW_LEN
    original_length: int = 0
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex64)
        if self.bins.ndim != 2:
            raise ValueError(f"spectrogram must be F x T, got shape {self.bins.shape}")
        if self.bins.shape[0] != self.window_len // 2 + 1:
            raise ValueError(
                f"expected {self.window_len // 2 + 1} frequency bins for window "
                f"{self.window_len}, got {self.bins.shape[0]}"
            )
        if not np.all(np.isfinite(self.bins)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins).astype(np.float32)


@dataclass
class CompressedMagnitude:
    """F' x T grid of power-law-compressed non-negative magnitudes."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains non-finite values")
        if np.any(self.values < 0):
            raise ValueError("compressed magnitudes must be non-negative")


@dataclass
class ChunkList:
    """Equal-length waveform chunks; the last one carries pad_len trailing zeros."""

    chunks: list[Waveform] = field(default_factory=list)
    pad_len: int = 0

    def __post_init__(self):
        if not self.chunks:
            raise ValueError("chunk list must hold at least one chunk")
        lengths = {len(c) for c in self.chunks}
        if len(lengths) != 1:
            raise ValueError(f"chunks must share one length, got {sorted(lengths)}")
        if not 0 <= self.pad_len < len(self.chunks[0]):
            raise ValueError(
                f"pad_len {self.pad_len} out of range for chunk length {len(self.chunks[0])}"
            )

    @property
    def chunk_len(self) -> int:
        return len(self.chunks[0])


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window: w[k] = 0.5 * (1 - cos(2*pi*k/n))."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    k = np.arange(n)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))).astype(np.float64)


def stft(
    w: Waveform,
    window_len: int = DEFAULT_WINDOW_LEN,
    hop: int = DEFAULT_HOP,
) -> ComplexSpectrogram:
    """Centered short-time Fourier transform.

    The signal is reflect-padded by window_len/2 at both ends, cut into
    T = floor(len/hop) Hann-windowed frames of window_len samples at
    offsets of hop, and each frame is transformed to window_len/2 + 1
    one-sided bins.
    """
    if len(w) == 0:
        raise ValueError("cannot transform an empty waveform")
    if window_len % 2 != 0:
        raise ValueError(f"window length must be even, got {window_len}")
    if not 0 < hop <= window_len:
        raise ValueError(f"hop must be in (0, {window_len}], got {hop}")
    half = window_len // 2
    if len(w) <= half:
        raise ValueError(
            f"waveform of {len(w)} samples is too short for reflect padding by {half}"
        )
    n_frames = len(w) // hop
    if n_frames == 0:
        raise ValueError(f"waveform of {len(w)} samples yields no frames at hop {hop}")

    x = np.pad(w.samples.astype(np.float64), half, mode="reflect")
    win = hann_window(window_len)
    offsets = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[offsets]
    bins = np.fft.rfft(frames * win, axis=1).T
    return ComplexSpectrogram(
        bins=bins,
        frame_hop=hop,
        window_len=window_len,
        original_length=len(w),
        sample_rate_hz=w.sample_rate_hz,
    )


def istft(s: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is inverse-transformed, multiplied by the synthesis window
    (same Hann), and accumulated; the sum is normalized per sample by the
    summed squared window (floored at 1e-8) and cropped to original_length.
    """
    window_len = s.window_len
    hop = s.frame_hop
    half = window_len // 2
    n_frames = s.bins.shape[1]
    win = hann_window(window_len)

    frames = np.fft.irfft(s.bins.T.astype(np.complex128), n=window_len, axis=1) * win
    total = (n_frames - 1) * hop + window_len
    acc = np.zeros(total, dtype=np.float64)
    den = np.zeros(total, dtype=np.float64)
    win_sq = win * win
    for t in range(n_frames):
        start = t * hop
        acc[start : start + window_len] += frames[t]
        den[start : start + window_len] += win_sq
    y = acc / np.maximum(den, _OLA_EPS)

    out = np.zeros(s.original_length, dtype=np.float64)
    avail = min(s.original_length, max(total - half, 0))
    out[:avail] = y[half : half + avail]
    return Waveform(out.astype(np.float32), sample_rate_hz=s.sample_rate_hz)


def compress(m: np.ndarray, power: float = COMPRESSION_POWER) -> CompressedMagnitude:
    """Elementwise m**power; emphasizes low-energy content."""
    m = np.asarray(m)
    if np.any(m < 0):
        raise ValueError("magnitudes must be non-negative")
    return CompressedMagnitude(np.power(m, power, dtype=np.float64).astype(np.float32))


def decompress(c: CompressedMagnitude | np.ndarray, power: float = COMPRESSION_POWER) -> np.ndarray:
    """Inverse of :func:`compress`: elementwise c**(1/power)."""
    values = c.values if isinstance(c, CompressedMagnitude) else np.asarray(c)
    if np.any(values < 0):
        raise ValueError("compressed magnitudes must be non-negative")
    return np.power(values.astype(np.float64), 1.0 / power).astype(np.float32)


def chunk(w: Waveform, chunk_seconds: float = DEFAULT_CHUNK_SECONDS) -> ChunkList:
    """Split into non-overlapping equal chunks, zero-padding the tail."""
    if len(w) == 0:
        raise ValueError("cannot chunk an empty waveform")
    chunk_len = round(chunk_seconds * w.sample_rate_hz)
    if chunk_len <= 0:
        raise ValueError(f"chunk of {chunk_seconds} s is empty at {w.sample_rate_hz} Hz")
    n_chunks = math.ceil(len(w) / chunk_len)
    pad_len = n_chunks * chunk_len - len(w)
    padded = np.pad(w.samples, (0, pad_len))
    chunks = [
        Waveform(padded[i * chunk_len : (i + 1) * chunk_len], w.sample_rate_hz)
        for i in range(n_chunks)
    ]
    return ChunkList(chunks=chunks, pad_len=pad_len)


def stitch(c: ChunkList) -> Waveform:
    """Concatenate chunks and drop the trailing pad; exact inverse of chunk."""
    joined = np.concatenate([ch.samples for ch in c.chunks])
    if c.pad_len:
        joined = joined[: -c.pad_len]
    return Waveform(joined, c.chunks[0].sample_rate_hz)
