"""Log-mel front end: framing, filterbank, global normalization, feature file IO.

All audio enters as 16 kHz mono; features leave as [n_frames x 96] log-power
matrices clipped to [-80, 0] dB. Model inputs are 64-frame slices of these.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TARGET_SR = 16000
N_MELS = 96
WIN_MS = 25
HOP_MS = 10
DB_FLOOR = -80.0
DB_CEIL = 0.0
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
MODEL_WINDOW_FRAMES = 64  # 64 frames x 10 ms hop ~ 640 ms per model input

CACHE_MAGIC = b"MPIB"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with its sample rate. Amplitudes are plain floats in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("audio must be a non-empty 1-D sample sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class FeatureMatrix:
    """[n_frames x 96] log-mel values; raw features respect [db_floor, db_ceil]."""

    values: np.ndarray
    db_floor: float = DB_FLOOR
    db_ceil: float = DB_CEIL

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != N_MELS:
            raise ValueError(f"expected [n_frames x {N_MELS}] values, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GlobalNormStats:
    """Scalar mean/std fitted over every value of the training-fold features only."""

    mean: float
    std: float
    n_frames_fitted: int

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("degenerate statistics: std must be strictly positive")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> np.ndarray:
    """Triangular mel filterbank, [n_mels x (n_fft//2 + 1)], peak weight 1."""
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    """Number of full analysis frames: floor((len - win) / hop) + 1."""
    if n_samples < win:
        raise ValueError("insufficient audio: clip shorter than one analysis window")
    return (n_samples - win) // hop + 1


def compute_logmel(clip: AudioClip, n_mels: int = N_MELS,
                   win_ms: float = WIN_MS, hop_ms: float = HOP_MS) -> FeatureMatrix:
    """Log-power mel spectrogram, clipped to [-80, 0] dB.

    0 dB is referenced to the on-bin power of a full-scale sine, so silence
    lands on the floor and a full-scale tone near the ceiling.
    """
    if clip.sample_rate != TARGET_SR:
        raise ValueError(f"unsupported rate: {clip.sample_rate} (expected {TARGET_SR})")
    if not win_ms > hop_ms > 0:
        raise ValueError("need win_ms > hop_ms > 0")

    win = int(round(clip.sample_rate * win_ms / 1000.0))
    hop = int(round(clip.sample_rate * hop_ms / 1000.0))
    n_frames = frame_count(clip.samples.size, win, hop)

    window = hann_window(win)
    n_fft = 1 << (win - 1).bit_length()  # next power of two >= win
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = clip.samples[idx] * window

    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    mel_power = power @ fb.T

    ref = (window.sum() / 2.0) ** 2  # on-bin power of a unit-amplitude sine
    db = 10.0 * np.log10(np.maximum(mel_power, np.finfo(np.float64).tiny) / ref)
    db = np.clip(db, DB_FLOOR, DB_CEIL)
    return FeatureMatrix(values=db.astype(np.float32))


def fit_global_norm(train_features: Iterable[FeatureMatrix]) -> GlobalNormStats:
    """Scalar mean/std over every value of the training matrices (population std)."""
    mats = [np.asarray(f.values, dtype=np.float64) for f in train_features]
    n_values = sum(m.size for m in mats)
    if n_values == 0:
        raise ValueError("no frames to fit normalization on")
    mean = sum(m.sum() for m in mats) / n_values
    # Two-pass: centered sum of squares avoids cancellation for near-constant data.
    var = sum(((m - mean) ** 2).sum() for m in mats) / n_values
    if var <= 0.0:
        raise ValueError("degenerate statistics: zero variance in training features")
    n_frames = sum(m.shape[0] for m in mats)
    return GlobalNormStats(mean=float(mean), std=float(np.sqrt(var)), n_frames_fitted=n_frames)


def apply_norm(f: FeatureMatrix, stats: GlobalNormStats) -> FeatureMatrix:
    """Elementwise (x - mean) / std. Output is unclipped and kept in float64."""
    values = (np.asarray(f.values, dtype=np.float64) - stats.mean) / stats.std
    return FeatureMatrix(values=values, db_floor=f.db_floor, db_ceil=f.db_ceil)


def extract_windows(f: FeatureMatrix, win_frames: int = MODEL_WINDOW_FRAMES,
                    stride: int | None = None) -> np.ndarray:
    """Slice [n_frames x 96] features into model inputs [n_windows x 96 x win_frames].

    Tail frames that do not fill a window are dropped.
    """
    if stride is None:
        stride = win_frames
    if stride <= 0:
        raise ValueError("stride must be positive")
    values = np.asarray(f.values)
    n = values.shape[0]
    if n < win_frames:
        return np.empty((0, N_MELS, win_frames), dtype=values.dtype)
    starts = range(0, n - win_frames + 1, stride)
    return np.stack([values[s:s + win_frames].T for s in starts])


def read_wav(path: str | Path) -> AudioClip:
    """Read a PCM16 little-endian mono WAV file."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError("expected 16-bit PCM WAV")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples=samples, sample_rate=rate)


def save_features(f: FeatureMatrix, path: str | Path) -> None:
    """Write the feature cache format: "MPIB", u32 version, u32 rows, u32 cols, f32 data."""
    values = np.ascontiguousarray(f.values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, rows, cols))
        fh.write(values.tobytes())


def load_features(path: str | Path) -> FeatureMatrix:
    """Read a feature cache file written by save_features."""
    with open(path, "rb") as fh:
        header = fh.read(_CACHE_HEADER.size)
        if len(header) < _CACHE_HEADER.size:
            raise ValueError(f"truncated feature cache: {path}")
        magic, version, rows, cols = _CACHE_HEADER.unpack(header)
        if magic != CACHE_MAGIC:
            raise ValueError(f"bad magic {magic!r} in feature cache: {path}")
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported feature cache version {version}")
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"truncated feature cache payload: {path}")
    return FeatureMatrix(values=data.reshape(rows, cols).copy())
