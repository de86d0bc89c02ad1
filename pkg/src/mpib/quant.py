"""Symmetric per-channel b-bit quantization, 4x8 block packing, INT6 emulation.

Codes live in [-2^(b-1), 2^(b-1)-1], scales are positive per-output-channel
reals (or a single per-tensor scale for activations). Gradients use the
saturated straight-through estimator: pass-through inside the clip range,
zero outside.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 5, 6, 8, 16)
DEFAULT_CALIBRATION_INTERVAL = 100
SCALE_FLOOR = float(np.finfo(np.float32).tiny)  # fallback for all-zero channels

BLOCK_ROWS = 4
BLOCK_COLS = 8
BLOCK_BYTES = BLOCK_ROWS * BLOCK_COLS // 2

PACKED_MAGIC = b"MPQ4"
_PACKED_HEADER = struct.Struct("<4sII")


def clip_range(bits: int) -> tuple[int, int]:
    """Signed symmetric integer range for b bits: [-2^(b-1), 2^(b-1)-1]."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (np.round would round halves to even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantScheme:
    """Bit width plus per-channel scales; bits=16 means passthrough (no quantization)."""

    bits: int
    scales: np.ndarray
    calibration_interval: int = DEFAULT_CALIBRATION_INTERVAL

    def __post_init__(self):
        if self.bits not in range(2, 9) and self.bits != 16:
            raise ValueError(f"bits must be in 2..8 or 16, got {self.bits}")
        scales = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if not np.all(scales > 0):
            raise ValueError("scales must be strictly positive")
        self.scales = scales

    @property
    def clip_lo(self) -> int:
        return clip_range(self.bits)[0]

    @property
    def clip_hi(self) -> int:
        return clip_range(self.bits)[1]

    def broadcast_scales(self, shape: tuple[int, ...]) -> np.ndarray:
        """Scales shaped to broadcast over an array: per-tensor, or per leading axis."""
        if self.scales.size == 1:
            return self.scales.reshape(())
        if len(shape) >= 1 and self.scales.size == shape[0]:
            return self.scales.reshape((-1,) + (1,) * (len(shape) - 1))
        raise ValueError(f"scales of size {self.scales.size} do not fit shape {shape}")


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    scheme: QuantScheme

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequant(self) -> np.ndarray:
        if self.scheme.bits == 16:
            return np.asarray(self.codes, dtype=np.float64)
        s = self.scheme.broadcast_scales(self.codes.shape)
        return self.codes.astype(np.float64) * s


@dataclass(frozen=True)
class PackedWeightBlock:
    """4x8 tile of signed 4-bit codes in 16 bytes; low nibble = even column."""

    payload: bytes
    rows: int = BLOCK_ROWS
    cols: int = BLOCK_COLS

    def __post_init__(self):
        if len(self.payload) != BLOCK_BYTES:
            raise ValueError(f"block payload must be {BLOCK_BYTES} bytes")


def calibrate_scales(weights: np.ndarray, bits: int,
                     calibration_interval: int = DEFAULT_CALIBRATION_INTERVAL) -> QuantScheme:
    """Per-output-channel symmetric scales: scale_c = max|w[c,:]| / clip_hi."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ValueError("empty weights")
    if bits not in range(2, 9):
        raise ValueError(f"bits must be in 2..8 for calibration, got {bits}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    if weights.ndim == 1:
        weights = weights[None, :]
    _, hi = clip_range(bits)
    peaks = np.abs(weights).max(axis=1)
    scales = np.where(peaks > 0, peaks / hi, SCALE_FLOOR)
    return QuantScheme(bits=bits, scales=scales, calibration_interval=calibration_interval)


def per_tensor_scheme(values: np.ndarray, bits: int) -> QuantScheme:
    """Single-scale scheme from the absolute peak of an activation tensor."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty weights")
    _, hi = clip_range(bits)
    peak = np.abs(values).max()
    scale = peak / hi if peak > 0 else SCALE_FLOOR
    return QuantScheme(bits=bits, scales=np.array([scale]))


def quantize_ste(w: np.ndarray, scheme: QuantScheme) -> tuple[QuantizedTensor, np.ndarray]:
    """codes = clip(round(w/s), lo, hi); dequant = codes * s. bits=16 passes through."""
    w = np.asarray(w, dtype=np.float64)
    if scheme.bits == 16:
        return QuantizedTensor(codes=w.copy(), scheme=scheme), w.copy()
    s = scheme.broadcast_scales(w.shape)
    codes = np.clip(round_half_away(w / s), scheme.clip_lo, scheme.clip_hi)
    codes = codes.astype(np.int32)
    return QuantizedTensor(codes=codes, scheme=scheme), codes * s


def ste_backward(upstream_grad: np.ndarray, w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Saturated STE: gradient passes where w/s is inside [clip_lo, clip_hi], else 0."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if upstream_grad.shape != w.shape:
        raise ValueError("shape error: gradient and weights differ")
    if scheme.bits == 16:
        return upstream_grad.copy()
    s = scheme.broadcast_scales(w.shape)
    v = w / s
    mask = (v >= scheme.clip_lo) & (v <= scheme.clip_hi)
    return upstream_grad * mask


def pad_to_blocks(codes: np.ndarray) -> np.ndarray:
    """Zero-pad an [out x in] code matrix to multiples of 4 rows and 8 columns."""
    out_dim, in_dim = codes.shape
    pad_r = (-out_dim) % BLOCK_ROWS
    pad_c = (-in_dim) % BLOCK_COLS
    if pad_r or pad_c:
        codes = np.pad(codes, ((0, pad_r), (0, pad_c)))
    return codes


def pack_int4(codes: np.ndarray) -> list[PackedWeightBlock]:
    """Pack signed 4-bit codes into 4x8 blocks, row-blocks outer, col-blocks inner."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("expected a 2-D code matrix")
    lo, hi = clip_range(4)
    if codes.min(initial=0) < lo or codes.max(initial=0) > hi:
        raise ValueError(f"code overflow: values outside [{lo}, {hi}]")
    padded = pad_to_blocks(codes.astype(np.int64))

    blocks = []
    for rb in range(padded.shape[0] // BLOCK_ROWS):
        for cb in range(padded.shape[1] // BLOCK_COLS):
            tile = padded[rb * BLOCK_ROWS:(rb + 1) * BLOCK_ROWS,
                          cb * BLOCK_COLS:(cb + 1) * BLOCK_COLS]
            nibbles = tile.reshape(-1) & 0xF  # two's complement in 4 bits
            payload = (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)
            blocks.append(PackedWeightBlock(payload=payload.tobytes()))
    return blocks


def unpack_int4(blocks: Sequence[PackedWeightBlock], out_dim: int, in_dim: int) -> np.ndarray:
    """Inverse of pack_int4, trimmed back to [out_dim x in_dim]."""
    rows_p = -(-out_dim // BLOCK_ROWS) * BLOCK_ROWS
    cols_p = -(-in_dim // BLOCK_COLS) * BLOCK_COLS
    n_expected = (rows_p // BLOCK_ROWS) * (cols_p // BLOCK_COLS)
    if len(blocks) != n_expected:
        raise ValueError(f"shape error: expected {n_expected} blocks, got {len(blocks)}")
    full = np.zeros((rows_p, cols_p), dtype=np.int8)
    it = iter(blocks)
    for rb in range(rows_p // BLOCK_ROWS):
        for cb in range(cols_p // BLOCK_COLS):
            raw = np.frombuffer(next(it).payload, dtype=np.uint8)
            nibbles = np.empty(BLOCK_ROWS * BLOCK_COLS, dtype=np.uint8)
            nibbles[0::2] = raw & 0xF
            nibbles[1::2] = raw >> 4
            signed = nibbles.astype(np.int8)
            signed[signed >= 8] -= 16
            full[rb * BLOCK_ROWS:(rb + 1) * BLOCK_ROWS,
                 cb * BLOCK_COLS:(cb + 1) * BLOCK_COLS] = signed.reshape(BLOCK_ROWS, BLOCK_COLS)
    return full[:out_dim, :in_dim]


def packed_payload_bytes(out_dim: int, in_dim: int) -> int:
    """Total packed size: ceil(out/4) * ceil(in/8) * 16 bytes."""
    return -(-out_dim // BLOCK_ROWS) * -(-in_dim // BLOCK_COLS) * BLOCK_BYTES


def emulate_int6(codes8: np.ndarray) -> np.ndarray:
    """Constrain INT8 codes to the INT6 range [-32, 31]; containers stay 8-bit."""
    codes8 = np.asarray(codes8)
    return np.clip(codes8, -32, 31).astype(np.int8)


def save_packed(path: str | Path, codes: np.ndarray, scales: np.ndarray) -> None:
    """Packed-weight file: "MPQ4" + u32 out + u32 in + blocks + f32 per-channel scales."""
    codes = np.asarray(codes)
    out_dim, in_dim = codes.shape
    scales = np.asarray(scales, dtype="<f4").ravel()
    if scales.size != out_dim:
        raise ValueError("shape error: need one scale per output channel")
    with open(path, "wb") as fh:
        fh.write(_PACKED_HEADER.pack(PACKED_MAGIC, out_dim, in_dim))
        for block in pack_int4(codes):
            fh.write(block.payload)
        fh.write(scales.tobytes())


def load_packed(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an MPQ4 file; returns (codes [out x in], per-channel scales)."""
    with open(path, "rb") as fh:
        header = fh.read(_PACKED_HEADER.size)
        magic, out_dim, in_dim = _PACKED_HEADER.unpack(header)
        if magic != PACKED_MAGIC:
            raise ValueError(f"bad magic {magic!r} in packed-weight file: {path}")
        n_bytes = packed_payload_bytes(out_dim, in_dim)
        raw = fh.read(n_bytes)
        if len(raw) != n_bytes:
            raise ValueError(f"truncated packed-weight file: {path}")
        blocks = [PackedWeightBlock(payload=raw[i:i + BLOCK_BYTES])
                  for i in range(0, n_bytes, BLOCK_BYTES)]
        scales = np.frombuffer(fh.read(out_dim * 4), dtype="<f4").astype(np.float64)
    if scales.size != out_dim:
        raise ValueError(f"truncated packed-weight file: {path}")
    return unpack_int4(blocks, out_dim, in_dim), scales


class RunningMaxCalibrator:
    """Tracks |w| peaks per channel and refreshes scales every calibration_interval batches.

    Between refreshes the scheme is frozen, matching the deployment contract
    where scales update on a fixed cadence rather than per step.
    """

    def __init__(self, bits: int, interval: int = DEFAULT_CALIBRATION_INTERVAL,
                 per_tensor: bool = False):
        self.bits = bits
        self.interval = interval
        self.per_tensor = per_tensor
        self.steps = 0
        self._running_peak: np.ndarray | None = None
        self.scheme: QuantScheme | None = None

    def observe(self, values: np.ndarray) -> QuantScheme:
        """Fold one batch of values into the running max; maybe refresh the scheme."""
        values = np.asarray(values, dtype=np.float64)
        peak = np.abs(values).max() if self.per_tensor else np.abs(values).max(axis=1)
        peak = np.atleast_1d(peak)
        if self._running_peak is None:
            self._running_peak = peak.copy()
        else:
            np.maximum(self._running_peak, peak, out=self._running_peak)

        if self.scheme is None or self.steps % self.interval == 0:
            _, hi = clip_range(self.bits)
            scales = np.where(self._running_peak > 0, self._running_peak / hi, SCALE_FLOOR)
            self.scheme = QuantScheme(bits=self.bits, scales=scales,
                                      calibration_interval=self.interval)
            self._running_peak = peak.copy()  # window restarts at each refresh
        self.steps += 1
        return self.scheme
