"""Integer matvec/matmul kernels over packed INT4 and plain INT8 operands.

Accumulation is 32-bit signed integer throughout; the float result is the
accumulator rescaled by the operand scales. A micro-benchmark harness times
the kernels and cross-checks their accumulator checksums against a naive
unpack-and-multiply oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .quant import (
    BLOCK_BYTES,
    BLOCK_COLS,
    BLOCK_ROWS,
    PackedWeightBlock,
    packed_payload_bytes,
)

INT32_LIMIT = 1 << 31


@dataclass(frozen=True)
class GemmSpec:
    """Shape and precision of one benchmarked product: [m x k] @ [k x n]."""

    m: int
    k: int
    n: int
    a_bits: int = 8
    b_bits: int = 4

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError("dims must be positive")
        max_a = 1 << (self.a_bits - 1)
        max_b = 1 << (self.b_bits - 1)
        if self.k * max_a * max_b >= INT32_LIMIT:
            raise ValueError("accumulator could overflow 32-bit range for this spec")


@dataclass(frozen=True)
class BenchResult:
    op_name: str
    iters: int
    ns_per_call: float
    checksum: int
    bytes_weights: int
    spec: GemmSpec


def decode_blocks(blocks: Sequence[PackedWeightBlock], out_dim: int, in_dim: int) -> np.ndarray:
    """Vectorized nibble decode of the packed layout into an [out x in] int8 matrix.

    This is the kernel-side decode; quant.unpack_int4 is the independent
    block-by-block route used as its oracle.
    """
    n_rb = -(-out_dim // BLOCK_ROWS)
    n_cb = -(-in_dim // BLOCK_COLS)
    if len(blocks) != n_rb * n_cb:
        raise ValueError(f"shape error: expected {n_rb * n_cb} blocks, got {len(blocks)}")
    raw = np.frombuffer(b"".join(b.payload for b in blocks), dtype=np.uint8)
    raw = raw.reshape(n_rb, n_cb, BLOCK_BYTES)
    nibbles = np.empty((n_rb, n_cb, BLOCK_ROWS * BLOCK_COLS), dtype=np.uint8)
    nibbles[..., 0::2] = raw & 0xF
    nibbles[..., 1::2] = raw >> 4
    codes = nibbles.astype(np.int8)
    codes[codes >= 8] -= 16
    codes = codes.reshape(n_rb, n_cb, BLOCK_ROWS, BLOCK_COLS)
    codes = codes.transpose(0, 2, 1, 3).reshape(n_rb * BLOCK_ROWS, n_cb * BLOCK_COLS)
    return codes[:out_dim, :in_dim]


def gemv_int4_acc(blocks: Sequence[PackedWeightBlock], out_dim: int,
                  x_codes: np.ndarray) -> np.ndarray:
    """Integer part of the packed matvec: 32-bit accumulators, one per output row."""
    x_codes = np.asarray(x_codes)
    in_dim = x_codes.size
    codes = decode_blocks(blocks, out_dim, in_dim)
    return codes.astype(np.int32) @ x_codes.astype(np.int32)


def gemv_int4_packed(blocks: Sequence[PackedWeightBlock], scales: np.ndarray,
                     x_codes: np.ndarray, x_scale: float) -> np.ndarray:
    """out[c] = scales[c] * x_scale * sum_j codes[c, j] * x[j], i32 accumulation."""
    scales = np.asarray(scales, dtype=np.float64)
    x_codes = np.asarray(x_codes)
    if x_codes.ndim != 1:
        raise ValueError("shape error: x must be a vector")
    if x_codes.min(initial=0) < -128 or x_codes.max(initial=0) > 127:
        raise ValueError("shape error: activation codes outside INT8 range")
    acc = gemv_int4_acc(blocks, scales.size, x_codes)
    return scales * float(x_scale) * acc.astype(np.float64)


def gemm_int8_acc(a_codes: np.ndarray, b_codes: np.ndarray) -> np.ndarray:
    """Integer part of the INT8 product: acc[i, c] = sum_k a[i, k] * b[c, k]."""
    a_codes = np.asarray(a_codes)
    b_codes = np.asarray(b_codes)
    if a_codes.ndim != 2 or b_codes.ndim != 2 or a_codes.shape[1] != b_codes.shape[1]:
        raise ValueError("shape error: need [m x k] activations and [n x k] weights")
    return a_codes.astype(np.int32) @ b_codes.astype(np.int32).T


def gemm_int8(a_codes: np.ndarray, b_codes: np.ndarray,
              a_scale: float, b_scales: np.ndarray) -> np.ndarray:
    """out[i, c] = a_scale * b_scales[c] * sum_k a[i, k] * b[c, k]."""
    b_scales = np.asarray(b_scales, dtype=np.float64).ravel()
    acc = gemm_int8_acc(a_codes, b_codes)
    if b_scales.size not in (1, acc.shape[1]):
        raise ValueError("shape error: need one weight scale per output channel")
    return float(a_scale) * b_scales[None, :] * acc.astype(np.float64)


def weight_bytes(spec: GemmSpec) -> int:
    """Bytes the weight operand occupies at its stated precision."""
    if spec.b_bits == 4:
        return packed_payload_bytes(spec.n, spec.k)
    if spec.b_bits == 8:
        return spec.n * spec.k
    if spec.b_bits == 16:
        return 2 * spec.n * spec.k
    raise ValueError(f"no byte accounting for {spec.b_bits}-bit weights")


def _bench_operands(spec: GemmSpec, seed: int):
    from .quant import pack_int4  # local import keeps module load light

    rng = np.random.default_rng(seed)
    a = rng.integers(-100, 101, size=(spec.m, spec.k)).astype(np.int8)
    if spec.b_bits == 4:
        codes = rng.integers(-8, 8, size=(spec.n, spec.k))
        return a, pack_int4(codes), codes
    lo = -(1 << (spec.b_bits - 1))
    hi = (1 << (spec.b_bits - 1)) - 1
    codes = rng.integers(lo, hi + 1, size=(spec.n, spec.k))
    return a, codes.astype(np.int16), codes


def bench_kernel(spec: GemmSpec, iters: int = 50, seed: int = 0) -> BenchResult:
    """Median wall-clock ns per call, plus the accumulator checksum.

    The checksum is the plain sum of the 32-bit accumulators, so any decode or
    accumulation slip shows up as a checksum mismatch against the oracle route.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a, weights, _ = _bench_operands(spec, seed)

    if spec.b_bits == 4:
        def call():
            return np.stack([gemv_int4_acc(weights, spec.n, a[i]) for i in range(spec.m)])
        op_name = "gemv_int4_packed" if spec.m == 1 else "gemm_int4_packed"
    elif spec.b_bits == 16:
        w16 = weights.astype(np.float16)

        def call():
            return a.astype(np.float32) @ w16.astype(np.float32).T
        op_name = "gemv_fp16" if spec.m == 1 else "gemm_fp16"
    else:
        def call():
            return gemm_int8_acc(a, weights)
        op_name = "gemv_int8" if spec.m == 1 else "gemm_int8"

    timings = []
    result = None
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        result = call()
        timings.append(time.perf_counter_ns() - t0)

    checksum = int(np.asarray(result, dtype=np.float64).sum())
    return BenchResult(op_name=op_name, iters=iters,
                       ns_per_call=float(np.median(timings)),
                       checksum=checksum, bytes_weights=weight_bytes(spec), spec=spec)


def bench_checksum_oracle(spec: GemmSpec, seed: int = 0) -> int:
    """Checksum by the independent route: unpack (if packed), then plain matmul."""
    from .quant import unpack_int4

    a, weights, codes = _bench_operands(spec, seed)
    if spec.b_bits == 4:
        unpacked = unpack_int4(weights, spec.n, spec.k)
        acc = a.astype(np.int64) @ unpacked.astype(np.int64).T
    elif spec.b_bits == 16:
        acc = a.astype(np.float32) @ codes.astype(np.float16).astype(np.float32).T
    else:
        acc = a.astype(np.int64) @ codes.astype(np.int64).T
    return int(np.asarray(acc, dtype=np.float64).sum())
