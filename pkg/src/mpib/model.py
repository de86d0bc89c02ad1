"""Dual-head network: shared conv encoder, float trait head, quantized state head.

The trait head keeps full float precision (64 dims); the state head is squeezed
through b-bit codes (32 dims, INT4 by default). Also here: the agitation
regressor, the reconstruction decoders used during (pre)training, onboarding
and drift logic, and checkpoint/profile serialization.
"""

from __future__ import annotations

import io
import json
import struct
import time
import warnings
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import quant
from .features import N_MELS, MODEL_WINDOW_FRAMES
from .kernels import gemm_int8_acc

INPUT_BANDS = N_MELS
INPUT_FRAMES = MODEL_WINDOW_FRAMES
INPUT_SIZE = INPUT_BANDS * INPUT_FRAMES  # 6,144 values per window

CHECKPOINT_VERSION = 1
PROFILE_BYTES = 64 * 2 + 8  # fp16 centroid + i64 timestamp

FORWARD_MODES = ("fp16", "int8_ptq", "int8_qat")


# ---------------------------------------------------------------------------
# config and small domain types


@dataclass
class ModelConfig:
    state_bits: int = 4
    state_dim: int = 32
    trait_dim: int = 64
    embedding_dim: int = 128
    conv_widths: tuple = (8, 16, 32, 64)
    encoder_dropout: float = 0.1
    trait_dropout: float = 0.1
    state_dropout: float = 0.3
    calibration_interval: int = quant.DEFAULT_CALIBRATION_INTERVAL
    personalized: bool = True  # agitation MLP also reads the stored trait profile
    agit_hidden: tuple = (216, 108)
    seed: int = 0

    def __post_init__(self):
        if self.state_bits not in quant.SUPPORTED_BITS:
            raise ValueError(f"unsupported precision: {self.state_bits} bits")


@dataclass(frozen=True)
class StateEmbedding:
    """b-bit state codes plus their per-tensor scale; bits=16 stores raw floats."""

    codes: np.ndarray
    scale: float
    bits: int = 4

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if self.bits != 16:
            lo, hi = quant.clip_range(self.bits)
            if codes.min(initial=0) < lo or codes.max(initial=0) > hi:
                raise ValueError(f"codes outside [{lo}, {hi}] for {self.bits}-bit embedding")
        object.__setattr__(self, "codes", codes)

    def dequant(self) -> np.ndarray:
        if self.bits == 16:
            return np.asarray(self.codes, dtype=np.float64)
        return self.codes.astype(np.float64) * self.scale

    @property
    def capacity_bits(self) -> int:
        return self.codes.size * self.bits


@dataclass(frozen=True)
class TraitProfile:
    """Median of exactly three onboarding embeddings, stored once per speaker."""

    centroid: np.ndarray
    created_at: float
    source_count: int = 3


# ---------------------------------------------------------------------------
# quantization bridges (torch side; numeric contract identical to quant.py)


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class _FakeQuantSTE(torch.autograd.Function):
    """Quantize-dequantize with a saturated straight-through gradient."""

    @staticmethod
    def forward(ctx, x, scale, lo, hi):
        v = x / scale
        ctx.save_for_backward((v >= lo) & (v <= hi))
        return torch.clamp(_round_half_away(v), lo, hi) * scale

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved_tensors
        return grad * mask, None, None, None


def fake_quant(x: torch.Tensor, scale: torch.Tensor, bits: int) -> torch.Tensor:
    """b-bit quantize-dequantize; identity when bits=16. Scales carry no gradient."""
    if bits == 16:
        return x
    lo, hi = quant.clip_range(bits)
    return _FakeQuantSTE.apply(x, scale.detach(), float(lo), float(hi))


def seeded_dropout(x: torch.Tensor, p: float, on: bool,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout with an explicit generator so MC passes are replayable."""
    if not on or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p)
    return x * keep / (1.0 - p)


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> None:
    fan_in = layer.weight.shape[1]
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


def _init_conv(layer: nn.Conv2d, generator: torch.Generator) -> None:
    fan_in = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
    # He-scaled: each conv feeds a ReLU with no normalization behind it, so the
    # weight variance must be 2/fan_in or eight stacked convs attenuate the
    # signal below its own biases (leaving features input-independent)
    bound = np.sqrt(6.0 / fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                                generator=generator)


class _LayerQuant:
    """Per-layer INT8 observer: running activation peak + per-channel weight scales."""

    def __init__(self, interval: int):
        self.interval = interval
        self.act_scale: float | None = None
        self.w_scales: np.ndarray | None = None
        self._act_peak = 0.0
        self._steps = 0

    def observe(self, x: torch.Tensor, w: torch.Tensor) -> None:
        self._act_peak = max(self._act_peak, float(x.detach().abs().max()))
        due = self.act_scale is None or self._steps % self.interval == 0
        if due:
            hi = quant.clip_range(8)[1]
            self.act_scale = max(self._act_peak / hi, quant.SCALE_FLOOR)
            w2 = w.detach().reshape(w.shape[0], -1)
            peaks = w2.abs().amax(dim=1).cpu().numpy()
            self.w_scales = np.maximum(peaks / hi, quant.SCALE_FLOOR)
            self._act_peak = 0.0
        self._steps += 1


# ---------------------------------------------------------------------------
# network pieces


class ConvBlock(nn.Module):
    """Depthwise 3x3 stride-2 + pointwise 1x1, ReLU after each."""

    def __init__(self, c_in: int, c_out: int, interval: int, generator: torch.Generator):
        super().__init__()
        self.dw = nn.Conv2d(c_in, c_in, 3, stride=2, padding=1, groups=c_in)
        self.pw = nn.Conv2d(c_in, c_out, 1)
        _init_conv(self.dw, generator)
        _init_conv(self.pw, generator)
        self.q_dw = _LayerQuant(interval)
        self.q_pw = _LayerQuant(interval)

    def forward(self, x: torch.Tensor, qat: bool = False, observe: bool = False) -> torch.Tensor:
        if qat:
            x = self._qat_conv(x, self.dw, self.q_dw, observe)
            x = F.relu(x)
            x = self._qat_conv(x, self.pw, self.q_pw, observe)
            return F.relu(x)
        if observe:
            self.q_dw.observe(x, self.dw.weight)
        x = F.relu(self.dw(x))
        if observe:
            self.q_pw.observe(x, self.pw.weight)
        return F.relu(self.pw(x))

    def _qat_conv(self, x, conv, q, observe):
        if observe or q.act_scale is None:
            q.observe(x, conv.weight)
        dt, dev = x.dtype, x.device
        xq = fake_quant(x, torch.tensor(q.act_scale, dtype=dt, device=dev), 8)
        w_scales = torch.as_tensor(q.w_scales, dtype=dt, device=dev).view(-1, 1, 1, 1)
        wq = fake_quant(conv.weight, w_scales, 8)
        return F.conv2d(xq, wq, conv.bias, stride=conv.stride,
                        padding=conv.padding, groups=conv.groups)


class Encoder(nn.Module):
    """Four depthwise-separable stride-2 blocks, time pooling, linear embedding."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        widths = config.conv_widths
        chans = (1,) + tuple(widths)
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], config.calibration_interval, generator)
            for i in range(len(widths)))
        bands_out = INPUT_BANDS // (2 ** len(widths))
        self.embed = nn.Linear(widths[-1] * bands_out, config.embedding_dim)
        _init_linear(self.embed, generator)
        self.q_embed = _LayerQuant(config.calibration_interval)
        self.dropout_p = config.encoder_dropout

    def forward(self, x: torch.Tensor, mode: str = "fp16", dropout_on: bool = False,
                generator: torch.Generator | None = None, observe: bool = False) -> torch.Tensor:
        if mode not in FORWARD_MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if x.ndim == 3:
            x = x.unsqueeze(1)  # [B, 1, bands, frames]
        if float(x.detach().abs().max()) > 20.0:
            warnings.warn("input range exceeds 20 sigma; features look unnormalized")
        qat = mode == "int8_qat"
        for block in self.blocks:
            x = block(x, qat=qat, observe=observe)
        x = x.mean(dim=-1)  # pool over time axis
        x = x.flatten(1)
        if qat:
            q = self.q_embed
            if observe or q.act_scale is None:
                q.observe(x, self.embed.weight)
            dt, dev = x.dtype, x.device
            xq = fake_quant(x, torch.tensor(q.act_scale, dtype=dt, device=dev), 8)
            wq = fake_quant(self.embed.weight,
                            torch.as_tensor(q.w_scales, dtype=dt, device=dev).view(-1, 1), 8)
            h = F.linear(xq, wq, self.embed.bias)
        else:
            if observe:
                self.q_embed.observe(x, self.embed.weight)
            h = self.embed(x)
        return seeded_dropout(h, self.dropout_p, dropout_on, generator)


class TraitHead(nn.Module):
    """Linear(128 -> 64) + non-affine LayerNorm + Dropout(0.1). 8,256 parameters."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.linear = nn.Linear(config.embedding_dim, config.trait_dim)
        _init_linear(self.linear, generator)
        self.dropout_p = config.trait_dropout
        self.dim = config.trait_dim

    def forward(self, h: torch.Tensor, dropout_on: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        # small eps so unit variance holds even for low-variance pre-norm inputs
        z = F.layer_norm(self.linear(h), (self.dim,), eps=1e-8)
        return seeded_dropout(z, self.dropout_p, dropout_on, generator)


class StateHead(nn.Module):
    """Linear(128 -> 32) with b-bit weights, INT8-requantized LayerNorm, Dropout(0.3),
    then b-bit output codes. 4,128 parameters; scales refresh on a fixed cadence.

    Calibration stores activation *peaks*; per-bits scales derive as peak/clip_hi,
    so a runtime precision bump (e.g. 4 -> 6 bits) refines the grid over the same
    range instead of reusing a stale coarse scale.
    """

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.linear = nn.Linear(config.embedding_dim, config.state_dim)
        _init_linear(self.linear, generator)
        self.bits = config.state_bits
        self.dim = config.state_dim
        self.dropout_p = config.state_dropout
        self.interval = config.calibration_interval
        self._steps = 0
        self._qln_run = 0.0
        self._out_run = 0.0
        self.w_scales: np.ndarray | None = None
        self.qln_peak: float = 0.0
        self.out_peak: float = 0.0

    @property
    def qln_scale(self) -> float:
        return max(self.qln_peak / quant.clip_range(8)[1], quant.SCALE_FLOOR)

    def out_scale(self, bits: int | None = None) -> float:
        bits = self.bits if bits is None else bits
        return max(self.out_peak / quant.clip_range(bits)[1], quant.SCALE_FLOOR)

    def _maybe_calibrate(self, training: bool) -> None:
        """Weight and activation scales refresh together on the batch cadence."""
        due = self.w_scales is None or (training and self._steps % self.interval == 0)
        if due:
            hi = quant.clip_range(self.bits)[1] if self.bits != 16 else 1
            peaks = self.linear.weight.detach().abs().amax(dim=1).cpu().numpy()
            self.w_scales = np.maximum(peaks / hi, quant.SCALE_FLOOR)
            if self._qln_run > 0:
                self.qln_peak = self._qln_run
            if self._out_run > 0:
                self.out_peak = self._out_run
            self._qln_run = 0.0
            self._out_run = 0.0
        if training:
            self._steps += 1

    def forward(self, h: torch.Tensor, bits: int | None = None, dropout_on: bool = False,
                generator: torch.Generator | None = None, training: bool = False):
        """Returns (pre_quant, dequant, codes, scale).

        pre_quant: float activations entering the final quantizer (uncertainty
        statistics read these); dequant: straight-through quantized output the
        losses consume; codes/scale: the integer embedding itself. `bits`
        overrides the output precision only; weights stay at the head's width.
        """
        bits = self.bits if bits is None else bits
        dt, dev = h.dtype, h.device

        if self.bits == 16 or bits == 16:
            y = F.layer_norm(self.linear(h), (self.dim,))
            pre = seeded_dropout(y, self.dropout_p, dropout_on, generator)
            return pre, pre, pre.detach().cpu().numpy(), 1.0

        self._maybe_calibrate(training)
        w_scales = torch.as_tensor(self.w_scales, dtype=dt, device=dev).view(-1, 1)
        wq = fake_quant(self.linear.weight, w_scales, self.bits)
        y = F.layer_norm(F.linear(h, wq, self.linear.bias), (self.dim,))

        self._qln_run = max(self._qln_run, float(y.detach().abs().max()))
        if self.qln_peak == 0.0:  # first batch ever: seed peaks immediately
            self.qln_peak = self._qln_run
        y = fake_quant(y, torch.tensor(self.qln_scale, dtype=dt, device=dev), 8)
        pre = seeded_dropout(y, self.dropout_p, dropout_on, generator)

        self._out_run = max(self._out_run, float(pre.detach().abs().max()))
        if self.out_peak == 0.0:
            self.out_peak = self._out_run
        scale = self.out_scale(bits)
        scale_t = torch.tensor(scale, dtype=dt, device=dev)
        deq = fake_quant(pre, scale_t, bits)
        lo, hi = quant.clip_range(bits)
        codes = torch.clamp(_round_half_away(pre.detach() / scale_t), lo, hi)
        return pre, deq, codes.cpu().numpy().astype(np.int32), scale

    def weight_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer weight codes and scales at the head's own precision."""
        self._maybe_calibrate(training=False)
        w = self.linear.weight.detach().cpu().numpy()
        scheme = quant.QuantScheme(bits=self.bits, scales=self.w_scales)
        qt, _ = quant.quantize_ste(w, scheme)
        return qt.codes, self.w_scales.copy()

    def reset_activation_peaks(self) -> None:
        """Forget activation calibration so the next batch reseeds it fresh
        (weight scales are kept); use when the activation regime changes,
        e.g. when dropout turns off for readout fine-tuning."""
        self._qln_run = self._out_run = 0.0
        self.qln_peak = self.out_peak = 0.0


class AgitationHead(nn.Module):
    """Small MLP from the dequantized state embedding (plus, by default, the
    stored trait profile) to a raw agitation value; callers clip to [0, 4]."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        in_dim = config.state_dim + (config.trait_dim if config.personalized else 0)
        dims = (in_dim,) + tuple(config.agit_hidden) + (1,)
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1])
                                    for i in range(len(dims) - 1))
        for layer in self.layers:
            _init_linear(layer, generator)
        with torch.no_grad():  # midpoint init: zero weights in -> score 2.0
            self.layers[-1].bias.fill_(2.0)
        self.personalized = config.personalized
        self.profile_dim = config.trait_dim

    def forward(self, z_s: torch.Tensor, profile: torch.Tensor | None = None) -> torch.Tensor:
        if self.personalized:
            if profile is None:
                profile = torch.zeros(z_s.shape[:-1] + (self.profile_dim,),
                                      dtype=z_s.dtype, device=z_s.device)
            z_s = torch.cat([z_s, profile], dim=-1)
        x = z_s
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x).squeeze(-1)


class ReconDecoder(nn.Module):
    """Single linear map from [z_t, z_s] back to the flattened input window."""

    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.linear = nn.Linear(config.trait_dim + config.state_dim, INPUT_SIZE)
        _init_linear(self.linear, generator)

    def forward(self, z_t: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
        return self.linear(torch.cat([z_t, z_s], dim=-1))


class MaskedPatchDecoder(nn.Module):
    """Two-layer MLP from the embedding back to the full window (pretraining only)."""

    def __init__(self, config: ModelConfig, generator: torch.Generator, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Linear(config.embedding_dim, hidden)
        self.fc2 = nn.Linear(hidden, INPUT_SIZE)
        _init_linear(self.fc1, generator)
        _init_linear(self.fc2, generator)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(h)))


class DualHeadModel(nn.Module):
    """Encoder + trait head + state head + agitation MLP + training-only decoders."""

    def __init__(self, config: ModelConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config or ModelConfig()
        generator = torch.Generator().manual_seed(self.config.seed)
        self.encoder = Encoder(self.config, generator)
        self.trait_head = TraitHead(self.config, generator)
        self.state_head = StateHead(self.config, generator)
        self.agitation_head = AgitationHead(self.config, generator)
        self.recon_decoder = ReconDecoder(self.config, generator)
        self.masked_decoder = MaskedPatchDecoder(self.config, generator)
        if dtype != torch.float32:
            self.to(dtype)

    # -- forward paths ------------------------------------------------------

    def forward_all(self, x: torch.Tensor, mode: str = "fp16", bits: int | None = None,
                    dropout_on: bool = False, generator: torch.Generator | None = None,
                    training: bool = False) -> dict:
        h = self.encoder(x, mode=mode, dropout_on=dropout_on, generator=generator,
                         observe=training and mode != "fp16")
        z_t = self.trait_head(h, dropout_on=dropout_on, generator=generator)
        pre, deq, codes, scale = self.state_head(
            h, bits=bits, dropout_on=dropout_on, generator=generator, training=training)
        return {"h": h, "z_t": z_t, "state_pre": pre, "z_s": deq,
                "codes": codes, "scale": scale}

    @torch.no_grad()
    def embed_windows(self, windows: np.ndarray, mode: str = "fp16",
                      bits: int | None = None, batch: int = 256) -> dict:
        """Inference over [N, 96, 64] windows; dropout off, frozen scales."""
        dt = next(self.parameters()).dtype
        outs = {"z_t": [], "z_s": [], "state_pre": [], "h": [], "codes": []}
        scale = 1.0
        for i in range(0, len(windows), batch):
            x = torch.as_tensor(np.asarray(windows[i:i + batch]), dtype=dt)
            r = self.forward_all(x, mode=mode, bits=bits)
            scale = r["scale"]
            for k in outs:
                outs[k].append(r[k].detach().cpu().numpy()
                               if isinstance(r[k], torch.Tensor) else r[k])
        return {**{k: np.concatenate(v) for k, v in outs.items()}, "scale": scale}

    def state_embedding(self, x: torch.Tensor, bits: int | None = None) -> StateEmbedding:
        """One window -> one StateEmbedding (deployment semantics, dropout off)."""
        with torch.no_grad():
            r = self.forward_all(x.reshape(1, INPUT_BANDS, INPUT_FRAMES), bits=bits)
        bits = self.config.state_bits if bits is None else bits
        if bits == 16:
            return StateEmbedding(codes=r["z_s"][0].detach().cpu().numpy(),
                                  scale=1.0, bits=16)
        return StateEmbedding(codes=r["codes"][0], scale=r["scale"], bits=bits)

    def predict_agitation(self, z_s, profile=None) -> float:
        """Agitation score in [0, 4] from a state embedding (fused vectors work too)."""
        if isinstance(z_s, StateEmbedding):
            z_s = z_s.dequant()
        dt = next(self.parameters()).dtype
        z = torch.as_tensor(np.asarray(z_s), dtype=dt).reshape(1, -1)
        prof = None
        if profile is not None:
            vec = profile.centroid if isinstance(profile, TraitProfile) else profile
            prof = torch.as_tensor(np.asarray(vec), dtype=dt).reshape(1, -1)
        with torch.no_grad():
            raw = self.agitation_head(z, prof)
        return float(np.clip(raw.item(), 0.0, 4.0))

    def predict_agitation_batch(self, z_s: np.ndarray,
                                profiles: np.ndarray | None = None) -> np.ndarray:
        dt = next(self.parameters()).dtype
        z = torch.as_tensor(z_s, dtype=dt)
        prof = None if profiles is None else torch.as_tensor(profiles, dtype=dt)
        with torch.no_grad():
            raw = self.agitation_head(z, prof)
        return np.clip(raw.cpu().numpy(), 0.0, 4.0)

    # -- size accounting ----------------------------------------------------

    def encoder_param_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters())

    def head_param_counts(self) -> dict:
        return {
            "trait_head": sum(p.numel() for p in self.trait_head.parameters()),
            "state_head": sum(p.numel() for p in self.state_head.parameters()),
            "agitation_mlp": sum(p.numel() for p in self.agitation_head.parameters()),
        }


# ---------------------------------------------------------------------------
# integer (PTQ) inference path: conv as im2col + INT8 GEMM


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """[B, C, H, W] -> [B, H'*W', C*k*k] patches plus the output spatial dims."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out = (h + 2 * pad - kernel) // stride + 1
    w_out = (w + 2 * pad - kernel) // stride + 1
    cols = np.empty((b, h_out * w_out, c * kernel * kernel), dtype=x.dtype)
    idx = 0
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[:, :, i * stride:i * stride + kernel, j * stride:j * stride + kernel]
            cols[:, idx, :] = patch.reshape(b, -1)
            idx += 1
    return cols, h_out, w_out


def _quantize_acts(x: np.ndarray, scale: float) -> np.ndarray:
    v = np.clip(np.sign(x) * np.floor(np.abs(x) / scale + 0.5), -128, 127)
    return v.astype(np.int8)


def _ptq_conv(x: np.ndarray, conv: nn.Conv2d, q: _LayerQuant) -> np.ndarray:
    """Integer conv: im2col + gemm_int8 accumulators, bias added in float."""
    if q.act_scale is None:
        raise ValueError("integer mode requires calibration; run calibrate_int8 first")
    w = conv.weight.detach().cpu().numpy()
    out_ch = w.shape[0]
    kernel, stride, pad = conv.kernel_size[0], conv.stride[0], conv.padding[0]
    groups = conv.groups
    hi = quant.clip_range(8)[1]
    w_codes = np.clip(np.sign(w) * np.floor(np.abs(w) / q.w_scales.reshape(-1, 1, 1, 1) + 0.5),
                      -hi - 1, hi).astype(np.int8).reshape(out_ch, -1)

    b = x.shape[0]
    if groups == 1:
        cols, h_out, w_out = _im2col(x, kernel, stride, pad)
        a_codes = _quantize_acts(cols.reshape(-1, cols.shape[-1]), q.act_scale)
        acc = gemm_int8_acc(a_codes, w_codes)
        out = q.act_scale * q.w_scales[None, :] * acc.astype(np.float64)
        out = out.reshape(b, h_out * w_out, out_ch).transpose(0, 2, 1)
    else:  # depthwise: one tiny GEMM per channel
        outs = []
        h_out = w_out = None
        for c in range(out_ch):
            cols, h_out, w_out = _im2col(x[:, c:c + 1], kernel, stride, pad)
            a_codes = _quantize_acts(cols.reshape(-1, kernel * kernel), q.act_scale)
            acc = gemm_int8_acc(a_codes, w_codes[c:c + 1])
            outs.append(q.act_scale * q.w_scales[c] * acc.astype(np.float64).reshape(b, -1))
        out = np.stack(outs, axis=1)
    out += conv.bias.detach().cpu().numpy().reshape(1, -1, 1)
    return out.reshape(b, out_ch, h_out, w_out)


def encoder_forward_ptq(model: DualHeadModel, windows: np.ndarray) -> np.ndarray:
    """Post-training-quantized encoder: all matmuls through the INT8 kernel."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if np.abs(x).max() > 20.0:
        warnings.warn("input range exceeds 20 sigma; features look unnormalized")
    for block in model.encoder.blocks:
        x = np.maximum(_ptq_conv(x, block.dw, block.q_dw), 0.0)
        x = np.maximum(_ptq_conv(x, block.pw, block.q_pw), 0.0)
    x = x.mean(axis=-1).reshape(x.shape[0], -1)

    q = model.encoder.q_embed
    if q.act_scale is None:
        raise ValueError("integer mode requires calibration; run calibrate_int8 first")
    w = model.encoder.embed.weight.detach().cpu().numpy()
    hi = quant.clip_range(8)[1]
    w_codes = np.clip(np.sign(w) * np.floor(np.abs(w) / q.w_scales[:, None] + 0.5),
                      -hi - 1, hi).astype(np.int8)
    acc = gemm_int8_acc(_quantize_acts(x, q.act_scale), w_codes)
    h = q.act_scale * q.w_scales[None, :] * acc.astype(np.float64)
    return h + model.encoder.embed.bias.detach().cpu().numpy()[None, :]


def state_head_forward_ptq(model: DualHeadModel, h: np.ndarray) -> tuple[np.ndarray, float]:
    """Integer state head: INT8 acts x b-bit weights via the int32-accumulator
    kernel, LayerNorm on the dequant-scaled accumulators, INT8 requantization,
    then the b-bit output quantizer. Dropout is inference-off here."""
    head = model.state_head
    if head.bits == 16:
        raise ValueError("integer path requires a quantized state head (bits <= 8)")
    codes_w, w_scales = head.weight_codes()
    act_scale = max(np.abs(h).max() / 127, quant.SCALE_FLOOR)
    a_codes = _quantize_acts(h, act_scale)
    acc = gemm_int8_acc(a_codes, codes_w.astype(np.int16))

    bias = model.state_head.linear.bias.detach().cpu().numpy()
    y = acc.astype(np.float64) * (act_scale * w_scales[None, :]) + bias[None, :]

    mean = y.mean(axis=1, keepdims=True)
    var = y.var(axis=1, keepdims=True)
    y = (y - mean) / np.sqrt(var + 1e-5)

    hi8 = quant.clip_range(8)[1]
    qln_scale = head.qln_scale if head.qln_peak > 0 else \
        max(np.abs(y).max() / hi8, quant.SCALE_FLOOR)
    y = np.clip(np.sign(y) * np.floor(np.abs(y) / qln_scale + 0.5), -hi8 - 1, hi8) * qln_scale

    bits = head.bits
    lo, hi = quant.clip_range(bits)
    out_scale = head.out_scale() if head.out_peak > 0 else \
        max(np.abs(y).max() / hi, quant.SCALE_FLOOR)
    codes = np.clip(np.sign(y) * np.floor(np.abs(y) / out_scale + 0.5), lo, hi)
    return codes.astype(np.int32), float(out_scale)


def calibrate_int8(model: DualHeadModel, windows: np.ndarray) -> None:
    """Record per-layer activation peaks and weight scales from calibration data."""
    dt = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(windows), dtype=dt)
    with torch.no_grad():
        model.encoder(x, mode="fp16", observe=True)


def encoder_forward(model: DualHeadModel, windows: np.ndarray,
                    mode: str = "fp16") -> np.ndarray:
    """Single inference entry point for all three precision modes.

    fp16 runs the float graph; int8_qat runs the torch fake-quant graph, whose
    values equal scale-multiplied integer accumulators by construction; int8_ptq
    runs actual im2col + INT8-kernel matmuls. Dropout is always off here.
    """
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "int8_ptq":
        return encoder_forward_ptq(model, windows)
    dt = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(windows), dtype=dt)
    with torch.no_grad():
        h = model.encoder(x, mode=mode)
    return h.cpu().numpy()


# ---------------------------------------------------------------------------
# masked-patch pretraining


def patch_mask(shape: tuple[int, int], patch: int, mask_ratio: float,
               generator: torch.Generator) -> torch.Tensor:
    """Boolean [bands, frames] mask covering round(mask_ratio * n_patches) patches."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"invalid ratio: {mask_ratio}")
    rows, cols = shape[0] // patch, shape[1] // patch
    n_patches = rows * cols
    n_masked = int(round(mask_ratio * n_patches))
    order = torch.randperm(n_patches, generator=generator)
    flat = torch.zeros(n_patches, dtype=torch.bool)
    flat[order[:n_masked]] = True
    grid = flat.reshape(rows, cols)
    return grid.repeat_interleave(patch, 0).repeat_interleave(patch, 1)


def tmae_pretrain_step(model: DualHeadModel, batch: torch.Tensor,
                       mask_ratio: float = 0.75, patch: int = 16,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Mask patches, encode the masked window, score MSE on masked regions only.

    Windows whose dims are not patch multiples are zero-padded for masking; the
    loss is still taken only over masked cells inside the original extent.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"invalid ratio: {mask_ratio}")
    generator = generator or torch.Generator().manual_seed(0)
    bands, frames = batch.shape[-2:]
    pad_b, pad_f = (-bands) % patch, (-frames) % patch
    padded = F.pad(batch, (0, pad_f, 0, pad_b)) if (pad_b or pad_f) else batch
    masks = torch.stack([patch_mask(padded.shape[-2:], patch, mask_ratio, generator)
                         for _ in range(batch.shape[0])])[:, :bands, :frames]
    masked = batch * (~masks).to(batch.dtype)
    h = model.encoder(masked)
    recon = model.masked_decoder(h).reshape(batch.shape)
    err = (recon - batch) ** 2
    return err[masks].mean()


# ---------------------------------------------------------------------------
# onboarding, drift, serialization


def onboard(embeddings: Sequence[np.ndarray], confidences: Sequence[float],
            delta: float, created_at: float | None = None) -> TraitProfile:
    """Coordinate-wise median of exactly 3 accepted onboarding embeddings."""
    if len(embeddings) != 3 or len(confidences) != 3:
        raise ValueError("onboarding requires exactly 3 recordings")
    flagged = [i for i, c in enumerate(confidences) if c > delta]
    if flagged:
        raise ValueError(f"recording flagged: indices {flagged} exceed confidence {delta}")
    stacked = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings])
    centroid = np.median(stacked, axis=0)
    return TraitProfile(centroid=centroid,
                        created_at=time.time() if created_at is None else created_at)


def check_drift(profile: TraitProfile, recent: np.ndarray, threshold: float = 0.3) -> str:
    """'reonboard' iff cosine distance strictly exceeds the threshold, else 'ok'."""
    a = np.asarray(profile.centroid, dtype=np.float64)
    b = np.asarray(recent, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined similarity: zero vector")
    distance = 1.0 - float(a @ b) / (na * nb)
    return "reonboard" if distance > threshold else "ok"


def save_profile(profile: TraitProfile, path: str | Path) -> None:
    """128-byte fp16 centroid + 8-byte little-endian timestamp (epoch seconds)."""
    centroid = np.asarray(profile.centroid, dtype="<f2")
    if centroid.size != 64:
        raise ValueError("profile centroid must have 64 coordinates")
    with open(path, "wb") as fh:
        fh.write(centroid.tobytes())
        fh.write(struct.pack("<q", int(profile.created_at)))


def load_profile(path: str | Path) -> TraitProfile:
    raw = Path(path).read_bytes()
    if len(raw) != PROFILE_BYTES:
        raise ValueError(f"profile file must be exactly {PROFILE_BYTES} bytes")
    centroid = np.frombuffer(raw[:128], dtype="<f2").astype(np.float64)
    (created_at,) = struct.unpack("<q", raw[128:])
    return TraitProfile(centroid=centroid, created_at=float(created_at))


def save_checkpoint(model: DualHeadModel, path: str | Path,
                    norm_stats: tuple[float, float] | None = None) -> None:
    """Zip container: JSON meta, float params as .npy blobs, packed INT4 head."""
    if model.config.state_bits != 16:
        model.state_head._maybe_calibrate(training=False)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {**asdict(model.config),
                   "conv_widths": list(model.config.conv_widths),
                   "agit_hidden": list(model.config.agit_hidden)},
        "norm_stats": list(norm_stats) if norm_stats else None,
        "state_scales": {
            "w_scales": None if model.state_head.w_scales is None
            else model.state_head.w_scales.tolist(),
            "qln_peak": model.state_head.qln_peak,
            "out_peak": model.state_head.out_peak,
        },
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for name, param in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, param.detach().cpu().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())
        if model.config.state_bits == 4:
            codes, scales = model.state_head.weight_codes()
            buf = io.BytesIO()
            buf.write(quant._PACKED_HEADER.pack(quant.PACKED_MAGIC, *codes.shape))
            for block in quant.pack_int4(codes):
                buf.write(block.payload)
            buf.write(np.asarray(scales, dtype="<f4").tobytes())
            zf.writestr("state_head.mpq4", buf.getvalue())


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> DualHeadModel:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = dict(meta["config"])
        cfg["conv_widths"] = tuple(cfg["conv_widths"])
        cfg["agit_hidden"] = tuple(cfg["agit_hidden"])
        model = DualHeadModel(ModelConfig(**cfg), dtype=dtype)
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                arr = np.load(io.BytesIO(zf.read(name)))
                state[name[len("params/"):-len(".npy")]] = torch.as_tensor(arr, dtype=dtype)
        model.load_state_dict(state)
        scales = meta.get("state_scales") or {}
        if scales.get("w_scales") is not None:
            model.state_head.w_scales = np.asarray(scales["w_scales"], dtype=np.float64)
        model.state_head.qln_peak = float(scales.get("qln_peak", 0.0))
        model.state_head.out_peak = float(scales.get("out_peak", 0.0))
        if "state_head.mpq4" in zf.namelist() and model.config.state_bits == 4:
            raw = zf.read("state_head.mpq4")
            header = quant._PACKED_HEADER
            _, out_dim, in_dim = header.unpack(raw[:header.size])
            n_bytes = quant.packed_payload_bytes(out_dim, in_dim)
            blocks = [quant.PackedWeightBlock(payload=raw[header.size + i:
                                                          header.size + i + quant.BLOCK_BYTES])
                      for i in range(0, n_bytes, quant.BLOCK_BYTES)]
            packed = quant.unpack_int4(blocks, out_dim, in_dim)
            rederived, _ = model.state_head.weight_codes()
            if not np.array_equal(packed, rederived):
                raise ValueError("packed state head does not match float weights")
    return model
