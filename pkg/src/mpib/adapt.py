"""Runtime adaptation: uncertainty-gated precision switching and multi-scale
temporal fusion.

The precision gate probes a window once with Monte-Carlo dropout, normalizes
the uncertainty against a running calibration, and picks the state-head output
width for every sub-window it contains (binary 4/6-bit decision; fractional
widths are not executable). Fusion combines per-scale embeddings: the slow
trait path averages, the fast state path attends over the scale tokens.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.special
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import DualHeadModel, _init_linear

RUNNING_WINDOW = 500          # gate calibration: windows remembered for mean/std
UC_STATISTICS = ("state_pre", "agitation")


@dataclass(frozen=True)
class DpsConfig:
    b_base: int = 4
    delta_b: int = 2
    passes: int = 10
    gate_threshold: float = 0.5
    window_s: float = 5.0
    subwindow_ms: float = 100.0

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("insufficient passes: need >= 2")
        if self.b_base + self.delta_b > 8:
            raise ValueError("triggered width exceeds 8 bits")

    @property
    def subwindows_per_window(self) -> int:
        return int(round(self.window_s * 1000.0 / self.subwindow_ms))


@dataclass(frozen=True)
class UncertaintyCache:
    """One memoized uncertainty probe, shared by a window's sub-windows."""

    window_id: int
    uc_value: float
    computed_at: float


@dataclass(frozen=True)
class ScaleWindows:
    """The three analysis scales and their pinned overlap fractions."""

    scales_s: tuple = (0.5, 2.0, 10.0)
    overlaps: tuple = (0.50, 0.25, 0.10)

    def __post_init__(self):
        if len(self.scales_s) != len(self.overlaps):
            raise ValueError("scales and overlaps must pair up")
        if any(not (0.0 <= v < 1.0) for v in self.overlaps):
            raise ValueError("overlap must be in [0, 1)")


# ---------------------------------------------------------------------------
# uncertainty probe


def estimate_uncertainty(model: DualHeadModel, window: np.ndarray | torch.Tensor,
                         passes: int = 10, seed: int = 0,
                         statistic: str = "state_pre",
                         seeds: list | None = None) -> float:
    """Monte-Carlo dropout disagreement for one window.

    Runs `passes` stochastic forwards and returns the mean across-pass variance
    of the state head's linear pre-activations — read before its normalization
    and quantization pipeline, whose unit-variance output would otherwise hide
    input-scale effects (and whose own dropout would drown the upstream
    signal). statistic="agitation" uses the raw score's variance instead.
    Deterministic given the seed; probing never touches calibration state.
    """
    if seeds is None:
        seeds = [seed + k for k in range(passes)]
    if len(seeds) < 2:
        raise ValueError("insufficient passes: need >= 2")
    if statistic not in UC_STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}")

    x = torch.as_tensor(np.asarray(window), dtype=next(model.parameters()).dtype)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    samples = []
    with torch.no_grad():
        for s in seeds:
            gen = torch.Generator().manual_seed(int(s))
            if statistic == "state_pre":
                h = model.encoder(x, dropout_on=True, generator=gen)
                samples.append(model.state_head.linear(h)[0].numpy())
            else:
                out = model.forward_all(x, dropout_on=True, generator=gen)
                score = model.agitation_head(out["z_s"], out["z_t"])
                samples.append(np.atleast_1d(score[0].numpy()))
    if all(np.array_equal(s, samples[0]) for s in samples[1:]):
        return 0.0  # identical passes: exactly zero, no mean-rounding residue
    stack = np.stack(samples, axis=0).astype(np.float64)
    return float(np.mean(np.var(stack, axis=0)))


# ---------------------------------------------------------------------------
# the gate


def effective_bitwidth(uc: float, cfg: DpsConfig, uc_mean: float = 0.0,
                       uc_std: float = 1.0) -> int:
    """4 or 6 bits from a normalized uncertainty; the boundary triggers high.

    sigmoid((uc - mean)/std) >= gate_threshold selects b_base + delta_b; with
    threshold 0.5 that is exactly "uncertainty at or above the calibration
    mean". An uncalibrated gate (mean 0, std 1) therefore prefers precision.
    """
    z = (uc - uc_mean) / max(uc_std, 1e-12)
    gate = float(scipy.special.expit(z))  # overflow-safe sigmoid
    return cfg.b_base + cfg.delta_b if gate >= cfg.gate_threshold else cfg.b_base


@dataclass
class DpsDecision:
    window_id: int
    uc: float
    bits: int
    trigger_reason: str
    cache_hit: bool


class DpsGate:
    """Stateful per-stream gate: probe cache + running calibration + decisions.

    Single-writer: one gate instance per audio stream.
    """

    def __init__(self, cfg: DpsConfig = DpsConfig(), history: int = RUNNING_WINDOW):
        self.cfg = cfg
        self._cache: dict[int, UncertaintyCache] = {}
        self._history = deque(maxlen=history)
        self.lookups = 0
        self.hits = 0
        self.log: list[DpsDecision] = []

    @property
    def uc_mean(self) -> float:
        return float(np.mean(self._history)) if self._history else 0.0

    @property
    def uc_std(self) -> float:
        if len(self._history) < 2:
            return 1.0
        return max(float(np.std(self._history)), 1e-12)

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def probe(self, window_id: int, compute_uc, now: float | None = None) -> tuple:
        """Cached uncertainty for a window; `compute_uc()` runs on a miss only."""
        self.lookups += 1
        entry = self._cache.get(window_id)
        if entry is not None:
            self.hits += 1
            return entry.uc_value, True
        uc = float(compute_uc())
        self._cache[window_id] = UncertaintyCache(
            window_id, uc, time.time() if now is None else now)
        self._history.append(uc)  # calibration advances once per window
        return uc, False

    def decide(self, window_id: int, compute_uc, now: float | None = None) -> DpsDecision:
        """Bit-width for one sub-window of `window_id`."""
        uc, hit = self.probe(window_id, compute_uc, now)
        bits = effective_bitwidth(uc, self.cfg, self.uc_mean, self.uc_std)
        reason = "uncertainty" if bits > self.cfg.b_base else "baseline"
        decision = DpsDecision(window_id, uc, bits, reason, hit)
        self.log.append(decision)
        return decision

    def trigger_rate(self) -> float:
        """Fraction of distinct windows that escalated precision."""
        seen, high = {}, 0
        for d in self.log:
            seen[d.window_id] = d.bits
        if not seen:
            return 0.0
        high = sum(1 for b in seen.values() if b > self.cfg.b_base)
        return high / len(seen)

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_id", "uc", "bits", "trigger_reason"])
            for d in self.log:
                writer.writerow([d.window_id, f"{d.uc:.6g}", d.bits, d.trigger_reason])


# ---------------------------------------------------------------------------
# timing model


def dps_timing_model(cfg: DpsConfig, base_ms: float, pass_ms: float,
                     var_ms: float, select_ms: float, int6_ms: float,
                     trigger_rate: float) -> dict:
    """Expected per-sub-window cost of running the gate.

    The Monte-Carlo probe (passes x pass_ms + variance + selection) runs once
    per window and amortizes over its sub-windows; escalated sub-windows add
    the wider kernel's extra time. `conservative_window_ms` books the probe
    cost against every second of the window instead — the pessimistic roll-up
    some cost summaries prefer.
    """
    n_sub = cfg.subwindows_per_window
    mc_cost_ms = cfg.passes * pass_ms + var_ms + select_ms
    amortized_ms = mc_cost_ms / n_sub
    int6_extra_ms = trigger_rate * int6_ms
    overhead_ms = (mc_cost_ms + trigger_rate * int6_ms * n_sub) / n_sub
    return {
        "n_subwindows": n_sub,
        "mc_cost_ms": mc_cost_ms,
        "amortized_ms": amortized_ms,
        "int6_extra_ms": int6_extra_ms,
        "overhead_ms": overhead_ms,
        "total_ms": base_ms + overhead_ms,
        "conservative_window_ms": amortized_ms * cfg.window_s,
    }


# ---------------------------------------------------------------------------
# multi-scale segmentation and fusion


def segment_windows(features: np.ndarray, scale_s: float, overlap: float,
                    frames_per_second: float = 100.0) -> list:
    """Slice a [n_frames, ...] matrix into scale-long windows; tails drop.

    hop = scale * (1 - overlap); windows shorter than the scale are discarded
    rather than padded.
    """
    if not (0.0 <= overlap < 1.0):
        raise ValueError("overlap must be in [0, 1)")
    features = np.asarray(features)
    scale_frames = int(round(scale_s * frames_per_second))
    hop_frames = max(1, int(round(scale_s * (1.0 - overlap) * frames_per_second)))
    if scale_frames < 1:
        raise ValueError("scale shorter than one frame")
    out = []
    for start in range(0, features.shape[0] - scale_frames + 1, hop_frames):
        out.append(features[start:start + scale_frames])
    return out


def segment_all_scales(features: np.ndarray, scales: ScaleWindows = ScaleWindows(),
                       frames_per_second: float = 100.0) -> dict:
    return {scale: segment_windows(features, scale, ov, frames_per_second)
            for scale, ov in zip(scales.scales_s, scales.overlaps)}


class MstfFusion(nn.Module):
    """Fuses the three scale embeddings: mean for traits, attention for states.

    The state path projects each 32-dim scale token to 64 dims, runs 4-head
    self-attention over the 3 tokens, projects back to 32, and mean-pools,
    adding exactly one attention block of parameters (8,416 at the defaults).
    The trait path is a parameter-free arithmetic mean.
    """

    N_SCALES = 3

    def __init__(self, state_dim: int = 32, attn_dim: int = 64, heads: int = 4,
                 seed: int = 0):
        super().__init__()
        if attn_dim % heads:
            raise ValueError("attention width must split across heads")
        gen = torch.Generator().manual_seed(seed)
        self.q = nn.Linear(state_dim, attn_dim)
        self.k = nn.Linear(state_dim, attn_dim)
        self.v = nn.Linear(state_dim, attn_dim)
        self.out = nn.Linear(attn_dim, state_dim)
        for layer in (self.q, self.k, self.v, self.out):
            _init_linear(layer, gen)
        self.heads = heads
        self.head_dim = attn_dim // heads

    def attention_weights(self, state_embs: torch.Tensor) -> torch.Tensor:
        """[heads, 3, 3] softmax rows over the scale tokens."""
        q = self.q(state_embs).view(self.N_SCALES, self.heads, self.head_dim)
        k = self.k(state_embs).view(self.N_SCALES, self.heads, self.head_dim)
        logits = torch.einsum("qhd,khd->hqk", q, k) / self.head_dim ** 0.5
        return F.softmax(logits, dim=-1)

    def forward(self, state_embs: torch.Tensor,
                trait_embs: torch.Tensor) -> tuple:
        state_embs = torch.as_tensor(state_embs, dtype=self.q.weight.dtype)
        trait_embs = torch.as_tensor(trait_embs, dtype=self.q.weight.dtype)
        if state_embs.shape[0] != self.N_SCALES or trait_embs.shape[0] != self.N_SCALES:
            raise ValueError("incomplete scales: need one embedding per scale")

        fused_trait = trait_embs.mean(dim=0)

        attn = self.attention_weights(state_embs)
        v = self.v(state_embs).view(self.N_SCALES, self.heads, self.head_dim)
        mixed = torch.einsum("hqk,khd->qhd", attn, v).reshape(self.N_SCALES, -1)
        fused_state = self.out(mixed).mean(dim=0)
        return fused_state, fused_trait

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
