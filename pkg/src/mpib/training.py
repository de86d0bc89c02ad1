"""Training loop: positive-aware batch construction, the five-term step,
optimizer presets, masked-reconstruction pretraining, and the epoch driver.

Batches are built as P speakers x 2 sessions x 2 consecutive windows, so every
batch carries the positives the stability loss needs and the adjacent pairs
the smoothness loss needs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .losses import LossWeights, composite_torch, infonce_torch, mse_torch, opl_torch
from .model import DualHeadModel, fake_quant, tmae_pretrain_step
from .privacy import project_spectral_norm

LOG_FIELDS = ("epoch", "recon", "stab", "smooth", "orth", "agit", "total")


@dataclass
class TrainingData:
    """Normalized windows plus the metadata the relational losses key on."""

    windows: np.ndarray           # [N, 96, 64]
    speaker_ids: np.ndarray       # [N]
    session_ids: np.ndarray       # [N]
    window_index: np.ndarray      # [N] time order within (speaker, session)
    agitation: np.ndarray         # [N]

    def __post_init__(self):
        n = len(self.windows)
        for name in ("speaker_ids", "session_ids", "window_index", "agitation"):
            setattr(self, name, np.asarray(getattr(self, name)))
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must align with windows ({n} rows)")
        self.windows = np.asarray(self.windows)
        if self.windows.ndim != 3:
            raise ValueError("windows must be [N, bands, frames]")

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, mask_or_indices) -> "TrainingData":
        idx = np.asarray(mask_or_indices)
        return TrainingData(self.windows[idx], self.speaker_ids[idx],
                            self.session_ids[idx], self.window_index[idx],
                            self.agitation[idx])


@dataclass
class TrainBatch:
    x: torch.Tensor
    speaker_ids: np.ndarray
    session_ids: np.ndarray
    window_index: np.ndarray
    agitation: torch.Tensor

    @property
    def consecutive_pairs(self) -> list:
        """Positions (i, j) holding adjacent windows of one (speaker, session)."""
        key = {}
        for pos, (spk, ses, t) in enumerate(zip(self.speaker_ids, self.session_ids,
                                                self.window_index)):
            key[(spk, ses, t)] = pos
        pairs = []
        for (spk, ses, t), pos in key.items():
            nxt = key.get((spk, ses, t + 1))
            if nxt is not None:
                pairs.append((pos, nxt))
        return pairs


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    weight_decay: float
    epochs: int
    weights: LossWeights
    batch_speakers: int = 16
    tau: float = 0.07
    state_grad: bool = True
    spectral_bound: float = 1.0
    cosine_anneal: bool = True
    mode: str = "fp16"
    personal_jitter: float = 0.1
    seed: int = 0


PRESETS = {
    # two published hyperparameter sets disagree; both ship, neither privileged
    "impl": TrainConfig(lr=1e-3, weight_decay=1e-3, epochs=60,
                        weights=LossWeights(stab=2.0, smooth=0.3, orth=1.0, agit=3.0)),
    "exp": TrainConfig(lr=3e-4, weight_decay=1e-4, epochs=100,
                       weights=LossWeights(stab=0.5, smooth=0.3, orth=1.0, agit=1.0)),
}


def get_preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


# ---------------------------------------------------------------------------
# batch construction


def eligible_speakers(data: TrainingData) -> np.ndarray:
    """Speakers with >= 2 sessions that each contain >= 2 consecutive windows."""
    keep = []
    for spk in np.unique(data.speaker_ids):
        spk_mask = data.speaker_ids == spk
        good_sessions = 0
        for ses in np.unique(data.session_ids[spk_mask]):
            idx = np.sort(data.window_index[spk_mask & (data.session_ids == ses)])
            if len(idx) >= 2 and np.any(np.diff(idx) == 1):
                good_sessions += 1
        if good_sessions >= 2:
            keep.append(spk)
    return np.asarray(keep)


def sample_batch(data: TrainingData, n_speakers: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Indices for one batch: P speakers x 2 sessions x 2 consecutive windows."""
    pool = eligible_speakers(data)
    if len(pool) < 2:
        raise ValueError("corpus too small: need >= 2 speakers with paired sessions")
    chosen = rng.choice(pool, size=min(n_speakers, len(pool)), replace=False)

    out = []
    for spk in chosen:
        spk_mask = data.speaker_ids == spk
        sessions = [ses for ses in np.unique(data.session_ids[spk_mask])
                    if _has_adjacent(data, spk, ses)]
        for ses in rng.choice(sessions, size=2, replace=False):
            mask = spk_mask & (data.session_ids == ses)
            idx = np.nonzero(mask)[0]
            order = data.window_index[idx]
            starts = idx[np.isin(order + 1, order)]
            start = rng.choice(starts)
            t = data.window_index[start]
            nxt = idx[order == t + 1][0]
            out.extend([start, nxt])
    return np.asarray(out)


def _has_adjacent(data: TrainingData, spk, ses) -> bool:
    order = np.sort(data.window_index[(data.speaker_ids == spk)
                                      & (data.session_ids == ses)])
    return len(order) >= 2 and bool(np.any(np.diff(order) == 1))


def make_batch(data: TrainingData, indices: np.ndarray,
               dtype: torch.dtype = torch.float32) -> TrainBatch:
    return TrainBatch(
        x=torch.as_tensor(data.windows[indices], dtype=dtype),
        speaker_ids=data.speaker_ids[indices],
        session_ids=data.session_ids[indices],
        window_index=data.window_index[indices],
        agitation=torch.as_tensor(data.agitation[indices], dtype=dtype),
    )


# ---------------------------------------------------------------------------
# the training step


def batch_loss(model: DualHeadModel, batch: TrainBatch, weights: LossWeights,
               *, tau: float = 0.07, state_grad: bool = True, mode: str = "fp16",
               dropout_on: bool = True, dropout_seed: int = 0,
               personal_jitter: float = 0.1, training: bool = True):
    """Total loss and breakdown for one batch; no optimizer interaction.

    Kept separate from train_step so gradient checks can treat the whole
    objective as a pure function of the parameters.
    """
    gen = torch.Generator().manual_seed(dropout_seed)
    out = model.forward_all(batch.x, mode=mode, dropout_on=dropout_on,
                            generator=gen, training=training)
    z_t, z_s = out["z_t"], out["z_s"]

    recon = mse_torch(model.recon_decoder(z_t, z_s), batch.x.flatten(1))

    skipped_stability = False
    try:
        stab = infonce_torch(z_t, batch.speaker_ids, batch.session_ids, tau)
    except ValueError:
        warnings.warn("stability term skipped: batch has no positive pairs")
        stab = torch.zeros((), dtype=z_t.dtype)
        skipped_stability = True

    pairs = batch.consecutive_pairs
    if pairs:
        prev = z_s[[i for i, _ in pairs]]
        curr = z_s[[j for _, j in pairs]]
        smooth = (curr - prev).pow(2).sum(dim=-1).mean()
    else:
        smooth = torch.zeros((), dtype=z_t.dtype)

    if batch.x.shape[0] >= 2:
        orth = opl_torch(z_t, z_s, state_grad=state_grad)
    else:
        orth = torch.zeros((), dtype=z_t.dtype)

    profile = None
    if model.agitation_head.personalized:
        jitter = torch.randn(z_t.shape, generator=gen, dtype=z_t.dtype)
        profile = z_t.detach() + personal_jitter * jitter
    agit = mse_torch(model.agitation_head(z_s, profile), batch.agitation)

    total, breakdown = composite_torch(recon, stab, smooth, orth, agit, weights)
    breakdown["stability_skipped"] = skipped_stability
    return total, breakdown


def train_step(model: DualHeadModel, batch: TrainBatch, weights: LossWeights,
               optimizer: torch.optim.Optimizer, *, tau: float = 0.07,
               state_grad: bool = True, mode: str = "fp16", dropout_seed: int = 0,
               spectral_bound: float = 1.0, personal_jitter: float = 0.1) -> dict:
    """One optimizer step; the trait head is re-projected to the spectral bound."""
    total, breakdown = batch_loss(model, batch, weights, tau=tau,
                                  state_grad=state_grad, mode=mode,
                                  dropout_seed=dropout_seed,
                                  personal_jitter=personal_jitter)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    with torch.no_grad():
        w = model.trait_head.linear.weight
        w.copy_(project_spectral_norm(w, spectral_bound))
    return breakdown


def make_optimizer(model: DualHeadModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr,
                             weight_decay=config.weight_decay)


def train_model(model: DualHeadModel, data: TrainingData, config: TrainConfig,
                log_path: str | Path | None = None,
                steps_per_epoch: int | None = None) -> list:
    """Epoch driver; returns one mean loss-breakdown row per epoch."""
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    scheduler = None
    if config.cosine_anneal:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(1, config.epochs))
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(data) // (4 * config.batch_speakers))

    history = []
    step = 0
    for epoch in range(config.epochs):
        sums = {k: 0.0 for k in LOG_FIELDS[1:]}
        for _ in range(steps_per_epoch):
            indices = sample_batch(data, config.batch_speakers, rng)
            batch = make_batch(data, indices, dtype=next(model.parameters()).dtype)
            breakdown = train_step(
                model, batch, config.weights, optimizer, tau=config.tau,
                state_grad=config.state_grad, mode=config.mode,
                dropout_seed=config.seed * 1_000_003 + step,
                spectral_bound=config.spectral_bound,
                personal_jitter=config.personal_jitter)
            for k in sums:
                sums[k] += breakdown[k]
            step += 1
        if scheduler is not None:
            scheduler.step()
        row = {"epoch": epoch, **{k: sums[k] / steps_per_epoch for k in sums}}
        history.append(row)

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in history:
                writer.writerow({k: row[k] for k in LOG_FIELDS})
    return history


def _effective_state_weight(head) -> torch.Tensor:
    """The weight matrix the state head's forward actually applies."""
    if head.bits == 16:
        return head.linear.weight.detach()
    scales = torch.as_tensor(head.w_scales,
                             dtype=head.linear.weight.dtype).view(-1, 1)
    return fake_quant(head.linear.weight.detach(), scales, head.bits)


def train_staged(model: DualHeadModel, data: TrainingData, config: TrainConfig,
                 *, float_epochs: int = 6, warm_epochs: int = 2,
                 qat_epochs: int = 0, ft_epochs: int = 1, ft_lr: float = 1e-3,
                 steps_per_epoch: int | None = None, mean_ema: float = 0.95) -> list:
    """Collapse-resistant trainer for low-precision state heads.

    Plain end-to-end training lets the state path degenerate: the encoder
    output carries a large window-independent component, the non-affine
    normalization then maps every window to nearly the same direction, and a
    coarse output grid rounds the surviving variation to a constant code.
    Three measures keep the path alive, applied identically at any precision:

    * after every optimizer step the state-linear bias is set to cancel an
      EMA of the projected encoder mean (using the weights the forward
      actually applies), so normalization acts on window-to-window variation
      instead of a shared offset;
    * the smoothness weight is held at zero for the first ``warm_epochs``
      (its pull toward identical consecutive outputs scales with state width
      and would lock all directions together before the agitation gradient
      can differentiate them) and restored to the configured value after;
    * the first ``float_epochs`` run the state output at full precision;
      ``qat_epochs`` then continue full-model training at the head's native
      width (a no-op change for a 16-bit head), so the representation is
      shaped against the live grid — structure too fine for the grid stops
      earning its keep and is not retained; finally the quantizers are
      recalibrated and only the agitation readout is fine-tuned at native
      width with dropout off, adapting the regression to the dropout-free
      activation range without disturbing the representation.

    Orthogonality gradients are kept off the state path during the warm
    epochs (only the trait side rotates away while the geometry settles) and
    follow ``config.state_grad`` afterwards, letting the narrow head rotate
    its projection off the identity subspace once the agitation signal is
    established. Returns per-epoch mean loss rows shaped like
    ``train_model``'s.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(data) // (4 * config.batch_speakers))
    dtype = next(model.parameters()).dtype

    h_mean = {}

    def track_h(_module, _args, output):
        m = output.detach().mean(0)
        h_mean["ema"] = m if "ema" not in h_mean else \
            mean_ema * h_mean["ema"] + (1.0 - mean_ema) * m

    def project_bias():
        with torch.no_grad():
            model.state_head.linear.bias.copy_(
                -(_effective_state_weight(model.state_head) @ h_mean["ema"]))

    def recenter(sample_cap: int = 2048):
        """Replace the EMA with the exact dropout-off encoder mean.

        The per-step EMA tracks the dropout-on training regime; through the
        encoder nonlinearities that mean differs from the inference-time one,
        and the residual offset would re-dominate the normalized state (the
        window-to-window variation is small against it). Measured once at
        each phase boundary, under inference conditions.
        """
        with torch.no_grad():
            take = min(sample_cap, len(data))
            idx = rng.choice(len(data), size=take, replace=False)
            hs = [model.encoder(torch.as_tensor(data.windows[idx[i:i + 256]],
                                                dtype=dtype), mode=config.mode)
                  for i in range(0, take, 256)]
            h_mean["ema"] = torch.cat(hs).mean(0)
        project_bias()

    hook = model.encoder.register_forward_hook(track_h)
    native_bits = model.state_head.bits
    history = []
    step = 0
    try:
        model.state_head.bits = 16
        for epoch in range(float_epochs):
            weights = config.weights if epoch >= warm_epochs else \
                replace(config.weights, smooth=0.0)
            sums = {k: 0.0 for k in LOG_FIELDS[1:]}
            for _ in range(steps_per_epoch):
                indices = sample_batch(data, config.batch_speakers, rng)
                batch = make_batch(data, indices, dtype=dtype)
                breakdown = train_step(
                    model, batch, weights, optimizer, tau=config.tau,
                    state_grad=config.state_grad and epoch >= warm_epochs,
                    mode=config.mode,
                    dropout_seed=config.seed * 1_000_003 + step,
                    spectral_bound=config.spectral_bound,
                    personal_jitter=config.personal_jitter)
                project_bias()
                for k in sums:
                    sums[k] += breakdown[k]
                step += 1
            history.append({"epoch": epoch,
                            **{k: sums[k] / steps_per_epoch for k in sums}})

        model.state_head.bits = native_bits
        if native_bits != 16:
            model.state_head.weight_codes()  # seed the weight scales
        recenter()                           # re-cancel under the applied weights
        for epoch in range(qat_epochs):
            sums = {k: 0.0 for k in LOG_FIELDS[1:]}
            for _ in range(steps_per_epoch):
                indices = sample_batch(data, config.batch_speakers, rng)
                batch = make_batch(data, indices, dtype=dtype)
                breakdown = train_step(
                    model, batch, config.weights, optimizer, tau=config.tau,
                    state_grad=config.state_grad, mode=config.mode,
                    dropout_seed=config.seed * 1_000_003 + step,
                    spectral_bound=config.spectral_bound,
                    personal_jitter=config.personal_jitter)
                project_bias()
                for k in sums:
                    sums[k] += breakdown[k]
                step += 1
            history.append({"epoch": float_epochs + epoch,
                            **{k: sums[k] / steps_per_epoch for k in sums}})

        if native_bits != 16:
            model.state_head.weight_codes()           # refresh after drift
            model.state_head.reset_activation_peaks()  # reseed dropout-free
        if qat_epochs:
            recenter()
        ft_opt = torch.optim.AdamW(model.agitation_head.parameters(),
                                   lr=ft_lr, weight_decay=config.weight_decay)
        for epoch in range(ft_epochs):
            sums = {k: 0.0 for k in LOG_FIELDS[1:]}
            for _ in range(steps_per_epoch):
                indices = sample_batch(data, config.batch_speakers, rng)
                batch = make_batch(data, indices, dtype=dtype)
                total, breakdown = batch_loss(
                    model, batch, config.weights, tau=config.tau,
                    state_grad=False, mode=config.mode, dropout_on=False,
                    dropout_seed=config.seed * 1_000_003 + step,
                    personal_jitter=config.personal_jitter)
                ft_opt.zero_grad()
                total.backward()
                ft_opt.step()
                for k in sums:
                    sums[k] += breakdown[k]
                step += 1
            history.append({"epoch": float_epochs + qat_epochs + epoch,
                            **{k: sums[k] / steps_per_epoch for k in sums}})
    finally:
        hook.remove()
    return history


# ---------------------------------------------------------------------------
# masked-reconstruction pretraining


def pretrain_tmae(model: DualHeadModel, windows: np.ndarray, steps: int = 200,
                  batch_size: int = 32, lr: float = 1e-4, mask_ratio: float = 0.75,
                  seed: int = 0) -> list:
    """Pretrain encoder + masked decoder; returns the per-step loss trace."""
    params = list(model.encoder.parameters()) + list(model.masked_decoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype

    trace = []
    for _ in range(steps):
        idx = rng.choice(len(windows), size=min(batch_size, len(windows)),
                         replace=False)
        batch = torch.as_tensor(windows[idx], dtype=dtype)
        loss = tmae_pretrain_step(model, batch, mask_ratio=mask_ratio, generator=gen)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
    return trace
