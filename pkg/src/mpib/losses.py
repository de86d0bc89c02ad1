"""The five training losses: reconstruction, stability (InfoNCE), smoothness,
trait/state orthogonality, and agitation regression.

Each loss has a torch core (differentiable, any float dtype) plus a thin
float64 entry point over :class:`BatchEmbeddings` for evaluation and oracle
checks, where 1e-9-level equalities matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import quant


@dataclass(frozen=True)
class LossWeights:
    """Weights for the four auxiliary terms; reconstruction is always weight 1."""

    stab: float = 0.5
    smooth: float = 0.3
    orth: float = 1.0
    agit: float = 1.0

    def __post_init__(self):
        for name in ("stab", "smooth", "orth", "agit"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class BatchEmbeddings:
    """One batch worth of dual-head outputs plus the grouping metadata the
    relational losses need: participants for positives/negatives, sessions and
    timestamps for adjacency."""

    z_t: np.ndarray
    z_s_codes: np.ndarray
    scale: float
    participant_ids: np.ndarray
    session_ids: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.z_t = np.asarray(self.z_t, dtype=np.float64)
        self.z_s_codes = np.asarray(self.z_s_codes)
        if len(self.z_t) != len(self.z_s_codes) or len(self.z_t) < 1:
            raise ValueError("batch matrices must align and be non-empty")
        self.participant_ids = np.asarray(self.participant_ids)
        self.session_ids = np.asarray(self.session_ids)
        self.timestamps = np.asarray(self.timestamps)

    @property
    def batch_size(self) -> int:
        return len(self.z_t)

    def z_s(self) -> np.ndarray:
        """Dequantized state matrix (codes x scale)."""
        return self.z_s_codes.astype(np.float64) * self.scale


# ---------------------------------------------------------------------------
# torch cores


def opl_torch(z_t: torch.Tensor, z_s: torch.Tensor, state_grad: bool = True) -> torch.Tensor:
    """Orthogonality loss: (1/B^2) * ||centered(z_t)^T centered(z_s)||_F^2.

    Column-centering makes this the squared Frobenius norm of the (unscaled)
    cross-covariance; 1/B^2 makes row duplication a no-op. `state_grad=False`
    blocks the gradient into the state branch.
    """
    if z_t.shape[0] < 2:
        raise ValueError("batch too small: orthogonality needs B >= 2")
    if not state_grad:
        z_s = z_s.detach()
    zt = z_t - z_t.mean(dim=0, keepdim=True)
    zs = z_s - z_s.mean(dim=0, keepdim=True)
    b = z_t.shape[0]
    return (zt.T @ zs).pow(2).sum() / (b * b)


def infonce_torch(z: torch.Tensor, participant_ids: np.ndarray,
                  session_ids: np.ndarray, tau: float = 0.07) -> torch.Tensor:
    """InfoNCE over trait embeddings with cosine similarity.

    One term per ordered (anchor, positive) pair — same participant, different
    session; the denominator is the positive plus all other-participant
    samples. Same-participant non-positives never appear as negatives.
    """
    pids = np.asarray(participant_ids)
    sids = np.asarray(session_ids)
    zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sim = (zn @ zn.T) / tau

    same_pid = pids[:, None] == pids[None, :]
    pos_mask = same_pid & (sids[:, None] != sids[None, :])
    anchors, positives = np.nonzero(pos_mask)
    if len(anchors) == 0:
        raise ValueError("no positives: need a participant with two sessions")

    terms = []
    for a, p in zip(anchors, positives):
        neg = sim[a][~same_pid[a]]
        candidates = torch.cat([sim[a, p].reshape(1), neg])
        terms.append(torch.logsumexp(candidates, dim=0) - sim[a, p])
    return torch.stack(terms).mean()


def smoothness_torch(z_prev: torch.Tensor, z_curr: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between consecutive state embeddings; for a batch of
    pairs, the mean of per-pair squared distances."""
    d = (z_prev - z_curr).pow(2)
    if d.ndim == 1:
        return d.sum()
    return d.sum(dim=-1).mean()


def mse_torch(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error; serves both reconstruction and agitation terms."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).pow(2).mean()


def composite_torch(recon, stab, smooth, orth, agit,
                    weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """total = recon + w_stab*stab + w_smooth*smooth + w_orth*orth + w_agit*agit.

    Summed in float64 (gradients still flow to the original dtype) so the
    reported breakdown recombines to the total at 1e-9 in any compute dtype.
    """
    recon, stab, smooth, orth, agit = (
        t.double() for t in (recon, stab, smooth, orth, agit))
    total = (recon + weights.stab * stab + weights.smooth * smooth
             + weights.orth * orth + weights.agit * agit)
    breakdown = {"recon": float(recon.detach()), "stab": float(stab.detach()),
                 "smooth": float(smooth.detach()), "orth": float(orth.detach()),
                 "agit": float(agit.detach()), "total": float(total.detach())}
    return total, breakdown


# ---------------------------------------------------------------------------
# float64 entry points over BatchEmbeddings


def opl_loss(batch: BatchEmbeddings) -> float:
    """Orthogonality loss of a batch, computed in float64."""
    if batch.batch_size < 2:
        raise ValueError("batch too small: orthogonality needs B >= 2")
    lo, hi = quant.clip_range(4)
    codes = batch.z_s_codes
    if np.issubdtype(codes.dtype, np.integer) and (codes.min() < lo or codes.max() > hi):
        raise ValueError("state codes outside INT4 range")
    zt = torch.as_tensor(batch.z_t, dtype=torch.float64)
    zs = torch.as_tensor(batch.z_s(), dtype=torch.float64)
    return float(opl_torch(zt, zs))


def stability_loss(batch: BatchEmbeddings, tau: float = 0.07) -> float:
    zt = torch.as_tensor(batch.z_t, dtype=torch.float64)
    return float(infonce_torch(zt, batch.participant_ids, batch.session_ids, tau))


def smoothness_loss(z_prev: np.ndarray, z_curr: np.ndarray) -> float:
    return float(smoothness_torch(torch.as_tensor(np.asarray(z_prev, dtype=np.float64)),
                                  torch.as_tensor(np.asarray(z_curr, dtype=np.float64))))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(mse_torch(torch.as_tensor(pred), torch.as_tensor(target)))


def composite_loss(components: dict, weights: LossWeights) -> tuple[float, dict]:
    """Weighted total from a {recon, stab, smooth, orth, agit} component dict."""
    for name in ("recon", "stab", "smooth", "orth", "agit"):
        if not np.isfinite(components[name]):
            raise ValueError(f"non-finite loss component: {name}")
    total, breakdown = composite_torch(
        torch.tensor(components["recon"], dtype=torch.float64),
        torch.tensor(components["stab"], dtype=torch.float64),
        torch.tensor(components["smooth"], dtype=torch.float64),
        torch.tensor(components["orth"], dtype=torch.float64),
        torch.tensor(components["agit"], dtype=torch.float64),
        weights)
    return float(total), breakdown
