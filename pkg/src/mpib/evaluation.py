"""Identity-leakage metrics, statistics, capacity/size/energy calculators, and
the bit-width sweep driver."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.spatial
import scipy.special
import scipy.stats

from . import training
from .model import DualHeadModel, ModelConfig


# ---------------------------------------------------------------------------
# speaker-identification trials


@dataclass
class TrialList:
    """All-vs-all verification trials against enrolled speaker centroids.

    Per probe: one target trial (its own speaker) plus one non-target trial per
    other enrolled speaker, so a 120-speaker set with one probe each yields
    120x120 = 14,400 trials of which 120x119 = 14,280 are non-targets (a count
    sometimes quoted as if it were the total).
    """

    scores: np.ndarray        # [n_trials]
    is_target: np.ndarray     # [n_trials] bool
    probe_ids: np.ndarray     # [n_trials]
    claimed: np.ndarray       # [n_trials] speaker ids

    def __post_init__(self):
        n = len(self.scores)
        if not (len(self.is_target) == len(self.probe_ids) == len(self.claimed) == n):
            raise ValueError("trial columns must align")

    @property
    def n_trials(self) -> int:
        return len(self.scores)

    @property
    def n_target(self) -> int:
        return int(np.sum(self.is_target))

    @property
    def n_nontarget(self) -> int:
        return self.n_trials - self.n_target

    def to_text(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for p, c, t, s in zip(self.probe_ids, self.claimed,
                                  self.is_target, self.scores):
                kind = "target" if t else "nontarget"
                fh.write(f"{p} {c} {kind} {s:.6f}\n")


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def _enroll_split(embs: np.ndarray, labels: np.ndarray, enrollment_per_spk: int):
    """Per speaker: first `enrollment_per_spk` rows enroll, the rest probe."""
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels)
    centroids, speakers = [], []
    probe_embs, probe_labels, probe_ids = [], [], []
    for spk in np.unique(labels):
        idx = np.nonzero(labels == spk)[0]
        if len(idx) < enrollment_per_spk + 1:
            warnings.warn(f"speaker {spk} excluded: needs "
                          f">= {enrollment_per_spk + 1} utterances")
            continue
        centroids.append(embs[idx[:enrollment_per_spk]].mean(axis=0))
        speakers.append(spk)
        rest = idx[enrollment_per_spk:]
        probe_embs.append(embs[rest])
        probe_labels.extend(labels[rest])
        probe_ids.extend(rest)
    if not centroids:
        raise ValueError("no speaker has enough utterances to enroll")
    return (np.stack(centroids), np.asarray(speakers),
            np.concatenate(probe_embs), np.asarray(probe_labels),
            np.asarray(probe_ids))


def topk_identification(embs: np.ndarray, labels: np.ndarray, k: int = 1,
                        enrollment_per_spk: int = 3) -> float:
    """Closed-set speaker-identification accuracy: cosine to centroids, top-k."""
    centroids, speakers, probes, probe_labels, _ = _enroll_split(
        embs, labels, enrollment_per_spk)
    sims = _cosine_matrix(probes, centroids)
    order = np.argsort(-sims, axis=1)[:, :k]
    hits = [probe_labels[i] in speakers[order[i]] for i in range(len(probes))]
    return float(np.mean(hits))


def build_trials(embs: np.ndarray, labels: np.ndarray,
                 enrollment_per_spk: int = 3) -> TrialList:
    centroids, speakers, probes, probe_labels, probe_ids = _enroll_split(
        embs, labels, enrollment_per_spk)
    sims = _cosine_matrix(probes, centroids)
    n_p, n_s = sims.shape
    scores = sims.reshape(-1)
    claimed = np.tile(speakers, n_p)
    pid = np.repeat(probe_ids, n_s)
    target = (np.repeat(probe_labels, n_s) == claimed)
    return TrialList(scores, target, pid, claimed)


def compute_eer(trials: TrialList | tuple) -> float:
    """Equal error rate with linear interpolation at the FAR/FRR crossing.

    Raw scores, no calibration; higher score must mean "more likely target".
    """
    if isinstance(trials, TrialList):
        scores, is_target = trials.scores, trials.is_target
    else:
        scores, is_target = trials
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    n_t, n_n = int(is_target.sum()), int((~is_target).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("degenerate trials: need both target and non-target")

    # candidate thresholds are the observed scores plus sentinels on both
    # ends; FAR = P(nontarget >= thr), FRR = P(target < thr)
    thresholds = np.unique(scores)
    grid = np.concatenate(([thresholds[0] - 1.0], thresholds,
                           [thresholds[-1] + 1.0]))
    far = np.array([(scores[~is_target] >= t).mean() for t in grid])
    frr = np.array([(scores[is_target] < t).mean() for t in grid])
    diff = far - frr
    idx = int(np.nonzero(diff <= 0)[0][0])  # first threshold where FRR >= FAR
    if diff[idx] == 0.0:
        return float(far[idx])
    a, b = idx - 1, idx
    t = diff[a] / (diff[a] - diff[b])
    return float(far[a] + t * (far[b] - far[a]))


# ---------------------------------------------------------------------------
# mutual information (mixed continuous/discrete k-NN estimator)


def knn_mi(embs: np.ndarray, labels: np.ndarray, k: int = 3) -> float:
    """Mutual information in bits between vectors and discrete labels.

    Nearest-neighbor mixed estimator: I = H(Y) + psi(k) - <psi(m_i)> where
    d_i is the Chebyshev distance to the k-th same-label neighbor and m_i
    counts all points within d_i inclusive (ties counted in, so m_i >= k).
    The discrete entropy uses the Miller-Madow-corrected plug-in estimate.
    Classes with <= k samples are excluded with a warning.
    """
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels)
    keep = np.ones(len(labels), dtype=bool)
    for y in np.unique(labels):
        if np.sum(labels == y) <= k:
            warnings.warn(f"class {y} excluded: needs > {k} samples")
            keep &= labels != y
    embs, labels = embs[keep], labels[keep]
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        raise ValueError("need >= 2 usable classes")

    n = len(labels)
    counts = np.array([np.sum(labels == y) for y in np.unique(labels)])
    p = counts / n
    h_y = -np.sum(p * np.log(p)) + (len(counts) - 1) / (2.0 * n)  # Miller-Madow

    full_tree = scipy.spatial.cKDTree(embs)
    psi_m = np.empty(n)
    for y in np.unique(labels):
        idx = np.nonzero(labels == y)[0]
        class_tree = scipy.spatial.cKDTree(embs[idx])
        # k+1 because the query point itself is its own nearest neighbor
        d, _ = class_tree.query(embs[idx], k=k + 1, p=np.inf)
        radii = d[:, -1]
        for row, r in zip(idx, radii):
            m = len(full_tree.query_ball_point(embs[row], r, p=np.inf)) - 1
            psi_m[row] = scipy.special.digamma(max(m, 1))
    mi_nats = h_y + scipy.special.digamma(k) - float(np.mean(psi_m))
    return float(mi_nats / np.log(2.0))


# ---------------------------------------------------------------------------
# rank statistics


def spearman_rho(pred, target) -> float:
    """Rank correlation with average ranks for ties."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1 or len(pred) < 3:
        raise ValueError("need two aligned sequences of length >= 3")
    if np.all(pred == pred[0]) or np.all(target == target[0]):
        raise ValueError("undefined correlation: constant sequence")
    ra = scipy.stats.rankdata(pred)
    rb = scipy.stats.rankdata(target)
    return float(np.corrcoef(ra, rb)[0, 1])


def bootstrap_ci(stat_fn, data, resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple:
    """Seeded percentile bootstrap interval for stat_fn over rows of data."""
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("data must be non-empty")
    rng = np.random.default_rng(seed)
    stats = [stat_fn(data[rng.integers(0, len(data), size=len(data))])
             for _ in range(resamples)]
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def wilcoxon_paired(a, b) -> float:
    """Two-tailed paired signed-rank p-value; exact null for n <= 25.

    Zero differences drop first; ties get average ranks (the exact tail is
    computed over doubled ranks so half-integer ranks stay exact).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 5:
        raise ValueError("need paired sequences of length >= 5")
    d = a - b
    d = d[d != 0.0]
    if len(d) == 0:
        raise ValueError("no signal: all differences are zero")
    n = len(d)
    ranks = scipy.stats.rankdata(np.abs(d))
    w_plus = float(np.sum(ranks[d > 0]))

    if n > 25:
        return float(scipy.stats.wilcoxon(d, alternative="two-sided",
                                          correction=True).pvalue)

    # exact: distribution of W+ over all 2^n sign assignments via convolution
    # on doubled ranks (integers even with average-rank ties)
    doubled = np.rint(2.0 * ranks).astype(int)
    total = int(doubled.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:len(dist) - r]
        dist = 0.5 * (dist + shifted)
    w2 = int(round(2.0 * w_plus))
    p_le = float(dist[:w2 + 1].sum())
    p_ge = float(dist[w2:].sum())
    return min(1.0, 2.0 * min(p_le, p_ge))


# ---------------------------------------------------------------------------
# capacity / size / energy accounting


def capacity_bits(d: int, b: int) -> int:
    """Information ceiling of a d-dimensional embedding stored at b bits."""
    if d < 1 or b < 1:
        raise ValueError("dimension and bits must be >= 1")
    return d * b


def model_size_report(components: list, nominal_kb: dict | None = None) -> dict:
    """Per-component and total storage from (name, params, bits) triples.

    KB here is decimal (1 KB = 1000 B), the convention that reproduces the
    quoted per-component figures; components whose computed size disagrees
    with a supplied nominal figure by more than 0.05 KB are flagged.
    """
    rows, flags = {}, []
    total = 0.0
    for name, params, bits in components:
        nbytes = params * bits / 8.0
        rows[name] = {"params": params, "bits": bits, "bytes": nbytes,
                      "kb": nbytes / 1000.0}
        total += nbytes
        if nominal_kb and name in nominal_kb:
            delta = abs(nbytes / 1000.0 - nominal_kb[name])
            if delta > 0.05:
                flags.append(f"{name}: computed {nbytes / 1000.0:.1f} KB "
                             f"disagrees with the quoted {nominal_kb[name]:.1f} KB")
    return {"components": rows, "total_bytes": total,
            "total_kb": total / 1000.0, "flags": flags}


@dataclass(frozen=True)
class EnergyParams:
    p_active_mw: float = 110.0
    p_idle_mw: float = 15.0
    inference_s: float = 0.0234
    cadence_s: float = 5.0
    window_s: float = 0.640

    def __post_init__(self):
        # p_active may be zeroed for an all-idle audit; the rest must be > 0
        if self.p_active_mw < 0 or min(self.p_idle_mw, self.inference_s,
                                       self.cadence_s, self.window_s) <= 0:
            raise ValueError("energy parameters must be positive")


def energy_report(p: EnergyParams = EnergyParams()) -> dict:
    """Daily energy accounting, computed two independent ways plus unit audits.

    The per-inference route books active power only while the model computes;
    the duty-cycle route books it for the whole capture window. Both appear
    side by side because the two conventions disagree by design, and the
    joule/milliwatt-hour audit is attached because a daily figure quoted in
    mWh that numerically matches the joule value is a unit conflation.
    """
    inferences_per_day = 86400.0 / p.cadence_s
    duty = p.window_s / p.cadence_s
    e_per_inf_mj = p.p_active_mw * p.inference_s  # mW * s = mJ

    active_day_j = inferences_per_day * e_per_inf_mj / 1000.0
    idle_day_j = (p.p_idle_mw / 1000.0) * (86400.0 - inferences_per_day * p.inference_s)
    duty_active_day_j = (p.p_active_mw / 1000.0) * duty * 86400.0
    duty_idle_day_j = (p.p_idle_mw / 1000.0) * (1.0 - duty) * 86400.0

    def j_to_mwh(j):
        return j / 3.6

    flags = [
        (f"unit audit: active energy {active_day_j:.1f} J/day = "
         f"{j_to_mwh(active_day_j):.1f} mWh/day; a daily figure of "
         f"~{active_day_j:.0f} mWh would conflate joules with milliwatt-hours"),
        (f"accounting audit: duty-cycle route books {duty_active_day_j:.0f} J/day "
         f"active ({duty:.1%} capture duty) vs {active_day_j:.1f} J/day on the "
         f"per-inference route; the duty cycle tracks audio capture, not compute"),
    ]
    return {
        "inferences_per_day": inferences_per_day,
        "duty_cycle": duty,
        "e_per_inference_mj": e_per_inf_mj,
        "per_inference_route": {
            "active_day_j": active_day_j,
            "idle_day_j": idle_day_j,
            "total_day_j": active_day_j + idle_day_j,
            "active_day_mwh": j_to_mwh(active_day_j),
            "total_day_mwh": j_to_mwh(active_day_j + idle_day_j),
        },
        "duty_cycle_route": {
            "active_day_j": duty_active_day_j,
            "idle_day_j": duty_idle_day_j,
            "total_day_j": duty_active_day_j + duty_idle_day_j,
            "active_day_mwh": j_to_mwh(duty_active_day_j),
            "total_day_mwh": j_to_mwh(duty_active_day_j + duty_idle_day_j),
        },
        "flags": flags,
    }


# ---------------------------------------------------------------------------
# leakage report and bit-width sweep


@dataclass
class LeakageReport:
    top1: float
    top5: float
    eer: float
    mi_bits: float
    mia_auc: float | None = None
    ci95: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.top1 > self.top5 + 1e-12:
            raise ValueError("top1 cannot exceed top5")

    def to_dict(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "eer": self.eer,
                "mi_bits": self.mi_bits, "mia_auc": self.mia_auc,
                "ci95": self.ci95}


def leakage_report(embs: np.ndarray, labels: np.ndarray,
                   enrollment_per_spk: int = 3, resamples: int = 1000,
                   seed: int = 0, mia_auc: float | None = None) -> LeakageReport:
    """Identity-leakage metrics for one embedding table, with bootstrap CIs."""
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels)
    top1 = topk_identification(embs, labels, k=1, enrollment_per_spk=enrollment_per_spk)
    top5 = topk_identification(embs, labels, k=5, enrollment_per_spk=enrollment_per_spk)
    trials = build_trials(embs, labels, enrollment_per_spk)
    eer = compute_eer(trials)
    mi = knn_mi(embs, labels)

    rows = np.arange(len(trials.scores))
    ci_eer = bootstrap_ci(
        lambda idx: compute_eer((trials.scores[idx.astype(int)],
                                 trials.is_target[idx.astype(int)])),
        rows, resamples=resamples, seed=seed)
    ci95 = {"eer": ci_eer}
    return LeakageReport(top1, top5, eer, mi, mia_auc, ci95)


CAPACITY_MATCHED = ((16, 8), (8, 16), (4, 32), (2, 64))  # (bits, dim) at 128 bits


def _train_and_measure(corpus, folds, bits: int, state_dim: int,
                       config: training.TrainConfig, seed: int,
                       encoder_state: dict | None, resamples: int) -> dict:
    """One sweep cell: fresh model per fold, shared encoder init, then metrics."""
    import torch

    rhos, top1s, eers, mis = [], [], [], []
    for fold_id, (train_idx, test_idx) in enumerate(folds):
        model = DualHeadModel(ModelConfig(state_bits=bits, state_dim=state_dim,
                                          personalized=False, seed=seed + fold_id))
        if encoder_state is not None:
            model.encoder.load_state_dict(
                {k: torch.as_tensor(v) for k, v in encoder_state.items()})
        training.train_staged(model, corpus.subset(train_idx), config,
                              float_epochs=config.epochs)

        test = corpus.subset(test_idx)
        out = model.embed_windows(test.windows)
        z_s = out["codes"].astype(np.float64) * out["scale"] \
            if bits != 16 else out["z_s"]
        preds = model.predict_agitation_batch(z_s)
        try:
            rhos.append(spearman_rho(preds, test.agitation))
        except ValueError:  # constant predictions: state path carries nothing
            rhos.append(0.0)
        top1s.append(topk_identification(z_s, test.speaker_ids, k=1))
        eers.append(compute_eer(build_trials(z_s, test.speaker_ids)))
        mis.append(knn_mi(z_s, test.speaker_ids))

    eer_arr = np.asarray(eers, dtype=np.float64)
    ci = (bootstrap_ci(np.mean, eer_arr, resamples=resamples, seed=seed)
          if len(eer_arr) > 1 else (float(eer_arr[0]), float(eer_arr[0])))
    return {
        "bits": bits, "state_dim": state_dim,
        "capacity_bits": capacity_bits(state_dim, bits),
        "rho": float(np.mean(rhos)), "top1": float(np.mean(top1s)),
        "eer": float(np.mean(eer_arr)), "mi_bits": float(np.mean(mis)),
        "eer_ci95": ci,
    }


@dataclass
class SweepReport:
    rows: list
    matched: list = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"rows": self.rows, "matched": self.matched}, fh,
                      indent=1, sort_keys=True)

    def to_csv(self, path: str | Path) -> None:
        import csv as _csv
        cols = ["bits", "state_dim", "capacity_bits", "rho", "top1", "eer",
                "mi_bits"]
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows + self.matched:
                writer.writerow([row[c] for c in cols])


def run_bitwidth_sweep(corpus, folds, bits_list=(2, 3, 4, 5, 6, 8, 16),
                       config: training.TrainConfig | None = None, seed: int = 0,
                       encoder_state: dict | None = None, resamples: int = 200,
                       include_capacity_matched: bool = False) -> SweepReport:
    """Retrain the state path at each width (32 dims, trait head at FP16) and
    measure state-embedding quality/leakage; optionally add the fixed-128-bit
    (bits, dim) trade-off rows."""
    if config is None:
        config = training.get_preset("impl", epochs=4)
    rows = [_train_and_measure(corpus, folds, b, 32, config, seed,
                               encoder_state, resamples) for b in bits_list]
    matched = []
    if include_capacity_matched:
        matched = [_train_and_measure(corpus, folds, b, d, config, seed,
                                      encoder_state, resamples)
                   for b, d in CAPACITY_MATCHED]
    return SweepReport(rows, matched)
