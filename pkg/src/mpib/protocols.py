"""Experiment drivers: reproducible train/evaluate cycles on the synthetic
corpus — capacity-matched disentanglement comparison, bit-width sweep at
experiment scale, trait-noise privacy trade-off, and the temporal-stability
protocol. Each driver returns a plain dict so reports serialize directly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from . import privacy, synth, training
from .model import DualHeadModel, ModelConfig
from .training import TrainConfig, TrainingData


@dataclass(frozen=True)
class ExperimentScale:
    """Compute budget knobs shared by every driver."""

    epochs: int = 5
    warm_epochs: int = 2
    qat_epochs: int = 0
    ft_epochs: int = 1
    steps_per_epoch: int | None = None
    pretrain_steps: int = 0
    batch_speakers: int = 16
    resamples: int = 200


def train_system(data: TrainingData, model_config: ModelConfig,
                 train_config: TrainConfig, scale: ExperimentScale) -> DualHeadModel:
    model = DualHeadModel(model_config)
    if scale.pretrain_steps:
        training.pretrain_tmae(model, data.windows, steps=scale.pretrain_steps,
                               seed=train_config.seed)
    training.train_staged(model, data, train_config,
                          float_epochs=scale.epochs,
                          warm_epochs=scale.warm_epochs,
                          qat_epochs=scale.qat_epochs,
                          ft_epochs=scale.ft_epochs,
                          steps_per_epoch=scale.steps_per_epoch)
    return model


def state_embeddings(model: DualHeadModel, windows: np.ndarray) -> np.ndarray:
    """Dequantized state matrix for a window stack (float path at 16 bits)."""
    out = model.embed_windows(windows)
    if model.config.state_bits == 16:
        return out["z_s"].astype(np.float64)
    return out["codes"].astype(np.float64) * out["scale"]


def evaluate_state_head(model: DualHeadModel, test: TrainingData,
                        enrollment_per_spk: int = 3) -> dict:
    """Leakage and utility of the state path on held-out windows."""
    z_s = state_embeddings(model, test.windows)
    preds = model.predict_agitation_batch(z_s)
    trials = ev.build_trials(z_s, test.speaker_ids, enrollment_per_spk)
    try:
        rho = ev.spearman_rho(preds, test.agitation)
        degenerate = False
    except ValueError:  # constant predictions: the state path carries nothing
        rho, degenerate = 0.0, True
    return {
        "top1": ev.topk_identification(z_s, test.speaker_ids, k=1,
                                       enrollment_per_spk=enrollment_per_spk),
        "eer": ev.compute_eer(trials),
        "mi_bits": ev.knn_mi(z_s, test.speaker_ids),
        "rho": rho,
        "degenerate_predictions": degenerate,
    }


# ---------------------------------------------------------------------------
# capacity-matched disentanglement (quantized 32x4bit vs FP16 8-dim)


def disentanglement_experiment(corpus: synth.Corpus, seed: int = 0,
                               scale: ExperimentScale = ExperimentScale(),
                               preset: str = "impl") -> dict:
    """Train the quantized state head and its capacity-matched float twin on a
    speaker-independent fold and compare identity leakage and utility."""
    folds = synth.speaker_independent_folds(corpus, k=5, seed=seed)
    train_idx, test_idx = folds.split(0)
    data = corpus.to_training_data()
    train, test = data.subset(train_idx), data.subset(test_idx)
    cfg = training.get_preset(preset, epochs=scale.epochs, seed=seed,
                              batch_speakers=scale.batch_speakers)

    arms = {}
    for name, bits, dim in (("int4_32d", 4, 32), ("fp16_8d", 16, 8)):
        model = train_system(train, ModelConfig(state_bits=bits, state_dim=dim,
                                                personalized=False, seed=seed),
                             cfg, scale)
        arms[name] = evaluate_state_head(model, test)
        arms[name]["capacity_bits"] = ev.capacity_bits(dim, bits)
    return {
        "arms": arms,
        "top1_ratio": arms["int4_32d"]["top1"] / max(arms["fp16_8d"]["top1"], 1e-12),
        "eer_gap": arms["int4_32d"]["eer"] - arms["fp16_8d"]["eer"],
        "rho_gap": arms["int4_32d"]["rho"] - arms["fp16_8d"]["rho"],
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# bit-width sweep at experiment scale


def bitwidth_experiment(corpus: synth.Corpus, bits_list=(2, 4, 8, 16),
                        seeds=(0, 1, 2), scale: ExperimentScale = ExperimentScale(),
                        preset: str = "impl") -> dict:
    """Per-seed sweep rows on one speaker-independent fold (identity leakage
    rises with precision; utility is expected to peak at an interior width)."""
    data = corpus.to_training_data()
    per_seed = {}
    for seed in seeds:
        folds = synth.speaker_independent_folds(corpus, k=5, seed=seed)
        split = folds.split(seed % folds.k)
        cfg = training.get_preset(preset, epochs=scale.epochs, seed=seed,
                                  batch_speakers=scale.batch_speakers)
        report = ev.run_bitwidth_sweep(data, [split], bits_list=bits_list,
                                       config=cfg, seed=seed,
                                       resamples=scale.resamples)
        per_seed[seed] = report.rows
    return {"bits_list": list(bits_list), "per_seed": per_seed}


def eer_non_increasing(rows: list, tolerance: float = 0.0) -> bool:
    eers = [r["eer"] for r in sorted(rows, key=lambda r: r["bits"])]
    return all(b <= a + tolerance for a, b in zip(eers, eers[1:]))


def rho_peaks_interior(rows: list) -> bool:
    rows = sorted(rows, key=lambda r: r["bits"])
    best = max(range(len(rows)), key=lambda i: rows[i]["rho"])
    return 0 < best < len(rows) - 1


# ---------------------------------------------------------------------------
# trait-noise privacy trade-off


def calibrate_sigma0(trait_embs: np.ndarray) -> float:
    """Unit noise scale: the median per-dimension standard deviation."""
    return float(np.median(np.asarray(trait_embs, np.float64).std(axis=0)))


def privacy_tradeoff(corpus: synth.Corpus, seed: int = 0,
                     scale: ExperimentScale = ExperimentScale(),
                     preset: str = "impl", sigma_grid=None) -> dict:
    """Noise-vs-utility rows over {0, sigma0, 10 sigma0} on trait embeddings.

    Members are the training speakers; the membership attack, identification,
    and the personalized agitation readout all run on identically perturbed
    trait embeddings so the three columns share one noise treatment.
    """
    folds = synth.speaker_independent_folds(corpus, k=5, seed=seed)
    member_idx, nonmember_idx = folds.split(0)
    data = corpus.to_training_data()
    members, nonmembers = data.subset(member_idx), data.subset(nonmember_idx)
    # the model trains on members' early sessions only, so the agitation probe
    # (members' final session) is genuinely held out
    early = np.isin(members.session_ids, (1, 2, 3))
    train = members.subset(np.nonzero(early)[0])
    probe = members.subset(np.nonzero(~early)[0])
    nonmem_match = nonmembers.subset(
        np.nonzero(np.isin(nonmembers.session_ids, (1, 2, 3)))[0])

    cfg = training.get_preset(preset, epochs=scale.epochs, seed=seed,
                              batch_speakers=scale.batch_speakers)
    model = train_system(train, ModelConfig(personalized=True, seed=seed),
                         cfg, scale)

    member_traits = model.embed_windows(train.windows)["z_t"].astype(np.float64)
    nonmember_traits = model.embed_windows(
        nonmem_match.windows)["z_t"].astype(np.float64)
    sigma0 = calibrate_sigma0(member_traits)
    if sigma_grid is None:
        sigma_grid = (0.0, sigma0, 10.0 * sigma0)
    z_s_probe = state_embeddings(model, probe.windows)

    rows = []
    for level, sigma in enumerate(sigma_grid):
        mem = privacy.perturb_trait(
            member_traits, privacy.NoiseConfig(sigma, seed * 101 + level))
        non = privacy.perturb_trait(
            nonmember_traits,
            privacy.NoiseConfig(sigma, seed * 101 + level + 50))
        mia = privacy.mia_evaluate(mem, non, seed=seed)
        top1 = ev.topk_identification(mem, train.speaker_ids, k=1)

        # profiles are the first three perturbed training traits per speaker
        profiles = np.empty((len(probe), member_traits.shape[1]))
        for spk in np.unique(probe.speaker_ids):
            donors = np.nonzero(train.speaker_ids == spk)[0][:3]
            profiles[probe.speaker_ids == spk] = np.median(mem[donors], axis=0)
        preds = model.predict_agitation_batch(z_s_probe, profiles)
        rho = ev.spearman_rho(preds, probe.agitation)
        rows.append({"sigma": float(sigma), "mia_auc": mia.auc,
                     "top1": top1, "rho": rho})
    return {"sigma0": sigma0, "rows": rows, "seed": seed}


# ---------------------------------------------------------------------------
# temporal stability


def temporal_experiment(corpus: synth.Corpus, seed: int = 0,
                        scale: ExperimentScale = ExperimentScale(),
                        preset: str = "impl", holdout_fraction: float = 0.25)\
        -> dict:
    """Train on the first two sessions, freeze per-speaker trait profiles, and
    compare the agitation readout on held-out early-session windows against
    the final session weeks later."""
    early_idx, late_idx = synth.temporal_split(corpus)
    data = corpus.to_training_data()
    early, late = data.subset(early_idx), data.subset(late_idx)

    rng = np.random.default_rng(seed)
    holdout_mask = np.zeros(len(early), dtype=bool)
    for spk in np.unique(early.speaker_ids):
        for ses in np.unique(early.session_ids):
            idx = np.nonzero((early.speaker_ids == spk)
                             & (early.session_ids == ses))[0]
            n_hold = max(1, int(round(holdout_fraction * len(idx))))
            # hold out a contiguous tail so training still sees consecutive pairs
            holdout_mask[idx[np.argsort(early.window_index[idx])][-n_hold:]] = True
    train = early.subset(np.nonzero(~holdout_mask)[0])
    insession = early.subset(np.nonzero(holdout_mask)[0])

    cfg = training.get_preset(preset, epochs=scale.epochs, seed=seed,
                              batch_speakers=scale.batch_speakers)
    model = train_system(train, ModelConfig(personalized=True, seed=seed),
                         cfg, scale)

    train_traits = model.embed_windows(train.windows)["z_t"].astype(np.float64)
    profiles = {}
    for spk in np.unique(train.speaker_ids):
        donors = np.nonzero(train.speaker_ids == spk)[0][:3]
        profiles[int(spk)] = np.median(train_traits[donors], axis=0)

    def readout(split: TrainingData) -> float:
        z_s = state_embeddings(model, split.windows)
        prof = np.stack([profiles[int(s)] for s in split.speaker_ids])
        preds = model.predict_agitation_batch(z_s, prof)
        return ev.spearman_rho(preds, split.agitation)

    rho_in = readout(insession)
    rho_temporal = readout(late)
    degradation = (rho_in - rho_temporal) / max(abs(rho_in), 1e-12)
    return {"rho_in_session": rho_in, "rho_temporal": rho_temporal,
            "relative_degradation": degradation, "seed": seed}
