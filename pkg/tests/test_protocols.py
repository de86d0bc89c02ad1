"""Experiment-driver tests at smoke scale.

Full-scale behavior (leakage separation, sweep trends, noise trade-off
directions) belongs to the acceptance suite; here a 10-speaker corpus checks
that every driver wires data, folds, training, and metrics together into the
documented report schema, plus unit tests for the pure helper predicates.
"""

import numpy as np
import pytest

from mpib import protocols, synth
from mpib.model import DualHeadModel, ModelConfig
from mpib.training import TrainingData


@pytest.fixture(scope="module")
def corpus():
    return synth.generate_corpus(n_speakers=10, sessions=4,
                                 windows_per_session=4, seed=3)


@pytest.fixture(scope="module")
def smoke_scale():
    return protocols.ExperimentScale(epochs=1, warm_epochs=0, qat_epochs=1,
                                     ft_epochs=1, batch_speakers=4,
                                     resamples=20)


# ---------------------------------------------------------------------------
# pure helpers


def test_eer_non_increasing_predicate():
    rows = [{"bits": b, "eer": e}
            for b, e in ((2, 0.48), (4, 0.40), (8, 0.40), (16, 0.31))]
    assert protocols.eer_non_increasing(rows)
    rows[1]["eer"] = 0.20  # dip then rise breaks monotonicity
    assert not protocols.eer_non_increasing(rows)
    assert protocols.eer_non_increasing(rows, tolerance=0.25)


def test_rho_peaks_interior_predicate():
    def rows(rhos):
        return [{"bits": b, "rho": r} for b, r in zip((2, 4, 8, 16), rhos)]

    assert protocols.rho_peaks_interior(rows([0.1, 0.5, 0.4, 0.3]))
    assert not protocols.rho_peaks_interior(rows([0.6, 0.5, 0.4, 0.3]))
    assert not protocols.rho_peaks_interior(rows([0.1, 0.2, 0.3, 0.6]))


def test_calibrate_sigma0_is_median_per_dim_std(rng):
    embs = rng.normal(size=(40, 6)) * np.arange(1.0, 7.0)
    expected = float(np.median(embs.std(axis=0)))
    assert protocols.calibrate_sigma0(embs) == pytest.approx(expected)


def test_evaluate_state_head_flags_degenerate_predictions(corpus):
    model = DualHeadModel(ModelConfig(personalized=False, seed=0))
    data = corpus.to_training_data().subset(np.arange(24))
    flat = TrainingData(data.windows, data.speaker_ids, data.session_ids,
                        data.window_index, np.full(len(data), 2.0))
    report = protocols.evaluate_state_head(model, flat)
    assert report["degenerate_predictions"] is True
    assert report["rho"] == 0.0


# ---------------------------------------------------------------------------
# drivers at smoke scale


def test_disentanglement_schema(corpus, smoke_scale):
    from dataclasses import replace

    res = protocols.disentanglement_experiment(
        corpus, seed=1, scale=replace(smoke_scale, pretrain_steps=2))
    assert set(res["arms"]) == {"int4_32d", "fp16_8d"}
    for arm in res["arms"].values():
        assert arm["capacity_bits"] == 128
        assert 0.0 <= arm["top1"] <= 1.0
        assert 0.0 <= arm["eer"] <= 1.0
        assert -1.0 <= arm["rho"] <= 1.0
    a, b = res["arms"]["int4_32d"], res["arms"]["fp16_8d"]
    assert res["top1_ratio"] == pytest.approx(a["top1"] / max(b["top1"], 1e-12))
    assert res["eer_gap"] == pytest.approx(a["eer"] - b["eer"])
    assert res["rho_gap"] == pytest.approx(a["rho"] - b["rho"])
    assert res["seed"] == 1


def test_bitwidth_experiment_schema(corpus, smoke_scale):
    res = protocols.bitwidth_experiment(corpus, bits_list=(4, 16), seeds=(0,),
                                        scale=smoke_scale)
    assert res["bits_list"] == [4, 16]
    rows = res["per_seed"][0]
    assert [r["bits"] for r in rows] == [4, 16]
    assert [r["capacity_bits"] for r in rows] == [128, 512]
    for row in rows:
        assert row["state_dim"] == 32
        assert {"rho", "top1", "eer", "mi_bits", "eer_ci95"} <= set(row)
    # the predicates accept driver rows directly
    protocols.eer_non_increasing(rows)


def test_privacy_tradeoff_schema(corpus, smoke_scale):
    res = protocols.privacy_tradeoff(corpus, seed=0, scale=smoke_scale)
    assert res["sigma0"] > 0
    sigmas = [row["sigma"] for row in res["rows"]]
    assert sigmas == [0.0, pytest.approx(res["sigma0"]),
                      pytest.approx(10 * res["sigma0"])]
    for row in res["rows"]:
        assert 0.0 <= row["mia_auc"] <= 1.0
        assert 0.0 <= row["top1"] <= 1.0
        assert -1.0 <= row["rho"] <= 1.0


def test_temporal_experiment_schema(corpus, smoke_scale):
    res = protocols.temporal_experiment(corpus, seed=0, scale=smoke_scale)
    for key in ("rho_in_session", "rho_temporal"):
        assert -1.0 <= res[key] <= 1.0
    assert np.isfinite(res["relative_degradation"])
