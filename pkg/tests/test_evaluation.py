"""Metric, statistics, accounting, and sweep tests.

The rank/sign-rank/EER checks are verified against independent brute-force
oracles defined at the top of this file; distributional checks use analytic
expectations (chance rates, CLT widths, entropy ceilings).
"""

import itertools
import json
import re
import warnings

import numpy as np
import pytest
import scipy.stats

from mpib import evaluation as ev
from mpib import training
from mpib.training import TrainingData


# ---------------------------------------------------------------------------
# independent oracles


def oracle_eer(scores, is_target):
    """Scalar-loop FAR/FRR crossing with linear interpolation."""
    scores = np.asarray(scores, float)
    is_target = np.asarray(is_target, bool)
    tar = sorted(scores[is_target])
    non = sorted(scores[~is_target])
    cands = sorted(set(scores))
    cands = [cands[0] - 1.0] + cands + [cands[-1] + 1.0]

    def far(t):
        return sum(1 for s in non if s >= t) / len(non)

    def frr(t):
        return sum(1 for s in tar if s < t) / len(tar)

    prev = None
    for t in cands:
        cur = (far(t), frr(t))
        if cur[0] == cur[1]:
            return cur[0]
        if prev is not None and (prev[0] - prev[1]) * (cur[0] - cur[1]) < 0:
            fa, ra = prev
            fb, rb = cur
            w = (fa - ra) / ((fa - ra) - (fb - rb))
            return fa + w * (fb - fa)
        prev = cur
    raise AssertionError("no crossing found")


def oracle_wilcoxon(a, b):
    """Exact two-tailed signed-rank p by enumerating all 2^n sign patterns."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    ranks = scipy.stats.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    ws = [sum(r for r, bit in zip(ranks, bits) if bit)
          for bits in itertools.product((0, 1), repeat=len(d))]
    ws = np.asarray(ws)
    p_le = np.mean(ws <= w_obs + 1e-9)
    p_ge = np.mean(ws >= w_obs - 1e-9)
    return min(1.0, 2.0 * min(p_le, p_ge))


def oracle_spearman(pred, target):
    """Average-rank assignment by explicit tie groups, then textbook Pearson."""

    def ranks(x):
        x = np.asarray(x, float)
        out = np.empty(len(x))
        order = np.argsort(x, kind="stable")
        i = 0
        while i < len(x):
            j = i
            while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
                j += 1
            for pos in range(i, j + 1):
                out[order[pos]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return out

    ra, rb = ranks(pred), ranks(target)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra ** 2).sum() * (rb ** 2).sum()))


# ---------------------------------------------------------------------------
# identification and trials


class TestIdentification:
    def test_one_hot_embeddings_are_perfectly_identified(self):
        embs = np.repeat(np.eye(10), 5, axis=0)
        labels = np.repeat(np.arange(10), 5)
        assert ev.topk_identification(embs, labels, k=1) == 1.0

    def test_random_embeddings_score_at_chance(self):
        accs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            embs = rng.normal(size=(120 * 5, 16))
            labels = np.repeat(np.arange(120), 5)
            accs.append(ev.topk_identification(embs, labels, k=1))
        assert abs(np.mean(accs) - 1.0 / 120.0) <= 0.01

    def test_top5_at_least_top1(self):
        rng = np.random.default_rng(3)
        embs = rng.normal(size=(40 * 6, 8)) + 0.8 * np.repeat(
            rng.normal(size=(40, 8)), 6, axis=0)
        labels = np.repeat(np.arange(40), 6)
        top1 = ev.topk_identification(embs, labels, k=1)
        top5 = ev.topk_identification(embs, labels, k=5)
        assert top5 >= top1

    def test_speaker_without_enough_utterances_is_excluded(self):
        embs = np.vstack([np.eye(4)] * 4 + [np.ones((3, 4))])
        labels = np.concatenate([np.tile(np.arange(4), 4), [9, 9, 9]])
        with pytest.warns(UserWarning, match="speaker 9 excluded"):
            acc = ev.topk_identification(embs, labels, k=1)
        assert acc == 1.0

    def test_all_vs_all_trial_accounting(self):
        rng = np.random.default_rng(0)
        embs = rng.normal(size=(120 * 4, 8))
        labels = np.repeat(np.arange(120), 4)  # 3 enroll + 1 probe each
        trials = ev.build_trials(embs, labels)
        assert trials.n_trials == 14400
        assert trials.n_target == 120
        assert trials.n_nontarget == 14280

    def test_trial_text_serialization(self, tmp_path):
        rng = np.random.default_rng(1)
        embs = rng.normal(size=(5 * 4, 6))
        labels = np.repeat(np.arange(5), 4)
        trials = ev.build_trials(embs, labels)
        path = tmp_path / "trials.txt"
        trials.to_text(path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == trials.n_trials
        pat = re.compile(r"^\S+ \S+ (target|nontarget) -?\d+\.\d{6}$")
        assert all(pat.match(ln) for ln in lines)
        assert sum(" target " in ln for ln in lines) == trials.n_target

    def test_misaligned_trial_columns_rejected(self):
        with pytest.raises(ValueError, match="align"):
            ev.TrialList(np.zeros(3), np.zeros(2, bool), np.zeros(3), np.zeros(3))


class TestEer:
    def test_hand_built_four_trials(self):
        scores = np.array([0.9, 0.2, 0.8, 0.1])
        is_target = np.array([True, True, False, False])
        assert ev.compute_eer((scores, is_target)) == pytest.approx(0.5, abs=1e-12)
        assert oracle_eer(scores, is_target) == pytest.approx(0.5, abs=1e-12)

    def test_fully_separated_scores(self):
        scores = np.concatenate([np.full(50, 2.0), np.full(80, -2.0)])
        is_target = np.concatenate([np.ones(50, bool), np.zeros(80, bool)])
        assert ev.compute_eer((scores, is_target)) <= 1e-12

    def test_random_scores_sit_at_half(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=2000)
        is_target = np.arange(2000) < 1000
        assert abs(ev.compute_eer((scores, is_target)) - 0.5) <= 0.03

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        scores = np.concatenate([rng.normal(0.8, 1.0, 120),
                                 rng.normal(0.0, 1.0, 240)])
        is_target = np.arange(360) < 120
        got = ev.compute_eer((scores, is_target))
        want = oracle_eer(scores, is_target)
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 0.5

    def test_single_class_is_degenerate(self):
        with pytest.raises(ValueError, match="degenerate trials"):
            ev.compute_eer((np.ones(5), np.ones(5, bool)))


# ---------------------------------------------------------------------------
# mutual information


class TestKnnMi:
    def test_independent_labels_carry_no_information(self):
        # 2000 samples: the estimator is unbiased under independence but its
        # spread shrinks ~1/sqrt(N), and 0.05 bits needs N of this order
        for seed in range(5):
            rng = np.random.default_rng(seed)
            embs = rng.normal(size=(2000, 8))
            labels = rng.integers(0, 4, size=2000)
            assert abs(ev.knn_mi(embs, labels)) <= 0.05

    def test_eight_separated_clusters_reach_three_bits(self):
        rng = np.random.default_rng(11)
        corners = np.array(list(itertools.product((0.0, 4.0), repeat=3)))
        embs = np.concatenate([c + 0.05 * rng.normal(size=(50, 3))
                               for c in corners])
        labels = np.repeat(np.arange(8), 50)
        mi = ev.knn_mi(embs, labels)
        assert abs(mi - 3.0) <= 0.3

    @pytest.mark.parametrize("n_classes", [2, 4, 8])
    def test_separated_clusters_hit_log2_c(self, n_classes):
        rng = np.random.default_rng(n_classes)
        centers = 10.0 * rng.normal(size=(n_classes, 5))
        per = 360 // n_classes
        embs = np.concatenate([c + 0.1 * rng.normal(size=(per, 5))
                               for c in centers])
        labels = np.repeat(np.arange(n_classes), per)
        mi = ev.knn_mi(embs, labels)
        assert abs(mi - np.log2(n_classes)) <= 0.1 * np.log2(n_classes)

    def test_duplicating_the_dataset_barely_moves_the_estimate(self):
        rng = np.random.default_rng(5)
        centers = 8.0 * rng.normal(size=(4, 4))
        embs = np.concatenate([c + 0.1 * rng.normal(size=(30, 4))
                               for c in centers])
        labels = np.repeat(np.arange(4), 30)
        base = ev.knn_mi(embs, labels)
        dup = ev.knn_mi(np.concatenate([embs, embs]),
                        np.concatenate([labels, labels]))
        assert abs(dup - base) < 0.1

    def test_tiny_class_is_excluded_with_warning(self):
        rng = np.random.default_rng(2)
        embs = np.concatenate([rng.normal(size=(30, 3)),
                               rng.normal(size=(30, 3)) + 6.0,
                               rng.normal(size=(3, 3)) - 6.0])
        labels = np.array([0] * 30 + [1] * 30 + [2] * 3)
        with pytest.warns(UserWarning, match="class 2 excluded"):
            mi = ev.knn_mi(embs, labels, k=3)
        assert abs(mi - 1.0) <= 0.15

    def test_all_classes_too_small_is_an_error(self):
        with pytest.raises(ValueError, match="usable classes"), \
                warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ev.knn_mi(np.zeros((6, 2)), np.array([0, 0, 1, 1, 2, 2]), k=3)


# ---------------------------------------------------------------------------
# rank statistics


class TestSpearman:
    def test_monotone_is_one(self):
        x = np.array([0.1, 0.4, 1.2, 3.0, 9.0])
        assert ev.spearman_rho(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)
        assert ev.spearman_rho(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_tied_example_matches_rank_oracle(self):
        pred = np.array([1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0, 7.0])
        target = np.array([2.0, 1.0, 4.0, 3.0, 5.0, 5.0, 8.0, 6.0])
        got = ev.spearman_rho(pred, target)
        assert got == pytest.approx(oracle_spearman(pred, target), abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_tied_data_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = np.round(rng.normal(size=40), 1)  # rounding manufactures ties
        target = np.round(rng.normal(size=40) + 0.5 * pred, 1)
        assert ev.spearman_rho(pred, target) == pytest.approx(
            oracle_spearman(pred, target), abs=1e-12)

    def test_constant_sequence_is_undefined(self):
        with pytest.raises(ValueError, match="undefined correlation"):
            ev.spearman_rho(np.ones(5), np.arange(5.0))

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="length >= 3"):
            ev.spearman_rho(np.array([1.0, 2.0]), np.array([2.0, 1.0]))


class TestBootstrap:
    def test_constant_data_gives_degenerate_interval(self):
        lo, hi = ev.bootstrap_ci(np.mean, np.full(50, 5.0))
        assert lo == hi == 5.0

    def test_width_matches_clt_for_the_mean(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=1000)
        lo, hi = ev.bootstrap_ci(np.mean, data, resamples=1000, seed=1)
        expected = 2.0 * 1.96 / np.sqrt(1000.0)
        assert abs((hi - lo) - expected) <= 0.3 * expected
        assert lo <= np.mean(data) <= hi

    def test_seeded_and_deterministic(self):
        data = np.arange(30.0)
        assert ev.bootstrap_ci(np.median, data, seed=9) == \
            ev.bootstrap_ci(np.median, data, seed=9)

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            ev.bootstrap_ci(np.mean, np.array([]))


class TestWilcoxon:
    def test_five_same_sign_pairs_hit_the_exact_floor(self):
        a = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        b = a - 1.0
        assert ev.wilcoxon_paired(a, b) == pytest.approx(0.0625, abs=1e-15)
        assert oracle_wilcoxon(a, b) == pytest.approx(0.0625, abs=1e-15)

    @pytest.mark.parametrize("seed,n", [(0, 6), (1, 8), (2, 10), (3, 9)])
    def test_matches_sign_enumeration_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        a = np.round(rng.normal(size=n) * 2.0, 0) / 2.0  # ties via 0.5 grid
        b = np.round(rng.normal(size=n) * 2.0, 0) / 2.0
        if np.all(a == b):
            a = a + 0.5
        assert ev.wilcoxon_paired(a, b) == pytest.approx(
            oracle_wilcoxon(a, b), abs=1e-12)

    def test_all_zero_differences_is_no_signal(self):
        with pytest.raises(ValueError, match="no signal"):
            ev.wilcoxon_paired(np.ones(6), np.ones(6))

    def test_large_n_uses_the_asymptotic_tail(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=40)
        p_null = ev.wilcoxon_paired(a, a + rng.normal(0, 1, 40))
        p_shift = ev.wilcoxon_paired(a + 2.0, a)
        assert 0.0 < p_null <= 1.0
        assert p_shift < 1e-4

    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValueError, match="length >= 5"):
            ev.wilcoxon_paired(np.ones(4), np.ones(4))


# ---------------------------------------------------------------------------
# capacity / size / energy


class TestCapacityAndSize:
    @pytest.mark.parametrize("d,b,want", [(32, 4, 128), (64, 16, 1024), (1, 1, 1)])
    def test_capacity_values(self, d, b, want):
        assert ev.capacity_bits(d, b) == want

    def test_capacity_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ev.capacity_bits(0, 4)

    def test_component_byte_sizes(self):
        report = ev.model_size_report([("state_head", 4128, 4),
                                       ("trait_head", 8256, 16)])
        assert report["components"]["state_head"]["bytes"] == 2064.0
        assert report["components"]["trait_head"]["bytes"] == 16512.0
        assert report["components"]["trait_head"]["kb"] == pytest.approx(16.512)
        assert report["total_bytes"] == 18576.0
        assert report["flags"] == []

    def test_nominal_mismatch_is_flagged(self):
        report = ev.model_size_report([("trait_head", 8256, 16)],
                                      nominal_kb={"trait_head": 16.6})
        assert len(report["flags"]) == 1
        assert "16.5 KB" in report["flags"][0]
        assert "16.6 KB" in report["flags"][0]
        close = ev.model_size_report([("trait_head", 8256, 16)],
                                     nominal_kb={"trait_head": 16.5})
        assert close["flags"] == []

    def test_zero_components(self):
        assert ev.model_size_report([])["total_bytes"] == 0.0


class TestEnergy:
    def test_reference_accounting(self):
        report = ev.energy_report(ev.EnergyParams())
        assert report["inferences_per_day"] == pytest.approx(17280.0)
        assert report["duty_cycle"] == pytest.approx(0.128)
        assert report["e_per_inference_mj"] == pytest.approx(2.574)
        per = report["per_inference_route"]
        assert per["active_day_j"] == pytest.approx(44.47872)
        assert per["active_day_mwh"] == pytest.approx(12.3552)

    def test_unit_conflation_flag_present(self):
        flags = ev.energy_report()["flags"]
        assert "44.5 J/day = 12.4 mWh/day" in flags[0]
        assert "~44 mWh" in flags[0]
        assert "conflate" in flags[0]

    def test_the_two_routes_disagree_and_are_both_reported(self):
        report = ev.energy_report()
        duty = report["duty_cycle_route"]["active_day_j"]
        per = report["per_inference_route"]["active_day_j"]
        assert duty == pytest.approx(1216.512)
        assert duty > 10.0 * per
        assert "capture" in report["flags"][1]

    def test_zero_active_power_means_idle_only(self):
        report = ev.energy_report(ev.EnergyParams(p_active_mw=0.0))
        assert report["per_inference_route"]["active_day_j"] == 0.0
        assert report["per_inference_route"]["total_day_j"] == pytest.approx(
            report["per_inference_route"]["idle_day_j"])

    def test_bad_parameters_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ev.EnergyParams(cadence_s=0.0)


# ---------------------------------------------------------------------------
# leakage report and sweep


def make_corpus(n_speakers=6, n_sessions=3, n_windows=8, seed=0):
    rng = np.random.default_rng(seed)
    bands = np.linspace(0.0, 1.0, 96)[:, None]
    frames = np.linspace(0.0, 1.0, 64)[None, :]
    rows = []
    meta = []
    for spk in range(n_speakers):
        for ses in range(n_sessions):
            for t in range(n_windows):
                agit = rng.uniform(0.0, 4.0)
                pattern = (2.0 * np.sin(2 * np.pi * 3 * bands)
                           + 0.5 * np.sin(2 * np.pi * 5 * bands + 0.9 * spk))
                env = 1.0 + 0.25 * agit * np.sin(2 * np.pi * (2 * frames + 0.2 * t))
                rows.append(pattern * env + 0.2 * rng.normal(size=(96, 64)))
                meta.append((spk, ses, t, agit))
    spks, sess, widx, agits = map(np.asarray, zip(*meta))
    return TrainingData(np.asarray(rows, np.float32), spks, sess, widx,
                        agits.astype(np.float64))


@pytest.fixture(scope="module")
def corpus():
    return make_corpus()


class TestLeakageReport:
    def test_report_on_separable_embeddings(self):
        rng = np.random.default_rng(6)
        centers = 3.0 * rng.normal(size=(12, 16))
        embs = np.repeat(centers, 8, axis=0) + rng.normal(size=(96, 16))
        labels = np.repeat(np.arange(12), 8)
        report = ev.leakage_report(embs, labels, resamples=200)
        assert report.top1 <= report.top5 <= 1.0
        assert 0.0 <= report.eer <= 0.5
        assert report.mi_bits > 0.5
        lo, hi = report.ci95["eer"]
        assert lo <= report.eer <= hi
        d = report.to_dict()
        assert set(d) == {"top1", "top5", "eer", "mi_bits", "mia_auc", "ci95"}

    def test_top1_cannot_exceed_top5(self):
        with pytest.raises(ValueError, match="top1 cannot exceed top5"):
            ev.LeakageReport(top1=0.9, top5=0.5, eer=0.1, mi_bits=1.0)


class TestSweep:
    def test_rows_schema_capacity_and_determinism(self, corpus):
        train_idx = np.nonzero(corpus.session_ids < 2)[0]
        test_idx = np.nonzero(corpus.session_ids == 2)[0]
        cfg = training.get_preset("impl", epochs=2, batch_speakers=6)
        kwargs = dict(corpus=corpus, folds=[(train_idx, test_idx)],
                      bits_list=(4, 16), config=cfg, seed=0, resamples=50)
        rep_a = ev.run_bitwidth_sweep(**kwargs)
        rep_b = ev.run_bitwidth_sweep(**kwargs)
        assert rep_a.rows == rep_b.rows
        assert [r["capacity_bits"] for r in rep_a.rows] == [128, 512]
        for row in rep_a.rows:
            assert set(row) == {"bits", "state_dim", "capacity_bits", "rho",
                                "top1", "eer", "mi_bits", "eer_ci95"}
            assert 0.0 <= row["top1"] <= 1.0
            assert 0.0 <= row["eer"] <= 1.0
            assert -1.0 <= row["rho"] <= 1.0

    def test_report_serialization(self, tmp_path):
        rows = [{"bits": 4, "state_dim": 32, "capacity_bits": 128,
                 "rho": 0.5, "top1": 0.2, "eer": 0.3, "mi_bits": 1.0,
                 "eer_ci95": (0.2, 0.4)}]
        rep = ev.SweepReport(rows)
        rep.to_json(tmp_path / "sweep.json")
        rep.to_csv(tmp_path / "sweep.csv")
        loaded = json.loads((tmp_path / "sweep.json").read_text())
        assert loaded["rows"][0]["capacity_bits"] == 128
        lines = (tmp_path / "sweep.csv").read_text().strip().split("\n")
        assert lines[0] == "bits,state_dim,capacity_bits,rho,top1,eer,mi_bits"
        assert len(lines) == 2

    def test_capacity_matched_configs_all_sit_at_128_bits(self):
        for bits, dim in ev.CAPACITY_MATCHED:
            assert ev.capacity_bits(dim, bits) == 128
