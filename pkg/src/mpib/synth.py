"""Synthetic trait/state corpus with recorded ground truth.

Spectrogram-like matrices are synthesized parametrically — harmonic stacks at
speaker-specific band offsets on top of a speaker-specific smooth template,
with amplitude/positional jitter scaled by per-window state factors and an
additive noise floor. No waveform vocoding: the point is a corpus where both
the identity signal and the state signal are known exactly, so every
disentanglement claim downstream becomes a measurable directional experiment.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureMatrix, save_features
from .training import TrainingData

AGITATION_MEAN = 1.42
AGITATION_STD = 0.89
SESSION_AUTOCORR = 0.7
NOISE_FRACTION = 0.123

# Identity-cue amplitudes. Deliberately small next to the state cues: the
# corpus is built to measure how much identity survives a precision
# bottleneck, so the identity signal must be real but must not dominate the
# window-to-window variation the state path is trained to carry.
TEMPLATE_WEIGHT = 0.8
PITCH_OFFSET_RANGE = 0.025
ENERGY_BIAS_STD = 0.15
SESSIONS = (1, 2, 3, 4)
WINDOW_SPACING_S = 5.0
SESSION_SPACING_S = 7.0 * 86400.0  # weekly sessions: #4 trails #1 by 3 weeks

N_BANDS = 96
N_FRAMES = 64

MANIFEST_COLUMNS = ("sample_id", "speaker_id", "session", "timestamp",
                    "agitation", "pseudo_demographic", "feature_file")


@dataclass(frozen=True)
class SpeakerFactors:
    """Identity ground truth; constant across all of a speaker's sessions."""

    base_pitch_offset: float
    formant_pattern_seed: int
    energy_bias: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "SpeakerFactors":
        return cls(base_pitch_offset=float(rng.uniform(-PITCH_OFFSET_RANGE,
                                                       PITCH_OFFSET_RANGE)),
                   formant_pattern_seed=int(rng.integers(0, 2 ** 31)),
                   energy_bias=float(rng.normal(0.0, ENERGY_BIAS_STD)))


@dataclass(frozen=True)
class StateFactors:
    """State ground truth; the gains are monotone in agitation."""

    agitation: float

    def __post_init__(self):
        if not 0.0 <= self.agitation <= 4.0:
            raise ValueError("agitation must lie in [0, 4]")

    @property
    def pitch_variance_gain(self) -> float:
        return 0.004 + 0.004 * self.agitation

    @property
    def rate_gain(self) -> float:
        return 1.0 + 0.5 * self.agitation

    @property
    def energy_variance_gain(self) -> float:
        return 0.08 + 0.10 * self.agitation


def _speaker_template(factors: SpeakerFactors) -> np.ndarray:
    """Smooth per-speaker band profile (the stand-in for habitual timbre)."""
    rng = np.random.default_rng(factors.formant_pattern_seed)
    bands = np.linspace(0.0, 1.0, N_BANDS)
    template = np.zeros(N_BANDS)
    for _ in range(3):
        template += rng.uniform(0.3, 0.7) * np.cos(
            2.0 * np.pi * rng.uniform(1.0, 4.0) * bands + rng.uniform(0, 2 * np.pi))
    return 1.6 + template


# Hinge-gated band patterns: pattern k fades in once agitation crosses its
# threshold, so the pooled spectrum encodes agitation along several independent
# directions (a curve, not a line).  Pattern frequencies sit above the
# speaker-template range, keeping the state signature spectrally separate from
# identity cues.
SIGNATURE_PATTERNS = 6
SIGNATURE_THRESHOLDS = np.linspace(0.35, 3.10, SIGNATURE_PATTERNS)
SIGNATURE_GAIN = 0.22


def _signature_bank() -> np.ndarray:
    """[SIGNATURE_PATTERNS, N_BANDS] fixed band patterns shared by all speakers."""
    bands = np.linspace(0.0, 1.0, N_BANDS)[None, :]
    k = np.arange(SIGNATURE_PATTERNS)[:, None]
    # golden-angle phase spacing decorrelates the patterns from each other
    return np.cos(2.0 * np.pi * (6.5 + k) * bands + 2.399963 * k)


def render_window(factors: SpeakerFactors, state: StateFactors,
                  rng: np.random.Generator, inject_noise: bool = False) -> np.ndarray:
    """One [96 x 64] matrix from the two ground-truth factor sets."""
    bands = np.linspace(0.0, 1.0, N_BANDS)[:, None]
    frames = np.linspace(0.0, 1.0, N_FRAMES)[None, :]

    # harmonic stack: fundamental band position is a speaker trait, its
    # frame-to-frame wander scales with agitation
    f0 = 0.10 + factors.base_pitch_offset
    kernel = np.hanning(5)
    kernel /= kernel.sum()
    wander = np.convolve(rng.standard_normal(N_FRAMES + 4), kernel, "valid")
    f0_t = f0 + state.pitch_variance_gain * (wander / 0.5)[None, :]
    harmonics = np.zeros((N_BANDS, N_FRAMES))
    for h in range(1, 6):
        harmonics += (1.0 / h) * np.exp(
            -((bands - h * f0_t) ** 2) / (2.0 * 0.012 ** 2))

    envelope = 1.0 + state.energy_variance_gain * np.sin(
        2.0 * np.pi * state.rate_gain * frames + rng.uniform(0, 2 * np.pi))
    frame_gain = np.exp(0.4 * state.energy_variance_gain
                        * rng.standard_normal((1, N_FRAMES)))
    # the tilt, overall level shift, and threshold-gated signature patterns are
    # frame-constant, so agitation stays visible to encoders that average
    # frames away
    tilt = 0.9 * state.agitation * (bands - 0.5)
    level = 1.0 + 0.12 * state.agitation
    gates = np.maximum(0.0, state.agitation - SIGNATURE_THRESHOLDS)
    signature = SIGNATURE_GAIN * (gates @ _signature_bank())[:, None]

    x = (TEMPLATE_WEIGHT * _speaker_template(factors)[:, None] + 2.2 * harmonics)
    x = x * envelope * frame_gain * np.exp(factors.energy_bias) * level
    x = x + tilt + signature + 0.02 + 0.05 * rng.standard_normal((N_BANDS, N_FRAMES))
    if inject_noise:
        x = x + 0.9 * rng.standard_normal((N_BANDS, N_FRAMES))
    return x.astype(np.float32)


def frame_energy_variance(window: np.ndarray) -> float:
    """Variance across frames of per-frame mean band energy (state statistic)."""
    return float(np.var(np.asarray(window, np.float64).mean(axis=0)))


@dataclass
class Corpus:
    features: np.ndarray          # [N, 96, 64] float32
    speaker_ids: np.ndarray       # [N]
    sessions: np.ndarray          # [N], values in SESSIONS
    window_index: np.ndarray      # [N], consecutive within a session
    timestamps: np.ndarray        # [N] seconds
    agitation: np.ndarray         # [N] in [0, 4]
    pseudo_demographic: np.ndarray  # [N] binary, constant per speaker
    noise_injected: np.ndarray    # [N] bool
    factors: dict                 # speaker_id -> SpeakerFactors

    def __post_init__(self):
        n = len(self.features)
        cols = (self.speaker_ids, self.sessions, self.window_index,
                self.timestamps, self.agitation, self.pseudo_demographic,
                self.noise_injected)
        if any(len(c) != n for c in cols):
            raise ValueError("corpus columns must align with features")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_speakers(self) -> int:
        return len(np.unique(self.speaker_ids))

    def subset(self, indices) -> "Corpus":
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        kept = set(np.unique(self.speaker_ids[idx]).tolist())
        return Corpus(self.features[idx], self.speaker_ids[idx],
                      self.sessions[idx], self.window_index[idx],
                      self.timestamps[idx], self.agitation[idx],
                      self.pseudo_demographic[idx], self.noise_injected[idx],
                      {s: f for s, f in self.factors.items() if s in kept})

    def to_training_data(self) -> TrainingData:
        return TrainingData(self.features, self.speaker_ids, self.sessions,
                            self.window_index, self.agitation)

    def save(self, directory: str | Path) -> Path:
        """Write manifest.csv plus one feature-cache file per sample."""
        directory = Path(directory)
        feat_dir = directory / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        manifest = directory / "manifest.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_COLUMNS)
            for i in range(len(self)):
                rel = f"features/sample_{i:06d}.mpib"
                save_features(FeatureMatrix(self.features[i].T),
                              directory / rel)
                writer.writerow([i, self.speaker_ids[i], self.sessions[i],
                                 f"{self.timestamps[i]:.1f}",
                                 f"{self.agitation[i]:.6f}",
                                 self.pseudo_demographic[i], rel])
        return manifest


def _agitation_chain(n: int, rng: np.random.Generator, mean: float,
                     std: float, autocorr: float) -> np.ndarray:
    """AR(1) with the requested stationary moments, clipped into [0, 4]."""
    x = np.empty(n)
    x[0] = mean + std * rng.standard_normal()
    innov = std * np.sqrt(1.0 - autocorr ** 2)
    for t in range(1, n):
        x[t] = mean + autocorr * (x[t - 1] - mean) + innov * rng.standard_normal()
    return np.clip(x, 0.0, 4.0)


def generate_corpus(n_speakers: int = 120, sessions: int = 4,
                    windows_per_session: int = 20, seed: int = 0,
                    noise_fraction: float = NOISE_FRACTION,
                    agitation_mean: float = AGITATION_MEAN,
                    agitation_std: float = AGITATION_STD,
                    autocorr: float = SESSION_AUTOCORR) -> Corpus:
    """Deterministic corpus with per-speaker derived random streams."""
    if n_speakers < 10:
        raise ValueError("need >= 10 speakers for a usable corpus")
    rows, meta = [], []
    factors = {}
    demo = {}
    for spk in range(n_speakers):
        spk_rng = np.random.default_rng([seed, 17, spk])
        factors[spk] = SpeakerFactors.draw(spk_rng)
        demo[spk] = int(spk_rng.integers(0, 2))
        for ses in SESSIONS[:sessions]:
            ses_rng = np.random.default_rng([seed, 23, spk, ses])
            agit = _agitation_chain(windows_per_session, ses_rng,
                                    agitation_mean, agitation_std, autocorr)
            for t in range(windows_per_session):
                state = StateFactors(float(agit[t]))
                rows.append(render_window(factors[spk], state, ses_rng))
                ts = (ses - 1) * SESSION_SPACING_S + t * WINDOW_SPACING_S
                meta.append((spk, ses, t, ts, agit[t], demo[spk]))

    spks, sess, widx, ts, agits, demos = map(np.asarray, zip(*meta))
    features = np.asarray(rows, np.float32)
    n = len(features)
    noise = np.zeros(n, dtype=bool)
    n_noise = int(round(noise_fraction * n))
    if n_noise:
        pick_rng = np.random.default_rng([seed, 29])
        pick = pick_rng.choice(n, size=n_noise, replace=False)
        noise[pick] = True
        features[pick] += 0.9 * pick_rng.standard_normal(
            (n_noise, N_BANDS, N_FRAMES)).astype(np.float32)
    return Corpus(features, spks, sess, widx, ts.astype(np.float64),
                  agits.astype(np.float64), demos, noise, factors)


# ---------------------------------------------------------------------------
# fold construction


@dataclass(frozen=True)
class Folds:
    """Speaker-level partition: every sample of a speaker sits in one fold."""

    speaker_fold: dict            # speaker_id -> fold
    sample_fold: np.ndarray       # [N]
    k: int

    def indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.sample_fold == fold)[0]

    def split(self, fold: int) -> tuple:
        return (np.nonzero(self.sample_fold != fold)[0], self.indices(fold))

    def splits(self) -> list:
        return [self.split(f) for f in range(self.k)]


def speaker_independent_folds(corpus: Corpus, k: int = 5, seed: int = 0) -> Folds:
    """Stratified speaker-level k-fold: speakers sorted by mean agitation and
    snake-assigned so fold sizes stay within one speaker and strata balance."""
    speakers = np.unique(corpus.speaker_ids)
    if k > len(speakers):
        raise ValueError(f"k={k} exceeds {len(speakers)} speakers")
    means = np.array([corpus.agitation[corpus.speaker_ids == s].mean()
                      for s in speakers])
    jitter = np.random.default_rng(seed).uniform(0, 1e-9, len(speakers))
    order = np.argsort(means + jitter)

    pattern = list(range(k)) + list(range(k - 1, -1, -1))
    speaker_fold = {}
    for pos, spk_idx in enumerate(order):
        speaker_fold[int(speakers[spk_idx])] = pattern[pos % len(pattern)]
    sample_fold = np.array([speaker_fold[int(s)] for s in corpus.speaker_ids])
    return Folds(speaker_fold, sample_fold, k)


def temporal_split(corpus: Corpus, train_sessions=(1, 2),
                   test_sessions=(4,)) -> tuple:
    """Session-disjoint split; the default leaves session 3 unused."""
    train_sessions = set(train_sessions)
    test_sessions = set(test_sessions)
    if train_sessions & test_sessions:
        raise ValueError("train and test sessions overlap")
    present = set(np.unique(corpus.sessions).tolist())
    missing = (train_sessions | test_sessions) - present
    if missing:
        raise ValueError(f"sessions absent from corpus: {sorted(missing)}")
    train_idx = np.nonzero(np.isin(corpus.sessions, sorted(train_sessions)))[0]
    test_idx = np.nonzero(np.isin(corpus.sessions, sorted(test_sessions)))[0]
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError("empty split side")
    return train_idx, test_idx
