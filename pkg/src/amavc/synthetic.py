"""Seeded multi-speaker synthetic corpora of (PPG, MCC, LF0) triples.

Each frame's content latent is a point on the PPG simplex. Every speaker owns
an affine map that renders content into MCC space, so a regression from PPG
to MCC is learnable by construction and speaker identity lives entirely in
the map (plus the speaker's f0 statistics).
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from pathlib import Path

import numpy as np

from .errors import DegenerateCorpus, InvalidConfig, IoFailure
from .features import (
    UNVOICED,
    CorpusManifest,
    FeatureDims,
    FeatureKind,
    FeatureSequence,
    UtteranceRecord,
    write_feature_file,
)

DIRICHLET_CONCENTRATION = 0.5
ADAPT_UTTS, EVAL_UTTS = 50, 20


@dataclasses.dataclass
class SynthesisConfig:
    n_speakers: int = 6
    utterances_per_speaker: int = 40
    frames_per_utterance: tuple[int, int] = (100, 200)
    ppg_dim: int = 16
    mcc_dim: int = 20
    speaker_map_scale: float = 0.5
    noise_std: float = 0.5
    lf0_mean_range: tuple[float, float] = (4.4, 5.6)
    lf0_std_range: tuple[float, float] = (0.1, 0.3)
    seed: int = 7
    # speakers at the end of the list are held out of the train split and
    # get adapt/eval splits instead
    n_target_speakers: int = 2
    # number of latent factors spanning inter-speaker variation; 0 gives every
    # speaker an independent full-rank deviation
    speaker_factors: int = 2
    unvoiced_prob: float = 0.2
    corpus_name: str = "synthetic"

    def __post_init__(self):
        self.frames_per_utterance = tuple(self.frames_per_utterance)
        self.lf0_mean_range = tuple(self.lf0_mean_range)
        self.lf0_std_range = tuple(self.lf0_std_range)

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise InvalidConfig("n_speakers must be >= 2")
        if not 0 <= self.n_target_speakers < self.n_speakers:
            raise InvalidConfig("n_target_speakers must leave at least one training speaker")
        if self.utterances_per_speaker < 2:
            raise InvalidConfig("utterances_per_speaker must be >= 2")
        lo, hi = self.frames_per_utterance
        if not 1 <= lo <= hi:
            raise InvalidConfig(f"bad frames_per_utterance range {self.frames_per_utterance}")
        if self.ppg_dim < 2 or self.mcc_dim < 1:
            raise InvalidConfig("ppg_dim must be >= 2 and mcc_dim >= 1")
        if self.noise_std < 0 or self.speaker_map_scale < 0:
            raise InvalidConfig("noise_std and speaker_map_scale must be non-negative")
        for name in ("lf0_mean_range", "lf0_std_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidConfig(f"{name} must be a non-degenerate (low, high) range")
        if self.lf0_std_range[0] <= 0:
            raise InvalidConfig("lf0 std range must be positive")
        if self.speaker_factors < 0:
            raise InvalidConfig("speaker_factors must be >= 0")
        if not 0 <= self.unvoiced_prob < 1:
            raise InvalidConfig("unvoiced_prob must be in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthesisConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown synthesis config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclasses.dataclass
class SpeakerParams:
    speaker_id: str
    weight: np.ndarray  # (mcc_dim, ppg_dim)
    bias: np.ndarray  # (mcc_dim,)
    lf0_mean: float
    lf0_std: float

    def render(self, content: np.ndarray, noise_std: float = 0.0, rng=None) -> np.ndarray:
        mcc = content @ self.weight.T + self.bias
        if noise_std > 0:
            mcc = mcc + rng.normal(0.0, noise_std, size=mcc.shape)
        return mcc


def speaker_ids(config: SynthesisConfig) -> list[str]:
    return [f"spk{i:02d}" for i in range(config.n_speakers)]


def target_speakers(config: SynthesisConfig) -> list[str]:
    ids = speaker_ids(config)
    return ids[len(ids) - config.n_target_speakers :]


def speaker_params(config: SynthesisConfig) -> list[SpeakerParams]:
    """Ground-truth speaker maps: a common map plus a speaker deviation.

    Map weights are scaled so the common map gives each MCC dimension unit
    variance over Dirichlet content, whatever ``ppg_dim`` is. With
    ``speaker_factors`` = K > 0 a speaker's deviation is sum_k z_k * basis_k
    with z ~ N(0, speaker_map_scale^2); with K = 0 it is an independent
    Gaussian map of the same per-entry scale.
    """
    rng = np.random.default_rng([config.seed, 0])
    p, d = config.ppg_dim, config.mcc_dim
    a = DIRICHLET_CONCENTRATION
    content_var = (a * (p * a - a)) / ((p * a) ** 2 * (p * a + 1))
    w_scale = 1.0 / np.sqrt(p * content_var)
    common_w = w_scale * rng.normal(size=(d, p))
    common_b = rng.normal(size=d)
    k = config.speaker_factors
    basis_w = w_scale * rng.normal(size=(k, d, p)) / np.sqrt(max(k, 1))
    basis_b = rng.normal(size=(k, d)) / np.sqrt(max(k, 1))
    out = []
    for sid in speaker_ids(config):
        if k:
            z = config.speaker_map_scale * rng.normal(size=k)
            w = common_w + np.tensordot(z, basis_w, axes=1)
            b = common_b + z @ basis_b
        else:
            w = common_w + config.speaker_map_scale * w_scale * rng.normal(size=(d, p))
            b = common_b + config.speaker_map_scale * rng.normal(size=d)
        mean = rng.uniform(*config.lf0_mean_range)
        std = rng.uniform(*config.lf0_std_range)
        out.append(SpeakerParams(sid, w, b, float(mean), float(std)))
    return out


def split_counts(n_utts: int) -> tuple[int, int]:
    """(adapt, eval) counts for a target speaker: 50/20, scaled down proportionally."""
    if n_utts >= ADAPT_UTTS + EVAL_UTTS:
        return ADAPT_UTTS, EVAL_UTTS
    n_eval = max(1, round(n_utts * EVAL_UTTS / (ADAPT_UTTS + EVAL_UTTS)))
    return n_utts - n_eval, n_eval


def sample_content(rng, n_frames: int, ppg_dim: int) -> np.ndarray:
    return rng.dirichlet(np.full(ppg_dim, DIRICHLET_CONCENTRATION), size=n_frames)


def sample_lf0(rng, n_frames: int, mean: float, std: float, unvoiced_prob: float) -> np.ndarray:
    lf0 = rng.normal(mean, std, size=n_frames)
    unvoiced = rng.random(n_frames) < unvoiced_prob
    return np.where(unvoiced, UNVOICED, lf0)


def generate(config: SynthesisConfig, out_dir) -> CorpusManifest:
    """Write a corpus under ``out_dir`` and return its manifest (also saved as manifest.json)."""
    config.validate()
    out_dir = Path(out_dir)
    try:
        for sub in ("ppg", "mcc", "lf0"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create corpus directory {out_dir}: {exc}") from exc

    params = speaker_params(config)
    targets = set(target_speakers(config))
    lo, hi = config.frames_per_utterance
    records = []
    for s_idx, spk in enumerate(params):
        n = config.utterances_per_speaker
        if spk.speaker_id in targets:
            n_adapt, n_eval = split_counts(n)
            splits = ["adapt"] * n_adapt + ["eval"] * n_eval
        else:
            splits = ["train"] * n
        for u_idx, split in enumerate(splits):
            rng = np.random.default_rng([config.seed, 1, s_idx, u_idx])
            uid = f"{spk.speaker_id}_{u_idx:04d}"
            t = int(rng.integers(lo, hi + 1))
            content = sample_content(rng, t, config.ppg_dim)
            mcc = spk.render(content, config.noise_std, rng)
            lf0 = sample_lf0(rng, t, spk.lf0_mean, spk.lf0_std, config.unvoiced_prob)
            rec = UtteranceRecord(
                utterance_id=uid,
                speaker_id=spk.speaker_id,
                ppg_path=out_dir / "ppg" / f"{uid}.vcf",
                mcc_path=out_dir / "mcc" / f"{uid}.vcf",
                lf0_path=out_dir / "lf0" / f"{uid}.vcf",
                frame_count=t,
                split=split,
            )
            write_feature_file(FeatureSequence(FeatureKind.PPG, content, uid), rec.ppg_path)
            write_feature_file(FeatureSequence(FeatureKind.MCC, mcc, uid), rec.mcc_path)
            write_feature_file(FeatureSequence(FeatureKind.LF0, lf0, uid), rec.lf0_path)
            records.append(rec)

    manifest = CorpusManifest(
        corpus_name=config.corpus_name,
        speakers=[p.speaker_id for p in params],
        utterances=records,
        dims=FeatureDims(config.ppg_dim, config.mcc_dim),
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    truth = {
        "config": config.to_dict(),
        "targets": sorted(targets),
        "speakers": {p.speaker_id: {"lf0_mean": p.lf0_mean, "lf0_std": p.lf0_std} for p in params},
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    return manifest


def utterance_means(manifest: CorpusManifest) -> dict[str, list[np.ndarray]]:
    means: dict[str, list[np.ndarray]] = {}
    for rec in manifest.utterances:
        frames = rec.mcc().frames.astype(np.float64)
        means.setdefault(rec.speaker_id, []).append(frames.mean(axis=0))
    return means


def speaker_separation_score(manifest: CorpusManifest) -> float:
    """Mean inter-speaker over mean intra-speaker distance between per-utterance mean MCCs."""
    means = utterance_means(manifest)
    if len(means) < 2:
        raise DegenerateCorpus("separation score needs at least two speakers")
    for spk, vecs in means.items():
        if len(vecs) < 2:
            raise DegenerateCorpus(f"speaker {spk!r} has fewer than 2 utterances")
    intra, inter = [], []
    for vecs in means.values():
        intra.extend(np.linalg.norm(a - b) for a, b in itertools.combinations(vecs, 2))
    for (_, va), (_, vb) in itertools.combinations(means.items(), 2):
        a = np.stack(va)
        b = np.stack(vb)
        inter.extend(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1).ravel())
    mean_intra = float(np.mean(intra))
    if mean_intra == 0.0:
        return float("inf")
    return float(np.mean(inter)) / mean_intra
