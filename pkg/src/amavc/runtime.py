"""Run-time conversion: source PPG -> target MCC, plus log-f0 mean/variance mapping."""

from __future__ import annotations

import dataclasses
import json
import warnings
from pathlib import Path

import numpy as np

from .embedder import EmbedderCheckpoint, SpeakerEmbedding, embed_many
from .errors import DimMismatch, InsufficientVoicedFrames, InvalidConfig, MissingEmbedder, MissingEmbedding, StageWarning
from .features import FeatureKind, FeatureSequence, write_feature_file
from .model import ConversionCheckpoint, forward

MIN_STAT_FRAMES = 30


@dataclasses.dataclass
class SpeakerProfile:
    speaker_id: str
    lf0_mean: float
    lf0_std: float
    n_stat_frames: int
    reference_embedding: SpeakerEmbedding | None = None

    def __post_init__(self):
        if not self.lf0_std > 0:
            raise InvalidConfig(f"profile {self.speaker_id!r} needs a positive lf0_std")

    def to_json(self) -> dict:
        doc = {
            "speaker_id": self.speaker_id,
            "lf0_mean": self.lf0_mean,
            "lf0_std": self.lf0_std,
            "n_stat_frames": self.n_stat_frames,
        }
        if self.reference_embedding is not None:
            doc["embedding"] = self.reference_embedding.values.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SpeakerProfile":
        emb = doc.get("embedding")
        return cls(
            speaker_id=doc["speaker_id"],
            lf0_mean=float(doc["lf0_mean"]),
            lf0_std=float(doc["lf0_std"]),
            n_stat_frames=int(doc["n_stat_frames"]),
            reference_embedding=SpeakerEmbedding(np.array(emb)) if emb is not None else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SpeakerProfile":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def voiced_values(lf0: FeatureSequence) -> np.ndarray:
    return lf0.frames[lf0.voiced_mask(), 0].astype(np.float64)


def build_profile(
    records,
    embedder: EmbedderCheckpoint | None = None,
    with_embedding: bool = False,
    speaker_id: str | None = None,
) -> SpeakerProfile:
    """Voiced-frame log-f0 statistics (and optionally the mean embedding) of one speaker."""
    records = list(records)
    if speaker_id is None:
        ids = {r.speaker_id for r in records}
        speaker_id = ids.pop() if len(ids) == 1 else "+".join(sorted(ids))
    if with_embedding and embedder is None:
        raise MissingEmbedder(f"profile for {speaker_id!r} requested with an embedding but no embedder given")
    voiced = np.concatenate([voiced_values(r.load(FeatureKind.LF0)) for r in records]) if records else np.empty(0)
    if voiced.size < MIN_STAT_FRAMES:
        raise InsufficientVoicedFrames(
            f"speaker {speaker_id!r} has {voiced.size} voiced frames, need {MIN_STAT_FRAMES}"
        )
    std = float(voiced.std())
    if std <= 0:
        raise InsufficientVoicedFrames(f"speaker {speaker_id!r} has constant log-f0")
    emb = None
    if embedder is not None:
        vecs = embed_many([r.load(FeatureKind.MCC) for r in records], embedder)
        emb = SpeakerEmbedding(vecs.mean(axis=0))
    return SpeakerProfile(speaker_id, float(voiced.mean()), std, int(voiced.size), emb)


def convert_f0(lf0: FeatureSequence, src: SpeakerProfile, tgt: SpeakerProfile) -> FeatureSequence:
    """Map voiced log-f0 frames by matching mean and standard deviation; unvoiced frames pass through."""
    voiced = lf0.voiced_mask()
    out = lf0.frames[:, 0].copy()
    out[voiced] = convert_f0_values(out[voiced], src, tgt).astype(np.float32)
    return FeatureSequence(FeatureKind.LF0, out[:, None], utterance_id=lf0.utterance_id)


def convert_f0_values(x: np.ndarray, src: SpeakerProfile, tgt: SpeakerProfile) -> np.ndarray:
    """The voiced-frame log-f0 map in float64 (feature files hold float32)."""
    return (np.asarray(x, dtype=np.float64) - src.lf0_mean) * (tgt.lf0_std / src.lf0_std) + tgt.lf0_mean


def convert_utterance(
    ppg: FeatureSequence,
    lf0: FeatureSequence,
    src_profile: SpeakerProfile,
    tgt_profile: SpeakerProfile,
    conv_ckpt: ConversionCheckpoint,
    out_dir=None,
) -> dict[str, FeatureSequence]:
    """Convert one source utterance toward the target; optionally write both outputs under ``out_dir``."""
    if ppg.n_frames != lf0.n_frames:
        raise DimMismatch(f"PPG has {ppg.n_frames} frames but LF0 has {lf0.n_frames}")
    if conv_ckpt.stage != "adapted":
        warnings.warn(
            f"converting with a {conv_ckpt.stage!r} checkpoint instead of an adapted one", StageWarning, stacklevel=2
        )
    spk = None
    if conv_ckpt.config.use_speaker_embedding:
        if tgt_profile.reference_embedding is None:
            raise MissingEmbedding(f"target profile {tgt_profile.speaker_id!r} has no reference embedding")
        spk = tgt_profile.reference_embedding
    mcc = forward(ppg, spk, conv_ckpt)
    mcc.utterance_id = ppg.utterance_id
    out = {"mcc": mcc, "lf0": convert_f0(lf0, src_profile, tgt_profile)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = ppg.utterance_id or "converted"
        write_feature_file(out["mcc"], out_dir / f"{stem}.mcc.vcf")
        write_feature_file(out["lf0"], out_dir / f"{stem}.lf0.vcf")
    return out
