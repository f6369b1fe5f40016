"""Feature sequences, the ``VCF1`` binary feature file, and corpus manifests.

File layout (little-endian)::

    0..3    magic b"VCF1"
    4..7    u32 frame count T
    8..11   u32 dimension D
    12..15  u32 kind code (0=PPG, 1=MCC, 2=LF0)
    16..    T*D float32 values, frame-major

Every other module reads and writes features through this module only.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    FrameCountMismatch,
    InvariantViolation,
    IoFailure,
    MissingFile,
    NonFiniteValue,
    ParseError,
    TruncatedPayload,
    UnknownSpeaker,
)

MAGIC = b"VCF1"
HEADER = struct.Struct("<4sIII")
UNVOICED = np.float32(-1e10)
SPLITS = ("train", "adapt", "eval")
PPG_ROW_TOL = 1e-4


class FeatureKind(enum.IntEnum):
    PPG = 0
    MCC = 1
    LF0 = 2


@dataclasses.dataclass(frozen=True)
class FeatureDims:
    """Expected PPG/MCC widths for strict dimension checking."""

    ppg: int = 42
    mcc: int = 40

    def expected(self, kind: FeatureKind) -> int:
        return {FeatureKind.PPG: self.ppg, FeatureKind.MCC: self.mcc, FeatureKind.LF0: 1}[kind]


DEFAULT_DIMS = FeatureDims()


@dataclasses.dataclass(eq=False)
class FeatureSequence:
    """A T x D matrix of one feature kind for one utterance (one row per frame).

    ``frames`` is always stored as float32, the on-disk precision, so a
    sequence that survived construction round-trips through a file bit-exactly.
    """

    kind: FeatureKind
    frames: np.ndarray
    utterance_id: str = ""
    frame_shift_ms: float = 5.0

    def __post_init__(self):
        self.kind = FeatureKind(self.kind)
        frames = np.asarray(self.frames)
        if frames.ndim == 1 and self.kind == FeatureKind.LF0:
            frames = frames[:, None]
        if frames.ndim != 2:
            raise InvariantViolation(f"frames must be 2-D, got shape {frames.shape}")
        frames = np.ascontiguousarray(frames, dtype=np.float32)
        t, d = frames.shape
        if t < 1 or d < 1:
            raise InvariantViolation(f"empty feature matrix {frames.shape} ({self.utterance_id})")
        if not np.all(np.isfinite(frames)):
            raise NonFiniteValue(f"non-finite value in {self.kind.name} sequence {self.utterance_id!r}")
        if self.kind == FeatureKind.LF0 and d != 1:
            raise DimMismatch(f"LF0 sequences have D=1, got {d}")
        if self.kind == FeatureKind.PPG:
            if frames.min() < 0:
                raise InvariantViolation(f"negative PPG entry in {self.utterance_id!r}")
            err = np.abs(frames.sum(axis=1, dtype=np.float64) - 1.0).max()
            if err > PPG_ROW_TOL:
                raise InvariantViolation(
                    f"PPG rows of {self.utterance_id!r} must sum to 1 (max deviation {err:.2e})"
                )
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def check_dims(self, dims: FeatureDims | None) -> None:
        if dims is None:
            return
        want = dims.expected(self.kind)
        if self.dim != want:
            raise DimMismatch(f"{self.kind.name} dim is {self.dim}, expected {want}")

    def voiced_mask(self) -> np.ndarray:
        if self.kind != FeatureKind.LF0:
            raise InvariantViolation("voiced_mask is only defined for LF0 sequences")
        return self.frames[:, 0] != UNVOICED

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


def encode_feature(seq: FeatureSequence) -> bytes:
    t, d = seq.frames.shape
    return HEADER.pack(MAGIC, t, d, int(seq.kind)) + seq.frames.astype("<f4").tobytes()


def decode_feature(data: bytes, utterance_id: str = "", dims: FeatureDims | None = None) -> FeatureSequence:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r} in {utterance_id or 'feature data'}")
    if len(data) < HEADER.size:
        raise TruncatedPayload(f"header truncated ({len(data)} bytes)")
    _, t, d, code = HEADER.unpack_from(data)
    try:
        kind = FeatureKind(code)
    except ValueError:
        raise ParseError(f"unknown kind code {code}") from None
    need = HEADER.size + 4 * t * d
    if len(data) < need:
        raise TruncatedPayload(f"payload has {len(data) - HEADER.size} bytes, header promises {4 * t * d}")
    if len(data) > need:
        raise ParseError(f"{len(data) - need} trailing bytes after payload")
    frames = np.frombuffer(data, dtype="<f4", count=t * d, offset=HEADER.size).reshape(t, d)
    seq = FeatureSequence(kind, frames.astype(np.float32), utterance_id=utterance_id)
    seq.check_dims(dims)
    return seq


def read_feature_file(path, dims: FeatureDims | None = DEFAULT_DIMS) -> FeatureSequence:
    """Read a ``VCF1`` file. Pass ``dims=None`` to skip strict dimension checks."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(f"feature file not found: {path}") from None
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_feature(data, utterance_id=path.stem, dims=dims)


def write_feature_file(seq: FeatureSequence, path) -> None:
    if seq.n_frames < 1:
        raise InvariantViolation("cannot write an empty sequence")
    try:
        Path(path).write_bytes(encode_feature(seq))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclasses.dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    ppg_path: Path
    mcc_path: Path
    lf0_path: Path
    frame_count: int
    split: str = "train"

    def load(self, kind: FeatureKind, dims: FeatureDims | None = None) -> FeatureSequence:
        path = {FeatureKind.PPG: self.ppg_path, FeatureKind.MCC: self.mcc_path, FeatureKind.LF0: self.lf0_path}[
            FeatureKind(kind)
        ]
        seq = read_feature_file(path, dims=dims)
        if seq.kind != kind:
            raise ParseError(f"{path} holds {seq.kind.name} features, expected {FeatureKind(kind).name}")
        seq.utterance_id = self.utterance_id
        return seq

    def ppg(self, dims=None) -> FeatureSequence:
        return self.load(FeatureKind.PPG, dims)

    def mcc(self, dims=None) -> FeatureSequence:
        return self.load(FeatureKind.MCC, dims)

    def lf0(self, dims=None) -> FeatureSequence:
        return self.load(FeatureKind.LF0, dims)


@dataclasses.dataclass
class CorpusManifest:
    corpus_name: str
    speakers: list[str]
    utterances: list[UtteranceRecord]
    dims: FeatureDims = DEFAULT_DIMS
    root: Path | None = None

    def split(self, *names: str) -> list[UtteranceRecord]:
        return [u for u in self.utterances if u.split in names]

    def speakers_in(self, *splits: str) -> list[str]:
        present = {u.speaker_id for u in self.utterances if not splits or u.split in splits}
        return [s for s in self.speakers if s in present]

    def by_speaker(self, utterances: Iterable[UtteranceRecord] | None = None) -> dict[str, list[UtteranceRecord]]:
        out: dict[str, list[UtteranceRecord]] = {}
        for u in self.utterances if utterances is None else utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out

    def subset(self, speakers=None, splits=None) -> "CorpusManifest":
        utts = [
            u
            for u in self.utterances
            if (speakers is None or u.speaker_id in speakers) and (splits is None or u.split in splits)
        ]
        spk = [s for s in self.speakers if any(u.speaker_id == s for u in utts)]
        return CorpusManifest(self.corpus_name, spk, utts, self.dims, self.root)

    def to_json(self) -> dict:
        root = self.root

        def rel(p: Path) -> str:
            if root is not None:
                try:
                    return Path(os.path.relpath(p, root)).as_posix()
                except ValueError:
                    pass
            return str(p)

        return {
            "corpus_name": self.corpus_name,
            "speakers": list(self.speakers),
            "feature_dims": {"ppg": self.dims.ppg, "mcc": self.dims.mcc},
            "utterances": [
                {
                    "id": u.utterance_id,
                    "speaker": u.speaker_id,
                    "ppg": rel(u.ppg_path),
                    "mcc": rel(u.mcc_path),
                    "lf0": rel(u.lf0_path),
                    "frames": u.frame_count,
                    "split": u.split,
                }
                for u in self.utterances
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        if self.root is None:
            self.root = path.parent
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


_UTT_KEYS = ("id", "speaker", "ppg", "mcc", "lf0", "frames", "split")


def _parse_manifest(doc, root: Path) -> CorpusManifest:
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a JSON object")
    for key in ("corpus_name", "speakers", "utterances"):
        if key not in doc:
            raise ParseError(f"manifest missing key {key!r}")
    speakers = doc["speakers"]
    if not isinstance(speakers, list) or not all(isinstance(s, str) for s in speakers):
        raise ParseError("'speakers' must be a list of strings")
    if len(set(speakers)) != len(speakers):
        raise ParseError("duplicate speaker ids in 'speakers'")
    fd = doc.get("feature_dims", {})
    try:
        dims = FeatureDims(int(fd.get("ppg", DEFAULT_DIMS.ppg)), int(fd.get("mcc", DEFAULT_DIMS.mcc)))
    except (TypeError, ValueError, AttributeError):
        raise ParseError("'feature_dims' must map ppg/mcc to integers") from None

    seen: set[str] = set()
    records = []
    for i, entry in enumerate(doc["utterances"]):
        if not isinstance(entry, dict):
            raise ParseError(f"utterances[{i}] is not an object")
        missing = [k for k in _UTT_KEYS if k not in entry]
        if missing:
            raise ParseError(f"utterances[{i}] missing keys {missing}")
        uid = entry["id"]
        if uid in seen:
            raise ParseError(f"duplicate utterance id {uid!r}")
        seen.add(uid)
        if entry["split"] not in SPLITS:
            raise ParseError(f"utterance {uid!r} has unknown split {entry['split']!r}")
        if not isinstance(entry["frames"], int) or entry["frames"] < 1:
            raise ParseError(f"utterance {uid!r} has invalid frame count {entry['frames']!r}")
        if entry["speaker"] not in speakers:
            raise UnknownSpeaker(f"utterance {uid!r} names unknown speaker {entry['speaker']!r}")
        records.append(
            UtteranceRecord(
                utterance_id=uid,
                speaker_id=entry["speaker"],
                ppg_path=root / entry["ppg"],
                mcc_path=root / entry["mcc"],
                lf0_path=root / entry["lf0"],
                frame_count=entry["frames"],
                split=entry["split"],
            )
        )
    return CorpusManifest(str(doc["corpus_name"]), list(speakers), records, dims, root)


def load_manifest(path, strict: bool = True) -> CorpusManifest:
    """Load and eagerly validate a manifest and every feature file it references.

    With ``strict`` the PPG/MCC widths must equal the manifest's declared
    ``feature_dims`` (42/40 when the key is absent).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise MissingFile(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest {path} is not valid JSON: {exc}") from exc
    manifest = _parse_manifest(doc, path.parent)
    dims = manifest.dims if strict else None
    for rec in manifest.utterances:
        for kind in FeatureKind:
            seq = rec.load(kind, dims)
            if seq.n_frames != rec.frame_count:
                raise FrameCountMismatch(
                    f"utterance {rec.utterance_id!r}: manifest says {rec.frame_count} frames, "
                    f"{kind.name} file has {seq.n_frames}"
                )
    return manifest
