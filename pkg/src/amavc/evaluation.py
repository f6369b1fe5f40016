"""Objective evaluation: mel-cepstral distortion and cycle consistency distortion."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import warnings
from pathlib import Path

import numpy as np

from .embedder import EmbedderCheckpoint, embed
from .errors import EmptyOverlap, MissingFile, MissingReference, ShapeMismatch, StageWarning
from .features import CorpusManifest, FeatureKind
from .losses import cycle_consistency_loss
from .model import ConversionCheckpoint
from .runtime import SpeakerProfile, convert_utterance

MCD_CONST = 10.0 / math.log(10.0)


def _coefficients(x: np.ndarray, include_c0: bool) -> np.ndarray:
    out = x if include_c0 else x[:, 1:]
    if out.shape[1] == 0:
        raise EmptyOverlap("no coefficients left to compare (c0 excluded from 1-dim features)")
    return out


def dtw_path(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int]]:
    """Symmetric DTW with Euclidean local cost; returns the aligned (i, j) frame pairs."""
    n, m = len(a), len(b)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = cost[i - 1]
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, m + 1):
            cur[j] = row[j - 1] + min(prev[j - 1], prev[j], cur[j - 1])
    path = []
    i, j = n, m
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        moves = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(moves, key=lambda t: t[0])
    return path[::-1]


def frame_mcd(converted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return MCD_CONST * np.sqrt(2.0 * np.sum((converted - reference) ** 2, axis=1))


def mcd(converted, reference, include_c0: bool = False, use_dtw: bool = False) -> float:
    """Mean per-frame mel-cepstral distortion in dB.

    c0 is excluded unless ``include_c0``. Frames are assumed time-aligned;
    ``use_dtw`` aligns them first on the evaluated coefficients.
    """
    a = np.asarray(getattr(converted, "frames", converted), dtype=np.float64)
    b = np.asarray(getattr(reference, "frames", reference), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"converted {a.shape} vs reference {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise EmptyOverlap("no frames to compare")
    a, b = _coefficients(a, include_c0), _coefficients(b, include_c0)
    if use_dtw:
        path = dtw_path(a, b)
        ia, ib = (np.array(p) for p in zip(*path))
        a, b = a[ia], b[ib]
    elif len(a) != len(b):
        raise ShapeMismatch(f"frame counts differ ({len(a)} vs {len(b)}); enable DTW for unaligned data")
    return float(np.mean(frame_mcd(a, b)))


def ccd(converted_mcc, reference_mcc, embedder_ckpt: EmbedderCheckpoint) -> float:
    """Euclidean distance between the speaker embeddings of converted and reference MCCs."""
    return cycle_consistency_loss(embed(converted_mcc, embedder_ckpt), embed(reference_mcc, embedder_ckpt))


@dataclasses.dataclass
class EvalReport:
    system: str
    per_utterance: list[dict]
    average_mcd: float
    average_ccd: float
    n_utterances: int

    @classmethod
    def from_rows(cls, system: str, rows: list[dict]) -> "EvalReport":
        if not rows:
            raise MissingReference("no utterances were evaluated")
        return cls(
            system,
            rows,
            float(np.mean([r["mcd_db"] for r in rows])),
            float(np.mean([r["ccd"] for r in rows])),
            len(rows),
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["utterance_id", "mcd_db", "ccd"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.per_utterance)
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path).with_suffix("")
        path.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        path.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")
        path.with_suffix(".txt").write_text(comparison_table([self]), encoding="utf-8")


def comparison_table(reports: list[EvalReport]) -> str:
    """Plain-text table of average MCD (dB) and average CCD per system."""
    header = ("System", "Average MCD (dB)", "Average CCD", "N")
    rows = [(r.system, f"{r.average_mcd:.3f}", f"{r.average_ccd:.4f}", str(r.n_utterances)) for r in reports]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    lines.extend(fmt.format(*row) for row in rows)
    return "\n".join(lines) + "\n"


def evaluate_pairs(
    system: str,
    pairs: list[tuple[str, object, object]],
    embedder_ckpt: EmbedderCheckpoint,
    include_c0: bool = False,
    use_dtw: bool = False,
) -> EvalReport:
    """Score (utterance_id, converted, reference) triples."""
    rows = [
        {
            "utterance_id": uid,
            "mcd_db": mcd(conv, ref, include_c0=include_c0, use_dtw=use_dtw),
            "ccd": ccd(conv, ref, embedder_ckpt),
        }
        for uid, conv, ref in pairs
    ]
    return EvalReport.from_rows(system, rows)


def evaluate_system(
    eval_manifest: CorpusManifest,
    conv_ckpt: ConversionCheckpoint | dict[str, ConversionCheckpoint],
    embedder_ckpt: EmbedderCheckpoint,
    profiles: dict[str, SpeakerProfile],
    include_c0: bool = False,
    use_dtw: bool = False,
    system: str | None = None,
    source_profile: SpeakerProfile | None = None,
) -> EvalReport:
    """Convert every ``eval`` utterance toward its own speaker and score it against the natural MCCs.

    Synthetic eval utterances are exact parallels: the PPG is the speaker-free
    content that any source speaker would produce, and the stored MCCs are the
    target speaker's rendering of that content. ``conv_ckpt`` may be a single
    checkpoint or a mapping from target speaker to its adapted checkpoint.
    """
    records = eval_manifest.split("eval")
    if not records:
        raise MissingReference("eval manifest has no eval-split utterances")
    pairs = []
    for rec in records:
        ckpt = conv_ckpt.get(rec.speaker_id) if isinstance(conv_ckpt, dict) else conv_ckpt
        if ckpt is None:
            raise MissingReference(f"no conversion model for target speaker {rec.speaker_id!r}")
        tgt = profiles.get(rec.speaker_id)
        if tgt is None:
            raise MissingReference(f"no profile for target speaker {rec.speaker_id!r}")
        try:
            ref = rec.load(FeatureKind.MCC)
        except MissingFile as exc:
            raise MissingReference(str(exc)) from exc
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StageWarning)
            out = convert_utterance(
                rec.load(FeatureKind.PPG), rec.load(FeatureKind.LF0), source_profile or tgt, tgt, ckpt
            )
        pairs.append((rec.utterance_id, out["mcc"], ref))
    if system is None:
        first = next(iter(conv_ckpt.values())) if isinstance(conv_ckpt, dict) else conv_ckpt
        system = first.system or "unknown"
    return evaluate_pairs(system, pairs, embedder_ckpt, include_c0, use_dtw)
