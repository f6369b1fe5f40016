"""Speaker-embedding extractor used as a frozen loss network and as the CCD meter.

Architecture: input z-normalisation, a 1x1 convolution stem, ``n_res_blocks``
residual blocks (two 1x1 convolutions each followed by ReLU, the block input
added to the second activation, then max-pooling with stride 2), a final 1x1
convolution to the embedding size and mean pooling over time.

All convolutions are pointwise and pooling is floor-mode, so for a right-padded
batch the first ``length // 2**k`` frames after ``k`` blocks depend only on
real frames. Batched embedding with lengths is therefore exact.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import arrays_identical, load_arrays, parameter_hash, save_arrays, state_arrays, write_json
from .batching import pad_batch, torch_seed
from .errors import DegenerateCorpus, DimMismatch, InvalidConfig, MissingFile, NonFiniteLoss, SequenceTooShort
from .features import CorpusManifest, FeatureKind, FeatureSequence

log = logging.getLogger(__name__)


@dataclasses.dataclass
class SpeakerEmbedding:
    values: np.ndarray
    source_utterance_id: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("speaker embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclasses.dataclass
class EmbedderConfig:
    input_dim: int = 40
    n_res_blocks: int = 5
    channels: int = 64
    embedding_dim: int = 128
    pool: str = "mean"

    def validate(self):
        if self.n_res_blocks < 1:
            raise InvalidConfig("n_res_blocks must be >= 1")
        if self.embedding_dim < 2:
            raise InvalidConfig("embedding_dim must be >= 2")
        if self.channels < 1 or self.input_dim < 1:
            raise InvalidConfig("channels and input_dim must be positive")
        if self.pool != "mean":
            raise InvalidConfig("only mean pooling is supported")

    @property
    def min_length(self) -> int:
        return 2**self.n_res_blocks


@dataclasses.dataclass
class EmbedderTrainConfig:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    splits: tuple[str, ...] = ("train",)
    holdout_fraction: float = 0.2
    crop_range: tuple[int, int] = (64, 256)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 1)
        self.conv2 = nn.Conv1d(channels, channels, 1)
        self.pool = nn.MaxPool1d(2, stride=2)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return self.pool(x + h)


class SpeakerEmbedder(nn.Module):
    def __init__(self, config: EmbedderConfig, n_speakers: int):
        super().__init__()
        self.config = config
        self.register_buffer("in_mean", torch.zeros(config.input_dim))
        self.register_buffer("in_std", torch.ones(config.input_dim))
        # fixes the units of the embedding space; set once after pretraining
        self.register_buffer("out_scale", torch.ones(()))
        self.stem = nn.Conv1d(config.input_dim, config.channels, 1)
        self.blocks = nn.ModuleList(ResidualBlock(config.channels) for _ in range(config.n_res_blocks))
        self.project = nn.Conv1d(config.channels, config.embedding_dim, 1)
        self.classifier = nn.Linear(config.embedding_dim, n_speakers)

    def forward(self, mcc: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, D) MCCs -> (B, M) embeddings. ``lengths`` gives the unpadded T of each row."""
        b, t, _ = mcc.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        x = ((mcc - self.in_mean) / self.in_std).transpose(1, 2)
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
            lengths = lengths // 2
        x = self.project(x)
        mask = (torch.arange(x.shape[-1])[None, :] < lengths[:, None]).to(x.dtype)
        return self.out_scale * (x * mask[:, None, :]).sum(-1) / lengths[:, None].to(x.dtype)

    @torch.no_grad()
    def rescale_output(self, scale: float) -> None:
        """Multiply embeddings by ``scale`` while leaving classifier logits unchanged."""
        self.out_scale.mul_(scale)
        self.classifier.weight.div_(scale)


@dataclasses.dataclass
class EmbedderCheckpoint:
    config: EmbedderConfig
    module: SpeakerEmbedder
    speakers: list[str]
    metadata: dict = dataclasses.field(default_factory=dict)
    frozen: bool = False

    def arrays(self) -> dict[str, np.ndarray]:
        return state_arrays(self.module)

    @property
    def parameter_hash(self) -> str:
        return parameter_hash(self.arrays())

    def freeze(self) -> "EmbedderCheckpoint":
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def snapshot(self) -> "EmbedderCheckpoint":
        """Independent deep copy, e.g. to capture the state before a training run."""
        return EmbedderCheckpoint(
            copy.deepcopy(self.config),
            copy.deepcopy(self.module),
            list(self.speakers),
            copy.deepcopy(self.metadata),
            self.frozen,
        )

    def sidecar(self) -> dict:
        return {
            "kind": "speaker_embedder",
            "config": dataclasses.asdict(self.config),
            "speakers": self.speakers,
            "parameter_hash": self.parameter_hash,
            "frozen": self.frozen,
            **{k: v for k, v in self.metadata.items() if k not in ("config", "parameter_hash", "frozen")},
        }

    def save(self, path) -> Path:
        """Write ``<path>.npz`` + ``<path>.json``; returns the json path."""
        path = Path(path).with_suffix("")
        save_arrays(self.arrays(), path.with_suffix(".npz"))
        write_json(self.sidecar(), path.with_suffix(".json"))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "EmbedderCheckpoint":
        path = Path(path).with_suffix("")
        meta_path, arr_path = path.with_suffix(".json"), path.with_suffix(".npz")
        if not meta_path.exists() or not arr_path.exists():
            raise MissingFile(f"embedder checkpoint not found: {meta_path} / {arr_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        config = EmbedderConfig(**meta["config"])
        module = SpeakerEmbedder(config, len(meta["speakers"]))
        module.load_state_dict({k: torch.from_numpy(v) for k, v in load_arrays(arr_path).items()})
        extra = {k: v for k, v in meta.items() if k not in ("kind", "config", "speakers", "parameter_hash", "frozen")}
        ckpt = cls(config, module, list(meta["speakers"]), extra, False)
        if ckpt.parameter_hash != meta["parameter_hash"]:
            raise InvalidConfig(f"parameter hash mismatch for {arr_path}")
        if meta.get("frozen"):
            ckpt.freeze()
        return ckpt


def _check_input(frames: np.ndarray, config: EmbedderConfig):
    if frames.shape[1] != config.input_dim:
        raise DimMismatch(f"embedder expects {config.input_dim}-dim MCCs, got {frames.shape[1]}")
    if frames.shape[0] < config.min_length:
        raise SequenceTooShort(f"need at least {config.min_length} frames, got {frames.shape[0]}")


def embed_batch(ckpt: EmbedderCheckpoint, mcc: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable embedding of a padded MCC batch (gradients flow to ``mcc`` only when frozen)."""
    if mcc.shape[-1] != ckpt.config.input_dim:
        raise DimMismatch(f"embedder expects {ckpt.config.input_dim}-dim MCCs, got {mcc.shape[-1]}")
    shortest = int(lengths.min()) if lengths is not None else mcc.shape[1]
    if shortest < ckpt.config.min_length:
        raise SequenceTooShort(f"need at least {ckpt.config.min_length} frames, got {shortest}")
    return ckpt.module(mcc, lengths)


def embed(mcc, ckpt: EmbedderCheckpoint) -> SpeakerEmbedding:
    frames = np.asarray(getattr(mcc, "frames", mcc))
    _check_input(frames, ckpt.config)
    dtype = next(ckpt.module.parameters()).dtype
    with torch.no_grad():
        out = ckpt.module(torch.as_tensor(frames, dtype=dtype)[None])
    return SpeakerEmbedding(out[0].double().numpy(), getattr(mcc, "utterance_id", None))


def embed_many(seqs: list, ckpt: EmbedderCheckpoint, batch_size: int = 32) -> np.ndarray:
    """Embeddings of several sequences as an (N, M) float64 array."""
    frames = [np.asarray(getattr(s, "frames", s)) for s in seqs]
    for f in frames:
        _check_input(f, ckpt.config)
    dtype = next(ckpt.module.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            x, lengths, _ = pad_batch(frames[i : i + batch_size], dtype=dtype)
            out.append(ckpt.module(x, lengths).double().numpy())
    return np.concatenate(out, axis=0)


def verify_frozen(ckpt_before: EmbedderCheckpoint, ckpt_after: EmbedderCheckpoint) -> bool:
    return arrays_identical(ckpt_before.arrays(), ckpt_after.arrays())


def corpus_hash(records) -> str:
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.utterance_id):
        h.update(rec.utterance_id.encode())
        h.update(Path(rec.mcc_path).read_bytes())
    return h.hexdigest()


def _holdout_split(by_speaker: dict, fraction: float):
    train, held = [], []
    for spk, recs in by_speaker.items():
        recs = sorted(recs, key=lambda r: r.utterance_id)
        n_held = min(len(recs) - 1, max(1, int(round(fraction * len(recs)))))
        held.extend((r, spk) for r in recs[len(recs) - n_held :])
        train.extend((r, spk) for r in recs[: len(recs) - n_held])
    return train, held


def pretrain_embedder(
    manifest: CorpusManifest, cfg: EmbedderConfig, train_cfg: EmbedderTrainConfig | None = None
) -> EmbedderCheckpoint:
    """Train the extractor as a speaker classifier and return a frozen checkpoint."""
    train_cfg = train_cfg or EmbedderTrainConfig()
    cfg.validate()
    records = manifest.split(*train_cfg.splits)
    by_speaker = manifest.by_speaker(records)
    if len(by_speaker) < 2:
        raise DegenerateCorpus("embedder pretraining needs at least two speakers")
    thin = [s for s, r in by_speaker.items() if len(r) < 2]
    if thin:
        raise DegenerateCorpus(f"speakers with fewer than 2 training utterances: {thin}")
    speakers = [s for s in manifest.speakers if s in by_speaker]
    label = {s: i for i, s in enumerate(speakers)}
    train_items, held_items = _holdout_split(by_speaker, train_cfg.holdout_fraction)

    feats = {r.utterance_id: r.load(FeatureKind.MCC).frames for r, _ in train_items + held_items}
    for f in feats.values():
        _check_input(f, cfg)

    stacked = np.concatenate([feats[r.utterance_id] for r, _ in train_items]).astype(np.float64)
    with torch_seed(train_cfg.seed):
        module = SpeakerEmbedder(cfg, len(speakers))
    module.in_mean.copy_(torch.from_numpy(stacked.mean(0)).float())
    module.in_std.copy_(torch.from_numpy(stacked.std(0) + 1e-5).float())

    rng = np.random.default_rng(train_cfg.seed)
    opt = torch.optim.Adam(module.parameters(), lr=train_cfg.learning_rate)
    lo, hi = train_cfg.crop_range
    lo = max(lo, cfg.min_length)
    for step in range(train_cfg.steps):
        idx = rng.choice(len(train_items), size=min(train_cfg.batch_size, len(train_items)), replace=False)
        crops, labels = [], []
        for i in idx:
            rec, spk = train_items[i]
            f = feats[rec.utterance_id]
            n = int(rng.integers(min(lo, len(f)), min(hi, len(f)) + 1))
            start = int(rng.integers(0, len(f) - n + 1))
            crops.append(f[start : start + n])
            labels.append(label[spk])
        x, lengths, _ = pad_batch(crops)
        logits = module.classifier(module(x, lengths))
        loss = nn.functional.cross_entropy(logits, torch.tensor(labels))
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"embedder loss became non-finite at step {step}", [train_items[i][0].utterance_id for i in idx]
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.debug("embedder step %d loss %.4f", step, loss.item())

    module.eval()
    with torch.no_grad():
        x, lengths, _ = pad_batch([feats[r.utterance_id] for r, _ in train_items])
        norms = module(x, lengths).norm(dim=-1)
        # classification is scale-free, so pick units where training utterances
        # have unit mean embedding norm
        module.rescale_output(1.0 / float(norms.mean()))
        x, lengths, _ = pad_batch([feats[r.utterance_id] for r, _ in held_items])
        pred = module.classifier(module(x, lengths)).argmax(-1).numpy()
    accuracy = float(np.mean([p == label[s] for p, (_, s) in zip(pred, held_items)]))
    log.info("embedder held-out speaker accuracy %.3f on %d utterances", accuracy, len(held_items))
    meta = {
        "steps": train_cfg.steps,
        "seed": train_cfg.seed,
        "corpus_hash": corpus_hash([r for r, _ in train_items]),
        "heldout_accuracy": accuracy,
        "n_heldout": len(held_items),
        "train_splits": list(train_cfg.splits),
    }
    return EmbedderCheckpoint(cfg, module, speakers, meta).freeze()
