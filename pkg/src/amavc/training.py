"""Average-model training and target adaptation for the four system variants.

=========  ====================  ==========================
system     speaker-embedding in  cycle consistency loss
=========  ====================  ==========================
AMA-R      no                    no  (alpha forced to 0)
AMA-RC     no                    yes
AMA-SE-R   yes                   no  (alpha forced to 0)
AMA-SE-RC  yes                   yes
=========  ====================  ==========================
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .batching import batch_stream, pad_batch
from .embedder import EmbedderCheckpoint, embed_batch, embed_many
from .errors import (
    DegenerateCorpus,
    InvalidConfig,
    MissingEmbedder,
    MultipleSpeakers,
    NonFiniteLoss,
    ValidationError,
    WrongStage,
)
from .features import CorpusManifest, FeatureKind
from .losses import (
    DEFAULT_ALPHA,
    LossBreakdown,
    cycle_consistency_batch,
    joint_loss,
    reconstruction_loss_batch,
)
from .model import ConversionCheckpoint, ConversionConfig, ConversionNet, init_model

log = logging.getLogger(__name__)

SYSTEMS = ("AMA-R", "AMA-RC", "AMA-SE-R", "AMA-SE-RC")


def normalize_system(name: str) -> str:
    upper = name.upper()
    if upper not in SYSTEMS:
        raise InvalidConfig(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}")
    return upper


def uses_speaker_embedding(system: str) -> bool:
    return "-SE-" in normalize_system(system)


def uses_cycle_loss(system: str) -> bool:
    return normalize_system(system).endswith("RC")


def needs_embedder(system: str) -> bool:
    return uses_speaker_embedding(system) or uses_cycle_loss(system)


@dataclasses.dataclass
class TrainConfig:
    system: str = "AMA-SE-RC"
    alpha: float = DEFAULT_ALPHA
    steps: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    embedder_ckpt: str | None = None
    hidden: int = 256
    n_recurrent_layers: int = 4
    clip_norm: float = 5.0

    def __post_init__(self):
        self.system = normalize_system(self.system)

    @property
    def effective_alpha(self) -> float:
        return float(self.alpha) if uses_cycle_loss(self.system) else 0.0

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidConfig("steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be non-negative")


@dataclasses.dataclass
class TrainLog:
    records: list[dict] = dataclasses.field(default_factory=list)
    parameter_hashes: list[dict] = dataclasses.field(default_factory=list)
    wall_time: float = 0.0

    def append(self, step: int, losses: LossBreakdown) -> None:
        self.records.append({"step": step, **losses.to_dict()})

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


def batch_losses(
    module: ConversionNet,
    embedder: EmbedderCheckpoint | None,
    ppg: torch.Tensor,
    target_norm: torch.Tensor,
    lengths: torch.Tensor,
    mask: torch.Tensor,
    cond: torch.Tensor | None,
    ref_emb: torch.Tensor | None,
    alpha: float,
    cc_grad: bool = True,
):
    """Per-utterance (l_rec, l_cc) and the batch-mean joint loss.

    ``l_cc`` is None when no embedder/reference is available. With
    ``cc_grad=False`` it is computed for monitoring only and kept out of the graph.
    """
    out = module(ppg, cond)
    l_rec = reconstruction_loss_batch(out, target_norm, mask)
    l_cc = None
    if embedder is not None and ref_emb is not None:
        with torch.set_grad_enabled(cc_grad and torch.is_grad_enabled()):
            s_conv = embed_batch(embedder, module.denormalize(out), lengths)
            l_cc = cycle_consistency_batch(s_conv, ref_emb)
    total = l_rec
    if l_cc is not None and cc_grad:
        total = l_rec + alpha * l_cc
    return l_rec, l_cc, total.mean()


def _require_embedder(cfg: TrainConfig, embedder: EmbedderCheckpoint | None) -> EmbedderCheckpoint | None:
    if embedder is None and cfg.embedder_ckpt:
        embedder = EmbedderCheckpoint.load(cfg.embedder_ckpt)
    if needs_embedder(cfg.system):
        if embedder is None:
            raise MissingEmbedder(f"{cfg.system} needs a pretrained speaker embedder (embedder_ckpt)")
        if not embedder.frozen:
            raise ValidationError("the speaker embedder must be frozen before conversion-model training")
    return embedder


def _run(
    ckpt: ConversionCheckpoint,
    records,
    cfg: TrainConfig,
    embedder: EmbedderCheckpoint | None,
    ref_embs: np.ndarray | None,
    cond_embs: np.ndarray | None,
) -> TrainLog:
    module = ckpt.module
    alpha = cfg.effective_alpha
    train_cc = uses_cycle_loss(cfg.system)
    ids = [r.utterance_id for r in records]
    ppgs = [r.load(FeatureKind.PPG).frames for r in records]
    mccs = [r.load(FeatureKind.MCC).frames for r in records]
    lengths_all = [len(p) for p in ppgs]
    mean = module.out_mean.double().numpy()
    std = module.out_std.double().numpy()
    targets = [((m - mean) / std).astype(np.float32) for m in mccs]

    params = [p for p in module.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    stream = batch_stream(lengths_all, cfg.batch_size, rng)
    log_ = TrainLog()
    steps_per_epoch = max(1, int(np.ceil(len(records) / cfg.batch_size)))
    t0 = time.perf_counter()
    module.train()
    for step in range(cfg.steps):
        idx = next(stream)
        x, lengths, mask = pad_batch([ppgs[i] for i in idx])
        y, _, _ = pad_batch([targets[i] for i in idx])
        cond = torch.as_tensor(cond_embs[idx], dtype=torch.float32) if cond_embs is not None else None
        ref = torch.as_tensor(ref_embs[idx], dtype=torch.float32) if ref_embs is not None else None
        l_rec, l_cc, total = batch_losses(module, embedder, x, y, lengths, mask, cond, ref, alpha, cc_grad=train_cc)
        if not torch.isfinite(total):
            raise NonFiniteLoss(f"{cfg.system} loss became non-finite at step {step}", [ids[i] for i in idx])
        opt.zero_grad()
        total.backward()
        if cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
        opt.step()
        lc = float(l_cc.detach().mean()) if l_cc is not None else 0.0
        log_.append(step, joint_loss(float(l_rec.detach().mean()), lc, alpha))
        if (step + 1) % steps_per_epoch == 0 or step + 1 == cfg.steps:
            log_.parameter_hashes.append({"step": step + 1, "hash": ckpt.parameter_hash})
        if step % 100 == 0 or step + 1 == cfg.steps:
            r = log_.records[-1]
            log.info("%s step %d l_rec %.4f l_cc %.4f l_all %.4f", cfg.system, step, r["l_rec"], r["l_cc"], r["l_all"])
    module.eval()
    log_.wall_time = time.perf_counter() - t0
    return log_


def _reference_embeddings(embedder, records) -> np.ndarray:
    return embed_many([r.load(FeatureKind.MCC) for r in records], embedder).astype(np.float32)


def train_average(
    manifest: CorpusManifest,
    cfg: TrainConfig,
    embedder: EmbedderCheckpoint | None = None,
) -> tuple[ConversionCheckpoint, TrainLog]:
    """Train an average model on the ``train`` split of a multi-speaker corpus."""
    ckpt, records, ref, embedder = initial_average_model(manifest, cfg, embedder)
    use_se = uses_speaker_embedding(cfg.system)
    train_log = _run(ckpt, records, cfg, embedder, ref, ref if use_se else None)
    ckpt.stage = "average"
    ckpt.alpha = cfg.effective_alpha
    ckpt.system = cfg.system
    ckpt.metadata.update(
        {
            "steps": cfg.steps,
            "seed": cfg.seed,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "embedder_hash": embedder.parameter_hash if embedder is not None else None,
            "train_speakers": manifest.speakers_in("train"),
        }
    )
    return ckpt, train_log


def initial_average_model(manifest: CorpusManifest, cfg: TrainConfig, embedder: EmbedderCheckpoint | None = None):
    """Freshly initialised average model with normalisation statistics set from the train split.

    Returns (checkpoint, train records, per-utterance reference embeddings or
    None, embedder). Also serves as the untrained baseline.
    """
    cfg.validate()
    records = manifest.split("train")
    if len(manifest.speakers_in("train")) < 2:
        raise DegenerateCorpus("average-model training needs at least two speakers in the train split")
    embedder = _require_embedder(cfg, embedder)
    use_se = uses_speaker_embedding(cfg.system)

    config = ConversionConfig(
        input_dim=manifest.dims.ppg,
        output_dim=manifest.dims.mcc,
        hidden=cfg.hidden,
        n_recurrent_layers=cfg.n_recurrent_layers,
        use_speaker_embedding=use_se,
        embedding_dim=embedder.config.embedding_dim if use_se else None,
    )
    ckpt = init_model(config, cfg.seed)
    ref = _reference_embeddings(embedder, records) if embedder is not None else None
    inputs = []
    for k, r in enumerate(records):
        ppg = r.load(FeatureKind.PPG).frames.astype(np.float64)
        if use_se:
            ppg = np.concatenate([ppg, np.repeat(ref[k][None].astype(np.float64), len(ppg), axis=0)], axis=1)
        inputs.append(ppg)
    outputs = [r.load(FeatureKind.MCC).frames for r in records]
    ckpt.module.set_statistics(np.concatenate(inputs), np.concatenate(outputs))
    ckpt.system = cfg.system
    return ckpt, records, ref, embedder


def adapt(
    avg_ckpt: ConversionCheckpoint,
    target_manifest: CorpusManifest,
    cfg: TrainConfig,
    embedder: EmbedderCheckpoint | None = None,
) -> tuple[ConversionCheckpoint, TrainLog]:
    """Fine-tune an average model on one target speaker's ``adapt`` split.

    The reference embedding (used for conditioning and as the cycle-loss
    target) is the mean embedding over the adaptation utterances.
    """
    cfg.validate()
    if avg_ckpt.stage != "average":
        raise WrongStage(f"adapt needs an average checkpoint, got stage {avg_ckpt.stage!r}")
    if avg_ckpt.system and avg_ckpt.system != cfg.system:
        raise InvalidConfig(f"checkpoint was trained as {avg_ckpt.system}, config says {cfg.system}")
    records = target_manifest.split("adapt")
    if not records:
        raise DegenerateCorpus("target manifest has no adapt-split utterances")
    speakers = {r.speaker_id for r in records}
    if len(speakers) > 1:
        raise MultipleSpeakers(f"adapt split covers several speakers: {sorted(speakers)}")
    embedder = _require_embedder(cfg, embedder)
    if embedder is not None and avg_ckpt.metadata.get("embedder_hash") not in (None, embedder.parameter_hash):
        raise InvalidConfig("embedder differs from the one the average model was trained with")

    ckpt = avg_ckpt.copy()
    ref = None
    if embedder is not None:
        mean_emb = _reference_embeddings(embedder, records).astype(np.float64).mean(0)
        ref = np.repeat(mean_emb[None].astype(np.float32), len(records), axis=0)
    use_se = uses_speaker_embedding(cfg.system)
    train_log = _run(ckpt, records, cfg, embedder, ref, ref if use_se else None)
    ckpt.stage = "adapted"
    ckpt.alpha = cfg.effective_alpha
    ckpt.system = cfg.system
    ckpt.parent_hash = avg_ckpt.parameter_hash
    ckpt.optimizer_state = None
    ckpt.metadata = {
        **avg_ckpt.metadata,
        "target_speaker": next(iter(speakers)),
        "adapt_steps": cfg.steps,
        "adapt_seed": cfg.seed,
        "adapt_learning_rate": cfg.learning_rate,
        "n_adapt_utterances": len(records),
    }
    return ckpt, train_log
