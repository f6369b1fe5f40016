"""PPG -> MCC conversion network with optional speaker-embedding conditioning."""

from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import load_arrays, parameter_hash, save_arrays, state_arrays, write_json
from .errors import DimMismatch, InvalidConfig, MissingEmbedding, MissingFile, UnexpectedEmbedding
from .features import FeatureKind, FeatureSequence
from .batching import torch_seed

STAGES = ("average", "adapted")


@dataclasses.dataclass
class ConversionConfig:
    input_dim: int = 42
    output_dim: int = 40
    hidden: int = 256
    n_recurrent_layers: int = 4
    use_speaker_embedding: bool = False
    embedding_dim: int | None = None

    def validate(self):
        if self.hidden < 1:
            raise InvalidConfig("hidden must be >= 1")
        if self.n_recurrent_layers < 1:
            raise InvalidConfig("n_recurrent_layers must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidConfig("input_dim and output_dim must be positive")
        if self.use_speaker_embedding and not self.embedding_dim:
            raise InvalidConfig("embedding_dim is required when use_speaker_embedding is on")
        if not self.use_speaker_embedding and self.embedding_dim:
            raise InvalidConfig("embedding_dim given but use_speaker_embedding is off")


class ConversionNet(nn.Module):
    """tanh feed-forward layer, unidirectional LSTM stack, linear projection.

    Inputs (PPG, plus the speaker embedding when conditioning) are
    z-normalised with ``in_mean``/``in_std``; outputs live in z-normalised MCC
    space described by ``out_mean``/``out_std``. All four buffers are set from
    training data and saved with the parameters, so a checkpoint is self-contained.
    """

    def __init__(self, config: ConversionConfig):
        super().__init__()
        self.config = config
        in_dim = config.input_dim + (config.embedding_dim or 0)
        self.input_layer = nn.Linear(in_dim, config.hidden)
        self.rnn = nn.LSTM(config.hidden, config.hidden, config.n_recurrent_layers, batch_first=True)
        self.output_layer = nn.Linear(config.hidden, config.output_dim)
        self.register_buffer("in_mean", torch.zeros(in_dim))
        self.register_buffer("in_std", torch.ones(in_dim))
        self.register_buffer("out_mean", torch.zeros(config.output_dim))
        self.register_buffer("out_std", torch.ones(config.output_dim))

    def forward(self, ppg: torch.Tensor, spk: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, P) PPG [+ (B, M) embedding] -> (B, T, D) normalised MCC."""
        x = ppg
        if self.config.use_speaker_embedding:
            x = torch.cat([ppg, spk[:, None, :].expand(-1, ppg.shape[1], -1)], dim=-1)
        x = (x - self.in_mean) / self.in_std
        h, _ = self.rnn(torch.tanh(self.input_layer(x)))
        return self.output_layer(h)

    def set_statistics(self, inputs: np.ndarray, outputs: np.ndarray) -> None:
        """Set normalisation buffers from stacked (N, in_dim) inputs and (N, out_dim) MCC frames.

        PPG and MCC dimensions get per-dimension statistics. Embedding
        dimensions are centred and share one scale, the RMS of the centred
        embedding norm, so the whole embedding weighs about as much as a
        single PPG dimension at the input layer. Per-dimension scaling would
        also blow up directions in which the few training speakers happen to
        agree, pushing unseen speakers far out of range.
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        outputs = np.asarray(outputs, dtype=np.float64)
        in_mean, in_std = inputs.mean(0), inputs.std(0) + 1e-5
        p = self.config.input_dim
        if inputs.shape[1] > p:
            centred = inputs[:, p:] - in_mean[p:]
            in_std[p:] = np.sqrt(np.mean(np.sum(centred**2, axis=1))) + 1e-5
        self.in_mean.copy_(torch.from_numpy(in_mean))
        self.in_std.copy_(torch.from_numpy(in_std))
        self.out_mean.copy_(torch.from_numpy(outputs.mean(0)))
        self.out_std.copy_(torch.from_numpy(outputs.std(0) + 1e-5))

    def normalize(self, mcc: torch.Tensor) -> torch.Tensor:
        return (mcc - self.out_mean) / self.out_std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.out_std + self.out_mean


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclasses.dataclass
class ConversionCheckpoint:
    config: ConversionConfig
    module: ConversionNet
    stage: str = "average"
    alpha: float = 0.0
    system: str | None = None
    parent_hash: str | None = None
    metadata: dict = dataclasses.field(default_factory=dict)
    optimizer_state: dict | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        return state_arrays(self.module)

    @property
    def parameter_hash(self) -> str:
        return parameter_hash(self.arrays())

    @property
    def n_parameters(self) -> int:
        return parameter_count(self.module)

    def copy(self) -> "ConversionCheckpoint":
        return copy.deepcopy(self)

    def norm_stats(self) -> dict:
        return {
            "input_mean": self.module.in_mean.double().tolist(),
            "input_std": self.module.in_std.double().tolist(),
            "mean": self.module.out_mean.double().tolist(),
            "std": self.module.out_std.double().tolist(),
        }

    def sidecar(self) -> dict:
        return {
            "kind": "conversion_model",
            "config": dataclasses.asdict(self.config),
            "stage": self.stage,
            "alpha": self.alpha,
            "system": self.system,
            "parent_hash": self.parent_hash,
            "parameter_hash": self.parameter_hash,
            "n_parameters": self.n_parameters,
            "norm_stats": self.norm_stats(),
            "metadata": self.metadata,
        }

    def save(self, path) -> Path:
        path = Path(path).with_suffix("")
        save_arrays(self.arrays(), path.with_suffix(".npz"))
        write_json(self.sidecar(), path.with_suffix(".json"))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "ConversionCheckpoint":
        path = Path(path).with_suffix("")
        meta_path, arr_path = path.with_suffix(".json"), path.with_suffix(".npz")
        if not meta_path.exists() or not arr_path.exists():
            raise MissingFile(f"conversion checkpoint not found: {meta_path} / {arr_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        config = ConversionConfig(**meta["config"])
        module = ConversionNet(config)
        module.load_state_dict({k: torch.from_numpy(v) for k, v in load_arrays(arr_path).items()})
        ckpt = cls(
            config,
            module,
            stage=meta["stage"],
            alpha=meta["alpha"],
            system=meta.get("system"),
            parent_hash=meta.get("parent_hash"),
            metadata=meta.get("metadata", {}),
        )
        if ckpt.parameter_hash != meta["parameter_hash"]:
            raise InvalidConfig(f"parameter hash mismatch for {arr_path}")
        return ckpt


def init_model(config: ConversionConfig, seed: int = 0) -> ConversionCheckpoint:
    config.validate()
    with torch_seed(seed):
        module = ConversionNet(config)
    return ConversionCheckpoint(config, module, stage="average", metadata={"init_seed": seed})


def _check_embedding(config: ConversionConfig, spk):
    if config.use_speaker_embedding:
        if spk is None:
            raise MissingEmbedding("this model is conditioned on a speaker embedding; none given")
        dim = np.asarray(getattr(spk, "values", spk)).size
        if dim != config.embedding_dim:
            raise DimMismatch(f"speaker embedding has {dim} dims, model expects {config.embedding_dim}")
    elif spk is not None:
        raise UnexpectedEmbedding("this model takes no speaker embedding")


def forward(ppg: FeatureSequence, spk, ckpt: ConversionCheckpoint) -> FeatureSequence:
    """Convert one PPG sequence to (de-normalised) MCCs."""
    frames = np.asarray(getattr(ppg, "frames", ppg))
    if frames.shape[1] != ckpt.config.input_dim:
        raise DimMismatch(f"model expects {ckpt.config.input_dim}-dim PPGs, got {frames.shape[1]}")
    _check_embedding(ckpt.config, spk)
    dtype = next(ckpt.module.parameters()).dtype
    x = torch.as_tensor(frames, dtype=dtype)[None]
    e = None
    if spk is not None:
        e = torch.as_tensor(np.asarray(getattr(spk, "values", spk)), dtype=dtype)[None]
    ckpt.module.eval()
    with torch.no_grad():
        mcc = ckpt.module.denormalize(ckpt.module(x, e))[0]
    return FeatureSequence(FeatureKind.MCC, mcc.numpy(), utterance_id=getattr(ppg, "utterance_id", ""))
