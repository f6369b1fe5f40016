"""Reconstruction, speaker-embedding cycle consistency, and joint losses.

The plain functions take feature sequences / embeddings (or arrays) and return
Python floats computed in float64. The ``*_batch`` functions are the torch
versions used inside training: they work on padded batches and are
differentiable.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .errors import DimMismatch, NegativeLossInput, ShapeMismatch

DEFAULT_ALPHA = 0.2


def _matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "frames", x), dtype=np.float64)


def _vector(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64).ravel()


def reconstruction_loss(converted, reference) -> float:
    """Per-frame sum of squared MCC differences, averaged over frames."""
    a, b = _matrix(converted), _matrix(reference)
    if a.shape != b.shape:
        raise ShapeMismatch(f"converted {a.shape} vs reference {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def cycle_consistency_loss(s_conv, s_ref) -> float:
    """Euclidean distance between two speaker embeddings."""
    a, b = _vector(s_conv), _vector(s_ref)
    if a.shape != b.shape:
        raise DimMismatch(f"embedding sizes differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_cc: float
    alpha: float
    l_all: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def joint_loss(l_rec: float, l_cc: float, alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    l_rec, l_cc, alpha = float(l_rec), float(l_cc), float(alpha)
    if l_rec < 0 or l_cc < 0:
        raise NegativeLossInput(f"losses must be non-negative (l_rec={l_rec}, l_cc={l_cc})")
    return LossBreakdown(l_rec, l_cc, alpha, l_rec + alpha * l_cc)


def reconstruction_loss_batch(converted: torch.Tensor, reference: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-utterance reconstruction loss for padded (B, T, D) batches; ``mask`` is (B, T)."""
    if converted.shape != reference.shape:
        raise ShapeMismatch(f"converted {tuple(converted.shape)} vs reference {tuple(reference.shape)}")
    mask = mask.to(converted.dtype)
    per_frame = ((converted - reference) ** 2).sum(dim=-1) * mask
    return per_frame.sum(dim=1) / mask.sum(dim=1)


def cycle_consistency_batch(s_conv: torch.Tensor, s_ref: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean distance with gradient 0 where the two rows coincide."""
    if s_conv.shape != s_ref.shape:
        raise DimMismatch(f"embedding batches differ: {tuple(s_conv.shape)} vs {tuple(s_ref.shape)}")
    sq = ((s_conv - s_ref) ** 2).sum(dim=-1)
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, safe.sqrt(), torch.zeros_like(sq))
