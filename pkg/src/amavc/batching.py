"""Padding and length-bucketed batch ordering."""

from __future__ import annotations

import contextlib

import numpy as np
import torch


def pad_batch(seqs: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad (T_i, D) arrays into a (B, T_max, D) tensor. Returns (batch, lengths, mask)."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    t_max = int(lengths.max())
    out = torch.zeros(len(seqs), t_max, seqs[0].shape[1], dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=dtype)
    mask = torch.arange(t_max)[None, :] < lengths[:, None]
    return out, lengths, mask


def bucketed_batches(lengths: list[int], batch_size: int, rng: np.random.Generator, pool: int = 8) -> list[list[int]]:
    """One epoch of batches whose members have similar lengths.

    Indices are shuffled, cut into pools of ``pool * batch_size``, sorted by
    length inside each pool and chunked; the batch order is then shuffled.
    """
    order = rng.permutation(len(lengths))
    batches = []
    span = pool * batch_size
    for start in range(0, len(order), span):
        chunk = sorted(order[start : start + span].tolist(), key=lambda i: (lengths[i], i))
        batches.extend(chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def batch_stream(lengths: list[int], batch_size: int, rng: np.random.Generator):
    while True:
        yield from bucketed_batches(lengths, batch_size, rng)


@contextlib.contextmanager
def torch_seed(seed: int):
    """Seed torch's global RNG inside the block without leaking state outside it."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
