"""Garment feature bank and cross-attention fusion.

Pass 1 runs the garment latent through the denoiser's own blocks (spatial
attention and MLP only, t = 0, no conditioning) and records each block's
feature at its fusion point. Pass 2 reads entry ``k`` inside block ``k``
and adds ``CrossAttn(norm(r_p), r_c)`` to the denoising stream.
"""

from __future__ import annotations

import os

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, attend
from .numerics import Module, Tensor


class BankStateError(RuntimeError):
    """Feature bank read before sealing or written after it."""


class FeatureBank:
    """Ordered ``block index -> [1, s, d]`` store; write-once, then read-only."""

    def __init__(self):
        self._entries: dict[int, Tensor] = {}
        self.sealed = False

    def put(self, block: int, feature: Tensor) -> None:
        if self.sealed:
            raise BankStateError("feature bank is sealed")
        if block in self._entries:
            raise BankStateError(f"bank already holds an entry for block {block}")
        if feature.ndim != 3 or feature.shape[0] != 1:
            raise nx.DimensionError(f"bank entries must be [1, s, d], got {feature.shape}")
        self._entries[block] = feature

    def seal(self) -> FeatureBank:
        self.sealed = True
        return self

    def __getitem__(self, block: int) -> Tensor:
        if not self.sealed:
            raise BankStateError("feature bank read before it was sealed")
        return self._entries[block]

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def save(self, directory: str | os.PathLike) -> list[str]:
        """Write one DTEN file per block; return the file names."""
        os.makedirs(directory, exist_ok=True)
        names = []
        for block, feat in sorted(self._entries.items()):
            name = f"block_{block:03d}.dten"
            nx.dten.save(os.path.join(directory, name), feat.data)
            names.append(name)
        return names

    @classmethod
    def load(cls, directory: str | os.PathLike) -> FeatureBank:
        bank = cls()
        for name in sorted(os.listdir(directory)):
            if name.startswith("block_") and name.endswith(".dten"):
                bank.put(int(name[6:9]), nx.Tensor(nx.dten.load(os.path.join(directory, name))))
        return bank.seal()


class DffmWeights(Module):
    """Per-block cross-attention (zero output projection) with a query pre-norm."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm = nx.LayerNorm(d)
        self.attn = AttentionWeights(d, heads, rng, zero_out=True)


def fuse(r_p, bank_entry: Tensor, w: DffmWeights) -> Tensor:
    """``r_p + CrossAttn(query=norm(r_p), key/value=r_c)``.

    ``r_p``: [f, s, d]; ``bank_entry``: [1, s, d]. The garment keys and
    values are projected once and broadcast over the f frames inside the
    batched matmul, so no f-fold copy of the garment feature is built.
    """
    r_p = nx.as_tensor(r_p)
    if bank_entry.ndim != 3 or bank_entry.shape[0] != 1 or bank_entry.shape[1:] != r_p.shape[-2:]:
        raise nx.DimensionError(f"bank entry {bank_entry.shape} incompatible with r_p {r_p.shape}")
    return nx.add(r_p, attend(w.norm(r_p), bank_entry, w.attn))


def extract_garment_features(c_latent, model) -> FeatureBank:
    """Run pass 1 of ``model`` on a single-frame garment latent; return the sealed bank."""
    return model.garment_forward(c_latent)
