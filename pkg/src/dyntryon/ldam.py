"""Limb-aware sparse attention: gather, masked per-limb attention, scatter-add."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, attend
from .numerics import Module, Tensor
from .pose import LimbGather


class LdamWeights(Module):
    """Pre-norm, limb self-attention, and a zero-initialised output map."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm = nx.LayerNorm(d)
        self.attn = AttentionWeights(d, heads, rng)
        self.out_proj = nx.Linear(d, d, rng, init="zero")


def _check(r_p: Tensor, g: LimbGather) -> None:
    f, s = r_p.shape[-3], r_p.shape[-2]
    if (g.frames, g.tokens) != (f, s):
        raise nx.ContractError(f"limb gather built for (f={g.frames}, s={g.tokens}), features are (f={f}, s={s})")


def gather_pad(r_p, g: LimbGather) -> Tensor:
    """[f, s, d] -> [L, n, d]; slot j of limb l holds ``r_p`` at ``indices[l, j]``, zero if padded."""
    r_p = nx.as_tensor(r_p)
    _check(r_p, g)
    f, s, d = r_p.shape
    flat = nx.reshape(r_p, (f * s, d))
    gathered = nx.take_rows(flat, g.indices)  # [L, n, d]
    return nx.mul(gathered, g.valid[:, :, None].astype(r_p.dtype))


def limb_attention(r_l, M_l: np.ndarray, w: AttentionWeights, valid: np.ndarray | None = None) -> Tensor:
    """Masked self-attention per limb: [L, n, d] -> [L, n, d].

    Padded query rows come out as exact zeros. When ``valid`` is omitted it
    is recovered from the mask diagonal.
    """
    r_l = nx.as_tensor(r_l)
    M_l = np.asarray(M_l)
    if valid is None:
        valid = np.diagonal(M_l, axis1=-2, axis2=-1) > nx.MASK_THRESHOLD
    out = attend(r_l, r_l, w, mask=M_l)
    return nx.mul(out, valid[..., None].astype(r_l.dtype))


def scatter_add(r_p, contrib, g: LimbGather) -> Tensor:
    """Add each real slot of ``contrib`` [L, n, d] to its token in ``r_p``.

    A token that belongs to several limbs receives the sum of their
    contributions, applied in fixed limb order. Padded slots are dropped.
    """
    r_p = nx.as_tensor(r_p)
    _check(r_p, g)
    f, s, d = r_p.shape
    L, n = g.indices.shape
    slots = np.flatnonzero(g.valid.reshape(-1))
    flat_contrib = nx.reshape(contrib, (L * n, d))
    picked = nx.take_rows(flat_contrib, slots)
    out = nx.index_add(nx.reshape(r_p, (f * s, d)), g.indices.reshape(-1)[slots], picked)
    return nx.reshape(out, (f, s, d))


def ldam_forward(r_p, g: LimbGather, w: LdamWeights) -> Tensor:
    """norm -> gather_pad -> limb_attention -> out_proj -> scatter_add (residual)."""
    r_p = nx.as_tensor(r_p)
    r_l = gather_pad(r_p, g)
    attended = limb_attention(w.norm(r_l), g.mask, w.attn, g.valid)
    return scatter_add(r_p, w.out_proj(attended), g)
