"""Multi-head attention and the dense spatial / temporal / 3D-full layouts.

All layouts accept token tensors shaped ``[..., f, s, d]`` (an optional
leading batch axis is carried through) and share :func:`sdpa`. Matmuls of
the score product ``q @ k^T`` and the value product ``p @ v`` are tagged
``"score"`` and ``"value"`` on the global counters.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor


class AttentionWeights(Module):
    """Q/K/V/O projections ([d, d] each, stored input-major) with biases."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, zero_out: bool = False):
        if d % heads:
            raise nx.DimensionError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = nx.Linear(d, d, rng)
        self.k = nx.Linear(d, d, rng)
        self.v = nx.Linear(d, d, rng)
        self.o = nx.Linear(d, d, rng, init="zero" if zero_out else "xavier")

    @property
    def d(self) -> int:
        return self.q.weight.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, S, d = x.shape
    x = nx.reshape(x, (*lead, S, heads, d // heads))
    return nx.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, S, dh = x.shape
    x = nx.swapaxes(x, -3, -2)
    return nx.reshape(x, (*lead, S, heads * dh))


def sdpa(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d/heads) + mask) v per head, heads concatenated.

    ``q``: [..., Sq, d]; ``k``, ``v``: [..., Sk, d] with leading axes
    broadcasting against ``q`` (no copies are made). ``mask`` is additive,
    broadcastable to [..., Sq, Sk]. Fully masked query rows give zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise nx.DimensionError(f"sdpa shapes q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    if d % heads:
        raise nx.DimensionError(f"d={d} not divisible by heads={heads}")
    scale = 1.0 / math.sqrt(d // heads)
    qh = _split_heads(nx.mul(q, scale), heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    with nx.counters.tag("score"):
        scores = nx.matmul(qh, nx.swapaxes(kh, -1, -2))
    if mask is not None:
        mask = np.expand_dims(np.asarray(getattr(mask, "data", mask)), -3)
    probs = nx.softmax(scores, mask)
    with nx.counters.tag("value"):
        out = nx.matmul(probs, vh)
    return _merge_heads(out)


def attend(x_q, x_kv, w: AttentionWeights, mask=None) -> Tensor:
    """Project, run :func:`sdpa`, and apply the output projection."""
    q = w.q(x_q)
    k = w.k(x_kv)
    v = w.v(x_kv)
    return w.o(sdpa(q, k, v, w.heads, mask))


def spatial_attention(r, w: AttentionWeights) -> Tensor:
    """Self-attention within each frame: [..., f, s, d] viewed as [B*f, s, d]."""
    r = nx.as_tensor(r)
    *lead, f, s, d = r.shape
    x = nx.reshape(r, (-1, s, d))
    return nx.reshape(attend(x, x, w), r.shape)


def temporal_attention(r, w: AttentionWeights) -> Tensor:
    """Self-attention along time per spatial location: [B*s, f, d]."""
    r = nx.as_tensor(r)
    *lead, f, s, d = r.shape
    x = nx.swapaxes(r, -3, -2)  # [..., s, f, d]
    swapped_shape = x.shape
    x = nx.reshape(x, (-1, f, d))
    y = nx.reshape(attend(x, x, w), swapped_shape)
    return nx.swapaxes(y, -3, -2)


def full_3d_attention(r, w: AttentionWeights, mask=None) -> Tensor:
    """Joint self-attention over all f*s tokens: [B, f*s, d]."""
    r = nx.as_tensor(r)
    *lead, f, s, d = r.shape
    x = nx.reshape(r, (-1, f * s, d))
    return nx.reshape(attend(x, x, w, mask), r.shape)


# ---------------------------------------------------------------------------
# closed-form counts
# ---------------------------------------------------------------------------

def score_flops(batch: int, seq_q: int, seq_k: int, d: int) -> int:
    """FLOPs of q k^T summed over heads (2 per multiply-accumulate)."""
    return 2 * batch * seq_q * seq_k * d


def attention_flops(batch: int, seq_q: int, seq_k: int, d: int) -> dict[str, int]:
    """Per-matmul FLOPs of :func:`attend` on a [batch, seq, d] input."""
    counts = {
        "q_proj": 2 * batch * seq_q * d * d,
        "kv_proj": 2 * 2 * batch * seq_k * d * d,
        "score": score_flops(batch, seq_q, seq_k, d),
        "value": 2 * batch * seq_q * seq_k * d,
        "out_proj": 2 * batch * seq_q * d * d,
    }
    counts["total"] = sum(counts.values())
    return counts


def layout_flops(kind: str, B: int, f: int, s: int, d: int, L: int = 0, n: int = 0) -> dict[str, int]:
    """Closed-form FLOPs for each attention layout.

    ``kind`` is one of ``spatial``, ``temporal``, ``full3d``, ``ldam``.
    """
    if kind == "spatial":
        return attention_flops(B * f, s, s, d)
    if kind == "temporal":
        return attention_flops(B * s, f, f, d)
    if kind == "full3d":
        return attention_flops(B, f * s, f * s, d)
    if kind == "ldam":
        counts = attention_flops(B * L, n, n, d)
        counts["ldam_out_proj"] = 2 * B * L * n * d * d
        counts["total"] += counts["ldam_out_proj"]
        return counts
    raise ValueError(f"unknown attention layout {kind!r}")
