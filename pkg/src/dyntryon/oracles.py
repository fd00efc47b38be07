"""Slow, independent reference implementations.

Nothing here imports the autodiff engine: these are plain loops and
``math``-level formulas used to cross-check the fast paths.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_row(row, allowed=None) -> list[float]:
    """Softmax over the allowed entries of one row; blocked entries get 0, an empty row all zeros."""
    n = len(row)
    allowed = [True] * n if allowed is None else list(allowed)
    live = [float(row[j]) for j in range(n) if allowed[j]]
    if not live:
        return [0.0] * n
    top = max(live)
    exps = [math.exp(float(row[j]) - top) if allowed[j] else 0.0 for j in range(n)]
    z = sum(exps)
    return [e / z for e in exps]


def attention_loops(q, k, v, heads: int, allowed=None) -> np.ndarray:
    """Multi-head attention for a single sequence: q [Sq, d], k/v [Sk, d]."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    Sq, d = q.shape
    Sk = k.shape[0]
    dh = d // heads
    out = np.zeros((Sq, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(Sq):
            scores = [float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh) for j in range(Sk)]
            probs = softmax_row(scores, None if allowed is None else allowed[i])
            for j in range(Sk):
                out[i, sl] += probs[j] * v[j, sl]
    return out


def projected_attention(x_q, x_kv, weights: dict, heads: int, allowed=None) -> np.ndarray:
    """Attention with Q/K/V/O projections given as plain arrays (``{name: (W, b)}``)."""
    def proj(x, name):
        W, b = weights[name]
        return np.asarray(x) @ W + b

    out = attention_loops(proj(x_q, "q"), proj(x_kv, "k"), proj(x_kv, "v"), heads, allowed)
    return proj(out, "o")


def layer_norm_ref(x, gain=None, bias=None, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def dense_limb_attention(x: np.ndarray, member_lists, weights: dict, heads: int, norm=None) -> np.ndarray:
    """Per-limb dense attention over each limb's own tokens, scatter-added into a copy of ``x``.

    ``x``: [f*s, d] flat tokens; ``member_lists``: list of flat-index lists.
    ``norm`` optionally holds (gain, bias) of a pre-norm; ``weights`` may
    include ``"out"`` for a final projection.
    """
    out = np.array(x, dtype=np.float64)
    for members in member_lists:
        if not members:
            continue
        tokens = np.asarray(x)[members]
        if norm is not None:
            tokens = layer_norm_ref(tokens, *norm)
        y = projected_attention(tokens, tokens, weights, heads)
        if "out" in weights:
            W, b = weights["out"]
            y = y @ W + b
        for row, idx in enumerate(members):
            out[idx] += y[row]
    return out


def patchify_loops(z: np.ndarray, p: int) -> np.ndarray:
    f, h, w, c = z.shape
    gh, gw = h // p, w // p
    out = np.zeros((f, gh * gw, p * p * c))
    for fi in range(f):
        for pr in range(gh):
            for pc in range(gw):
                vec = []
                for r in range(p):
                    for cc in range(p):
                        for ch in range(c):
                            vec.append(z[fi, pr * p + r, pc * p + cc, ch])
                out[fi, pr * gw + pc] = vec
    return out


def line_cells_ref(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Line walk with exact rational rounding-half-up of the minor coordinate."""
    n = max(abs(r1 - r0), abs(c1 - c0))
    if n == 0:
        return [(r0, c0)]
    cells = []
    for i in range(n + 1):
        r = math.floor(Fraction(r0) + Fraction(i * (r1 - r0), n) + Fraction(1, 2))
        c = math.floor(Fraction(c0) + Fraction(i * (c1 - c0), n) + Fraction(1, 2))
        cells.append((r, c))
    return cells


def alpha_bar_product(betas) -> list[float]:
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - float(b)
        out.append(acc)
    return out


def ssim_windows_ref(a: np.ndarray, b: np.ndarray, window: int, data_range: float) -> float:
    """Per-window SSIM written out pixel by pixel for a single 2-D plane."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    h, w = a.shape
    vals = []
    for r in range(0, h, window):
        for c in range(0, w, window):
            xs = [float(a[i, j]) for i in range(r, min(r + window, h)) for j in range(c, min(c + window, w))]
            ys = [float(b[i, j]) for i in range(r, min(r + window, h)) for j in range(c, min(c + window, w))]
            n = len(xs)
            mx, my = sum(xs) / n, sum(ys) / n
            vx = sum((x - mx) ** 2 for x in xs) / n
            vy = sum((y - my) ** 2 for y in ys) / n
            cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def flicker_ref(video: np.ndarray, gt: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(1, video.shape[0]):
        dv = video[i] - video[i - 1]
        dg = gt[i] - gt[i - 1]
        total += float(((dv - dg) ** 2).sum())
        count += dv.size
    return total / count


def block_param_count(d: int, mlp_ratio: int = 4) -> dict[str, int]:
    """Hand-derived parameter counts for one block and its optional sublayers."""
    linear = lambda i, o: i * o + o  # noqa: E731
    attn = 4 * linear(d, d)
    ada = linear(d, 3 * d)
    mlp = linear(d, mlp_ratio * d) + linear(mlp_ratio * d, d)
    norm = 2 * d
    return {
        "bare": 2 * attn + 3 * ada + mlp,
        "dffm": attn + norm,
        "ldam": attn + norm + linear(d, d),
        "full3d": attn + norm + linear(d, d),
    }


def score_flops_full3d(B: int, f: int, s: int, d: int) -> int:
    return 2 * B * (f * s) ** 2 * d


def score_flops_ldam(B: int, L: int, n: int, d: int) -> int:
    return 2 * B * L * n * n * d
