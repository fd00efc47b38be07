"""Quality metrics and the attention / parameter / memory benchmarks."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, full_3d_attention, layout_flops, spatial_attention, temporal_attention
from .backbone import StDitBlock
from .ldam import LdamWeights, ldam_forward
from .pose import build_limb_gather
from .tokenizer import ConfigError, ModelConfig

ATTENTION_TYPES = ("spatial", "temporal", "full3d", "ldam")


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------

def _as_planes(x: np.ndarray) -> np.ndarray:
    """View an image [h, w], [h, w, c] or video [f, h, w, c] as planes [n, h, w]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return np.moveaxis(x, -1, 0)
    if x.ndim == 4:
        return np.moveaxis(x, -1, 1).reshape(-1, *x.shape[1:3])
    raise nx.DimensionError(f"expected an image or video, got shape {x.shape}")


def window_ssim(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> float:
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


def ssim(a, b, window: int = 8, data_range: float = 2.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over non-overlapping ``window``-sized tiles (edge tiles clipped).

    Inputs may be [h, w], [h, w, c] or [f, h, w, c]; tiles are averaged over
    all planes. The default range suits latents living in [-1, 1].
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise nx.DimensionError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    pa, pb = _as_planes(a), _as_planes(b)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    _, h, w = pa.shape
    vals = []
    for i in range(pa.shape[0]):
        for r in range(0, h, window):
            for c in range(0, w, window):
                vals.append(window_ssim(pa[i, r : r + window, c : c + window], pb[i, r : r + window, c : c + window], c1, c2))
    return float(np.mean(vals))


def psnr(a, b, data_range: float = 2.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise nx.DimensionError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else float(10 * np.log10(data_range**2 / mse))


def temporal_flicker(video, gt, region: np.ndarray | None = None) -> float:
    """MSE between consecutive-frame differences of ``video`` and ``gt``.

    ``region`` ([f, h, w] bool) restricts the average to pixels inside the
    region in either frame of each consecutive pair.
    """
    v, g = np.asarray(video, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if v.shape != g.shape:
        raise nx.DimensionError(f"flicker shape mismatch {v.shape} vs {g.shape}")
    if v.ndim < 3 or v.shape[0] < 2:
        raise nx.ContractError("temporal flicker needs at least two frames")
    err = (np.diff(v, axis=0) - np.diff(g, axis=0)) ** 2
    if region is None:
        return float(err.mean())
    region = np.asarray(region, dtype=bool)
    pair = region[1:] | region[:-1]
    sel = np.broadcast_to(pair.reshape(pair.shape + (1,) * (err.ndim - pair.ndim)), err.shape)
    if not sel.any():
        return 0.0
    return float(err[sel].mean())


def region_bbox(mask: np.ndarray) -> tuple[slice, slice]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise nx.ContractError("empty region")
    return slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1)


def garment_ssim(pred, gt, torso_mask, **kw) -> float:
    """SSIM on each frame's torso bounding box, averaged over frames."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    vals = []
    for i in range(gt.shape[0]):
        rs, cs = region_bbox(torso_mask[i])
        vals.append(ssim(pred[i, rs, cs], gt[i, rs, cs], **kw))
    return float(np.mean(vals))


def quality_metrics(pred, sample) -> dict[str, float]:
    """Garment-region SSIM, full-frame PSNR and limb-region flicker against a synthetic sample."""
    m = sample.torso_mask
    out = {"ssim": garment_ssim(pred, sample.gt, m), "psnr": psnr(pred, sample.gt)}
    out["flicker"] = temporal_flicker(pred, sample.gt, sample.limb_mask()) if sample.frames > 1 else 0.0
    return out


# ---------------------------------------------------------------------------
# attention benchmark
# ---------------------------------------------------------------------------

@dataclass
class FlopReport:
    attention_type: str
    B: int
    f: int
    s: int
    d: int
    L: int
    n: int
    measured_flops: int
    analytic_flops: int
    measured_score_flops: int
    analytic_score_flops: int
    peak_live_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def _contiguous_gather(f: int, s: int, L: int, n: int):
    """Limb masks holding exactly ``n`` tokens each, spread over frames."""
    S_l = np.zeros((L, f, s), dtype=bool)
    for l in range(L):
        for j in range(n):
            flat = (l * n + j) % (f * s)
            S_l[l, flat // s, flat % s] = True
    return build_limb_gather(S_l, n)


def measure_attention(kind: str, B: int, f: int, s: int, d: int, L: int = 4, n: int = 12, heads: int = 1, seed: int = 0) -> FlopReport:
    """Run one forward of the layout under fresh counters and report counted vs closed-form FLOPs."""
    if kind not in ATTENTION_TYPES:
        raise ValueError(f"unknown attention type {kind!r}")
    if kind == "ldam" and n > f * s:
        raise ConfigError("n cannot exceed f*s")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, f, s, d)) if B > 1 else rng.standard_normal((f, s, d))
    if kind == "ldam":
        w = LdamWeights(d, heads, rng)
        g = _contiguous_gather(f, s, L, n)
    else:
        w = AttentionWeights(d, heads, rng)
    with nx.no_grad():
        nx.counters.reset()
        if kind == "spatial":
            spatial_attention(x, w)
        elif kind == "temporal":
            temporal_attention(x, w)
        elif kind == "full3d":
            full_3d_attention(x, w)
        else:
            if B == 1:
                ldam_forward(x, g, w)
            else:
                for b in range(B):
                    ldam_forward(x[b], g, w)
        snap = nx.counters.snapshot()
    analytic = layout_flops(kind, B, f, s, d, L, n)
    measured_score = snap["tagged_flops"].get("score", 0)
    return FlopReport(
        kind, B, f, s, d, L, n,
        measured_flops=snap["flops"],
        analytic_flops=analytic["total"],
        measured_score_flops=measured_score,
        analytic_score_flops=analytic["score"],
        peak_live_bytes=snap["peak_live_bytes"],
    )


class ScalingError(nx.ContractError):
    """A counted FLOP ratio differs from the expected complexity exponent."""


F_DOUBLING = {"spatial": 2, "temporal": 4, "full3d": 4, "ldam": 1}


def check_scaling(B: int, f: int, s: int, d: int, L: int, n: int) -> dict[str, Fraction]:
    """Exact score-FLOP ratios when doubling ``f`` (every type) and ``n`` (LDAM)."""
    ratios = {}
    for kind, expected in F_DOUBLING.items():
        a = measure_attention(kind, B, f, s, d, L, n)
        b = measure_attention(kind, B, 2 * f, s, d, L, n)
        ratio = Fraction(b.measured_score_flops, a.measured_score_flops)
        ratios[f"{kind}:f"] = ratio
        if ratio != expected:
            raise ScalingError(f"{kind}: doubling f scaled score flops by {ratio}, expected {expected}")
    if 2 * n <= f * s:
        a = measure_attention("ldam", B, f, s, d, L, n)
        b = measure_attention("ldam", B, f, s, d, L, 2 * n)
        ratio = Fraction(b.measured_score_flops, a.measured_score_flops)
        ratios["ldam:n"] = ratio
        if ratio != 4:
            raise ScalingError(f"ldam: doubling n scaled score flops by {ratio}, expected 4")
    return ratios


def ldam_full3d_ratio(L: int, n: int, f: int, s: int) -> Fraction:
    """Exact LDAM / 3D-full score-FLOP ratio, ``L n^2 / (f s)^2``."""
    return Fraction(layout_flops("ldam", 1, f, s, 1, L, n)["score"], layout_flops("full3d", 1, f, s, 1)["score"])


def bench_attention(grid: Iterable[dict], check: bool = True) -> list[FlopReport]:
    """Measure all four layouts at every grid point; optionally assert the scaling laws.

    Grid points are dicts with keys ``B, f, s, d, L, n``.
    """
    reports = []
    for point in grid:
        p = {"B": 1, "L": 4, "n": 12, **point}
        for kind in ATTENTION_TYPES:
            rep = measure_attention(kind, p["B"], p["f"], p["s"], p["d"], p["L"], p["n"])
            if rep.measured_score_flops != rep.analytic_score_flops:
                raise ScalingError(f"{kind} at {p}: counted {rep.measured_score_flops} != analytic {rep.analytic_score_flops}")
            reports.append(rep)
        if check:
            check_scaling(p["B"], p["f"], p["s"], p["d"], p["L"], p["n"])
    return reports


def reports_to_jsonl(reports: Sequence) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports)


def reports_to_csv(reports: Sequence) -> str:
    buf = io.StringIO()
    rows = [r.to_dict() for r in reports]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamReport:
    num_blocks: int
    d: int
    dffm_extra_params: int
    replica_encoder_params: int
    ratio: Fraction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = float(self.ratio)
        d["ratio_exact"] = f"{self.ratio.numerator}/{self.ratio.denominator}"
        return d


def _bare_block(cfg: ModelConfig) -> StDitBlock:
    return StDitBlock(cfg, cfg.seed, "count", with_dffm=False, extra="none")


def param_report(cfg: ModelConfig) -> ParamReport:
    """DFFM-added parameters vs duplicating the backbone blocks as a garment encoder.

    Both counts come from instantiated modules, so they are exact.
    """
    if cfg.num_blocks < 1:
        raise ConfigError("param_report needs at least one block")
    with_dffm = StDitBlock(cfg, cfg.seed, "count", with_dffm=True, extra="none")
    bare = _bare_block(cfg)
    per_block_extra = with_dffm.num_parameters() - bare.num_parameters()
    extra = cfg.num_blocks * per_block_extra
    replica = cfg.num_blocks * bare.num_parameters()
    return ParamReport(cfg.num_blocks, cfg.d, extra, replica, Fraction(extra, replica))


def analytic_block_params(d: int, mlp_ratio: int = 4) -> dict[str, int]:
    """Closed-form parameter counts of one block's parts."""
    attn = 4 * (d * d + d)
    ada = d * 3 * d + 3 * d
    mlp = d * mlp_ratio * d + mlp_ratio * d + mlp_ratio * d * d + d
    return {
        "bare": 2 * attn + 3 * ada + mlp,
        "dffm": attn + 2 * d,
        "ldam": attn + 2 * d + d * d + d,
    }


# ---------------------------------------------------------------------------
# activation memory
# ---------------------------------------------------------------------------

def pass2_peak_bytes(model, sample, t: int = 50, with_replica_forward: bool = False) -> int:
    """Peak live bytes of a gradient-tracking pass-2 forward (bank built beforehand).

    With ``with_replica_forward`` an extra full forward of a replica garment
    encoder (a copy of the backbone blocks run over the garment) is kept alive
    alongside, as a reference-network design would.
    """
    from .backbone import Denoiser

    bank = model.garment_forward(sample.garment) if model.cfg.use_dffm else None
    keep = []
    nx.counters.reset()
    if with_replica_forward:
        ref = Denoiser(_replica_cfg(model.cfg))
        x = ref.embed_tokens(_patches(model.cfg, sample.garment))
        t_act = nx.silu(ref.t_embed(0))
        for block in ref.blocks:
            x = block(x, t_act, use_temporal=False)
            keep.append(x)
    out = model.denoise(np.zeros_like(sample.gt), t, sample.cond, bank, None)
    keep.append(out)
    return nx.counters.peak_live_bytes


def _replica_cfg(cfg: ModelConfig) -> ModelConfig:
    d = cfg.to_dict()
    d.update(use_dffm=False, extra_attention="none", use_ldam=False)
    return ModelConfig.from_dict(d)


def _patches(cfg: ModelConfig, latent):
    from .tokenizer import patchify

    return patchify(np.asarray(latent), cfg.p)


def attention_peak_bytes(kind: str, f: int, s: int, d: int, L: int, n: int, heads: int = 1) -> int:
    """Peak live bytes of one gradient-tracking attention forward."""
    rng = np.random.default_rng(0)
    x = nx.tensor(rng.standard_normal((f, s, d)), requires_grad=True)
    if kind == "ldam":
        w = LdamWeights(d, heads, rng)
        g = _contiguous_gather(f, s, L, n)
    else:
        w = AttentionWeights(d, heads, rng)
    nx.counters.reset()
    if kind == "ldam":
        out = ldam_forward(x, g, w)
    elif kind == "full3d":
        out = full_3d_attention(x, w)
    elif kind == "spatial":
        out = spatial_attention(x, w)
    else:
        out = temporal_attention(x, w)
    peak = nx.counters.peak_live_bytes
    del out
    return peak
