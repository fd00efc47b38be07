"""Fast oracle suite behind ``dyntryon selftest``.

Each check compares a fast path against :mod:`dyntryon.oracles` or a
closed form and raises ``AssertionError`` on disagreement.
"""

from __future__ import annotations

import time
from fractions import Fraction
from typing import Callable

import numpy as np

from . import numerics as nx
from . import oracles
from .attention import AttentionWeights, attend
from .backbone import Denoiser
from .benchmetrics import (
    check_scaling,
    ldam_full3d_ratio,
    param_report,
    ssim,
    temporal_flicker,
)
from .diffusion import TrainStage, apply_stage, limb_gather_for, make_schedule, q_sample, training_loss
from .ldam import LdamWeights, ldam_forward
from .pose import build_limb_gather, line_cells
from .synthdata import ScenarioConfig, gen_sample
from .tokenizer import ModelConfig, patchify, unpatchify

CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(fn):
    CHECKS.append((fn.__name__, fn))
    return fn


def _weights_dict(w: AttentionWeights) -> dict:
    return {k: (getattr(w, k).weight.data, getattr(w, k).bias.data) for k in ("q", "k", "v", "o")}


@check
def matmul_matches_loops():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.allclose(nx.matmul(a, b).data, oracles.matmul_loops(a, b), atol=1e-12)


@check
def masked_attention_matches_loops():
    rng = np.random.default_rng(2)
    d, heads = 8, 2
    w = AttentionWeights(d, heads, rng)
    x = rng.standard_normal((6, d))
    allowed = rng.random((6, 6)) < 0.6
    allowed[3] = False
    mask = np.where(allowed, 0.0, nx.NEG_LARGE)
    got = attend(x, x, w, mask).data
    want = oracles.projected_attention(x, x, _weights_dict(w), heads, allowed)
    assert np.abs(got - want).max() < 1e-10


@check
def patchify_matches_loops_and_roundtrips():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((2, 8, 6, 3))
    tok = patchify(z, 2)
    assert np.array_equal(tok, oracles.patchify_loops(z, 2))
    assert np.array_equal(unpatchify(tok, 8, 6, 2), z)


@check
def line_walk_matches_rational_rounding():
    rng = np.random.default_rng(4)
    for _ in range(200):
        r0, c0, r1, c1 = (int(v) for v in rng.integers(0, 12, size=4))
        assert line_cells(r0, c0, r1, c1) == oracles.line_cells_ref(r0, c0, r1, c1)


@check
def limb_attention_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        f, s, d, heads, L = int(rng.integers(1, 4)), int(rng.integers(2, 7)), 8, 2, int(rng.integers(1, 4))
        S_l = rng.random((L, f, s)) < 0.4
        g = build_limb_gather(S_l, n_cap=f * s)
        w = LdamWeights(d, heads, rng)
        w.out_proj.weight.data[...] = rng.standard_normal((d, d)) * 0.3
        x = rng.standard_normal((f, s, d))
        got = ldam_forward(x, g, w).data.reshape(f * s, d)
        members = [list(g.indices[l, : g.counts[l]]) for l in range(L)]
        weights = _weights_dict(w.attn)
        weights["out"] = (w.out_proj.weight.data, w.out_proj.bias.data)
        want = oracles.dense_limb_attention(x.reshape(f * s, d), members, weights, heads, (w.norm.gain.data, w.norm.bias.data))
        assert np.abs(got - want).max() < 1e-10


@check
def identity_at_init():
    base = ModelConfig(H=64, W=64, f=2, d=16, num_blocks=2, heads=2, L=2, T=10, use_dffm=False, extra_attention="none")
    plain = Denoiser(base)
    full = Denoiser(ModelConfig(**{**base.to_dict(), "use_dffm": True, "extra_attention": "ldam", "use_ldam": True}))
    rng = np.random.default_rng(6)
    z = rng.standard_normal((2, 8, 8, 4))
    item = gen_sample(ScenarioConfig(f=2, h=8, w=8, torso=(2, 2), upper_limb=1, lower_limb=1, velocity=(0, 0), jitter=(0, 0)), 0)
    bank = full.garment_forward(rng.standard_normal((1, 8, 8, 4)))
    a = plain.denoise(z, 5).data
    b = full.denoise(z, 5, None, bank, limb_gather_for(full, item.pose)).data
    assert np.array_equal(a, b)


@check
def schedule_matches_direct_product():
    s = make_schedule(1000, 1e-4, 2e-2)
    assert np.allclose(s.alpha_bar, oracles.alpha_bar_product(s.beta), rtol=1e-12)
    assert s.alpha_bar[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert make_schedule(1, 0.5, 0.5).alpha_bar.tolist() == [0.5]


@check
def q_sample_marginal_variance():
    s = make_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(7)
    z0 = rng.standard_normal(10_000) * 0.5
    t = 30
    zt = q_sample(s, z0, t, rng.standard_normal(z0.shape))
    ab = s.alpha_bar_at(t)
    want = ab * z0.var() + (1 - ab)
    assert abs(zt.var() - want) / want < 0.05


@check
def ssim_matches_window_formula():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((13, 10)), rng.standard_normal((13, 10))
    assert abs(ssim(a, b) - oracles.ssim_windows_ref(a, b, 8, 2.0)) < 1e-10
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


@check
def flicker_closed_forms():
    rng = np.random.default_rng(9)
    v, g = rng.standard_normal((4, 5, 5, 2)), rng.standard_normal((4, 5, 5, 2))
    assert abs(temporal_flicker(v, g) - oracles.flicker_ref(v, g)) < 1e-12
    eps = 0.1
    static = np.zeros((4, 3, 3, 1))
    flick = static + eps * (-1.0) ** np.arange(4)[:, None, None, None]
    assert abs(temporal_flicker(flick, static) - 4 * eps**2) < 1e-15


@check
def flop_scaling_exponents():
    ratios = check_scaling(1, 2, 8, 8, 2, 4)
    assert ratios["spatial:f"] == 2 and ratios["temporal:f"] == 4
    assert ratios["full3d:f"] == 4 and ratios["ldam:f"] == 1 and ratios["ldam:n"] == 4
    assert ldam_full3d_ratio(4, 12, 36, 192) == Fraction(4 * 12**2, (36 * 192) ** 2)


@check
def parameter_counts_match_formula():
    for d in (8, 16, 32):
        cfg = ModelConfig(d=d, heads=2, num_blocks=3)
        rep = param_report(cfg)
        hand = oracles.block_param_count(d)
        assert rep.dffm_extra_params == 3 * hand["dffm"]
        assert rep.replica_encoder_params == 3 * hand["bare"]
        assert rep.ratio <= Fraction(1, 4)


@check
def composite_gradcheck():
    rng = np.random.default_rng(10)
    with nx.default_dtype(np.float64):
        x = nx.tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = nx.tensor(rng.standard_normal((4, 4)), requires_grad=True)
        mask = np.where(rng.random((3, 3)) < 0.7, 0.0, nx.NEG_LARGE)

        def fn():
            h = nx.gelu(nx.layer_norm(nx.matmul(x, w)))
            a = nx.softmax(nx.matmul(h, nx.transpose(h)), mask)
            return nx.sum(nx.square(nx.matmul(a, nx.silu(h))))

        assert nx.gradcheck(fn, [x, w]) < 1e-4


@check
def synthetic_ground_truth_is_exact():
    cfg = ScenarioConfig()
    s = gen_sample(cfg, 11)
    th, tw = cfg.torso
    for i, (top, left) in enumerate(s.offsets):
        assert np.array_equal(s.gt[i, top : top + th, left : left + tw], s.texture)
        assert s.cond.m_c[i, ..., 0].sum() == th * tw
    assert np.array_equal(s.cond.x_a, s.gt * (1 - s.cond.m_c))


@check
def frozen_parameters_get_no_gradient():
    cfg = ModelConfig(H=64, W=64, f=2, d=16, num_blocks=1, heads=2, T=10)
    model = Denoiser(cfg)
    item = gen_sample(ScenarioConfig(f=2, h=8, w=8, torso=(2, 2), upper_limb=1, lower_limb=1, velocity=(0, 0), jitter=(0, 0)), 0)
    sched = make_schedule(10, 1e-2, 0.2)
    apply_stage(model, TrainStage.SPATIAL_CROSS)
    loss, _ = training_loss(model, item, sched, np.random.default_rng(0))
    nx.backward(loss)
    for name, p in model.named_parameters():
        if not TrainStage.SPATIAL_CROSS.trainable(name):
            assert p.grad is None or not np.any(p.grad), name


@check
def dten_roundtrip():
    rng = np.random.default_rng(12)
    for dtype in (np.float32, np.float64):
        a = rng.standard_normal((2, 3, 4)).astype(dtype)
        b = nx.dten.loads(nx.dten.dumps(a))
        assert b.dtype == a.dtype and np.array_equal(a, b)


def run_all(verbose: bool = False) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            ok, detail = True, ""
        except AssertionError as exc:
            ok, detail = False, str(exc) or "assertion failed"
        except Exception as exc:  # a crash is a failure too
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        if verbose:
            status = "ok  " if ok else "FAIL"
            print(f"{status} {name} ({time.perf_counter() - t0:.2f}s){' ' + detail if detail else ''}")
    if verbose:
        failed = sum(not ok for _, ok, _ in results)
        print(f"{len(results) - failed}/{len(results)} checks passed")
    return results
