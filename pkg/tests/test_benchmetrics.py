from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyntryon import numerics as nx
from dyntryon import oracles
from dyntryon.backbone import Denoiser
from dyntryon.benchmetrics import (
    analytic_block_params,
    attention_peak_bytes,
    bench_attention,
    check_scaling,
    garment_ssim,
    ldam_full3d_ratio,
    measure_attention,
    param_report,
    pass2_peak_bytes,
    psnr,
    quality_metrics,
    reports_to_csv,
    reports_to_jsonl,
    ssim,
    temporal_flicker,
)
from dyntryon.synthdata import ScenarioConfig, gen_sample
from dyntryon.tokenizer import ConfigError, ModelConfig

planes = arrays(np.float64, (9, 11), elements=st.floats(-1, 1, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(a=planes, b=planes)
def test_ssim_symmetric_bounded_and_matches_window_formula(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12
    assert -1.0 <= s <= 1.0
    assert abs(s - oracles.ssim_windows_ref(a, b, 8, 2.0)) < 1e-10


def test_ssim_identity_and_ordering():
    x = np.add.outer(np.sin(np.arange(16) / 2), np.cos(np.arange(16) / 3))
    assert ssim(x, x) == 1.0
    noisy = x + 1e-3 * np.random.default_rng(0).standard_normal(x.shape)
    assert ssim(x, -x + 0.5) < ssim(x, noisy)


def test_ssim_averages_channels_and_frames():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 8, 8, 3)), rng.standard_normal((2, 8, 8, 3))
    per_plane = [ssim(a[i, ..., c], b[i, ..., c]) for i in range(2) for c in range(3)]
    assert abs(ssim(a, b) - np.mean(per_plane)) < 1e-12
    with pytest.raises(nx.DimensionError):
        ssim(a, b[:1])


def test_flicker_closed_forms():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((4, 5, 5, 2))
    assert temporal_flicker(v, v) == 0.0
    eps = 0.05
    static = np.zeros((4, 3, 3, 2))
    flick = static + eps * (-1.0) ** np.arange(4)[:, None, None, None]
    assert abs(temporal_flicker(flick, static) - 4 * eps**2) < 1e-15
    # which frame carries the error does not matter: odd vs even flicker give the same score
    other = static - eps * (-1.0) ** np.arange(4)[:, None, None, None]
    assert temporal_flicker(other, static) == temporal_flicker(flick, static)
    g = rng.standard_normal(v.shape)
    assert abs(temporal_flicker(v, g) - oracles.flicker_ref(v, g)) < 1e-12
    with pytest.raises(nx.ContractError):
        temporal_flicker(v[:1], v[:1])


def test_flicker_region_restriction():
    gt = np.zeros((3, 4, 4, 1))
    video = gt.copy()
    video[1, 0, 0] = 1.0
    region = np.zeros((3, 4, 4), dtype=bool)
    region[0, 3, 3] = True
    assert temporal_flicker(video, gt, region) == 0.0
    region[2, 0, 0] = True
    # one pixel per pair is selected: (3,3) for pair 0-1 (error 0), (0,0) for pair 1-2 (error 1)
    assert temporal_flicker(video, gt, region) == 0.5


def test_psnr():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.2) == pytest.approx(10 * np.log10(4 / 0.04))


def test_garment_ssim_uses_torso_crop():
    s = gen_sample(ScenarioConfig(), 0)
    pred = s.gt.copy()
    pred[~np.broadcast_to(s.torso_mask[..., None], pred.shape)] = 0.0
    assert garment_ssim(pred, s.gt, s.torso_mask) == 1.0
    m = quality_metrics(s.gt, s)
    assert set(m) == {"ssim", "psnr", "flicker"} and m["ssim"] == 1.0 and m["flicker"] == 0.0


def test_full3d_score_flops_example():
    rep = measure_attention("full3d", 1, 4, 64, 32)
    assert rep.measured_score_flops == 2 * 256**2 * 32 == oracles.score_flops_full3d(1, 4, 64, 32)
    assert rep.measured_flops == rep.analytic_flops


@pytest.mark.parametrize("kind", ["spatial", "temporal", "full3d", "ldam"])
def test_counted_flops_match_closed_form(kind):
    rep = measure_attention(kind, 2, 3, 8, 8, L=2, n=5)
    assert rep.measured_score_flops == rep.analytic_score_flops
    assert rep.measured_flops == rep.analytic_flops
    if kind == "ldam":
        assert rep.measured_score_flops == oracles.score_flops_ldam(2, 2, 5, 8)


def test_spatial_and_temporal_swap_under_f_s_exchange():
    a = measure_attention("spatial", 1, 3, 7, 8)
    b = measure_attention("temporal", 1, 7, 3, 8)
    assert a.measured_score_flops == b.measured_score_flops
    assert a.measured_flops == b.measured_flops


def test_scaling_exponents_are_exact():
    r = check_scaling(1, 2, 8, 8, 2, 4)
    assert r == {"spatial:f": 2, "temporal:f": 4, "full3d:f": 4, "ldam:f": 1, "ldam:n": 4}


def test_paper_point_ratio():
    r = ldam_full3d_ratio(4, 12, 36, 192)
    assert r == Fraction(4 * 144, (36 * 192) ** 2)
    assert abs(float(r) - 1.2e-5) < 0.05e-5


def test_bench_reports_serialize():
    reps = bench_attention([{"f": 2, "s": 4, "d": 4, "L": 2, "n": 3}])
    assert [r.attention_type for r in reps] == ["spatial", "temporal", "full3d", "ldam"]
    lines = reports_to_jsonl(reps).splitlines()
    assert len(lines) == 4 and '"attention_type": "spatial"' in lines[0]
    csv = reports_to_csv(reps).splitlines()
    assert csv[0].startswith("attention_type,B,f,s,d,L,n") and len(csv) == 5


def test_ldam_rejects_oversized_n():
    with pytest.raises(ConfigError):
        measure_attention("ldam", 1, 2, 3, 4, L=1, n=7)


def test_param_report_single_block():
    rep = param_report(ModelConfig(num_blocks=1))
    hand = oracles.block_param_count(ModelConfig().d)
    assert rep.replica_encoder_params == hand["bare"]
    assert rep.dffm_extra_params == hand["dffm"]
    assert rep.ratio <= Fraction(1, 4)
    assert analytic_block_params(ModelConfig().d)["dffm"] == hand["dffm"]


def test_param_ratio_constant_in_depth():
    ratios = {param_report(ModelConfig(num_blocks=n)).ratio for n in (2, 4, 8)}
    assert len(ratios) == 1 and ratios.pop() < 1


@pytest.mark.parametrize("d,heads", [(8, 1), (16, 2), (32, 4), (64, 8)])
def test_param_ratio_below_one(d, heads):
    assert param_report(ModelConfig(d=d, heads=heads, num_blocks=2)).ratio < 1


def test_zero_blocks_is_an_error():
    with pytest.raises(ConfigError):
        param_report(ModelConfig(num_blocks=0))


def test_full3d_peak_memory_exceeds_limb_attention():
    f, s, d, L, n = 4, 16, 8, 2, 6  # f*s = 64 > sqrt(2)*6
    assert attention_peak_bytes("full3d", f, s, d, L, n) > attention_peak_bytes("ldam", f, s, d, L, n)


def test_dffm_pass_two_is_lighter_than_a_replica_encoder():
    cfg = ModelConfig(H=128, W=128, f=4, d=32, num_blocks=2, heads=2, T=100)
    sample = gen_sample(ScenarioConfig(), 0)
    model = Denoiser(cfg)
    assert pass2_peak_bytes(model, sample) < pass2_peak_bytes(model, sample, with_replica_forward=True)
