import numpy as np
import pytest

from dyntryon import numerics as nx
from dyntryon import oracles
from dyntryon.attention import (
    AttentionWeights,
    attend,
    attention_flops,
    full_3d_attention,
    layout_flops,
    sdpa,
    spatial_attention,
    temporal_attention,
)


def weights_dict(w):
    return {k: (getattr(w, k).weight.data, getattr(w, k).bias.data) for k in ("q", "k", "v", "o")}


@pytest.fixture
def setup(f64):
    rng = np.random.default_rng(0)
    return rng, AttentionWeights(8, 2, rng)


def test_attend_matches_loop_oracle(setup):
    rng, w = setup
    xq, xkv = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
    got = attend(xq, xkv, w).data
    assert np.abs(got - oracles.projected_attention(xq, xkv, weights_dict(w), 2)).max() < 1e-12


def test_masked_rows_and_columns(setup):
    rng, _ = setup
    q, k, v = (rng.standard_normal((4, 8)) for _ in range(3))
    allowed = np.ones((4, 4), dtype=bool)
    allowed[:, 2] = False
    allowed[3] = False
    out = sdpa(q, k, v, 2, np.where(allowed, 0.0, nx.NEG_LARGE)).data
    assert np.abs(out - oracles.attention_loops(q, k, v, 2, allowed)).max() < 1e-12
    assert np.all(out[3] == 0.0)


def test_spatial_layout_is_per_frame_attention(setup):
    rng, w = setup
    r = rng.standard_normal((3, 5, 8))
    got = spatial_attention(r, w).data
    for fi in range(3):
        want = oracles.projected_attention(r[fi], r[fi], weights_dict(w), 2)
        assert np.allclose(got[fi], want, atol=1e-12)


def test_temporal_layout_is_per_token_attention(setup):
    rng, w = setup
    r = rng.standard_normal((3, 5, 8))
    got = temporal_attention(r, w).data
    for tok in range(5):
        want = oracles.projected_attention(r[:, tok], r[:, tok], weights_dict(w), 2)
        assert np.allclose(got[:, tok], want, atol=1e-12)


def test_full3d_layout_is_joint_attention(setup):
    rng, w = setup
    r = rng.standard_normal((2, 3, 8))
    flat = r.reshape(6, 8)
    want = oracles.projected_attention(flat, flat, weights_dict(w), 2).reshape(2, 3, 8)
    assert np.allclose(full_3d_attention(r, w).data, want, atol=1e-12)


def test_leading_batch_axis_is_carried(setup):
    rng, w = setup
    r = rng.standard_normal((2, 3, 4, 8))
    both = temporal_attention(r, w).data
    assert np.allclose(both[1], temporal_attention(r[1], w).data, atol=1e-12)


def test_layout_gradients(setup):
    rng, w = setup
    r = nx.tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
    params = [w.q.weight, w.k.weight, w.v.bias, w.o.weight]
    for fn in (spatial_attention, temporal_attention, full_3d_attention):
        assert nx.gradcheck(lambda: nx.sum(nx.square(fn(r, w))), [r, *params], samples=12) < 1e-5


@pytest.mark.parametrize(
    "kind, f, s",
    [("spatial", 4, 16), ("temporal", 4, 16), ("full3d", 2, 8)],
)
def test_counted_flops_equal_closed_form(setup, kind, f, s):
    rng, w = setup
    r = rng.standard_normal((f, s, 8))
    fn = {"spatial": spatial_attention, "temporal": temporal_attention, "full3d": full_3d_attention}[kind]
    with nx.no_grad():
        nx.counters.reset()
        fn(r, w)
    want = layout_flops(kind, 1, f, s, 8)
    assert nx.counters.flops == want["total"]
    assert nx.counters.tagged_flops["score"] == want["score"]
    assert nx.counters.tagged_flops["value"] == want["value"]


def test_full3d_example_count():
    assert layout_flops("full3d", 1, 4, 64, 32)["score"] == 2 * 256**2 * 32


def test_spatial_and_temporal_swap_under_f_s_exchange():
    assert layout_flops("spatial", 2, 5, 7, 8) == layout_flops("temporal", 2, 7, 5, 8)


def test_attention_flops_breakdown():
    c = attention_flops(1, 3, 3, 4)
    assert c["total"] == sum(v for k, v in c.items() if k != "total")


def test_heads_must_divide_width():
    with pytest.raises(nx.DimensionError):
        AttentionWeights(6, 4, np.random.default_rng(0))
