import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyntryon import numerics as nx
from dyntryon import oracles
from dyntryon.ldam import LdamWeights, gather_pad, ldam_forward, limb_attention, scatter_add
from dyntryon.pose import build_limb_gather


def random_gather(rng, L, f, s, n_cap=None, p=0.4):
    S = rng.random((L, f, s)) < p
    return build_limb_gather(S, n_cap or f * s)


def dense_reference(x, g, w, heads):
    f, s, d = x.shape
    weights = {k: (getattr(w.attn, k).weight.data, getattr(w.attn, k).bias.data) for k in "qkvo"}
    weights["out"] = (w.out_proj.weight.data, w.out_proj.bias.data)
    members = [list(g.indices[l, : g.counts[l]]) for l in range(g.L)]
    norm = (w.norm.gain.data, w.norm.bias.data)
    return oracles.dense_limb_attention(x.reshape(f * s, d), members, weights, heads, norm).reshape(f, s, d)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_matches_dense_attention_over_each_limb(seed):
    rng = np.random.default_rng(seed)
    with nx.default_dtype(np.float64):
        L, f, s = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 9))
        g = random_gather(rng, L, f, s)
        w = LdamWeights(8, 2, rng)
        w.out_proj.weight.data[...] = rng.standard_normal((8, 8))
        x = rng.standard_normal((f, s, 8))
        assert np.abs(ldam_forward(x, g, w).data - dense_reference(x, g, w, 2)).max() < 1e-10


def test_gather_then_scatter_of_identity_doubles_members():
    rng = np.random.default_rng(0)
    g = random_gather(rng, 3, 2, 6)
    x = rng.standard_normal((2, 6, 4))
    out = scatter_add(x, gather_pad(x, g), g).data.reshape(12, 4)
    mult = np.zeros(12)
    for l in range(g.L):
        mult[g.indices[l, : g.counts[l]]] += 1
    assert np.array_equal(out, x.reshape(12, 4) * (1 + mult)[:, None])


def test_padded_slots_are_zero_and_dropped():
    rng = np.random.default_rng(1)
    S = np.zeros((2, 1, 4), dtype=bool)
    S[0, 0, :3] = True
    S[1, 0, 3] = True
    g = build_limb_gather(S, 8)
    x = rng.standard_normal((1, 4, 4))
    r = gather_pad(x, g).data
    assert np.all(r[1, 1:] == 0)
    w = LdamWeights(4, 1, rng)
    att = limb_attention(r, g.mask, w.attn, g.valid).data
    assert np.all(att[1, 1:] == 0)
    junk = np.zeros((2, 3, 4))
    junk[1, 1:] = 1e6  # padded slots must never reach the output
    assert np.array_equal(scatter_add(x, junk, g).data, x)


def test_limb_attention_recovers_valid_from_mask():
    rng = np.random.default_rng(2)
    g = random_gather(rng, 2, 2, 5)
    r = rng.standard_normal((2, g.n, 4))
    w = LdamWeights(4, 2, rng)
    a = limb_attention(r, g.mask, w.attn).data
    b = limb_attention(r, g.mask, w.attn, g.valid).data
    assert np.array_equal(a, b)


def test_zero_out_proj_is_identity():
    rng = np.random.default_rng(3)
    g = random_gather(rng, 4, 3, 8)
    x = rng.standard_normal((3, 8, 16))
    assert np.array_equal(ldam_forward(x, g, LdamWeights(16, 4, rng)).data, x)


def test_non_limb_tokens_are_untouched_for_any_weights():
    rng = np.random.default_rng(4)
    g = random_gather(rng, 3, 3, 8, p=0.2)
    w = LdamWeights(8, 2, rng)
    for p in w.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((3, 8, 8))
    out = ldam_forward(x, g, w).data.reshape(24, 8)
    outside = np.setdiff1d(np.arange(24), g.member_tokens())
    assert outside.size > 0
    assert np.array_equal(out[outside], x.reshape(24, 8)[outside])


def test_overlapping_limbs_sum_contributions():
    S = np.zeros((2, 1, 3), dtype=bool)
    S[:, 0, 1] = True
    g = build_limb_gather(S, 4)
    x = np.zeros((1, 3, 2))
    contrib = np.array([[[1.0, 2.0]], [[10.0, 20.0]]])
    assert scatter_add(x, contrib, g).data[0, 1].tolist() == [11.0, 22.0]


def test_ldam_gradients(f64):
    rng = np.random.default_rng(5)
    g = random_gather(rng, 2, 2, 4, p=0.5)
    w = LdamWeights(8, 2, rng)
    w.out_proj.weight.data[...] = rng.standard_normal((8, 8))
    x = nx.tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    params = [x, w.attn.q.weight, w.attn.v.weight, w.out_proj.weight, w.norm.gain]
    assert nx.gradcheck(lambda: nx.sum(nx.square(ldam_forward(x, g, w))), params, samples=16) < 1e-5


def test_gather_must_match_feature_grid():
    g = random_gather(np.random.default_rng(0), 2, 2, 4)
    with pytest.raises(nx.ContractError):
        gather_pad(np.zeros((2, 5, 8)), g)
