import numpy as np
import pytest

from dyntryon import numerics as nx
from dyntryon.backbone import (
    ConditioningInputs,
    Denoiser,
    StDitBlock,
    TimestepEmbedder,
    ablation_configs,
    child_rng,
)
from dyntryon.dffm import BankStateError, FeatureBank
from dyntryon.diffusion import limb_gather_for
from dyntryon.synthdata import ScenarioConfig, gen_sample
from dyntryon.tokenizer import ConfigError, ModelConfig

MICRO = dict(H=64, W=64, f=2, d=16, num_blocks=2, heads=2, L=2, T=10)
TINY_SCENE = ScenarioConfig(f=2, h=8, w=8, torso=(2, 2), upper_limb=1, lower_limb=1, velocity=(0, 0), jitter=(0, 0))


@pytest.fixture
def item():
    return gen_sample(TINY_SCENE, 0)


def test_output_shape_and_dtype(item):
    model = Denoiser(ModelConfig(**MICRO))
    bank = model.garment_forward(item.garment)
    out = model(item.gt, 3, item.cond, bank)
    assert out.shape == (2, 8, 8, 4)
    assert out.dtype == model.dtype


def test_child_rng_is_keyed_by_path():
    a = child_rng(0, "blocks.0", "spatial").standard_normal(3)
    assert np.array_equal(a, child_rng(0, "blocks.0", "spatial").standard_normal(3))
    assert not np.array_equal(a, child_rng(0, "blocks.1", "spatial").standard_normal(3))
    assert not np.array_equal(a, child_rng(1, "blocks.0", "spatial").standard_normal(3))


def test_optional_modules_do_not_shift_other_weights():
    plain = Denoiser(ModelConfig(**MICRO, use_dffm=False, extra_attention="none")).state_dict()
    full = Denoiser(ModelConfig(**MICRO, use_dffm=True, extra_attention="ldam")).state_dict()
    assert set(plain) < set(full)
    for k in plain:
        assert np.array_equal(plain[k], full[k]), k


def test_identity_at_init_is_bit_exact(item):
    base = dict(MICRO, use_dffm=False, extra_attention="none")
    plain = Denoiser(ModelConfig(**base))
    full = Denoiser(ModelConfig(**{**base, "use_dffm": True, "extra_attention": "ldam", "use_ldam": True}))
    z = np.random.default_rng(0).standard_normal((2, 8, 8, 4))
    bank = full.garment_forward(np.random.default_rng(1).standard_normal((1, 8, 8, 4)))
    a = plain(z, 4, item.cond).data
    b = full(z, 4, item.cond, bank, limb_gather_for(full, item.pose)).data
    assert np.array_equal(a, b)


def test_blocks_start_as_identity():
    cfg = ModelConfig(**MICRO)
    block = StDitBlock(cfg, 0, "b", with_dffm=True, extra="ldam")
    x = np.random.default_rng(0).standard_normal((2, 16, 16)).astype(np.float32)
    t_act = nx.silu(TimestepEmbedder(16, 10, np.random.default_rng(1))(3))
    assert np.array_equal(block(x, t_act).data, x)


def test_timestep_range_is_enforced():
    emb = TimestepEmbedder(8, 10, np.random.default_rng(0))
    emb(0)
    emb(10)
    with pytest.raises(nx.ContractError):
        emb(11)


def test_contract_errors(item):
    model = Denoiser(ModelConfig(**MICRO, extra_attention="ldam", use_ldam=True))
    z = np.zeros((2, 8, 8, 4))
    with pytest.raises(nx.ContractError):
        model(z, 1, item.cond, None)
    with pytest.raises(BankStateError):
        model(z, 1, item.cond, FeatureBank())
    bank = model.garment_forward(item.garment)
    with pytest.raises(nx.ContractError):
        model(z, 1, item.cond, bank, None)
    with pytest.raises(ConfigError):
        model(np.zeros((2, 8, 6, 4)), 1, None, bank)


def test_conditioning_inputs_validate():
    with pytest.raises(ConfigError):
        ConditioningInputs(np.zeros((2, 4, 4, 4)), np.zeros((2, 4, 4, 1)), np.zeros((1, 4, 4, 1)))
    with pytest.raises(ConfigError):
        ConditioningInputs(np.zeros((1, 4, 4, 4)), np.full((1, 4, 4, 1), 0.5), np.zeros((1, 4, 4, 1)))


def test_conditioning_path_contributes_after_training_signal(item):
    model = Denoiser(ModelConfig(**MICRO))
    bank = model.garment_forward(item.garment)
    z = np.random.default_rng(0).standard_normal((2, 8, 8, 4))
    without = model(z, 3, None, bank).data
    assert np.array_equal(without, model(z, 3, item.cond, bank).data)  # zero out_gate
    model.cond.out_gate.weight.data[...] = 0.1
    assert not np.array_equal(without, model(z, 3, item.cond, bank).data)


def test_init_conditioning_copies_block_zero():
    model = Denoiser(ModelConfig(**MICRO))
    model.init_conditioning_from_block(0)
    src, dst = model.blocks[0].state_dict(), model.cond.block.state_dict()
    for k, v in dst.items():
        assert np.array_equal(v, src[k])


def test_save_load_roundtrip(tmp_path, item):
    model = Denoiser(ModelConfig(**MICRO))
    for p in model.parameters():
        p.data += 0.01
    model.save(tmp_path)
    back = Denoiser.load(tmp_path)
    assert back.cfg == model.cfg
    bank_a, bank_b = model.garment_forward(item.garment), back.garment_forward(item.garment)
    assert np.array_equal(model(item.gt, 2, item.cond, bank_a).data, back(item.gt, 2, item.cond, bank_b).data)


def test_replica_encoder_variant(item):
    cfg = ModelConfig(**MICRO, garment_encoder="replica")
    model = Denoiser(cfg)
    names = [n for n, _ in model.named_parameters()]
    assert any(n.startswith("replica.1.") for n in names)
    bank = model.garment_forward(item.garment)
    assert model(item.gt, 2, item.cond, bank).shape == (2, 8, 8, 4)


def test_ablation_variants():
    v = ablation_configs(ModelConfig(**MICRO), full3d_blocks=[1])
    assert set(v) == {"replica_none", "dffm_none", "dffm_full3d", "dffm_ldam"}
    assert v["dffm_full3d"].blocks_with_extra() == [1]
    assert v["dffm_ldam"].use_ldam and v["replica_none"].garment_encoder == "replica"
    m = Denoiser(v["dffm_full3d"])
    assert m.blocks[0].full3d is None and m.blocks[1].full3d is not None


def test_micro_denoiser_gradcheck(f64, item):
    cfg = ModelConfig(**MICRO, extra_attention="ldam", use_ldam=True)
    model = Denoiser(cfg)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.2
    z = rng.standard_normal((2, 8, 8, 4))
    gather = limb_gather_for(model, item.pose)
    probe = rng.standard_normal((2, 8, 8, 4))

    def fn():
        bank = model.garment_forward(item.garment, track_grad=True)
        return nx.sum(nx.mul(model(z, 5, item.cond, bank, gather), probe))

    params = [p for _, p in model.named_parameters()][::7]
    assert nx.gradcheck(fn, params, samples=3) < 1e-4
