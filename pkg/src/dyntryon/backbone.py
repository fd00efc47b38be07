"""ST-DiT blocks, the conditioning block and the full denoiser."""

from __future__ import annotations

import copy
import json
import math
import os
import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import AttentionWeights, full_3d_attention, spatial_attention, temporal_attention
from .dffm import DffmWeights, FeatureBank, fuse
from .ldam import LdamWeights, ldam_forward
from .numerics import Module, Tensor
from .pose import LimbGather
from .tokenizer import ConfigError, ModelConfig, patchify, positional_encoding, unpatchify


def child_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator per (seed, component path).

    Keys are hashed so that adding or removing a component never shifts the
    initial values of any other component.
    """
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.add(nx.mul(x, nx.add(scale, 1.0)), shift)


class AdaLN(Module):
    """Timestep-conditioned (shift, scale, gate), all zero at construction."""

    def __init__(self, d: int, rng: np.random.Generator, parts: int = 3):
        self.proj = nx.Linear(d, parts * d, rng, init="zero")
        self.parts = parts

    def __call__(self, t_act: Tensor) -> list[Tensor]:
        mod = self.proj(t_act)
        d = mod.shape[-1] // self.parts
        return [nx.getitem(mod, slice(i * d, (i + 1) * d)) for i in range(self.parts)]


class TimestepEmbedder(Module):
    """Sinusoidal embedding of the step index followed by a 2-layer SiLU MLP."""

    def __init__(self, d: int, T: int, rng: np.random.Generator):
        self.T = T
        self.fc1 = nx.Linear(d, d, rng)
        self.fc2 = nx.Linear(d, d, rng)

    def frequencies(self, t: int) -> np.ndarray:
        d = self.fc1.weight.shape[0]
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        angles = t * freqs
        emb = np.concatenate([np.cos(angles), np.sin(angles)])
        if d % 2:
            emb = np.concatenate([emb, [0.0]])
        return emb.astype(self.fc1.weight.dtype)

    def __call__(self, t: int) -> Tensor:
        if not 0 <= t <= self.T:
            raise nx.ContractError(f"timestep {t} outside [0, {self.T}]")
        return self.fc2(nx.silu(self.fc1(self.frequencies(t))))


class Full3dWeights(Module):
    """Dense 3D attention sublayer used in the ablation variant."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm = nx.LayerNorm(d)
        self.attn = AttentionWeights(d, heads, rng)
        self.out_proj = nx.Linear(d, d, rng, init="zero")


class StDitBlock(Module):
    """spatial -> temporal -> garment fusion -> LDAM / 3D-full -> MLP.

    Spatial, temporal and MLP sublayers are adaLN-modulated with zero-init
    gates. The fusion and limb sublayers carry their own zero-initialised
    output projections instead of a gate.
    """

    def __init__(self, cfg: ModelConfig, seed: int, path: str, with_dffm: bool, extra: str):
        d, heads = cfg.d, cfg.heads
        self.spatial = AttentionWeights(d, heads, child_rng(seed, path, "spatial"))
        self.spatial_mod = AdaLN(d, child_rng(seed, path, "spatial_mod"))
        self.temporal = AttentionWeights(d, heads, child_rng(seed, path, "temporal"))
        self.temporal_mod = AdaLN(d, child_rng(seed, path, "temporal_mod"))
        self.dffm = DffmWeights(d, heads, child_rng(seed, path, "dffm")) if with_dffm else None
        self.ldam = LdamWeights(d, heads, child_rng(seed, path, "ldam")) if extra == "ldam" else None
        self.full3d = Full3dWeights(d, heads, child_rng(seed, path, "full3d")) if extra == "full3d" else None
        self.mlp_in = nx.Linear(d, cfg.mlp_ratio * d, child_rng(seed, path, "mlp_in"))
        self.mlp_out = nx.Linear(cfg.mlp_ratio * d, d, child_rng(seed, path, "mlp_out"))
        self.mlp_mod = AdaLN(d, child_rng(seed, path, "mlp_mod"))

    @staticmethod
    def _gated(x: Tensor, t_act: Tensor, mod: AdaLN, fn) -> Tensor:
        shift, scale, gate = mod(t_act)
        h = modulate(nx.layer_norm(x), shift, scale)
        return nx.add(x, nx.mul(gate, fn(h)))

    def _mlp(self, h: Tensor) -> Tensor:
        return self.mlp_out(nx.gelu(self.mlp_in(h)))

    def garment(self, x: Tensor, t_act: Tensor) -> tuple[Tensor, Tensor]:
        """Garment-mode pass: spatial attention and MLP only. Returns (output, fusion-point tap)."""
        x = self._gated(x, t_act, self.spatial_mod, lambda h: spatial_attention(h, self.spatial))
        tap = x
        x = self._gated(x, t_act, self.mlp_mod, self._mlp)
        return x, tap

    def __call__(
        self,
        x: Tensor,
        t_act: Tensor,
        bank_entry: Tensor | None = None,
        gather: LimbGather | None = None,
        use_temporal: bool = True,
        use_extra: bool = False,
    ) -> Tensor:
        x = self._gated(x, t_act, self.spatial_mod, lambda h: spatial_attention(h, self.spatial))
        if use_temporal:
            x = self._gated(x, t_act, self.temporal_mod, lambda h: temporal_attention(h, self.temporal))
        if self.dffm is not None and bank_entry is not None:
            x = fuse(x, bank_entry, self.dffm)
        if use_extra and self.ldam is not None:
            if gather is None:
                raise nx.ContractError("LDAM is enabled but no limb gather was supplied")
            x = ldam_forward(x, gather, self.ldam)
        if use_extra and self.full3d is not None:
            w = self.full3d
            x = nx.add(x, w.out_proj(full_3d_attention(w.norm(x), w.attn)))
        return self._gated(x, t_act, self.mlp_mod, self._mlp)


@dataclass
class ConditioningInputs:
    """Agnostic latent, inpainting mask and pose map, all sharing (f, h, w)."""

    x_a: np.ndarray  # [f, h, w, cz]
    m_c: np.ndarray  # [f, h, w, 1]
    pose_map: np.ndarray  # [f, h, w, 1]

    def __post_init__(self):
        self.x_a = np.asarray(self.x_a)
        self.m_c = np.asarray(self.m_c)
        self.pose_map = np.asarray(self.pose_map)
        f, h, w, _ = self.x_a.shape
        for name in ("m_c", "pose_map"):
            arr = getattr(self, name)
            if arr.shape != (f, h, w, 1):
                raise ConfigError(f"{name} must be [{f}, {h}, {w}, 1], got {arr.shape}")
        if not np.all((self.m_c == 0) | (self.m_c == 1)):
            raise ConfigError("m_c must be binary")

    @property
    def frames(self) -> int:
        return self.x_a.shape[0]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x_a, self.m_c, self.pose_map], axis=-1)

    def frame_slice(self, start: int, stop: int) -> ConditioningInputs:
        return ConditioningInputs(self.x_a[start:stop], self.m_c[start:stop], self.pose_map[start:stop])


class ConditioningBlock(Module):
    """Input projection of (x_a, m_c, pose_map) patches, a replica block, and a zero-init output map."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.in_proj = nx.Linear(cfg.p * cfg.p * (cfg.cz + 2), cfg.d, child_rng(seed, "cond", "in_proj"))
        self.block = StDitBlock(cfg, seed, "cond.block", with_dffm=False, extra="none")
        self.out_gate = nx.Linear(cfg.d, cfg.d, child_rng(seed, "cond", "out_gate"), init="zero")


# parameter groups that the conditioning replica copies from block 0
_REPLICA_PARTS = ("spatial", "spatial_mod", "temporal", "temporal_mod", "mlp_in", "mlp_out", "mlp_mod")


class Denoiser(Module):
    """epsilon-prediction ST-DiT with garment fusion and optional limb attention."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        seed = cfg.seed
        extra_blocks = set(cfg.blocks_with_extra())
        self.in_proj = nx.Linear(cfg.patch_dim, cfg.d, child_rng(seed, "in_proj"))
        self.t_embed = TimestepEmbedder(cfg.d, cfg.T, child_rng(seed, "t_embed"))
        self.blocks = [
            StDitBlock(
                cfg,
                seed,
                f"blocks.{i}",
                with_dffm=cfg.use_dffm,
                extra=cfg.extra_attention if i in extra_blocks else "none",
            )
            for i in range(cfg.num_blocks)
        ]
        self.cond = ConditioningBlock(cfg, seed)
        if cfg.use_dffm and cfg.garment_encoder == "replica":
            self.replica = [
                StDitBlock(cfg, seed, f"replica.{i}", with_dffm=False, extra="none") for i in range(cfg.num_blocks)
            ]
        self.final_mod = AdaLN(cfg.d, child_rng(seed, "final_mod"), parts=2)
        self.final = nx.Linear(cfg.d, cfg.patch_dim, child_rng(seed, "final"))
        self.garment_pass_count = 0

    # -- helpers -------------------------------------------------------
    @property
    def dtype(self):
        return self.in_proj.weight.dtype

    def _cast(self, arr) -> np.ndarray:
        return np.asarray(getattr(arr, "data", arr), dtype=self.dtype)

    def _pos(self, f: int) -> np.ndarray:
        cfg = self.cfg
        return positional_encoding(f, cfg.grid, cfg.d).astype(self.dtype)

    def embed_tokens(self, tokens) -> Tensor:
        x = self.in_proj(self._cast(tokens))
        if self.cfg.use_pos_enc:
            x = nx.add(x, self._pos(x.shape[0]))
        return x

    def init_conditioning_from_block(self, index: int = 0) -> None:
        """Copy block ``index`` weights into the conditioning replica block."""
        src = self.blocks[index]
        dst = self.cond.block
        for part in _REPLICA_PARTS:
            getattr(dst, part).load_state_dict(getattr(src, part).state_dict())

    # -- pass 1 --------------------------------------------------------
    def garment_forward(self, c_latent, track_grad: bool = False) -> FeatureBank:
        """Encode a [1, h, w, cz] garment latent into a sealed feature bank.

        Runs at t = 0 without noise, conditioning, temporal attention or
        LDAM. With ``track_grad=False`` (default) the entries are constants.
        """
        cfg = self.cfg
        c = self._cast(c_latent)
        if c.shape != (1, cfg.h, cfg.w, cfg.cz):
            raise ConfigError(f"garment latent must be [1, {cfg.h}, {cfg.w}, {cfg.cz}], got {c.shape}")
        self.garment_pass_count += 1
        blocks = getattr(self, "replica", None) or self.blocks
        bank = FeatureBank()
        if track_grad:
            self._garment_pass(c, blocks, bank)
        else:
            with nx.no_grad():
                self._garment_pass(c, blocks, bank)
        return bank.seal()

    def _garment_pass(self, c: np.ndarray, blocks, bank: FeatureBank) -> None:
        x = self.embed_tokens(patchify(c, self.cfg.p))
        t_act = nx.silu(self.t_embed(0))
        for i, block in enumerate(blocks):
            x, tap = block.garment(x, t_act)
            bank.put(i, tap)

    # -- pass 2 --------------------------------------------------------
    def conditioning_forward(self, cond: ConditioningInputs, t_act: Tensor) -> Tensor:
        """Residual [f, s, d] from the conditioning block (added to block 0's input only)."""
        cfg = self.cfg
        stacked = self._cast(cond.stacked())
        if stacked.shape[1:] != (cfg.h, cfg.w, cfg.cz + 2):
            raise ConfigError(f"conditioning inputs {stacked.shape} do not match config")
        x = self.cond.in_proj(patchify(stacked, cfg.p))
        if cfg.use_pos_enc:
            x = nx.add(x, self._pos(x.shape[0]))
        x = self.cond.block(x, t_act, use_temporal=cfg.use_temporal)
        return self.cond.out_gate(x)

    def denoise_tokens(
        self,
        tokens,
        t: int,
        cond: ConditioningInputs | None = None,
        bank: FeatureBank | None = None,
        gather: LimbGather | None = None,
    ) -> Tensor:
        """[f, s, p*p*cz] noisy patches -> predicted-noise patches."""
        cfg = self.cfg
        if cfg.use_dffm:
            if bank is None:
                raise nx.ContractError("garment fusion is enabled but no feature bank was given")
            if not bank.sealed:
                from .dffm import BankStateError

                raise BankStateError("feature bank must be sealed before denoising")
        t_act = nx.silu(self.t_embed(t))
        x = self.embed_tokens(tokens)
        if cond is not None:
            x = nx.add(x, self.conditioning_forward(cond, t_act))
        use_extra = cfg.use_ldam if cfg.extra_attention == "ldam" else cfg.extra_attention == "full3d"
        for i, block in enumerate(self.blocks):
            entry = bank[i] if cfg.use_dffm else None
            x = block(x, t_act, entry, gather, use_temporal=cfg.use_temporal, use_extra=use_extra)
        shift, scale = self.final_mod(t_act)
        return self.final(modulate(nx.layer_norm(x), shift, scale))

    def denoise(
        self,
        z_t,
        t: int,
        cond: ConditioningInputs | None = None,
        bank: FeatureBank | None = None,
        gather: LimbGather | None = None,
    ) -> Tensor:
        """Predict the injected noise for a [f, h, w, cz] latent."""
        cfg = self.cfg
        z = self._cast(z_t)
        if z.ndim != 4 or z.shape[1:] != (cfg.h, cfg.w, cfg.cz):
            raise ConfigError(f"latent must be [f, {cfg.h}, {cfg.w}, {cfg.cz}], got {z.shape}")
        if cond is not None and cond.frames != z.shape[0]:
            raise ConfigError("conditioning frame count differs from the latent")
        out = self.denoise_tokens(patchify(z, cfg.p), t, cond, bank, gather)
        return unpatchify(out, cfg.h, cfg.w, cfg.p)

    __call__ = denoise

    # -- checkpoints ---------------------------------------------------
    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> None:
        """Directory of DTEN files plus ``manifest.json`` (config and name -> file)."""
        os.makedirs(directory, exist_ok=True)
        files = {}
        for name, p in self.named_parameters():
            fname = name.replace(".", "_") + ".dten"
            nx.dten.save(os.path.join(directory, fname), p.data)
            files[name] = fname
        manifest = {"config": self.cfg.to_dict(), "params": files}
        if extra:
            manifest.update(extra)
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str | os.PathLike, dtype=None) -> Denoiser:
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        state = {name: nx.dten.load(os.path.join(directory, f)) for name, f in manifest["params"].items()}
        if dtype is None:
            dtype = next(iter(state.values())).dtype if state else nx.get_default_dtype()
        with nx.default_dtype(dtype):
            model = cls(ModelConfig.from_dict(manifest["config"]))
        model.load_state_dict(state)
        return model


def ablation_configs(base: ModelConfig, full3d_blocks: list[int] | None = None) -> dict[str, ModelConfig]:
    """Garment-paradigm x extra-attention variants (replica/none, DFFM/none, DFFM/3D-full, DFFM/LDAM)."""

    def variant(**kw) -> ModelConfig:
        cfg = copy.deepcopy(base)
        for k, v in kw.items():
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    return {
        "replica_none": variant(use_dffm=True, garment_encoder="replica", extra_attention="none", use_ldam=False),
        "dffm_none": variant(use_dffm=True, garment_encoder="shared", extra_attention="none", use_ldam=False),
        "dffm_full3d": variant(
            use_dffm=True, garment_encoder="shared", extra_attention="full3d", extra_blocks=full3d_blocks, use_ldam=False
        ),
        "dffm_ldam": variant(use_dffm=True, garment_encoder="shared", extra_attention="ldam", use_ldam=True),
    }
