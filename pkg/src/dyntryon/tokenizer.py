"""Latent video <-> token sequence conversion and positional encodings.

Patch order is row-major over the patch grid (patch row, then patch
column); inside a patch the flattening order is (row, col, channel). Limb
masks in :mod:`dyntryon.pose` use the same token indexing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np


class ConfigError(ValueError):
    """Inconsistent sizes or invalid configuration values."""


@dataclass
class ModelConfig:
    """Sizes and switches for the denoiser.

    ``H``/``W`` are nominal pixel dimensions; the latent grid is ``H/8 x W/8``.
    """

    H: int = 128
    W: int = 128
    cz: int = 4
    p: int = 2
    f: int = 4
    d: int = 32
    num_blocks: int = 2
    heads: int = 4
    L: int = 4
    n_cap: int = 12
    limb_radius: int = 0
    T: int = 100
    mlp_ratio: int = 4
    use_dffm: bool = True
    garment_encoder: str = "shared"  # "shared" (backbone reused) or "replica"
    extra_attention: str = "ldam"  # "none", "ldam" or "full3d"
    extra_blocks: list[int] | None = None  # blocks carrying LDAM/full3d; None = all
    use_ldam: bool = False  # LDAM plugged in (stage 3 onwards)
    use_temporal: bool = True
    use_pos_enc: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def h(self) -> int:
        return self.H // 8

    @property
    def w(self) -> int:
        return self.W // 8

    @property
    def grid(self) -> tuple[int, int]:
        return self.h // self.p, self.w // self.p

    @property
    def s(self) -> int:
        return self.h * self.w // (self.p * self.p)

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.cz

    def validate(self) -> None:
        if self.H % 8 or self.W % 8 or self.H <= 0 or self.W <= 0:
            raise ConfigError(f"H, W must be positive multiples of 8, got {self.H}x{self.W}")
        if self.p < 1 or self.h % self.p or self.w % self.p:
            raise ConfigError(f"latent {self.h}x{self.w} not divisible by patch size {self.p}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 for positional encoding")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.L < 1 or self.n_cap < 1:
            raise ConfigError("L and n_cap must be >= 1")
        if self.garment_encoder not in ("shared", "replica"):
            raise ConfigError(f"garment_encoder must be 'shared' or 'replica', got {self.garment_encoder!r}")
        if self.extra_attention not in ("none", "ldam", "full3d"):
            raise ConfigError(f"extra_attention must be none/ldam/full3d, got {self.extra_attention!r}")
        if self.extra_blocks is not None and any(not 0 <= b < self.num_blocks for b in self.extra_blocks):
            raise ConfigError("extra_blocks entries must index existing blocks")

    def blocks_with_extra(self) -> list[int]:
        if self.extra_attention == "none":
            return []
        return list(range(self.num_blocks)) if self.extra_blocks is None else sorted(self.extra_blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**data)


def _split(x, p: int):
    f, h, w, c = x.shape
    if h % p or w % p:
        raise ConfigError(f"latent {h}x{w} not divisible by patch size {p}")
    return f, h, w, c


def patchify(z, p: int):
    """[f, h, w, c] -> [f, (h/p)*(w/p), p*p*c].

    Works on numpy arrays and on autodiff tensors (pure rearrangement).
    """
    if len(z.shape) != 4:
        raise ConfigError(f"expected a [f, h, w, c] latent, got shape {z.shape}")
    f, h, w, c = _split(z, p)
    x = z.reshape(f, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(f, (h // p) * (w // p), p * p * c)


def unpatchify(tokens, h: int, w: int, p: int):
    """Inverse of :func:`patchify`: [f, s, p*p*c] -> [f, h, w, c]."""
    if len(tokens.shape) != 3:
        raise ConfigError(f"expected [f, s, dim] tokens, got shape {tokens.shape}")
    f, s, dim = tokens.shape
    if h % p or w % p:
        raise ConfigError(f"latent {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if s != gh * gw:
        raise ConfigError(f"token count {s} != ({h}/{p})*({w}/{p}) = {gh * gw}")
    if dim % (p * p):
        raise ConfigError(f"token dim {dim} not a multiple of p*p={p * p}")
    c = dim // (p * p)
    x = tokens.reshape(f, gh, gw, p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(f, h, w, c)


def _sincos(pos: np.ndarray, dims: int) -> np.ndarray:
    n_freq = (dims + 1) // 2
    freqs = 1.0 / 10000.0 ** (np.arange(n_freq) / max(n_freq, 1))
    angles = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dims]


@lru_cache(maxsize=64)
def _positional_encoding(f: int, gh: int, gw: int, d: int) -> np.ndarray:
    quarter = d // 4
    rows = np.repeat(np.arange(gh, dtype=np.float64), gw)
    cols = np.tile(np.arange(gw, dtype=np.float64), gh)
    spatial = np.concatenate([_sincos(rows, quarter), _sincos(cols, quarter)], axis=1)  # [s, d/2]
    temporal = _sincos(np.arange(f, dtype=np.float64), d - 2 * quarter)  # [f, d/2]
    s = gh * gw
    pe = np.concatenate(
        [np.broadcast_to(spatial, (f, s, 2 * quarter)), np.broadcast_to(temporal[:, None, :], (f, s, d - 2 * quarter))],
        axis=2,
    )
    pe.setflags(write=False)
    return pe


def positional_encoding(f: int, s: int | tuple[int, int], d: int) -> np.ndarray:
    """Sinusoidal [f, s, d] encoding.

    The first d/2 channels encode the (row, col) patch coordinate, the rest
    the frame index. ``s`` may be given as the patch grid ``(rows, cols)``;
    a bare integer is interpreted as a square grid, or a single row if it is
    not a perfect square.
    """
    if d % 4:
        raise ConfigError(f"positional encoding needs d divisible by 4, got {d}")
    if isinstance(s, tuple):
        gh, gw = s
    else:
        root = int(round(np.sqrt(s)))
        gh, gw = (root, root) if root * root == s else (1, s)
    return _positional_encoding(int(f), int(gh), int(gw), int(d))
