"""Procedural try-on scenes generated directly in latent space.

Each scene has a static background gradient, four limb bars that follow
the exported keypoints, and a textured torso (the garment) translating
over time. The torso is painted last, so inside the torso mask the ground
truth is exactly the garment texture shifted by the per-frame offset.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import numerics as nx
from .backbone import ConditioningInputs
from .pose import LIMBS, K, LimbGather, PoseSequence, build_limb_gather, rasterize_limb_masks, render_pose_map
from .tokenizer import ConfigError

TEXTURES = ("checker", "stripes", "glyph")
LIMB_SEGMENTS = tuple(seg for limb in LIMBS for seg in limb)

# fixed 4 -> 3 map for PNG previews
VIS_DECODER = np.array(
    [
        [0.6, 0.2, 0.1],
        [0.2, 0.6, 0.1],
        [0.1, 0.2, 0.6],
        [0.3, -0.3, 0.3],
    ]
)


@dataclass
class ScenarioConfig:
    """Scene geometry and motion.

    Trajectory units are *cells* of ``cell`` latent pixels (default 2, one
    patch), so the torso always lands on the patch grid.
    """

    f: int = 4
    h: int = 16
    w: int = 16
    cz: int = 4
    torso: tuple[int, int] = (6, 4)
    cell: int = 2
    trajectory: str = "linear"  # "linear" | "sinusoidal"
    velocity: tuple[float, float] = (0.0, 0.5)  # (rows, cols) cells per frame, linear
    amplitude: tuple[float, float] = (0.0, 1.0)  # cells, sinusoidal
    period: float = 4.0  # frames, sinusoidal
    jitter: tuple[int, int] = (1, 0)  # max random (row, col) shift of the centre, cells
    upper_limb: int = 2
    lower_limb: int = 2
    swing_amplitude: float = 0.4  # radians
    swing_frequency: float = 0.25  # cycles per frame
    textures: tuple[str, ...] = TEXTURES
    noise_floor: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.torso = tuple(self.torso)
        self.velocity = tuple(self.velocity)
        self.amplitude = tuple(self.amplitude)
        self.textures = tuple(self.textures)
        self.jitter = tuple(self.jitter)
        if self.f < 1 or self.h < 4 or self.w < 4 or self.cz < 1:
            raise ConfigError("scenario dimensions too small")
        if self.trajectory not in ("linear", "sinusoidal"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if not self.textures or any(t not in TEXTURES for t in self.textures):
            raise ConfigError(f"textures must be drawn from {TEXTURES}")
        th, tw = self.torso
        if th < 2 or tw < 2 or th % self.cell or tw % self.cell:
            raise ConfigError("torso size must be a multiple of the cell size")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("torso", "velocity", "amplitude", "textures", "jitter"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown data config key(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SyntheticSample:
    gt: np.ndarray  # [f, h, w, cz]
    cond: ConditioningInputs
    garment: np.ndarray  # [1, h, w, cz]
    pose: PoseSequence
    seed: int
    texture: np.ndarray = field(repr=False)  # [th, tw, cz]
    offsets: np.ndarray = field(repr=False)  # [f, 2] torso top-left (row, col), latent pixels
    family: str = "checker"

    @property
    def frames(self) -> int:
        return self.gt.shape[0]

    @property
    def torso_mask(self) -> np.ndarray:
        return self.cond.m_c[..., 0].astype(bool)

    def limb_mask(self) -> np.ndarray:
        """[f, h, w] bool: pixels covered by limb bars."""
        h, w = self.gt.shape[1:3]
        return render_pose_map(self.pose, h, w, segments=LIMB_SEGMENTS)[..., 0].astype(bool)

    def limb_gather(self, grid: tuple[int, int], n_cap: int, radius: int = 0) -> LimbGather:
        return build_limb_gather(rasterize_limb_masks(self.pose, grid, radius), n_cap)

    def frame_slice(self, start: int, stop: int) -> SyntheticSample:
        pose = PoseSequence(self.pose.coords[start:stop], self.pose.visible[start:stop])
        return SyntheticSample(
            gt=self.gt[start:stop],
            cond=self.cond.frame_slice(start, stop),
            garment=self.garment,
            pose=pose,
            seed=self.seed,
            texture=self.texture,
            offsets=self.offsets[start:stop],
            family=self.family,
        )


def make_texture(family: str, th: int, tw: int, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    u, v = np.meshgrid(np.arange(th), np.arange(tw), indexing="ij")
    if family == "checker":
        sel = (u + v) % 2 == 0
    elif family == "stripes":
        sel = u % 2 == 0
    elif family == "glyph":
        # block letter "T"
        sel = ~((u < max(th // 3, 1)) | ((v >= tw // 2 - 1) & (v <= tw // 2)))
    else:
        raise ConfigError(f"unknown texture family {family!r}")
    return np.where(sel[..., None], c1, c2)


def background(h: int, w: int, cz: int) -> np.ndarray:
    y = np.linspace(-0.5, 0.5, h)[:, None, None]
    x = np.linspace(-0.5, 0.5, w)[None, :, None]
    sign = (-1.0) ** np.arange(cz)[None, None, :]
    return 0.15 * y + 0.15 * x * sign


def _offsets(cfg: ScenarioConfig, base: tuple[int, int], phase: float) -> np.ndarray:
    i = np.arange(cfg.f, dtype=np.float64)
    if cfg.trajectory == "linear":
        shift = np.stack([(i - (cfg.f - 1) / 2) * v for v in cfg.velocity], axis=1)
    else:
        angle = 2 * np.pi * i / cfg.period + phase
        shift = np.stack([a * np.sin(angle) for a in cfg.amplitude], axis=1)
    cells = np.floor(shift + 0.5).astype(int)
    return np.array(base)[None, :] + cells * cfg.cell


def _keypoints(cfg: ScenarioConfig, top: int, left: int, frame: int, phase: float) -> np.ndarray:
    """Integer (row, col) keypoints for one frame."""
    th, tw = cfg.torso
    pts = np.zeros((K, 2), dtype=int)
    pts[0] = (top - 1, left + tw // 2)
    pts[1] = (top, left - 1)
    pts[2] = (top, left + tw)
    pts[7] = (top + th - 1, left)
    pts[8] = (top + th - 1, left + tw - 1)
    swing = cfg.swing_amplitude * np.sin(2 * np.pi * cfg.swing_frequency * frame + phase)
    # arms hang down and outwards; legs hang down with a smaller swing
    for root, mid, end, outward, angle in (
        (1, 3, 5, -1, 0.3 + swing),
        (2, 4, 6, +1, 0.3 - swing),
        (7, 9, 11, -1, 0.15 + 0.4 * swing),
        (8, 10, 12, +1, 0.15 - 0.4 * swing),
    ):
        direction = np.array([np.cos(angle), outward * np.sin(angle)])
        pts[mid] = pts[root] + np.floor(cfg.upper_limb * direction + 0.5).astype(int)
        pts[end] = pts[mid] + np.floor(cfg.lower_limb * direction + 0.5).astype(int)
    return pts


def gen_sample(cfg: ScenarioConfig, seed: int) -> SyntheticSample:
    """Deterministic scene for ``seed``; raises ``ConfigError`` if anything leaves the frame."""
    rng = np.random.default_rng(seed)
    f, h, w, cz = cfg.f, cfg.h, cfg.w, cfg.cz
    th, tw = cfg.torso
    family = cfg.textures[seed % len(cfg.textures)]
    sign = rng.choice([-1.0, 1.0], size=cz)
    c1 = sign * rng.uniform(0.4, 0.9, size=cz)
    c2 = -c1 * rng.uniform(0.6, 1.0, size=cz)
    skin = rng.uniform(0.3, 0.8, size=cz)
    phase = float(rng.uniform(0.0, 2 * np.pi))
    jitter = np.array([rng.integers(-j, j + 1) for j in cfg.jitter])
    noise = cfg.noise_floor * rng.standard_normal((h, w, cz))

    snap = lambda v: (v // cfg.cell) * cfg.cell  # noqa: E731
    base = (snap((h - th) // 2) + jitter[0] * cfg.cell, snap((w - tw) // 2) + jitter[1] * cfg.cell)
    offsets = _offsets(cfg, base, phase)
    texture = make_texture(family, th, tw, c1, c2)

    coords = np.zeros((f, K, 2))
    for i in range(f):
        top, left = offsets[i]
        if top < 0 or left < 0 or top + th > h or left + tw > w:
            raise ConfigError(f"torso leaves the frame at frame {i} (seed {seed})")
        pts = _keypoints(cfg, top, left, i, phase)
        if pts.min() < 0 or np.any(pts[:, 0] >= h) or np.any(pts[:, 1] >= w):
            raise ConfigError(f"keypoints leave the frame at frame {i} (seed {seed})")
        coords[i, :, 0] = (pts[:, 1] + 0.5) / w
        coords[i, :, 1] = (pts[:, 0] + 0.5) / h
    pose = PoseSequence(coords, np.ones((f, K), dtype=bool))

    gt = np.broadcast_to(background(h, w, cz) + noise, (f, h, w, cz)).copy()
    limbs = render_pose_map(pose, h, w, segments=LIMB_SEGMENTS)[..., 0].astype(bool)
    gt[limbs] = skin
    m_c = np.zeros((f, h, w, 1))
    for i, (top, left) in enumerate(offsets):
        gt[i, top : top + th, left : left + tw] = texture
        m_c[i, top : top + th, left : left + tw] = 1.0

    garment = np.zeros((1, h, w, cz))
    g_top, g_left = snap((h - th) // 2), snap((w - tw) // 2)
    garment[0, g_top : g_top + th, g_left : g_left + tw] = texture

    cond = ConditioningInputs(x_a=gt * (1.0 - m_c), m_c=m_c, pose_map=render_pose_map(pose, h, w))
    return SyntheticSample(gt, cond, garment, pose, seed, texture, offsets, family)


def gen_dataset(cfg: ScenarioConfig, count: int, base_seed: int, image_mode: bool = False) -> Iterator[SyntheticSample]:
    """Yield ``count`` samples with seeds ``base_seed + i``.

    In image mode each sample is the single frame ``i % f`` of its video.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    for i in range(count):
        s = gen_sample(cfg, base_seed + i)
        if image_mode:
            j = i % cfg.f
            s = s.frame_slice(j, j + 1)
        yield s


def decode_preview(latent: np.ndarray) -> np.ndarray:
    """Fixed linear 4 -> 3 map to uint8 RGB ([..., h, w, 3]); extra channels are ignored."""
    lat = np.asarray(latent)[..., : VIS_DECODER.shape[0]]
    rgb = lat @ VIS_DECODER[: lat.shape[-1]]
    return np.clip((rgb + 1.0) * 127.5, 0, 255).astype(np.uint8)


def save_sample(sample: SyntheticSample, directory: str | os.PathLike) -> dict:
    """Write one sample as DTEN tensors plus ``pose.json``; return its file map."""
    os.makedirs(directory, exist_ok=True)
    files = {
        "gt": sample.gt,
        "x_a": sample.cond.x_a,
        "m_c": sample.cond.m_c,
        "pose_map": sample.cond.pose_map,
        "garment": sample.garment,
        "texture": sample.texture,
        "offsets": sample.offsets.astype(np.float64),
    }
    names = {}
    for key, arr in files.items():
        names[key] = f"{key}.dten"
        nx.dten.save(os.path.join(directory, names[key]), np.asarray(arr, dtype=np.float64))
    sample.pose.save(os.path.join(directory, "pose.json"))
    names["pose"] = "pose.json"
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump({"seed": sample.seed, "family": sample.family}, fh, sort_keys=True)
    names["meta"] = "meta.json"
    return names


def load_sample(directory: str | os.PathLike) -> SyntheticSample:
    def t(name):
        return nx.dten.load(os.path.join(directory, f"{name}.dten"))

    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    cond = ConditioningInputs(t("x_a"), t("m_c"), t("pose_map"))
    return SyntheticSample(
        gt=t("gt"),
        cond=cond,
        garment=t("garment"),
        pose=PoseSequence.load(os.path.join(directory, "pose.json")),
        seed=meta["seed"],
        texture=t("texture"),
        offsets=t("offsets").astype(int),
        family=meta["family"],
    )


def write_dataset(cfg: ScenarioConfig, directory: str | os.PathLike, count: int, base_seed: int) -> str:
    """Dump ``count`` samples under ``directory``; return the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, sample in enumerate(gen_dataset(cfg, count, base_seed)):
        sub = f"sample_{i:04d}"
        files = save_sample(sample, os.path.join(directory, sub))
        entries.append({"dir": sub, "seed": sample.seed, "files": files})
    manifest = {"scenario": cfg.to_dict(), "base_seed": base_seed, "count": count, "samples": entries}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_dataset(directory: str | os.PathLike) -> list[SyntheticSample]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    return [load_sample(os.path.join(directory, e["dir"])) for e in manifest["samples"]]
