"""Keypoint sequences, limb token masks and pose maps.

Keypoint order (K = 13)::

    0 head, 1 l_shoulder, 2 r_shoulder, 3 l_elbow, 4 r_elbow, 5 l_wrist,
    6 r_wrist, 7 l_hip, 8 r_hip, 9 l_knee, 10 r_knee, 11 l_ankle, 12 r_ankle

Coordinates are ``(x, y)`` normalised to [0, 1]; a point maps to grid cell
``(min(floor(y*rows), rows-1), min(floor(x*cols), cols-1))``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .numerics.ops import NEG_LARGE
from .tokenizer import ConfigError

KEYPOINTS = (
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)
K = len(KEYPOINTS)

# Each limb is a chain of keypoint-index segments.
LIMBS: tuple[tuple[tuple[int, int], ...], ...] = (
    ((1, 3), (3, 5)),  # left arm
    ((2, 4), (4, 6)),  # right arm
    ((7, 9), (9, 11)),  # left leg
    ((8, 10), (10, 12)),  # right leg
)
LIMB_NAMES = ("left_arm", "right_arm", "left_leg", "right_leg")

TORSO_BONES = ((0, 1), (0, 2), (1, 2), (1, 7), (2, 8), (7, 8))
SKELETON = TORSO_BONES + tuple(seg for limb in LIMBS for seg in limb)


@dataclass
class PoseSequence:
    coords: np.ndarray  # [f, K, 2] (x, y) in [0, 1]
    visible: np.ndarray  # [f, K] bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.coords.ndim != 3 or self.coords.shape[1:] != (K, 2):
            raise ConfigError(f"coords must be [f, {K}, 2], got {self.coords.shape}")
        if self.visible.shape != self.coords.shape[:2]:
            raise ConfigError(f"visible must be [f, {K}], got {self.visible.shape}")
        inside = np.all((self.coords >= 0.0) & (self.coords <= 1.0), axis=-1)
        if np.any(self.visible & ~inside):
            raise ConfigError("visible keypoints must lie in [0, 1]")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def invisible(cls, frames: int) -> PoseSequence:
        return cls(np.zeros((frames, K, 2)), np.zeros((frames, K), dtype=bool))

    def to_json(self) -> dict:
        return {
            "frames": self.frames,
            "keypoint_order": list(KEYPOINTS),
            "coords": self.coords.tolist(),
            "visible": self.visible.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> PoseSequence:
        if list(doc.get("keypoint_order", KEYPOINTS)) != list(KEYPOINTS):
            raise ConfigError("pose file keypoint_order does not match the 13-point layout")
        pose = cls(np.array(doc["coords"], dtype=np.float64), np.array(doc["visible"], dtype=bool))
        if pose.frames != doc["frames"]:
            raise ConfigError("pose file 'frames' disagrees with coords")
        return pose

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> PoseSequence:
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def to_cell(xy, rows: int, cols: int) -> tuple[int, int]:
    x, y = xy
    return min(int(np.floor(y * rows)), rows - 1), min(int(np.floor(x * cols)), cols - 1)


def line_cells(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line walk between two cells (inclusive), rounding half up.

    Steps once per cell along the major axis; the minor coordinate at step
    ``i`` is ``floor(minor0 + i*delta/n + 1/2)`` computed in exact integer
    arithmetic.
    """
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return [(r0, c0)]
    return [(r0 + (2 * i * dr + n) // (2 * n), c0 + (2 * i * dc + n) // (2 * n)) for i in range(n + 1)]


def _draw_segments(canvas: np.ndarray, pose: PoseSequence, frame: int, segments, radius: int) -> None:
    rows, cols = canvas.shape
    for a, b in segments:
        if a >= K or b >= K or a < 0 or b < 0:
            raise ConfigError(f"keypoint index out of range in segment ({a}, {b})")
        if not (pose.visible[frame, a] and pose.visible[frame, b]):
            continue
        ra, ca = to_cell(pose.coords[frame, a], rows, cols)
        rb, cb = to_cell(pose.coords[frame, b], rows, cols)
        for r, c in line_cells(ra, ca, rb, cb):
            canvas[max(r - radius, 0) : r + radius + 1, max(c - radius, 0) : c + radius + 1] = True


def rasterize_limb_masks(pose: PoseSequence, grid: tuple[int, int], radius: int = 0, limbs=LIMBS) -> np.ndarray:
    """Boolean limb token mask [L, f, rows*cols] on the patch grid.

    Cells within Chebyshev distance ``radius`` of a limb's walked segments
    are set. Segments with an invisible endpoint are skipped.
    """
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    rows, cols = grid
    out = np.zeros((len(limbs), pose.frames, rows * cols), dtype=bool)
    for li, segments in enumerate(limbs):
        for fi in range(pose.frames):
            canvas = np.zeros((rows, cols), dtype=bool)
            _draw_segments(canvas, pose, fi, segments, radius)
            out[li, fi] = canvas.reshape(-1)
    return out


def render_pose_map(pose: PoseSequence, h: int, w: int, segments=SKELETON, radius: int = 0) -> np.ndarray:
    """Skeleton drawn as 1.0 on a zero [f, h, w, 1] map (same line walk as the limb masks)."""
    out = np.zeros((pose.frames, h, w, 1))
    for fi in range(pose.frames):
        canvas = np.zeros((h, w), dtype=bool)
        _draw_segments(canvas, pose, fi, segments, radius)
        out[fi, :, :, 0] = canvas
    return out


@dataclass
class LimbGather:
    """Per-limb token index lists padded to a common length ``n``.

    ``indices[l, j]`` is the flat ``frame*s + token`` position of slot ``j``
    (0 for padding); ``valid[l, j]`` marks real slots. ``mask`` is the
    additive [L, n, n] attention mask: 0 between real slots, ``NEG_LARGE``
    on any row or column touching padding.
    """

    S_l: np.ndarray  # [L, f, s] bool
    indices: np.ndarray  # [L, n] int64
    valid: np.ndarray  # [L, n] bool
    counts: np.ndarray  # [L] int64, real slots after truncation
    n: int
    mask: np.ndarray  # [L, n, n]

    @property
    def L(self) -> int:
        return self.indices.shape[0]

    @property
    def frames(self) -> int:
        return self.S_l.shape[1]

    @property
    def tokens(self) -> int:
        return self.S_l.shape[2]

    def pairs(self, limb: int) -> list[tuple[int, int]]:
        s = self.tokens
        return [(int(i) // s, int(i) % s) for i in self.indices[limb, : self.counts[limb]]]

    def member_tokens(self) -> np.ndarray:
        """Flat positions belonging to at least one limb (after truncation)."""
        return np.unique(self.indices[self.valid])


def build_limb_gather(S_l: np.ndarray, n_cap: int) -> LimbGather:
    """Index, truncate and pad limb tokens.

    ``n = min(max_l count_l, n_cap)`` (at least 1). A limb with more than
    ``n`` tokens keeps the ``n`` positions ``floor(j*count/n)`` of its
    frame-major ordering, which spreads the kept tokens uniformly in time.
    """
    if n_cap < 1:
        raise ConfigError("n_cap must be >= 1")
    S_l = np.asarray(S_l, dtype=bool)
    L, f, s = S_l.shape
    flat = S_l.reshape(L, f * s)
    per_limb = [np.flatnonzero(flat[l]) for l in range(L)]
    raw = np.array([len(ix) for ix in per_limb], dtype=np.int64)
    n = int(max(1, min(int(raw.max(initial=0)), n_cap)))
    indices = np.zeros((L, n), dtype=np.int64)
    valid = np.zeros((L, n), dtype=bool)
    counts = np.zeros(L, dtype=np.int64)
    for l, ix in enumerate(per_limb):
        if len(ix) > n:
            ix = ix[(np.arange(n) * len(ix)) // n]
        indices[l, : len(ix)] = ix
        valid[l, : len(ix)] = True
        counts[l] = len(ix)
    pair_ok = valid[:, :, None] & valid[:, None, :]
    mask = np.where(pair_ok, 0.0, NEG_LARGE)
    return LimbGather(S_l=S_l, indices=indices, valid=valid, counts=counts, n=n, mask=mask)
