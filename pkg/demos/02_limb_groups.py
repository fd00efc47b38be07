"""From pose keypoints to limb token groups.

A pose sequence gives 13 keypoints per frame. Each arm and leg is
rasterized onto the token grid, the
covered tokens of every frame are collected into one group, and
attention runs inside each group only.
"""

import numpy as np

from dyntryon import oracles
from dyntryon.ldam import LdamWeights, ldam_forward
from dyntryon.pose import LIMBS, build_limb_gather, rasterize_limb_masks
from dyntryon.synthdata import ScenarioConfig, gen_sample

item = gen_sample(ScenarioConfig(), 3)
grid = (8, 8)  # a 16x16 latent cut into 2x2 patches
masks = rasterize_limb_masks(item.pose, grid)
print("limb masks:", masks.shape, "(limbs, frames, grid cells)")

# the limbs of frame 0, one letter per limb
canvas = np.full(grid, ".")
for l, name in enumerate(LIMBS):
    canvas[masks[l, 0].reshape(grid)] = "abcdefghijklmnop"[l]
print("\n".join(" ".join(row) for row in canvas))

gather = build_limb_gather(masks.reshape(len(LIMBS), item.frames, -1), n_cap=12)
print("\ntokens per limb (after the cap):", gather.counts.tolist())
print("padding slots are masked out:", (~gather.valid).sum(), "of", gather.valid.size)

# limb attention touches only the tokens that belong to some limb
rng = np.random.default_rng(0)
x = rng.standard_normal((item.frames, 64, 16))
w = LdamWeights(16, 2, rng)
w.out_proj.weight.data[...] = rng.standard_normal((16, 16)) * 0.1
out = ldam_forward(x, gather, w).data
moved = np.abs(out - x).reshape(-1, 16).max(axis=1) > 0
print("tokens changed:", int(moved.sum()), "limb tokens:", len(gather.member_tokens()))

# and equals plain dense attention over each limb's own tokens
weights = {k: (getattr(w.attn, k).weight.data, getattr(w.attn, k).bias.data) for k in "qkvo"}
weights["out"] = (w.out_proj.weight.data, w.out_proj.bias.data)
members = [list(gather.indices[l, : gather.counts[l]]) for l in range(gather.L)]
dense = oracles.dense_limb_attention(x.reshape(-1, 16), members, weights, 2, (w.norm.gain.data, w.norm.bias.data))
print("max difference to the dense oracle:", np.abs(out.reshape(-1, 16) - dense).max())
