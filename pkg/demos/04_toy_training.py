"""Staged training on a handful of synthetic videos, then sampling.

Stage 1 trains the spatial and garment-fusion layers on single frames,
stage 2 the whole backbone on videos, stage 3 only the limb attention.
The full schedule (3000 steps) takes a few minutes on one core; pass
a smaller number of steps per stage on the command line for a quick look:

    python demos/04_toy_training.py 100
"""

import sys
import time

import numpy as np

from dyntryon.backbone import Denoiser
from dyntryon.benchmetrics import quality_metrics
from dyntryon.cli import RunConfig
from dyntryon.diffusion import StageConfig, Trainer, sample, smoothed
from dyntryon.synthdata import gen_dataset

cfg = RunConfig()
if len(sys.argv) > 1:
    steps = int(sys.argv[1])
    cfg.stages = {k: StageConfig(**{**v.__dict__, "steps": steps}) for k, v in cfg.stages.items()}

videos = list(gen_dataset(cfg.data, cfg.train.videos, cfg.train.base_seed))
model = Denoiser(cfg.model)
schedule = cfg.schedule.build(cfg.model.T)
trainer = Trainer(model, schedule, videos, cfg.stage_configs(), cfg.seed, cfg.train.lambda_bg)
print(f"{model.num_parameters()} parameters, {len(videos)} videos")

for stage in (1, 2, 3):
    t0 = time.perf_counter()
    recs = trainer.run_stage(stage)
    sm = smoothed([r["loss"] for r in recs], window=min(50, len(recs)))
    print(f"stage {stage}: {len(recs)} steps in {time.perf_counter() - t0:.0f}s, smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")

for v in videos[:3]:
    pred = sample(model, v.cond, v.garment, v.pose, schedule, cfg.sample.steps, np.random.default_rng(0))
    m = quality_metrics(pred, v)
    print(f"video {v.seed} ({v.family}): ssim {m['ssim']:.3f}  psnr {m['psnr']:.1f}  flicker {m['flicker']:.4f}")
