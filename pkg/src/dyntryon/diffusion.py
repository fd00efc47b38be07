"""DDPM noising, epsilon-prediction loss, ancestral sampling and staged training.

Timesteps are 1-indexed: ``t`` in ``[1, T]`` reads ``alpha_bar[t-1]`` and
``t = 0`` denotes the clean latent.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import ConditioningInputs, Denoiser
from .pose import LIMBS, LimbGather, PoseSequence, build_limb_gather, rasterize_limb_masks, render_pose_map
from .tokenizer import ConfigError

LIMB_SEGMENTS = tuple(seg for limb in LIMBS for seg in limb)


class StageOrderError(nx.ContractError):
    """A training stage was requested out of order."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise nx.ContractError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def q_sample(self, z0, t: int, eps) -> np.ndarray:
        return q_sample(self, z0, t, eps)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar)


def toy_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by ``1000/T``."""
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, min(2e-2 * scale, 0.999))


def q_sample(schedule: NoiseSchedule, z0, t: int, eps) -> np.ndarray:
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise nx.DimensionError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def limb_gather_for(model: Denoiser, pose: PoseSequence) -> LimbGather:
    cfg = model.cfg
    return build_limb_gather(rasterize_limb_masks(pose, cfg.grid, cfg.limb_radius), cfg.n_cap)


def needs_gather(model: Denoiser) -> bool:
    return model.cfg.extra_attention == "ldam" and model.cfg.use_ldam


def region_weights(cond: ConditioningInputs, pose: PoseSequence, lambda_bg: float) -> np.ndarray:
    """[f, h, w, 1]: 1 on the inpaint mask or limb bars, ``lambda_bg`` elsewhere."""
    f, h, w, _ = cond.m_c.shape
    limbs = render_pose_map(pose, h, w, segments=LIMB_SEGMENTS)
    focus = (cond.m_c > 0) | (limbs > 0)
    return np.where(focus, 1.0, lambda_bg)


def training_loss(
    model: Denoiser,
    sample,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    lambda_bg: float = 0.1,
    use_cond: bool = True,
    predict: Callable | None = None,
) -> tuple[nx.Tensor, int]:
    """Region-weighted epsilon MSE for one sample; returns ``(loss, t)``.

    ``predict(z_t, t, eps)`` replaces the model call when given (used to
    probe the loss with an oracle prediction).
    """
    gt = np.asarray(sample.gt)
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(gt.shape)
    z_t = q_sample(schedule, gt, t, eps)
    if predict is not None:
        pred = nx.as_tensor(predict(z_t, t, eps))
    else:
        bank = model.garment_forward(sample.garment) if model.cfg.use_dffm else None
        gather = limb_gather_for(model, sample.pose) if needs_gather(model) else None
        cond = sample.cond if use_cond else None
        pred = model.denoise(z_t, t, cond, bank, gather)
    weights = region_weights(sample.cond, sample.pose, lambda_bg).astype(pred.dtype)
    diff = nx.sub(pred, eps.astype(pred.dtype))
    return nx.mean(nx.mul(nx.square(diff), weights)), t


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def respaced_timesteps(T: int, steps: int) -> list[int]:
    """Descending distinct timesteps from T to 1 (all of them when ``steps >= T``)."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if steps >= T:
        return list(range(T, 0, -1))
    ts = np.unique(np.floor(np.linspace(1, T, steps) + 0.5).astype(int))
    return [int(t) for t in ts[::-1]]


def sample(
    model: Denoiser,
    cond: ConditioningInputs | None,
    garment,
    pose: PoseSequence | None,
    schedule: NoiseSchedule,
    steps: int | None = None,
    rng: np.random.Generator | None = None,
    frames: int | None = None,
    clip: float | None = 1.0,
) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise; returns a [f, h, w, cz] latent.

    The garment bank is computed once and reused at every step. Each step
    forms the clean-latent estimate, clips it to ``[-clip, clip]`` (skipped
    when ``clip`` is None) and draws from the posterior around it.
    """
    cfg = model.cfg
    rng = rng if rng is not None else np.random.default_rng(0)
    f = cond.frames if cond is not None else (frames or cfg.f)
    bank = model.garment_forward(garment) if cfg.use_dffm else None
    gather = None
    if needs_gather(model):
        if pose is None:
            raise nx.ContractError("LDAM is enabled but no pose was supplied")
        gather = limb_gather_for(model, pose)
    ts = respaced_timesteps(schedule.T, steps or schedule.T)
    x = rng.standard_normal((f, cfg.h, cfg.w, cfg.cz))
    with nx.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            ab, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
            beta = 1.0 - ab / ab_prev
            eps = model.denoise(x, t, cond, bank, gather).data.astype(np.float64)
            x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            if clip is not None:
                x0 = np.clip(x0, -clip, clip)
            x = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(1.0 - beta) * (1.0 - ab_prev) * x) / (1.0 - ab)
            if t_prev > 0:
                var = (1.0 - ab_prev) / (1.0 - ab) * beta
                x = x + np.sqrt(var) * rng.standard_normal(x.shape)
    return x


# ---------------------------------------------------------------------------
# staged training
# ---------------------------------------------------------------------------

class TrainStage(enum.IntEnum):
    SPATIAL_CROSS = 1
    ALL = 2
    LDAM_ONLY = 3

    def trainable(self, name: str) -> bool:
        return bool(_STAGE_PATTERNS[self].search(name)) != (self is TrainStage.ALL)


# stage 2 trains everything that does *not* match its pattern
_STAGE_PATTERNS = {
    TrainStage.SPATIAL_CROSS: re.compile(r"^(blocks|replica)\.\d+\.(spatial|spatial_mod|dffm)\."),
    TrainStage.ALL: re.compile(r"\.ldam\."),
    TrainStage.LDAM_ONLY: re.compile(r"\.ldam\."),
}


def parse_stage(value) -> TrainStage:
    try:
        return TrainStage(int(value))
    except (TypeError, ValueError):
        raise ConfigError(f"stage must be 1, 2 or 3, got {value!r}") from None


def apply_stage(model: Denoiser, stage: TrainStage) -> list[tuple[str, nx.Tensor]]:
    """Toggle LDAM for ``stage``, set ``requires_grad`` and return the trainable parameters."""
    if stage is TrainStage.LDAM_ONLY and model.cfg.extra_attention != "ldam":
        raise ConfigError("stage 3 requires a model built with extra_attention='ldam'")
    model.cfg.use_ldam = stage is TrainStage.LDAM_ONLY
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad = stage.trainable(name)
        p.grad = None
        if p.requires_grad:
            trainable.append((name, p))
    return trainable


def parameter_hash(model: Denoiser, names: Sequence[str] | None = None) -> str:
    """SHA-256 over the named parameters' bytes (all parameters by default)."""
    params = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params if names is None else names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def frozen_names(model: Denoiser, stage: TrainStage) -> list[str]:
    return [n for n, _ in model.named_parameters() if not stage.trainable(n)]


@dataclass
class StageConfig:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 1
    weight_decay: float = 0.0
    lr_decay: str = "cosine"  # "cosine" (to zero over the stage) or "constant"

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("stage needs steps >= 0, batch >= 1 and lr > 0")
        if self.lr_decay not in ("cosine", "constant"):
            raise ConfigError(f"lr_decay must be 'cosine' or 'constant', got {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_decay == "constant" or self.steps == 0:
            return self.lr
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))


@dataclass
class TrainerState:
    completed: list[int] = field(default_factory=list)
    stage: int | None = None  # stage currently in progress
    step: int = 0  # steps done within that stage
    log: list[dict] = field(default_factory=list)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


class Trainer:
    """Runs the three stages in order with per-stage freezing.

    Per-step randomness comes from ``default_rng([seed, stage, step])`` so a
    run resumed from a checkpoint replays exactly the same draws.
    """

    def __init__(
        self,
        model: Denoiser,
        schedule: NoiseSchedule,
        videos: Sequence,
        stages: dict[int, StageConfig] | None = None,
        seed: int = 0,
        lambda_bg: float = 0.1,
        images: Sequence | None = None,
    ):
        if not videos:
            raise ConfigError("training needs at least one video")
        self.model = model
        self.schedule = schedule
        self.videos = list(videos)
        self.images = list(images) if images is not None else [
            v.frame_slice(i, i + 1) for v in self.videos for i in range(v.frames)
        ]
        self.stages = {int(k): v for k, v in (stages or {s: StageConfig() for s in (1, 2, 3)}).items()}
        self.seed = seed
        self.lambda_bg = lambda_bg
        self.state = TrainerState()
        self.optimizer: nx.AdamW | None = None

    # -- stage bookkeeping ---------------------------------------------
    def _check_order(self, stage: TrainStage) -> None:
        st = self.state
        if st.stage is not None and st.stage != stage:
            raise StageOrderError(f"stage {st.stage} is still in progress; cannot start stage {int(stage)}")
        expected = list(range(1, int(stage)))
        if st.completed != expected:
            raise StageOrderError(
                f"stage {int(stage)} requires completed stages {expected}, have {st.completed}"
            )

    def _begin(self, stage: TrainStage) -> None:
        trainable = apply_stage(self.model, stage)
        cfg = self.stages[int(stage)]
        if self.state.stage is None:
            if stage is TrainStage.ALL:
                self.model.init_conditioning_from_block(0)
            self.state.stage = int(stage)
            self.state.step = 0
            self.optimizer = nx.AdamW([p for _, p in trainable], lr=cfg.lr, weight_decay=cfg.weight_decay)
        elif self.optimizer is None:
            self.optimizer = nx.AdamW([p for _, p in trainable], lr=cfg.lr, weight_decay=cfg.weight_decay)

    def train_step(self, stage: TrainStage) -> dict:
        cfg = self.stages[int(stage)]
        step = self.state.step
        rng = np.random.default_rng([self.seed, int(stage), step])
        pool = self.images if stage is TrainStage.SPATIAL_CROSS else self.videos
        self.optimizer.zero_grad()
        losses, ts = [], []
        for _ in range(cfg.batch):
            item = pool[int(rng.integers(len(pool)))]
            loss, t = training_loss(
                self.model, item, self.schedule, rng, self.lambda_bg, use_cond=stage is not TrainStage.SPATIAL_CROSS
            )
            nx.backward(nx.mul(loss, 1.0 / cfg.batch))
            losses.append(float(loss.data))
            ts.append(t)
        self.optimizer.lr = cfg.lr_at(step)
        self.optimizer.step()
        self.state.step += 1
        record = {"stage": int(stage), "step": step, "t_mean": float(np.mean(ts)), "loss": float(np.mean(losses))}
        self.state.log.append(record)
        return record

    def run_stage(self, stage, max_steps: int | None = None, on_step: Callable[[dict], None] | None = None) -> list[dict]:
        """Run (or continue) ``stage``; stop early after ``max_steps`` steps in this call.

        Returns the records produced by this call. The stage is marked
        complete once its configured step count is reached.
        """
        stage = parse_stage(stage)
        self._check_order(stage)
        self._begin(stage)
        total = self.stages[int(stage)].steps
        records = []
        while self.state.step < total and (max_steps is None or len(records) < max_steps):
            rec = self.train_step(stage)
            records.append(rec)
            if on_step:
                on_step(rec)
        if self.state.step >= total:
            self.state.completed.append(int(stage))
            self.state.stage = None
            self.state.step = 0
            self.optimizer = None
        return records

    def run_all(self, max_steps: int | None = None, on_step=None) -> list[dict]:
        records = []
        for s in (1, 2, 3):
            if s in self.state.completed:
                continue
            budget = None if max_steps is None else max_steps - len(records)
            if budget is not None and budget <= 0:
                break
            records += self.run_stage(s, budget, on_step)
            if s not in self.state.completed:
                break
        return records

    def losses(self, stage: int | None = None) -> list[float]:
        return [r["loss"] for r in self.state.log if stage is None or r["stage"] == stage]

    # -- checkpoints -----------------------------------------------------
    def save(self, directory: str | os.PathLike) -> None:
        """Model parameters, optimizer moments and progress, enough to resume bit-exactly."""
        os.makedirs(directory, exist_ok=True)
        self.model.save(os.path.join(directory, "model"))
        opt = None
        if self.optimizer is not None:
            names = {id(p): n for n, p in self.model.named_parameters()}
            opt_dir = os.path.join(directory, "optimizer")
            os.makedirs(opt_dir, exist_ok=True)
            order = []
            for p, m, v in zip(self.optimizer.params, self.optimizer.state.m, self.optimizer.state.v):
                name = names[id(p)]
                order.append(name)
                nx.dten.save(os.path.join(opt_dir, f"{name}.m.dten"), m)
                nx.dten.save(os.path.join(opt_dir, f"{name}.v.dten"), v)
            opt = {"params": order, "step": self.optimizer.state.step}
        doc = {
            "state": asdict(self.state),
            "optimizer": opt,
            "seed": self.seed,
            "lambda_bg": self.lambda_bg,
            "stages": {str(k): asdict(v) for k, v in self.stages.items()},
        }
        with open(os.path.join(directory, "trainer.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    def restore(self, directory: str | os.PathLike) -> None:
        """Load a checkpoint written by :meth:`save` into this trainer (model included)."""
        with open(os.path.join(directory, "trainer.json")) as fh:
            doc = json.load(fh)
        loaded = Denoiser.load(os.path.join(directory, "model"), dtype=self.model.dtype)
        self.model.cfg = loaded.cfg
        self.model.load_state_dict(loaded.state_dict())
        self.state = TrainerState(**doc["state"])
        self.optimizer = None
        if self.state.stage is not None:
            stage = TrainStage(self.state.stage)
            trainable = apply_stage(self.model, stage)
            cfg = self.stages[int(stage)]
            self.optimizer = nx.AdamW([p for _, p in trainable], lr=cfg.lr, weight_decay=cfg.weight_decay)
            opt = doc["optimizer"]
            if opt is not None:
                if opt["params"] != [n for n, _ in trainable]:
                    raise nx.ContractError("optimizer checkpoint does not match the stage's parameters")
                opt_dir = os.path.join(directory, "optimizer")
                self.optimizer.state.m = [nx.dten.load(os.path.join(opt_dir, f"{n}.m.dten")) for n in opt["params"]]
                self.optimizer.state.v = [nx.dten.load(os.path.join(opt_dir, f"{n}.v.dten")) for n in opt["params"]]
                self.optimizer.state.step = opt["step"]
        elif self.state.completed:
            apply_stage(self.model, TrainStage(self.state.completed[-1]))


def run_stage(stage, config: StageConfig, dataset: Sequence, model: Denoiser, optimizer=None, **kw) -> list[dict]:
    """One-shot helper: train ``model`` for a single stage on ``dataset``.

    Earlier stages are treated as already done. ``optimizer`` is accepted
    for interface symmetry; a fresh AdamW is created per stage.
    """
    stage = parse_stage(stage)
    schedule = kw.pop("schedule", None) or toy_schedule(model.cfg.T)
    trainer = Trainer(model, schedule, dataset, {int(stage): config}, **kw)
    trainer.state.completed = list(range(1, int(stage)))
    return trainer.run_stage(stage)
