"""Command line entry point: ``dyntryon {gen-data,train,sample,bench,selftest}``.

Exit codes: 0 success, 2 configuration error, 3 contract or oracle
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .backbone import Denoiser
from .benchmetrics import bench_attention, ldam_full3d_ratio, param_report, quality_metrics, reports_to_csv, reports_to_jsonl
from .dffm import BankStateError
from .diffusion import (
    NoiseSchedule,
    StageConfig,
    Trainer,
    TrainStage,
    frozen_names,
    make_schedule,
    parameter_hash,
    sample,
    smoothed,
    toy_schedule,
)
from .synthdata import ScenarioConfig, decode_preview, gen_dataset, load_sample, read_dataset, write_dataset
from .tokenizer import ConfigError, ModelConfig

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class ScheduleConfig:
    T: int | None = None  # defaults to model.T
    beta_start: float | None = None  # None: 1e-4 * 1000/T
    beta_end: float | None = None  # None: 2e-2 * 1000/T

    def build(self, T_default: int) -> NoiseSchedule:
        T = self.T or T_default
        if self.beta_start is None and self.beta_end is None:
            return toy_schedule(T)
        base = toy_schedule(T)
        return make_schedule(
            T,
            self.beta_start if self.beta_start is not None else float(base.beta[0]),
            self.beta_end if self.beta_end is not None else float(base.beta[-1]),
        )


@dataclass
class TrainConfig:
    videos: int = 8
    base_seed: int = 0
    lambda_bg: float = 0.1


@dataclass
class SampleConfig:
    steps: int = 100


def _default_grid() -> list[dict]:
    return [{"B": 1, "f": 4, "s": 64, "d": 32, "L": 4, "n": 12}, {"B": 1, "f": 8, "s": 16, "d": 16, "L": 2, "n": 6}]


@dataclass
class BenchConfig:
    grid: list[dict] = field(default_factory=_default_grid)
    param_blocks: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    paper_point: dict = field(default_factory=lambda: {"L": 4, "n": 12, "f": 36, "s": 192})


def _default_model() -> ModelConfig:
    return ModelConfig(H=128, W=128, f=4, d=32, num_blocks=2, T=100)


def _default_stages() -> dict[str, StageConfig]:
    return {"1": StageConfig(200, 4e-3, 8), "2": StageConfig(2500, 4e-3, 8), "3": StageConfig(300, 1e-2, 8)}


@dataclass
class RunConfig:
    """Every structural knob of a run. JSON files may override any subset of keys."""

    model: ModelConfig = field(default_factory=_default_model)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stages: dict[str, StageConfig] = field(default_factory=_default_stages)
    data: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        m, d = self.model, self.data
        if (d.h, d.w, d.cz) != (m.h, m.w, m.cz):
            raise ConfigError(
                f"data latent {d.h}x{d.w}x{d.cz} does not match model latent {m.h}x{m.w}x{m.cz}"
            )
        if set(self.stages) != {"1", "2", "3"}:
            raise ConfigError("stages must define exactly '1', '2' and '3'")
        T = self.schedule.T or m.T
        if T != m.T:
            raise ConfigError(f"schedule.T={T} differs from model.T={m.T}")

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        cfg = cls()
        if "model" in doc:
            base = cfg.model.to_dict()
            extra = sorted(set(doc["model"]) - set(base))
            if extra:
                raise ConfigError(f"unknown key(s) in 'model': {', '.join(extra)}")
            base.update(doc["model"])
            cfg.model = ModelConfig.from_dict(base)
        if "schedule" in doc:
            cfg.schedule = ScheduleConfig(**_strict_keys(ScheduleConfig, doc["schedule"], "schedule"))
        if "stages" in doc:
            stages = dict(cfg.stages)
            for k, v in doc["stages"].items():
                if str(k) not in stages:
                    raise ConfigError(f"unknown stage key {k!r} in 'stages'")
                merged = {**asdict(stages[str(k)]), **_strict_keys(StageConfig, v, f"stages.{k}")}
                stages[str(k)] = StageConfig(**merged)
            cfg.stages = stages
        if "data" in doc:
            merged = {**cfg.data.to_dict(), **_strict_keys(ScenarioConfig, doc["data"], "data")}
            cfg.data = ScenarioConfig.from_dict(merged)
        for name, kind in (("train", TrainConfig), ("sample", SampleConfig), ("bench", BenchConfig)):
            if name in doc:
                merged = {**asdict(getattr(cfg, name)), **_strict_keys(kind, doc[name], name)}
                setattr(cfg, name, kind(**merged))
        if "seed" in doc:
            cfg.seed = int(doc["seed"])
        if "out_dir" in doc:
            cfg.out_dir = str(doc["out_dir"])
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "stages": {k: asdict(v) for k, v in sorted(self.stages.items())},
            "data": self.data.to_dict(),
            "train": asdict(self.train),
            "sample": asdict(self.sample),
            "bench": asdict(self.bench),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def stage_configs(self) -> dict[int, StageConfig]:
        return {int(k): v for k, v in self.stages.items()}


def _strict_keys(cls, data, section: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return dict(data)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(doc)


def write_json(path: str, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def echo_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "config.resolved.json"), cfg.to_dict())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    count = args.count if args.count is not None else cfg.train.videos
    seed = args.seed if args.seed is not None else cfg.train.base_seed
    path = write_dataset(cfg.data, args.out, count, seed)
    echo_config(cfg, args.out)
    print(path)
    return EXIT_OK


def _training_videos(cfg: RunConfig, data_dir: str | None):
    if data_dir:
        return read_dataset(data_dir)
    return list(gen_dataset(cfg.data, cfg.train.videos, cfg.train.base_seed))


def _write_log(trainer: Trainer, out_dir: str) -> None:
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
        for rec in trainer.state.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = args.out or cfg.out_dir
    echo_config(cfg, out)
    videos = _training_videos(cfg, args.data)
    model = Denoiser(cfg.model)
    trainer = Trainer(model, cfg.schedule.build(cfg.model.T), videos, cfg.stage_configs(), cfg.seed, cfg.train.lambda_bg)
    ckpt = os.path.join(out, "checkpoint")
    if args.resume:
        if not os.path.exists(os.path.join(ckpt, "trainer.json")):
            raise FileNotFoundError(f"no checkpoint to resume from in {ckpt}")
        trainer.restore(ckpt)
        print(f"resumed: completed={trainer.state.completed} in_progress={trainer.state.stage} step={trainer.state.step}")

    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    budget = args.max_steps
    for s in stages:
        if s in trainer.state.completed and args.stage == "all":
            continue
        stage = TrainStage(s)
        frozen = frozen_names(model, stage)
        before = parameter_hash(model, frozen)
        print(f"stage {s} frozen-hash before {before}")
        records = trainer.run_stage(stage, budget)
        after = parameter_hash(model, frozen)
        print(f"stage {s} frozen-hash after  {after}")
        if before != after:
            raise nx.ContractError(f"frozen parameters changed during stage {s}")
        trainer.save(ckpt)
        _write_log(trainer, out)
        if s in trainer.state.completed:
            trainer.save(os.path.join(out, f"checkpoint_stage{s}"))
        if budget is not None:
            budget -= len(records)
            if s not in trainer.state.completed or budget <= 0:
                print("stopped after step budget; resume with --resume")
                break

    losses = trainer.losses()
    if not losses:
        print("no training steps were run")
        return EXIT_OK
    sm = smoothed(losses)
    first, last = float(sm[min(49, len(sm) - 1)]), float(sm[-1])
    print(f"smoothed loss: initial {first:.6f} final {last:.6f}")
    return EXIT_OK if last < first else EXIT_CONTRACT


def _load_model(path: str) -> Denoiser:
    if os.path.exists(os.path.join(path, "model", "manifest.json")):
        path = os.path.join(path, "model")
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"no model checkpoint at {path}")
    model = Denoiser.load(path)
    trainer_doc = os.path.join(os.path.dirname(path.rstrip("/")), "trainer.json")
    if os.path.exists(trainer_doc):
        with open(trainer_doc) as fh:
            completed = json.load(fh)["state"]["completed"]
        model.cfg.use_ldam = 3 in completed and model.cfg.extra_attention == "ldam"
    return model


def save_previews(pred: np.ndarray, gt: np.ndarray, out_dir: str, scale: int = 8) -> list[str]:
    from PIL import Image

    paths = []
    for i in range(pred.shape[0]):
        strip = np.concatenate([decode_preview(pred[i]), decode_preview(gt[i])], axis=1)
        img = Image.fromarray(strip).resize((strip.shape[1] * scale, strip.shape[0] * scale), Image.NEAREST)
        path = os.path.join(out_dir, f"frame_{i:02d}.png")
        img.save(path, optimize=False)
        paths.append(path)
    return paths


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    item = load_sample(args.data_sample)
    schedule = toy_schedule(model.cfg.T)
    steps = args.steps or model.cfg.T
    pred = sample(model, item.cond, item.garment, item.pose, schedule, steps, np.random.default_rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    nx.dten.save(os.path.join(args.out, "sample.dten"), pred)
    save_previews(pred, item.gt, args.out)
    metrics = quality_metrics(pred, item)
    write_json(os.path.join(args.out, "metrics.json"), metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    out = args.out or os.path.join(cfg.out_dir, "bench")
    echo_config(cfg, out)
    reports = bench_attention(cfg.bench.grid, check=True)
    with open(os.path.join(out, "flops.jsonl"), "w") as fh:
        fh.write(reports_to_jsonl(reports))
    with open(os.path.join(out, "flops.csv"), "w") as fh:
        fh.write(reports_to_csv(reports))
    params = []
    for n_blocks in cfg.bench.param_blocks:
        mcfg = ModelConfig.from_dict({**cfg.model.to_dict(), "num_blocks": n_blocks})
        params.append(param_report(mcfg))
    with open(os.path.join(out, "params.jsonl"), "w") as fh:
        fh.write(reports_to_jsonl(params))
    pp = cfg.bench.paper_point
    ratio = ldam_full3d_ratio(pp["L"], pp["n"], pp["f"], pp["s"])
    summary = {
        "ldam_full3d_ratio": float(ratio),
        "ldam_full3d_ratio_exact": f"{ratio.numerator}/{ratio.denominator}",
        "paper_point": pp,
        "param_ratios": sorted({p.to_dict()["ratio_exact"] for p in params}),
    }
    write_json(os.path.join(out, "summary.json"), summary)
    for r in reports:
        print(f"{r.attention_type:8s} f={r.f:3d} s={r.s:4d} d={r.d:3d} score_flops={r.measured_score_flops}")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(verbose=True)
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CONTRACT


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyntryon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="staged training")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--out")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (checkpoint kept)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a try-on video from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-sample", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="attention FLOP and parameter benchmarks")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run the oracle suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nx.ContractError, nx.NumericError, nx.DimensionError, BankStateError, AssertionError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, KeyError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
