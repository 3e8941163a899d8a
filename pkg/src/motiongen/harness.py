"""Command-line front end and experiment orchestration.

Subcommands: gen-demos, train, rollout, eval, sweep-demos. A JSON file via
--config overrides the defaults below; --preset smoke shrinks everything to
laptop scale. Every run copies its resolved configuration next to its
outputs, all numeric output is written with 17 significant digits, and all
randomness derives from the configured seeds, so repeated runs are
byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import envs
from . import metrics as mt
from . import policy as pol
from . import prodmp
from . import training as tr
from .errors import ConfigurationError, MotionGenError

DEFAULT_SWEEP_COUNTS = (30, 60, 90, 120, 150)


@dataclass
class RunConfig:
    task: str = envs.LATTICE
    variant: str = "prodmp"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 3000
    eval_every: int = 100
    eval_rollouts: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    hidden: tuple[int, ...] = (256, 256, 256)
    loss_weighting: str = df.SIGMA_NORMALIZED_WEIGHTING
    n: int = 12
    m: int = 3
    dt_low: float = 0.1
    dt_high: float = 0.005
    execute_steps: int = 12
    n_basis: int = 3
    alpha: float = 5.0
    alpha_phase: float = 2.0
    grid_dt: float = 1e-3
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    train_loc: float = float(np.log(0.5))
    train_scale: float = 0.6
    n_sample_steps: int = 10
    success_threshold: float = 0.05
    max_low_steps: int = 60
    thresholds: tuple[float, ...] = (0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.10)
    demo_count: int = 150
    sweep_counts: tuple[int, ...] = DEFAULT_SWEEP_COUNTS

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigurationError("seed list must be non-empty")
        if self.epochs < self.eval_every:
            raise ConfigurationError("epochs must be >= eval_every")

    # -- derived module configs

    def prodmp_config(self, dof: int) -> prodmp.ProDMPConfig:
        return prodmp.ProDMPConfig(
            dof=dof,
            n_basis=self.n_basis,
            alpha=self.alpha,
            duration=self.n * self.dt_low,
            alpha_phase=self.alpha_phase,
            grid_dt=self.grid_dt,
        )

    def noise_config(self) -> df.NoiseConfig:
        return df.NoiseConfig(
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            sigma_data=self.sigma_data,
            train_loc=self.train_loc,
            train_scale=self.train_scale,
            n_sample_steps=self.n_sample_steps,
        )

    def policy_config(self, variant: str | None = None) -> pol.PolicyConfig:
        return pol.PolicyConfig(
            n=self.n,
            m=self.m,
            dt_low=self.dt_low,
            dt_high=self.dt_high,
            execute_steps=self.execute_steps,
            variant=variant or self.variant,
            success_threshold=self.success_threshold,
            max_low_steps=self.max_low_steps,
        )

    def train_settings(self) -> tr.TrainSettings:
        return tr.TrainSettings(
            epochs=self.epochs,
            eval_every=self.eval_every,
            eval_rollouts=self.eval_rollouts,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            hidden=tuple(self.hidden),
            loss_weighting=self.loss_weighting,
        )


SMOKE_OVERRIDES = {
    "task": envs.OBSTACLE,
    "seeds": (0,),
    "epochs": 40,
    "eval_every": 20,
    "eval_rollouts": 4,
    "batch_size": 32,
    "lr": 1e-3,
    "hidden": (32, 32),
    "n_sample_steps": 5,
    "demo_count": 10,
    "max_low_steps": 36,
    "thresholds": (0.05, 0.10, 0.15),
    "sweep_counts": (4, 8),
}

PRESETS = {"smoke": SMOKE_OVERRIDES}


def load_config(preset: str | None, config_path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("seeds", "hidden", "thresholds", "sweep_counts"):
        if key in values:
            values[key] = tuple(values[key])
    return RunConfig(**values)


def write_resolved_config(out_dir: Path, cfg: RunConfig, command: str, extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **extras, "config": dataclasses.asdict(cfg)}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return f"{value:.17g}"


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_demos(args) -> int:
    cfg = load_config(args.preset, args.config, {"task": args.task})
    count = args.count if args.count is not None else cfg.demo_count
    if count < 1:
        raise ConfigurationError(f"--count must be >= 1, got {count}")
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    dataset = envs.generate_dataset(cfg.task, count, seed)
    envs.write_dataset(out, dataset)
    write_resolved_config(out, cfg, "gen-demos", {"count": count, "seed": seed})
    print(f"wrote {len(dataset)} {cfg.task} episodes to {out}")
    return 0


def _train_one(cfg: RunConfig, dataset: envs.Dataset, variant: str, seed: int, out_dir: Path,
               resume: bool = False) -> tr.TrainResult:
    prodmp_cfg = cfg.prodmp_config(dataset.dof)
    policy_cfg = cfg.policy_config(variant)
    settings = cfg.train_settings()
    if variant == pol.BC_VARIANT:
        return tr.train_bc(dataset, prodmp_cfg, policy_cfg, settings, seed, out_dir)
    return tr.train_diffusion(
        dataset, variant, prodmp_cfg, cfg.noise_config(), policy_cfg,
        settings, seed, out_dir, resume=resume,
    )


def _write_train_log(path: Path, log: list[dict]) -> None:
    rows = [
        [str(r["epoch"]), _fmt(r["loss"]), "" if r["success"] == "" else _fmt(r["success"])]
        for r in log
    ]
    _write_csv(path, ["epoch", "loss", "success"], rows)


def cmd_train(args) -> int:
    overrides = {"variant": args.variant}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = load_config(args.preset, args.config, overrides)
    dataset = envs.read_dataset(args.data)
    if dataset.task != cfg.task:
        cfg = dataclasses.replace(cfg, task=dataset.task)
    out = Path(args.out)
    write_resolved_config(out, cfg, "train", {"data": str(args.data)})
    summary_rows = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        result = _train_one(cfg, dataset, cfg.variant, seed, seed_dir, resume=args.resume)
        _write_train_log(seed_dir / "train_log.csv", result.log)
        summary_rows.append([str(seed), _fmt(result.best_success), str(result.best_epoch)])
        print(
            f"seed {seed}: best success {result.best_success:.3f} "
            f"at epoch {result.best_epoch}"
        )
    _write_csv(out / "train_summary.csv", ["seed", "best_success", "best_epoch"], summary_rows)
    return 0


def _demo_reference(dataset: envs.Dataset) -> mt.MetricsReport:
    return mt.mean_report([mt.metrics_from_episode(ep) for ep in dataset.episodes])


def cmd_rollout(args) -> int:
    cfg = load_config(args.preset, args.config, {})
    bundle = dn.load_checkpoint(args.ckpt)
    policy_cfg = cfg.policy_config(bundle.variant)
    model = tr.model_from_checkpoint(bundle, policy_cfg)
    task = args.task or cfg.task
    env = envs.make_env(task)
    if env.dof != model.dof:
        raise ConfigurationError(
            f"checkpoint dof {model.dof} does not match task {task!r} dof {env.dof}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_rollouts = args.n_rollouts
    seed = args.seed if args.seed is not None else 0
    result = pol.evaluate(
        lambda: envs.make_env(task), model, policy_cfg, n_rollouts,
        [policy_cfg.success_threshold], seed,
    )
    reports = [mt.motion_metrics(t) for t in result.traces]
    for i, trace in enumerate(result.traces):
        pol.write_trace_csv(out / f"trace_{i:03d}.csv", trace)
    mt.write_metrics_csv(out / "metrics.csv", reports)
    write_resolved_config(out, cfg, "rollout", {"ckpt": str(args.ckpt), "task": task})
    print(f"success rate {result.success_rates[0]:.3f} over {n_rollouts} rollouts")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.preset, args.config, {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = envs.read_dataset(args.data) if args.data else None
    reference = _demo_reference(dataset) if dataset else None
    seed = args.seed if args.seed is not None else 0
    thresholds = cfg.thresholds

    comparison_rows = []
    for ckpt in args.ckpt:
        bundle = dn.load_checkpoint(ckpt)
        policy_cfg = cfg.policy_config(bundle.variant)
        model = tr.model_from_checkpoint(bundle, policy_cfg)
        task = args.task or cfg.task
        label = bundle.variant
        result = pol.evaluate(
            lambda: envs.make_env(task), model, policy_cfg,
            args.n_rollouts, thresholds, seed,
        )
        _write_csv(
            out / f"success_vs_threshold_{label}.csv",
            ["threshold", "success_rate"],
            [[_fmt(t), _fmt(r)] for t, r in zip(result.thresholds, result.success_rates)],
        )
        reports = [mt.motion_metrics(t) for t in result.traces]
        normalized = None
        if reference is not None:
            normalized = [mt.normalize_report(r, reference)[0] for r in reports]
        mt.write_metrics_csv(out / f"metrics_{label}.csv", reports, normalized)
        rate = result.rate_at(cfg.success_threshold)
        mean = mt.mean_report(reports)
        row = [label, _fmt(rate)] + [_fmt(getattr(mean, f)) for f in mt.METRIC_FIELDS]
        if normalized is not None:
            norm_mean = mt.mean_report(normalized)
            row += [_fmt(getattr(norm_mean, f)) for f in mt.METRIC_FIELDS]
        comparison_rows.append(row)

    header = ["variant", "success_rate"] + list(mt.METRIC_FIELDS)
    if reference is not None:
        header += [f"norm_{f}" for f in mt.METRIC_FIELDS]
    _write_csv(out / "comparison.csv", header, comparison_rows)
    write_resolved_config(
        out, cfg, "eval", {"ckpts": [str(c) for c in args.ckpt], "data": str(args.data)}
    )
    print(f"evaluated {len(args.ckpt)} checkpoint(s); outputs in {out}")
    return 0


def shuffled_prefix(dataset: envs.Dataset, count: int, seed: int) -> envs.Dataset:
    """First `count` episodes of the dataset after one seeded shuffle.

    The shuffle order depends only on the seed and episode count, so smaller
    prefixes are nested inside larger ones."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5F0F])).permutation(
        len(dataset)
    )
    episodes = [dataset.episodes[i] for i in order[:count]]
    return envs.Dataset(
        task=dataset.task, dt=dataset.dt, dof=dataset.dof, obs_dim=dataset.obs_dim,
        episodes=episodes,
    )


def cmd_sweep_demos(args) -> int:
    cfg = load_config(args.preset, args.config, {})
    dataset = envs.read_dataset(args.data)
    if dataset.task != cfg.task:
        cfg = dataclasses.replace(cfg, task=dataset.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    variants = args.variants.split(",") if args.variants else [cfg.variant]
    counts = [c for c in cfg.sweep_counts if c <= len(dataset)]
    if not counts:
        raise ConfigurationError(
            f"dataset has {len(dataset)} episodes, fewer than every sweep count"
        )
    write_resolved_config(
        out, cfg, "sweep-demos",
        {"data": str(args.data), "variants": variants, "counts": counts, "seed": seed},
    )
    for variant in variants:
        rows = []
        for count in counts:
            subset = shuffled_prefix(dataset, count, seed)
            run_dir = out / variant / f"count_{count}"
            result = _train_one(cfg, subset, variant, seed, run_dir)
            _write_train_log(run_dir / "train_log.csv", result.log)
            rows.append([str(count), _fmt(result.best_success)])
            print(f"{variant} @ {count} demos: success {result.best_success:.3f}")
        _write_csv(out / f"sweep_{variant}.csv", ["demos", "success_rate"], rows)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="motiongen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file overriding config defaults")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named config preset")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-demos", help="generate scripted demonstrations")
    common(p)
    p.add_argument("--task", choices=envs.TASKS, default=envs.LATTICE)
    p.add_argument("--count", type=int, help="number of episodes")
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="train a policy on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", choices=pol.POLICY_VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="resume from last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="run rollouts from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=envs.TASKS)
    p.add_argument("--n-rollouts", type=int, default=10)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="threshold sweep and metric reports")
    common(p)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint path (repeatable for comparison)")
    p.add_argument("--task", choices=envs.TASKS)
    p.add_argument("--data", help="demo dataset for normalized metrics")
    p.add_argument("--n-rollouts", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-demos", help="data-efficiency sweep")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variants", help="comma-separated variant list")
    p.set_defaults(func=cmd_sweep_demos)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except MotionGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
