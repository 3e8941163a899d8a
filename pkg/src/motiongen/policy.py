"""Receding-horizon execution.

A plan windows the last m observations, samples the denoiser, and emits a
high-frequency command sequence whose first sample sits exactly on the
current boundary state. For the weight-decoding variant the terminal
boundary is read off the decoded trajectory, so consecutive plans join with
matching position and velocity. The direct-sequence baseline upsamples its
low-frequency output by linear interpolation and estimates the terminal
velocity by backward difference.

All operations run in raw task units; normalization to and from the
denoiser's training space happens inside `plan`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import prodmp
from .errors import ConfigurationError, ContractError

BC_VARIANT = "bc"
POLICY_VARIANTS = (*df.VARIANTS, BC_VARIANT)


@dataclass(frozen=True)
class PolicyConfig:
    n: int = 12
    m: int = 3
    dt_low: float = 0.1
    dt_high: float = 0.005
    execute_steps: int = 12
    variant: str = "prodmp"
    success_threshold: float = 0.05
    max_low_steps: int = 60

    def __post_init__(self) -> None:
        if not 1 <= self.execute_steps <= self.n:
            raise ConfigurationError(
                f"execute_steps must be in [1, n], got {self.execute_steps}"
            )
        ratio = self.dt_low / self.dt_high
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError("dt_high must divide dt_low")
        if self.variant not in POLICY_VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}, expected one of {POLICY_VARIANTS}"
            )
        if self.m < 1:
            raise ConfigurationError("m must be >= 1")

    @property
    def ratio(self) -> int:
        return int(round(self.dt_low / self.dt_high))


@dataclass
class BCModel:
    """Regression baseline: observations straight to primitive weights."""

    params: dn.DenoiserParams
    table: prodmp.BasisTable
    n_steps: int
    dt: float
    variant: str = BC_VARIANT
    weight_scale: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        times = self.dt * np.arange(self.n_steps)
        dmap = prodmp.decode_map(self.table, 0.0, times)
        rms = np.sqrt(np.mean(dmap.A**2, axis=0))
        self.weight_scale = 1.0 / np.maximum(rms, 1e-9)

    @property
    def dof(self) -> int:
        return self.table.config.dof


@dataclass
class PlanResult:
    sequence: prodmp.ActionSequence
    velocities: np.ndarray
    terminal: prodmp.BoundaryState
    weights: np.ndarray | None
    low_frequency: np.ndarray | None


@dataclass
class RolloutTrace:
    task: str
    dof: int
    dt_high: float
    dt_low: float
    commands: np.ndarray
    observations: np.ndarray
    markers: np.ndarray
    align_errors: np.ndarray
    seam_pos: list[float]
    seam_vel: list[float]
    success: bool
    steps_to_success: int | None
    max_steps: int
    n_plans: int


def _normalized_boundary(norm: dn.NormStats, boundary: prodmp.BoundaryState):
    return prodmp.BoundaryState(
        position=norm.normalize_actions(boundary.position),
        velocity=norm.normalize_action_velocity(boundary.velocity),
        time=0.0,
    )


def _decode_plan(model, w, boundary, cfg: PolicyConfig):
    """High-frequency decode of normalized weights over the executed span."""
    norm = model.params.norm
    s0n = _normalized_boundary(norm, boundary)
    horizon = cfg.execute_steps * cfg.dt_low
    times = cfg.dt_high * np.arange(int(round(horizon / cfg.dt_high)) + 1)
    seq_n, vel_n = prodmp.decode(model.table, w, s0n, times, return_velocity=True)
    values = norm.denormalize_actions(seq_n.values)
    velocities = norm.denormalize_action_velocity(vel_n)
    seq = prodmp.ActionSequence(dt=cfg.dt_high, start_time=0.0, values=values)
    terminal = prodmp.BoundaryState(values[-1], velocities[-1], 0.0)
    return seq, velocities, terminal


def plan(
    model,
    obs_window: np.ndarray,
    boundary: prodmp.BoundaryState,
    cfg: PolicyConfig,
    rng: np.random.Generator,
) -> PlanResult:
    """One receding-horizon plan from raw observations and a raw boundary."""
    obs_window = np.asarray(obs_window, dtype=float)
    if obs_window.ndim != 2 or obs_window.shape[0] != cfg.m:
        raise ContractError(f"observation window must be (m, obs_dim) with m={cfg.m}")
    norm = model.params.norm
    obs_n = norm.normalize_obs(obs_window).reshape(-1)

    if model.variant == BC_VARIANT:
        y, _ = dn.mlp_forward(model.params, obs_n)
        w = (y.reshape(model.dof, -1) * model.weight_scale[None, :]).reshape(-1)
        seq, velocities, terminal = _decode_plan(model, w, boundary, cfg)
        return PlanResult(seq, velocities, terminal, w, None)

    schedule = df.make_schedule(model.noise)
    s0n = _normalized_boundary(norm, boundary)
    low_n, w = df.euler_sample(model, obs_n, s0n, schedule, rng)

    if model.variant == "prodmp":
        seq, velocities, terminal = _decode_plan(model, w.reshape(-1), boundary, cfg)
        return PlanResult(seq, velocities, terminal, w.reshape(-1), low_n)

    # Direct-sequence baseline: denormalize, then linear upsampling through
    # the low-frequency samples, holding the last sample to the end of the
    # executed span.
    low = norm.denormalize_actions(low_n)
    knots = cfg.dt_low * np.arange(cfg.n)
    horizon = cfg.execute_steps * cfg.dt_low
    times = cfg.dt_high * np.arange(int(round(horizon / cfg.dt_high)) + 1)
    values = np.column_stack(
        [np.interp(times, knots, low[:, d]) for d in range(low.shape[1])]
    )
    velocities = np.zeros_like(values)
    velocities[1:] = (values[1:] - values[:-1]) / cfg.dt_high
    velocities[0] = velocities[1]
    seq = prodmp.ActionSequence(dt=cfg.dt_high, start_time=0.0, values=values)
    terminal = prodmp.BoundaryState(values[-1], velocities[-1], 0.0)
    return PlanResult(seq, velocities, terminal, None, low)


def rollout(env, model, cfg: PolicyConfig, rng: np.random.Generator) -> RolloutTrace:
    """Observe, plan, execute, repeat until success or the step budget.

    The observation window holds the last m low-rate observations, padded by
    repeating the first one at episode start. The boundary chained into each
    plan is the previous plan's commanded terminal state (current pose with
    zero velocity for the first plan).
    """
    obs0 = env.observe()
    window = [obs0.copy() for _ in range(cfg.m)]
    boundary = prodmp.BoundaryState(env.instrument_positions(), np.zeros(env.dof), 0.0)

    commands: list[np.ndarray] = []
    observations: list[np.ndarray] = [obs0]
    markers: list[np.ndarray] = [env.object_positions()]
    align_errors: list[float] = [env.alignment_error()]
    seam_pos: list[float] = []
    seam_vel: list[float] = []

    success = False
    steps_to_success: int | None = None
    low_step = 0
    n_plans = 0
    prev_terminal: prodmp.BoundaryState | None = None

    while low_step < cfg.max_low_steps and not success:
        result = plan(model, np.stack(window), boundary, cfg, rng)
        n_plans += 1
        if prev_terminal is not None:
            seam_pos.append(
                float(np.max(np.abs(result.sequence.values[0] - prev_terminal.position)))
            )
            seam_vel.append(
                float(np.max(np.abs(result.velocities[0] - prev_terminal.velocity)))
            )
        for j in range(1, result.sequence.length):
            env.step(result.sequence.values[j])
            commands.append(result.sequence.values[j])
            if j % cfg.ratio == 0:
                low_step += 1
                obs = env.observe()
                observations.append(obs)
                markers.append(env.object_positions())
                align_errors.append(env.alignment_error())
                window.pop(0)
                window.append(obs)
                if env.success(cfg.success_threshold):
                    success = True
                    steps_to_success = low_step
                    break
                if low_step >= cfg.max_low_steps:
                    break
        boundary = result.terminal
        prev_terminal = result.terminal

    return RolloutTrace(
        task=env.task_id,
        dof=env.dof,
        dt_high=cfg.dt_high,
        dt_low=cfg.dt_low,
        commands=np.array(commands),
        observations=np.array(observations),
        markers=np.array(markers),
        align_errors=np.array(align_errors),
        seam_pos=seam_pos,
        seam_vel=seam_vel,
        success=success,
        steps_to_success=steps_to_success,
        max_steps=cfg.max_low_steps,
        n_plans=n_plans,
    )


@dataclass
class EvalResult:
    thresholds: np.ndarray
    success_rates: np.ndarray
    traces: list[RolloutTrace]

    def rate_at(self, threshold: float) -> float:
        idx = int(np.argmin(np.abs(self.thresholds - threshold)))
        return float(self.success_rates[idx])


def evaluate(
    env_factory,
    model,
    cfg: PolicyConfig,
    n_rollouts: int,
    thresholds,
    seed,
) -> EvalResult:
    """Success rate per threshold over deterministic per-rollout rng streams.

    Rollouts stop at the tightest threshold; success at looser thresholds is
    read from the best alignment achieved along the trace, which makes the
    curve monotone by construction.
    """
    thresholds = np.sort(np.asarray(thresholds, dtype=float))
    if thresholds.size == 0:
        raise ContractError("need at least one threshold")
    stop_cfg = PolicyConfig(
        n=cfg.n,
        m=cfg.m,
        dt_low=cfg.dt_low,
        dt_high=cfg.dt_high,
        execute_steps=cfg.execute_steps,
        variant=cfg.variant,
        success_threshold=float(thresholds[0]),
        max_low_steps=cfg.max_low_steps,
    )
    traces: list[RolloutTrace] = []
    root = np.random.SeedSequence(seed)
    for child in root.spawn(max(n_rollouts, 0)):
        env_rng, sampler_rng = (np.random.default_rng(s) for s in child.spawn(2))
        env = env_factory()
        env.reset(env_rng)
        traces.append(rollout(env, model, stop_cfg, sampler_rng))
    if not traces:
        return EvalResult(thresholds, np.zeros(thresholds.size), [])
    best = np.array([np.min(t.align_errors) for t in traces])
    rates = np.array([float(np.mean(best <= thr)) for thr in thresholds])
    return EvalResult(thresholds, rates, traces)


def write_trace_csv(path: str | Path, trace: RolloutTrace) -> None:
    """Commanded positions at the high rate with markers interleaved at the
    low rate (blank between observations)."""
    k = trace.dof
    marker_dim = trace.markers.shape[1] if trace.markers.size else 0
    header = (
        "time,"
        + ",".join(f"cmd_{i}" for i in range(k))
        + ("," + ",".join(f"marker_{i}" for i in range(marker_dim)) if marker_dim else "")
    )
    lines = [header]
    ratio = int(round(trace.dt_low / trace.dt_high))
    for i, cmd in enumerate(trace.commands):
        t = (i + 1) * trace.dt_high
        row = [f"{t:.17g}"] + [f"{v:.17g}" for v in cmd]
        if marker_dim:
            if (i + 1) % ratio == 0 and (i + 1) // ratio < trace.markers.shape[0]:
                row += [f"{v:.17g}" for v in trace.markers[(i + 1) // ratio]]
            else:
                row += [""] * marker_dim
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
