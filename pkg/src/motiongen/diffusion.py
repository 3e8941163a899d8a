"""Score-based diffusion core.

The denoiser D(tau, o, t) = c_skip(t) * tau + c_out(t) * F(c_in(t) * tau, o,
c_noise(t)) estimates the clean action sequence from a noisy one at noise
level t. Two variants of the inner model F are supported:

  "prodmp"  the network emits movement-primitive weights that are decoded
            into the sequence with exact boundary conditions, so c_skip = 0
            and c_out = 1;
  "direct"  the network emits the sequence itself and the output is fused
            with the noisy sample through the usual variance-preserving
            skip scalings.

Sampling solves the probability-flow ODE d(tau) = (tau - D) / t dt with
Euler steps over a geometric noise schedule. Training minimizes the
denoising score-matching residual ||(D - tau) / t^2||^2; because the decode
is linear in the weights for a fixed boundary, its adjoint is a single
matrix transpose and gradients flow through the whole path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import prodmp
from .errors import (
    ConfigurationError,
    ContractError,
    RangeError,
    SamplingError,
    TrainingError,
)

VARIANTS = ("prodmp", "direct")

LITERAL_WEIGHTING = "literal"
SIGMA_NORMALIZED_WEIGHTING = "sigma_normalized"


@dataclass(frozen=True)
class NoiseConfig:
    sigma_min: float = 1e-3
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    train_loc: float = math.log(0.5)
    train_scale: float = 0.6
    n_sample_steps: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ConfigurationError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if self.sigma_data <= 0.0:
            raise ConfigurationError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.train_scale <= 0.0:
            raise ConfigurationError(f"train_scale must be positive, got {self.train_scale}")
        if self.n_sample_steps < 1:
            raise ConfigurationError(
                f"n_sample_steps must be >= 1, got {self.n_sample_steps}"
            )


@dataclass(frozen=True)
class Preconditioners:
    """Noise-dependent scalings wrapping the inner network."""

    variant: str
    sigma_data: float

    def _check(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0):
            raise RangeError("noise level must be positive")
        return t

    def c_skip(self, t):
        t = self._check(t)
        if self.variant == "prodmp":
            return np.zeros_like(t)
        sd2 = self.sigma_data**2
        return sd2 / (t**2 + sd2)

    def c_out(self, t):
        t = self._check(t)
        if self.variant == "prodmp":
            return np.ones_like(t)
        return t * self.sigma_data / np.sqrt(t**2 + self.sigma_data**2)

    def c_in(self, t):
        t = self._check(t)
        return 1.0 / np.sqrt(t**2 + self.sigma_data**2)

    def c_noise(self, t):
        t = self._check(t)
        return np.log(t) / 4.0


def preconditioners_for(variant: str, cfg: NoiseConfig) -> Preconditioners:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return Preconditioners(variant=variant, sigma_data=cfg.sigma_data)


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing noise levels ending exactly at zero."""

    levels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", np.asarray(self.levels, dtype=float))
        if self.levels.ndim != 1 or self.levels.size < 2:
            raise ConfigurationError("schedule needs at least two levels")
        if np.any(np.diff(self.levels) >= 0.0):
            raise ConfigurationError("schedule levels must be strictly decreasing")
        if self.levels[-1] != 0.0:
            raise ConfigurationError("schedule must end exactly at zero")


def make_schedule(cfg: NoiseConfig) -> Schedule:
    """Geometric spacing from sigma_max down to sigma_min, then zero."""
    k = cfg.n_sample_steps
    if k == 1:
        return Schedule(levels=np.array([cfg.sigma_max, 0.0]))
    exponents = np.arange(k) / (k - 1)
    levels = cfg.sigma_max * (cfg.sigma_min / cfg.sigma_max) ** exponents
    return Schedule(levels=np.concatenate([levels, [0.0]]))


def noise_level_from_uniform(u: float | np.ndarray, cfg: NoiseConfig) -> float | np.ndarray:
    """Log-logistic training noise level: x = loc + scale*ln(u/(1-u)), t = e^x."""
    u = np.asarray(u, dtype=float)
    x = cfg.train_loc + cfg.train_scale * np.log(u / (1.0 - u))
    t = np.clip(np.exp(x), cfg.sigma_min, cfg.sigma_max)
    return float(t) if t.ndim == 0 else t


def sample_noise_level(rng: np.random.Generator, cfg: NoiseConfig) -> float:
    return float(noise_level_from_uniform(rng.uniform(), cfg))


def sample_noise_levels(rng: np.random.Generator, cfg: NoiseConfig, size: int) -> np.ndarray:
    return np.asarray(noise_level_from_uniform(rng.uniform(size=size), cfg))


# ---------------------------------------------------------------------------
# Model bundle


@dataclass
class DiffusionModel:
    """Denoiser parameters bound to a basis table and noise configuration.

    `n_steps` low-frequency samples at spacing `dt` starting at the boundary
    time form the sequence the diffusion operates on.
    """

    params: dn.DenoiserParams
    table: prodmp.BasisTable
    noise: NoiseConfig
    variant: str
    n_steps: int
    dt: float
    pre: Preconditioners = field(init=False)
    times: np.ndarray = field(init=False)
    weight_scale: np.ndarray | None = field(init=False)
    _map0: prodmp.DecodeMap = field(init=False)

    def __post_init__(self) -> None:
        cfg = self.table.config
        self.pre = preconditioners_for(self.variant, self.noise)
        self.times = self.dt * np.arange(self.n_steps)
        if self.times[-1] > self.table.duration + 1e-12:
            raise ConfigurationError(
                "low-frequency horizon exceeds the basis table duration"
            )
        self._map0 = prodmp.decode_map(self.table, 0.0, self.times)
        if self.variant == "prodmp":
            expected_out = cfg.n_weights
            # Fixed per-column rescaling keeps network outputs in position
            # units; the decode columns span several orders of magnitude.
            rms = np.sqrt(np.mean(self._map0.A**2, axis=0))
            self.weight_scale = 1.0 / np.maximum(rms, 1e-9)
        else:
            expected_out = self.n_steps * cfg.dof
            self.weight_scale = None
        if self.params.output_dim != expected_out:
            raise ContractError(
                f"network output dim {self.params.output_dim} does not match "
                f"variant {self.variant!r} (expected {expected_out})"
            )

    @property
    def dof(self) -> int:
        return self.table.config.dof

    @property
    def obs_total_dim(self) -> int:
        return self.params.input_dim - self.n_steps * self.dof - 1


@dataclass
class Batch:
    """Normalized training windows.

    actions: (B, n, k) clean sequences; obs: (B, m*obs_dim) stacked windows;
    s0_pos/s0_vel: (B, k) boundary states at window start (time 0).
    """

    actions: np.ndarray
    obs: np.ndarray
    s0_pos: np.ndarray
    s0_vel: np.ndarray

    def __post_init__(self) -> None:
        self.actions = np.asarray(self.actions, dtype=float)
        self.obs = np.asarray(self.obs, dtype=float)
        self.s0_pos = np.asarray(self.s0_pos, dtype=float)
        self.s0_vel = np.asarray(self.s0_vel, dtype=float)
        if self.actions.ndim != 3:
            raise ContractError("batch actions must have shape (B, n, k)")
        b = self.actions.shape[0]
        if b == 0:
            raise ContractError("batch must be nonempty")
        if self.obs.shape[0] != b or self.s0_pos.shape[0] != b or self.s0_vel.shape[0] != b:
            raise ContractError("batch fields disagree on batch size")

    def __len__(self) -> int:
        return self.actions.shape[0]

    def select(self, idx: np.ndarray) -> "Batch":
        return Batch(self.actions[idx], self.obs[idx], self.s0_pos[idx], self.s0_vel[idx])


def _boundary_base(dmap, s0_pos, s0_vel):
    """Homogeneous position response per item and DoF, shape (B, T, k)."""
    c0 = np.einsum("ij,bkj->bki", dmap.m_inv, np.stack([s0_pos, s0_vel], axis=-1))
    return np.einsum("ti,bki->btk", dmap.H, c0)


def _denoise_batch(
    model: DiffusionModel,
    noisy: np.ndarray,
    obs: np.ndarray,
    ts: np.ndarray,
    s0_pos: np.ndarray,
    s0_vel: np.ndarray,
):
    """Batched denoise. Returns (D, weights or None, cache for backward)."""
    b, n, k = noisy.shape
    if n != model.n_steps or k != model.dof:
        raise ContractError(
            f"noisy sequence has shape {(n, k)}, expected {(model.n_steps, model.dof)}"
        )
    if obs.shape != (b, model.obs_total_dim):
        raise ContractError(
            f"observation block has shape {obs.shape}, expected {(b, model.obs_total_dim)}"
        )
    c_in = model.pre.c_in(ts)
    c_noise = model.pre.c_noise(ts)
    x = np.concatenate(
        [c_in[:, None] * noisy.reshape(b, -1), obs, c_noise[:, None]], axis=1
    )
    y, cache = dn.mlp_forward(model.params, x)
    if model.variant == "prodmp":
        w = y.reshape(b, k, model.table.config.n_columns) * model.weight_scale[None, None, :]
        base = _boundary_base(model._map0, s0_pos, s0_vel)
        d = base + np.einsum("tc,bkc->btk", model._map0.A, w)
        return d, w, cache
    f = y.reshape(b, n, k)
    c_skip = model.pre.c_skip(ts)
    c_out = model.pre.c_out(ts)
    d = c_skip[:, None, None] * noisy + c_out[:, None, None] * f
    return d, None, cache


def _denoise_backward(model: DiffusionModel, cache, ts: np.ndarray, d_out: np.ndarray):
    """Map dLoss/dD back to parameter gradients (list parallel to tensors())."""
    b = d_out.shape[0]
    if model.variant == "prodmp":
        d_w = np.einsum("tc,btk->bkc", model._map0.A, d_out)
        upstream = (d_w * model.weight_scale[None, None, :]).reshape(b, -1)
    else:
        c_out = model.pre.c_out(ts)
        upstream = (c_out[:, None, None] * d_out).reshape(b, -1)
    d_ws, d_bs, _ = dn.mlp_backward(model.params, cache, upstream)
    grads = []
    for dw, db in zip(d_ws, d_bs):
        grads.append(dw)
        grads.append(db)
    return grads


def denoise(
    model: DiffusionModel,
    noisy_seq: np.ndarray,
    obs: np.ndarray,
    t: float,
    s0: prodmp.BoundaryState,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Denoised (n, k) sequence and, for the prodmp variant, the weights."""
    if not 0.0 < t <= model.noise.sigma_max:
        raise RangeError(f"noise level {t} outside (0, {model.noise.sigma_max}]")
    noisy_seq = np.asarray(noisy_seq, dtype=float)
    obs = np.asarray(obs, dtype=float).reshape(1, -1)
    if s0.time != 0.0:
        raise ContractError("denoise expects the boundary at sequence time 0")
    d, w, _ = _denoise_batch(
        model,
        noisy_seq[None, :, :],
        obs,
        np.array([t]),
        s0.position[None, :],
        s0.velocity[None, :],
    )
    return d[0], (w[0] if w is not None else None)


def loss_weight(ts: np.ndarray, cfg: NoiseConfig, weighting: str) -> np.ndarray:
    if weighting == LITERAL_WEIGHTING:
        return 1.0 / ts**4
    if weighting == SIGMA_NORMALIZED_WEIGHTING:
        return (ts**2 + cfg.sigma_data**2) / (ts * cfg.sigma_data) ** 2
    raise ConfigurationError(f"unknown loss weighting {weighting!r}")


def dsm_loss_given_noise(
    model: DiffusionModel,
    batch: Batch,
    ts: np.ndarray,
    etas: np.ndarray,
    weighting: str = LITERAL_WEIGHTING,
) -> tuple[float, list[np.ndarray]]:
    """Denoising score-matching loss for fixed noise draws, with gradients.

    Per item the residual is summed over all sequence entries; items are
    averaged over the batch in index order.
    """
    noisy = batch.actions + etas
    d, _, cache = _denoise_batch(model, noisy, batch.obs, ts, batch.s0_pos, batch.s0_vel)
    diff = d - batch.actions
    wgt = loss_weight(ts, model.noise, weighting)
    per_item = wgt * np.sum(diff**2, axis=(1, 2))
    loss = float(np.mean(per_item))
    if not np.isfinite(loss):
        bad = ts[~np.isfinite(per_item)]
        raise TrainingError(f"non-finite loss at noise level(s) {bad}")
    d_out = (2.0 / len(batch)) * wgt[:, None, None] * diff
    grads = _denoise_backward(model, cache, ts, d_out)
    return loss, grads


def dsm_loss(
    model: DiffusionModel,
    batch: Batch,
    rng: np.random.Generator,
    weighting: str = LITERAL_WEIGHTING,
) -> tuple[float, list[np.ndarray]]:
    """Draw noise levels and perturbations, then evaluate the loss."""
    ts = sample_noise_levels(rng, model.noise, len(batch))
    etas = ts[:, None, None] * rng.standard_normal(batch.actions.shape)
    return dsm_loss_given_noise(model, batch, ts, etas, weighting)


# ---------------------------------------------------------------------------
# Sampling


def euler_solve(denoise_fn, x_init: np.ndarray, schedule: Schedule):
    """Euler integration of the probability-flow ODE from the first level
    down to zero. `denoise_fn(x, t)` must return (denoised, info); the info
    of the final call is returned alongside the sample.

    The last step (t_next = 0) lands exactly on the final denoiser output.
    """
    x = np.array(x_init, dtype=float)
    info = None
    levels = schedule.levels
    for i in range(len(levels) - 1):
        t_cur, t_next = levels[i], levels[i + 1]
        d, info = denoise_fn(x, t_cur)
        if t_next == 0.0:
            x = np.array(d, dtype=float)
        else:
            x = x + (t_next - t_cur) * (x - d) / t_cur
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sample at noise level {t_cur}")
    return x, info


def euler_sample(
    model: DiffusionModel,
    obs: np.ndarray,
    s0: prodmp.BoundaryState,
    schedule: Schedule,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Sample one denoised (n, k) sequence; also returns the final weights
    for the prodmp variant (None otherwise)."""
    shape = (model.n_steps, model.dof)
    x_init = schedule.levels[0] * rng.standard_normal(shape)

    def step(x, t):
        return denoise(model, x, obs, t, s0)

    return euler_solve(step, x_init, schedule)
