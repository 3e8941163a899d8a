"""Dataset windowing and training loops for the diffusion variants and the
behavior-cloning regression baseline.

Demonstrations are cut into (action window, observation window, boundary)
triples: the action window spans n low-rate steps starting at step i, the
observation window stacks steps i-m+1..i (padded by repetition at episode
start), and the boundary is the action at step i with a backward-difference
velocity. Everything is normalized once up front; training runs entirely in
normalized space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import envs
from . import policy as pol
from . import prodmp
from .errors import ContractError


def compute_norm_stats(dataset: envs.Dataset) -> dn.NormStats:
    actions = np.concatenate([ep.actions for ep in dataset.episodes], axis=0)
    obs = np.concatenate([ep.observations for ep in dataset.episodes], axis=0)
    act_off, act_scale = dn.minmax_stats(actions)
    obs_off, obs_scale = dn.minmax_stats(obs)
    return dn.NormStats(act_off, act_scale, obs_off, obs_scale)


def build_windows(dataset: envs.Dataset, n: int, m: int, norm: dn.NormStats) -> df.Batch:
    """All training windows of the dataset, normalized, as one batch.

    Boundary velocities use central differences where both neighbors exist;
    a backward-difference boundary lags the true tangent and bends the
    decoded trajectory measurably at the window start.
    """
    actions, obs, s0_pos, s0_vel = [], [], [], []
    for ep in dataset.episodes:
        if ep.length < n:
            continue
        act_n = norm.normalize_actions(ep.actions)
        obs_n = norm.normalize_obs(ep.observations)
        for i in range(ep.length - n + 1):
            actions.append(act_n[i : i + n])
            rows = [obs_n[max(0, i - m + 1 + j)] for j in range(m)]
            obs.append(np.concatenate(rows))
            s0_pos.append(act_n[i])
            if i == 0:
                s0_vel.append(np.zeros(dataset.dof))
            elif i + 1 < ep.length:
                s0_vel.append((act_n[i + 1] - act_n[i - 1]) / (2.0 * dataset.dt))
            else:
                s0_vel.append((act_n[i] - act_n[i - 1]) / dataset.dt)
    if not actions:
        raise ContractError(f"no episode is long enough for n={n} windows")
    return df.Batch(
        actions=np.stack(actions),
        obs=np.stack(obs),
        s0_pos=np.stack(s0_pos),
        s0_vel=np.stack(s0_vel),
    )


@dataclass
class TrainSettings:
    epochs: int = 3000
    eval_every: int = 100
    eval_rollouts: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    hidden: tuple[int, ...] = (256, 256, 256)
    loss_weighting: str = df.SIGMA_NORMALIZED_WEIGHTING


@dataclass
class TrainResult:
    log: list[dict]
    best_success: float
    best_epoch: int
    best_path: Path
    last_path: Path


def _prodmp_config_dict(cfg: prodmp.ProDMPConfig) -> dict:
    return {
        "dof": cfg.dof,
        "n_basis": cfg.n_basis,
        "alpha": cfg.alpha,
        "duration": cfg.duration,
        "alpha_phase": cfg.alpha_phase,
        "grid_dt": cfg.grid_dt,
        "basis_width": cfg.basis_width,
    }


def _noise_config_dict(cfg: df.NoiseConfig) -> dict:
    return {
        "sigma_min": cfg.sigma_min,
        "sigma_max": cfg.sigma_max,
        "sigma_data": cfg.sigma_data,
        "train_loc": cfg.train_loc,
        "train_scale": cfg.train_scale,
        "n_sample_steps": cfg.n_sample_steps,
    }


def model_from_checkpoint(bundle: dn.CheckpointBundle, policy_cfg: pol.PolicyConfig):
    """Rebuild the runtime model (diffusion or BC) from a checkpoint bundle."""
    prodmp_cfg = prodmp.ProDMPConfig(**bundle.prodmp_config)
    table = prodmp.precompute_basis(prodmp_cfg)
    if bundle.variant == pol.BC_VARIANT:
        return pol.BCModel(bundle.params, table, policy_cfg.n, policy_cfg.dt_low)
    noise_cfg = df.NoiseConfig(**bundle.noise_config)
    return df.DiffusionModel(
        bundle.params, table, noise_cfg, bundle.variant, policy_cfg.n, policy_cfg.dt_low
    )


def _eval_success(
    task: str,
    model,
    policy_cfg: pol.PolicyConfig,
    n_rollouts: int,
    seed,
) -> float:
    result = pol.evaluate(
        lambda: envs.make_env(task),
        model,
        policy_cfg,
        n_rollouts,
        [policy_cfg.success_threshold],
        seed,
    )
    return float(result.success_rates[0])


def train_diffusion(
    dataset: envs.Dataset,
    variant: str,
    prodmp_cfg: prodmp.ProDMPConfig,
    noise_cfg: df.NoiseConfig,
    policy_cfg: pol.PolicyConfig,
    settings: TrainSettings,
    seed: int,
    out_dir: str | Path,
    resume: bool = False,
) -> TrainResult:
    """Train one seed; keeps the best-success checkpoint and a resumable
    last checkpoint with optimizer and rng state."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path = out / "last.ckpt"
    best_path = out / "best.ckpt"

    table = prodmp.precompute_basis(prodmp_cfg)
    norm = compute_norm_stats(dataset)
    windows = build_windows(dataset, policy_cfg.n, policy_cfg.m, norm)
    n_windows = len(windows)

    if variant == "prodmp":
        out_dim = prodmp_cfg.n_weights
    else:
        out_dim = policy_cfg.n * prodmp_cfg.dof
    in_dim = policy_cfg.n * prodmp_cfg.dof + windows.obs.shape[1] + 1

    start_epoch = 0
    best_success = -1.0
    best_epoch = -1
    log: list[dict] = []
    if resume and last_path.exists():
        bundle = dn.load_checkpoint(last_path, expected_dof=prodmp_cfg.dof)
        params = bundle.params
        opt = bundle.opt
        train_rng = np.random.default_rng()
        train_rng.bit_generator.state = bundle.extra["rng_state"]
        start_epoch = bundle.extra["epoch"]
        best_success = bundle.extra.get("best_success", -1.0)
        best_epoch = bundle.extra.get("best_epoch", -1)
    else:
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
        params = dn.init_params(init_rng, in_dim, settings.hidden, out_dim, norm)
        opt = dn.init_optimizer(
            params.tensors(),
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
            eps=settings.eps,
            weight_decay=settings.weight_decay,
        )
        train_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))

    model = df.DiffusionModel(params, table, noise_cfg, variant, policy_cfg.n, policy_cfg.dt_low)

    def save(path: Path, epoch: int) -> None:
        dn.save_checkpoint(
            path,
            params,
            _prodmp_config_dict(prodmp_cfg),
            _noise_config_dict(noise_cfg),
            variant,
            extra={
                "epoch": epoch,
                "rng_state": train_rng.bit_generator.state,
                "best_success": best_success,
                "best_epoch": best_epoch,
                "seed": seed,
            },
            opt=opt,
        )

    for epoch in range(start_epoch + 1, settings.epochs + 1):
        perm = train_rng.permutation(n_windows)
        losses = []
        for lo in range(0, n_windows, settings.batch_size):
            batch = windows.select(perm[lo : lo + settings.batch_size])
            loss, grads = df.dsm_loss(model, batch, train_rng, settings.loss_weighting)
            dn.adamw_step(opt, params.tensors(), grads)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "success": ""}
        if epoch % settings.eval_every == 0 or epoch == settings.epochs:
            # Evaluation uses rng streams derived from (seed, epoch) so it
            # never consumes from the training stream; resumed runs replay
            # the identical loss sequence.
            success = _eval_success(
                dataset.task,
                model,
                policy_cfg,
                settings.eval_rollouts,
                seed=[seed, epoch, 0xE7A1],
            )
            row["success"] = success
            if success > best_success:
                best_success = success
                best_epoch = epoch
                save(best_path, epoch)
            save(last_path, epoch)
        log.append(row)

    if not best_path.exists():
        best_success = 0.0
        best_epoch = settings.epochs
        save(best_path, settings.epochs)
    if not last_path.exists():
        save(last_path, settings.epochs)
    return TrainResult(log, best_success, best_epoch, best_path, last_path)


def encode_windows(
    table: prodmp.BasisTable, windows: df.Batch, dt_low: float, ridge: float = 1e-10
) -> np.ndarray:
    """Least-squares primitive weights for every window, shape (W, dof*(N+1)).

    The windows share the decode map, so one factorization serves all."""
    n = windows.actions.shape[1]
    times = dt_low * np.arange(n)
    dmap = prodmp.decode_map(table, 0.0, times)
    c0 = np.einsum("ij,bkj->bki", dmap.m_inv, np.stack([windows.s0_pos, windows.s0_vel], axis=-1))
    base = np.einsum("ti,bki->btk", dmap.H, c0)
    residual = windows.actions - base
    gram = dmap.A.T @ dmap.A + ridge * np.eye(dmap.A.shape[1])
    w = np.linalg.solve(gram, np.einsum("tc,btk->cbk", dmap.A, residual).reshape(dmap.A.shape[1], -1))
    n_cols = dmap.A.shape[1]
    b, k = windows.actions.shape[0], windows.actions.shape[2]
    return np.transpose(w.reshape(n_cols, b, k), (1, 2, 0)).reshape(b, k * n_cols)


def train_bc(
    dataset: envs.Dataset,
    prodmp_cfg: prodmp.ProDMPConfig,
    policy_cfg: pol.PolicyConfig,
    settings: TrainSettings,
    seed: int,
    out_dir: str | Path,
) -> TrainResult:
    """Mean-squared-error regression from observation windows onto encoded
    primitive weights; a single-Gaussian reference that mode-averages."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = prodmp.precompute_basis(prodmp_cfg)
    norm = compute_norm_stats(dataset)
    windows = build_windows(dataset, policy_cfg.n, policy_cfg.m, norm)
    n_windows = len(windows)

    bc_stub = pol.BCModel(
        dn.DenoiserParams([np.zeros((1, 1))], [np.zeros(1)], norm),
        table,
        policy_cfg.n,
        policy_cfg.dt_low,
    )
    scale = bc_stub.weight_scale
    targets = encode_windows(table, windows, policy_cfg.dt_low)
    targets = targets.reshape(n_windows, prodmp_cfg.dof, -1) / scale[None, None, :]
    targets = targets.reshape(n_windows, -1)

    in_dim = windows.obs.shape[1]
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBC]))
    params = dn.init_params(init_rng, in_dim, settings.hidden, targets.shape[1], norm)
    opt = dn.init_optimizer(
        params.tensors(),
        lr=settings.lr,
        beta1=settings.beta1,
        beta2=settings.beta2,
        eps=settings.eps,
        weight_decay=settings.weight_decay,
    )
    train_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBC7]))
    model = pol.BCModel(params, table, policy_cfg.n, policy_cfg.dt_low)

    best_success = -1.0
    best_epoch = -1
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    log: list[dict] = []

    def save(path: Path, epoch: int) -> None:
        dn.save_checkpoint(
            path,
            params,
            _prodmp_config_dict(prodmp_cfg),
            _noise_config_dict(df.NoiseConfig()),
            pol.BC_VARIANT,
            extra={"epoch": epoch, "seed": seed, "best_success": best_success},
            opt=opt,
        )

    for epoch in range(1, settings.epochs + 1):
        perm = train_rng.permutation(n_windows)
        losses = []
        for lo in range(0, n_windows, settings.batch_size):
            idx = perm[lo : lo + settings.batch_size]
            x = windows.obs[idx]
            y, cache = dn.mlp_forward(params, x)
            diff = y - targets[idx]
            loss = float(np.mean(np.sum(diff**2, axis=1)))
            upstream = 2.0 * diff / len(idx)
            d_ws, d_bs, _ = dn.mlp_backward(params, cache, upstream)
            grads = []
            for dw, db in zip(d_ws, d_bs):
                grads.append(dw)
                grads.append(db)
            dn.adamw_step(opt, params.tensors(), grads)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "success": ""}
        if epoch % settings.eval_every == 0 or epoch == settings.epochs:
            success = _eval_success(
                dataset.task,
                model,
                policy_cfg,
                settings.eval_rollouts,
                seed=[seed, epoch, 0xBCE7A1],
            )
            row["success"] = success
            if success > best_success:
                best_success = success
                best_epoch = epoch
                save(best_path, epoch)
            save(last_path, epoch)
        log.append(row)

    if not best_path.exists():
        best_success = 0.0
        best_epoch = settings.epochs
        save(best_path, settings.epochs)
    return TrainResult(log, best_success, best_epoch, best_path, last_path)
