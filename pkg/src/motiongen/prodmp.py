"""Movement-primitive trajectory engine.

Each degree of freedom follows

    y(t)  = c1*y1(t)  + c2*y2(t)  + phi(t) . w
    dy(t) = c1*dy1(t) + c2*dy2(t) + dphi(t) . w

where y1, y2 are the complementary functions of a critically damped
second-order attractor and the columns of phi are precomputed responses of
that attractor to unit forcing components: N normalized radial basis
functions of an exponentially decaying phase, plus a constant goal
attractor. The coefficients c1, c2 are solved from a position/velocity
boundary condition, so decoded sequences start exactly at the commanded
state and consecutive plans chain without jumps.

All tables are precomputed once on a dense time grid and interpolated
linearly afterwards; every operation here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError, RangeError

# Adjacent basis functions cross at this fraction of their peak value.
RBF_OVERLAP = 0.55

# Determinant guard for the 2x2 boundary solve.
DET_EPS = 1e-12


@dataclass(frozen=True)
class ProDMPConfig:
    """Static description of the trajectory representation."""

    dof: int
    n_basis: int = 3
    alpha: float = 25.0
    duration: float = 1.2
    alpha_phase: float = 3.0
    grid_dt: float = 1e-3
    basis_width: float | None = None

    def __post_init__(self) -> None:
        if self.dof < 1:
            raise ConfigurationError(f"dof must be >= 1, got {self.dof}")
        if self.n_basis < 1:
            raise ConfigurationError(f"n_basis must be >= 1, got {self.n_basis}")
        for name in ("alpha", "duration", "alpha_phase", "grid_dt"):
            value = getattr(self, name)
            if not (value > 0.0 and math.isfinite(value)):
                raise ConfigurationError(f"{name} must be positive and finite, got {value}")
        if self.grid_dt > self.duration / 100.0:
            raise ConfigurationError(
                f"grid_dt={self.grid_dt} too coarse for duration={self.duration}; "
                "need grid_dt <= duration/100"
            )
        if self.basis_width is not None and not self.basis_width > 0.0:
            raise ConfigurationError(f"basis_width must be positive, got {self.basis_width}")

    @property
    def lam(self) -> float:
        """Repeated root of the critically damped attractor, in 1/seconds."""
        return self.alpha / (2.0 * self.duration)

    @property
    def n_columns(self) -> int:
        return self.n_basis + 1

    @property
    def n_weights(self) -> int:
        return self.dof * self.n_columns


@dataclass(frozen=True)
class BoundaryState:
    """Position/velocity pair the decoded trajectory must match at `time`."""

    position: np.ndarray
    velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if self.position.shape != self.velocity.shape or self.position.ndim != 1:
            raise ContractError("boundary position and velocity must be 1-D and equal length")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ContractError("boundary state must be finite")
        if not math.isfinite(self.time) or self.time < 0.0:
            raise ContractError(f"boundary time must be finite and >= 0, got {self.time}")


@dataclass(frozen=True)
class ActionSequence:
    """Uniformly sampled desired positions, shape (length, dof)."""

    dt: float
    start_time: float
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not self.dt > 0.0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ContractError("values must be a (length, dof) matrix with length >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("action values must be finite")

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.values.shape[0])

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dof(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BasisTable:
    """Precomputed complementary functions and basis responses on a grid.

    Immutable after construction; safe to share across workers.
    """

    config: ProDMPConfig
    times: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    y1_dot: np.ndarray
    y2_dot: np.ndarray
    phi: np.ndarray
    phi_dot: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.times[-1])


def phase(cfg: ProDMPConfig, t: np.ndarray | float) -> np.ndarray | float:
    """Exponentially decaying clock x(t) = exp(-alpha_phase * t / duration)."""
    return np.exp(-cfg.alpha_phase * np.asarray(t, dtype=float) / cfg.duration)


def rbf_centers_and_width(cfg: ProDMPConfig) -> tuple[np.ndarray, float]:
    """Basis centers equally spaced in phase over [x(duration), 1]."""
    x_end = math.exp(-cfg.alpha_phase)
    if cfg.n_basis > 1:
        centers = np.linspace(x_end, 1.0, cfg.n_basis)
        spacing = centers[1] - centers[0]
    else:
        centers = np.array([0.5 * (x_end + 1.0)])
        spacing = 1.0 - x_end
    if cfg.basis_width is not None:
        width = cfg.basis_width
    else:
        width = spacing / math.sqrt(8.0 * math.log(1.0 / RBF_OVERLAP))
    return centers, width


def forcing_components(cfg: ProDMPConfig, t: np.ndarray) -> np.ndarray:
    """Unit forcing per column at times t, shape (len(t), n_basis + 1).

    RBF columns carry the normalized (sum-to-one) basis value of the phase,
    scaled by the phase itself so the forcing dies out toward the end of the
    horizon. Without that scaling the columns would sum to a constant and be
    exactly collinear with the goal column. The last column is the constant
    attractor forcing lam^2 whose steady state under the homogeneous
    dynamics is exactly 1.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    centers, width = rbf_centers_and_width(cfg)
    x = phase(cfg, t)
    psi = np.exp(-0.5 * ((x[:, None] - centers[None, :]) / width) ** 2)
    rbf = x[:, None] * psi / np.sum(psi, axis=1, keepdims=True)
    goal = np.full((t.shape[0], 1), cfg.lam**2)
    return np.concatenate([rbf, goal], axis=1)


def precompute_basis(cfg: ProDMPConfig) -> BasisTable:
    """Integrate each forcing column from rest with fixed-step RK4.

    The grid step is snapped so the grid ends exactly at `duration`.
    """
    lam = cfg.lam
    n_steps = max(int(round(cfg.duration / cfg.grid_dt)), 100)
    dt = cfg.duration / n_steps
    times = dt * np.arange(n_steps + 1)
    times[-1] = cfg.duration

    # Forcing at all full and half steps, evaluated once.
    u_full = forcing_components(cfg, times)
    u_half = forcing_components(cfg, times[:-1] + 0.5 * dt)

    n_cols = cfg.n_columns
    pos = np.zeros((n_steps + 1, n_cols))
    vel = np.zeros((n_steps + 1, n_cols))

    def accel(p: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
        return u - 2.0 * lam * v - lam * lam * p

    p = np.zeros(n_cols)
    v = np.zeros(n_cols)
    for i in range(n_steps):
        u0, uh, u1 = u_full[i], u_half[i], u_full[i + 1]
        k1p, k1v = v, accel(p, v, u0)
        k2p, k2v = v + 0.5 * dt * k1v, accel(p + 0.5 * dt * k1p, v + 0.5 * dt * k1v, uh)
        k3p, k3v = v + 0.5 * dt * k2v, accel(p + 0.5 * dt * k2p, v + 0.5 * dt * k2v, uh)
        k4p, k4v = v + dt * k3v, accel(p + dt * k3p, v + dt * k3v, u1)
        p = p + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        v = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        pos[i + 1] = p
        vel[i + 1] = v

    y1 = np.exp(-lam * times)
    y2 = times * y1
    y1_dot = -lam * y1
    y2_dot = y1 * (1.0 - lam * times)

    table = BasisTable(
        config=cfg,
        times=times,
        y1=y1,
        y2=y2,
        y1_dot=y1_dot,
        y2_dot=y2_dot,
        phi=pos,
        phi_dot=vel,
    )
    for arr in (table.phi, table.phi_dot, table.y1, table.y2, table.y1_dot, table.y2_dot):
        if not np.all(np.isfinite(arr)):
            raise NumericalError("basis table contains non-finite entries")
    return table


def as_weight_matrix(w: np.ndarray, cfg: ProDMPConfig) -> np.ndarray:
    """View weights as (dof, n_basis + 1); accepts the flat DoF-major layout."""
    w = np.asarray(w, dtype=float)
    if w.size != cfg.n_weights:
        raise ContractError(
            f"weight vector has {w.size} entries, expected dof*(n_basis+1)={cfg.n_weights}"
        )
    if not np.all(np.isfinite(w)):
        raise ContractError("weight vector must be finite")
    return w.reshape(cfg.dof, cfg.n_columns)


def _locate(table: BasisTable, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grid = table.times
    t = np.asarray(t, dtype=float)
    if np.any(t < grid[0] - 1e-9) or np.any(t > grid[-1] + 1e-9):
        raise RangeError(
            f"query times outside basis grid [0, {grid[-1]}]: "
            f"range [{t.min()}, {t.max()}]"
        )
    t = np.clip(t, grid[0], grid[-1])
    idx = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2)
    frac = (t - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx, frac


def _lerp(values: np.ndarray, idx: np.ndarray, frac: np.ndarray) -> np.ndarray:
    if values.ndim == 1:
        return values[idx] + frac * (values[idx + 1] - values[idx])
    return values[idx] + frac[:, None] * (values[idx + 1] - values[idx])


@dataclass(frozen=True)
class DecodeMap:
    """Affine map from weights to positions/velocities at fixed query times.

    For one DoF with boundary vector b = (position, velocity) at t_b:

        pos = H  @ (m_inv @ b) + A  @ w
        vel = Hd @ (m_inv @ b) + Ad @ w

    The boundary solve c = m_inv @ (b - P_b w) is folded into A, so the map
    is linear in w for a fixed boundary and the adjoint is just A.T.
    """

    times: np.ndarray
    boundary_time: float
    H: np.ndarray
    Hd: np.ndarray
    A: np.ndarray
    Ad: np.ndarray
    m_inv: np.ndarray
    phi_b: np.ndarray
    phi_dot_b: np.ndarray


def boundary_system(table: BasisTable, t_b: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interpolated 2x2 complementary-function matrix and basis rows at t_b."""
    if not 0.0 <= t_b < table.duration:
        raise RangeError(f"boundary time {t_b} outside [0, {table.duration})")
    idx, frac = _locate(table, np.array([t_b]))
    m = np.array(
        [
            [_lerp(table.y1, idx, frac)[0], _lerp(table.y2, idx, frac)[0]],
            [_lerp(table.y1_dot, idx, frac)[0], _lerp(table.y2_dot, idx, frac)[0]],
        ]
    )
    phi_b = _lerp(table.phi, idx, frac)[0]
    phi_dot_b = _lerp(table.phi_dot, idx, frac)[0]
    return m, phi_b, phi_dot_b


def _invert_boundary(m: np.ndarray) -> np.ndarray:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < DET_EPS:
        raise NumericalError(f"boundary system is singular (det={det:.3e})")
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det


def decode_map(table: BasisTable, t_b: float, times: np.ndarray) -> DecodeMap:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ContractError("query times must be a non-empty 1-D array")
    if np.any(np.diff(times) <= 0.0):
        raise ContractError("query times must be strictly increasing")
    if times[0] < t_b - 1e-12:
        raise RangeError(f"query times start before the boundary time {t_b}")
    m, phi_b, phi_dot_b = boundary_system(table, t_b)
    m_inv = _invert_boundary(m)
    idx, frac = _locate(table, times)
    h = np.stack([_lerp(table.y1, idx, frac), _lerp(table.y2, idx, frac)], axis=1)
    hd = np.stack([_lerp(table.y1_dot, idx, frac), _lerp(table.y2_dot, idx, frac)], axis=1)
    phi_q = _lerp(table.phi, idx, frac)
    phi_dot_q = _lerp(table.phi_dot, idx, frac)
    b = m_inv @ np.stack([phi_b, phi_dot_b], axis=0)
    return DecodeMap(
        times=times,
        boundary_time=t_b,
        H=h,
        Hd=hd,
        A=phi_q - h @ b,
        Ad=phi_dot_q - hd @ b,
        m_inv=m_inv,
        phi_b=phi_b,
        phi_dot_b=phi_dot_b,
    )


def boundary_offsets(dmap: DecodeMap, s0: BoundaryState) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous position/velocity responses per DoF, shapes (T, dof)."""
    c0 = dmap.m_inv @ np.stack([s0.position, s0.velocity], axis=0)
    return dmap.H @ c0, dmap.Hd @ c0


def solve_boundary_coefficients(
    table: BasisTable, w: np.ndarray, s0: BoundaryState
) -> np.ndarray:
    """Per-DoF (c1, c2) pairs, shape (dof, 2), matching s0 exactly."""
    cfg = table.config
    wm = as_weight_matrix(w, cfg)
    if s0.position.shape[0] != cfg.dof:
        raise ContractError(f"boundary state has {s0.position.shape[0]} DoF, expected {cfg.dof}")
    m, phi_b, phi_dot_b = boundary_system(table, s0.time)
    m_inv = _invert_boundary(m)
    rhs = np.stack([s0.position - wm @ phi_b, s0.velocity - wm @ phi_dot_b], axis=0)
    return (m_inv @ rhs).T


def decode(
    table: BasisTable,
    w: np.ndarray,
    s0: BoundaryState,
    times: np.ndarray,
    return_velocity: bool = False,
) -> ActionSequence | tuple[ActionSequence, np.ndarray]:
    """Evaluate the trajectory at strictly increasing, uniformly spaced times."""
    cfg = table.config
    wm = as_weight_matrix(w, cfg)
    dmap = decode_map(table, s0.time, np.asarray(times, dtype=float))
    pos_h, vel_h = boundary_offsets(dmap, s0)
    positions = pos_h + dmap.A @ wm.T
    if dmap.times.size > 1:
        steps = np.diff(dmap.times)
        dt = float(steps[0])
        if not np.allclose(steps, dt, rtol=0.0, atol=1e-9):
            raise ContractError("decode requires uniformly spaced query times")
    else:
        dt = table.config.grid_dt
    seq = ActionSequence(dt=dt, start_time=float(dmap.times[0]), values=positions)
    if not return_velocity:
        return seq
    velocities = vel_h + dmap.Ad @ wm.T
    return seq, velocities


def encode_least_squares(
    table: BasisTable,
    traj: ActionSequence,
    s0: BoundaryState,
    ridge: float = 0.0,
) -> np.ndarray:
    """Weights minimizing the squared decode error plus a ridge penalty.

    The boundary solve makes the decoded trajectory affine in w; the affine
    part is folded into the design matrix and the normal equations are
    solved per DoF (one shared factorization, per-DoF right-hand sides).
    """
    cfg = table.config
    if ridge < 0.0:
        raise ContractError(f"ridge must be >= 0, got {ridge}")
    if traj.dof != cfg.dof:
        raise ContractError(f"trajectory has {traj.dof} DoF, expected {cfg.dof}")
    if traj.length < cfg.n_columns:
        raise ContractError(
            f"need at least {cfg.n_columns} samples per DoF, got {traj.length}"
        )
    dmap = decode_map(table, s0.time, traj.times)
    pos_h, _ = boundary_offsets(dmap, s0)
    residual = traj.values - pos_h
    gram = dmap.A.T @ dmap.A + ridge * np.eye(cfg.n_columns)
    if ridge == 0.0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError(
                f"design matrix is rank deficient (cond={cond:.3e}); use ridge > 0"
            )
    weights = np.linalg.solve(gram, dmap.A.T @ residual)
    return weights.T.reshape(-1)
