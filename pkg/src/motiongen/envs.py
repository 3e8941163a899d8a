"""Desk-scale tasks, scripted multimodal demonstrators, and dataset I/O.

Two tasks:

  lattice   a 2-D mass-spring sheet whose two top corners are dragged by
            kinematically servoed "grasper" points; two marked bottom
            nodes must be brought onto target points. Targets are derived
            per episode from a reference rollout, so every sampled episode
            is achievable.
  obstacle  a servoed point mass that must reach a goal behind a disk
            obstacle; passing left or right are equally valid, which makes
            the demonstration distribution bimodal.

Free lattice nodes integrate spring forces with semi-implicit Euler; the
viscous drag term is folded in implicitly, which keeps the discrete
mechanical energy non-increasing for the configured step size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, GenerationError, SimulationError

LATTICE = "lattice"
OBSTACLE = "obstacle"
TASKS = (LATTICE, OBSTACLE)

FLOAT_FMT = "%.17g"


def minimum_jerk(u: np.ndarray | float) -> np.ndarray | float:
    """Smooth 0..1 time scaling with zero boundary velocity and acceleration."""
    u = np.clip(u, 0.0, 1.0)
    return 10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5


def quadratic_bezier(p0, p1, p2, u):
    u = np.asarray(u, dtype=float)[..., None]
    return (1 - u) ** 2 * p0 + 2 * (1 - u) * u * p1 + u**2 * p2


# ---------------------------------------------------------------------------
# Servo shared by both tasks: critically damped PD toward the commanded
# point, with the per-step displacement clamped to max_speed * dt.


def servo_step(pos, vel, target, omega, max_speed, dt):
    acc = omega * omega * (target - pos) - 2.0 * omega * vel
    vel = vel + dt * acc
    step = vel * dt
    norm = np.linalg.norm(step, axis=-1, keepdims=True)
    limit = max_speed * dt
    scale = np.where(norm > limit, limit / np.maximum(norm, 1e-300), 1.0)
    step = step * scale
    vel = step / dt
    return pos + step, vel


# ---------------------------------------------------------------------------
# Lattice task


@dataclass(frozen=True)
class LatticeParams:
    rows: int = 5
    cols: int = 5
    spacing: float = 0.2
    origin: tuple[float, float] = (-0.4, -0.8)
    stiffness: float = 40.0
    damping: float = 1.5
    node_mass: float = 0.6
    dt_sim: float = 0.005
    servo_omega: float = 60.0
    max_speed: float = 1.5
    lift_range: tuple[float, float] = (0.12, 0.40)
    spread: float = 0.18

    def __post_init__(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise ConfigurationError("lattice needs at least 2x2 nodes")
        if self.stiffness <= 0 or self.damping <= 0 or self.node_mass <= 0:
            raise ConfigurationError("stiffness, damping, and mass must be positive")
        if self.dt_sim <= 0:
            raise ConfigurationError("dt_sim must be positive")


class LatticeEnv:
    """Deformable-sheet alignment task with two controlled corner points."""

    task_id = LATTICE
    dof = 4
    obs_dim = 12
    n_markers = 2

    def __init__(self, params: LatticeParams | None = None):
        self.params = params or LatticeParams()
        p = self.params
        rows, cols = p.rows, p.cols
        grid = np.array(
            [
                (p.origin[0] + c * p.spacing, p.origin[1] + r * p.spacing)
                for r in range(rows)
                for c in range(cols)
            ]
        )
        self._rest_positions = grid

        def idx(r, c):
            return r * cols + c

        springs = []
        for r in range(rows):
            for c in range(cols):
                if c + 1 < cols:
                    springs.append((idx(r, c), idx(r, c + 1)))
                if r + 1 < rows:
                    springs.append((idx(r, c), idx(r + 1, c)))
                if r + 1 < rows and c + 1 < cols:
                    springs.append((idx(r, c), idx(r + 1, c + 1)))
                if r + 1 < rows and c - 1 >= 0:
                    springs.append((idx(r, c), idx(r + 1, c - 1)))
        self._spring_a = np.array([s[0] for s in springs])
        self._spring_b = np.array([s[1] for s in springs])
        self._rest_len = np.linalg.norm(
            grid[self._spring_a] - grid[self._spring_b], axis=1
        )
        self.attach_idx = np.array([idx(rows - 1, 0), idx(rows - 1, cols - 1)])
        self.marker_idx = np.array([idx(0, 0), idx(0, cols - 1)])
        free = np.ones(rows * cols, dtype=bool)
        free[self.attach_idx] = False
        self._free = free

        self.positions = grid.copy()
        self.velocities = np.zeros_like(grid)
        self._servo_vel = np.zeros((2, 2))
        self.targets = grid[self.marker_idx].copy()
        self.attach_goal = self.positions[self.attach_idx].flatten()

    # -- state helpers

    def instrument_positions(self) -> np.ndarray:
        return self.positions[self.attach_idx].reshape(-1).copy()

    def object_positions(self) -> np.ndarray:
        return self.positions[self.marker_idx].reshape(-1).copy()

    def observe(self) -> np.ndarray:
        return np.concatenate(
            [
                self.positions[self.attach_idx].reshape(-1),
                self.positions[self.marker_idx].reshape(-1),
                self.targets.reshape(-1),
            ]
        )

    def distances(self) -> tuple[float, float]:
        d = np.linalg.norm(self.positions[self.marker_idx] - self.targets, axis=1)
        return float(d[0]), float(d[1])

    def alignment_error(self) -> float:
        return max(self.distances())

    def success(self, threshold: float) -> bool:
        return self.alignment_error() <= threshold

    def mechanical_energy(self) -> float:
        kinetic = 0.5 * self.params.node_mass * float(
            np.sum(self.velocities[self._free] ** 2)
        )
        lengths = np.linalg.norm(
            self.positions[self._spring_a] - self.positions[self._spring_b], axis=1
        )
        potential = 0.5 * self.params.stiffness * float(np.sum((lengths - self._rest_len) ** 2))
        return kinetic + potential

    # -- dynamics

    def step(self, control: np.ndarray) -> None:
        """Advance one dt_sim substep toward the commanded attachment points."""
        p = self.params
        control = np.asarray(control, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(control)):
            raise SimulationError("non-finite control input")

        attach_pos = self.positions[self.attach_idx]
        new_pos, self._servo_vel = servo_step(
            attach_pos, self._servo_vel, control, p.servo_omega, p.max_speed, p.dt_sim
        )
        self.positions[self.attach_idx] = new_pos
        self.velocities[self.attach_idx] = self._servo_vel

        delta = self.positions[self._spring_a] - self.positions[self._spring_b]
        lengths = np.maximum(np.linalg.norm(delta, axis=1), 1e-12)
        force_mag = -p.stiffness * (lengths - self._rest_len)
        force_vec = (force_mag / lengths)[:, None] * delta
        forces = np.zeros_like(self.positions)
        np.add.at(forces, self._spring_a, force_vec)
        np.add.at(forces, self._spring_b, -force_vec)

        free = self._free
        vel = self.velocities[free]
        vel = (vel + p.dt_sim * forces[free] / p.node_mass) / (
            1.0 + p.dt_sim * p.damping / p.node_mass
        )
        self.velocities[free] = vel
        self.positions[free] += p.dt_sim * vel
        if not np.all(np.isfinite(self.positions)):
            raise SimulationError("lattice state became non-finite")

    # -- episode setup

    def _reset_state(self) -> None:
        self.positions = self._rest_positions.copy()
        self.velocities = np.zeros_like(self.positions)
        self._servo_vel = np.zeros((2, 2))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Sample a reachable goal: pull the corners, read where the markers
        settle, and use those marker positions as this episode's targets."""
        p = self.params
        start = self._rest_positions[self.attach_idx]
        lift = rng.uniform(*p.lift_range, size=2)
        goal = start.copy()
        goal[0, 0] += rng.uniform(-p.spread, p.spread)
        goal[1, 0] += rng.uniform(-p.spread, p.spread)
        goal[:, 1] += lift
        self.attach_goal = goal.reshape(-1)

        self._reset_state()
        self.targets = self._rest_positions[self.marker_idx].copy()
        for control in reference_controls(start.reshape(-1), self.attach_goal):
            for _ in range(int(round(0.1 / p.dt_sim))):
                self.step(control)
        self.targets = self.positions[self.marker_idx].copy()
        self._reset_state()
        return self.observe()


def reference_controls(attach_start: np.ndarray, attach_goal: np.ndarray):
    """Straight-line minimum-jerk drag, then a settle phase; 0.1 s per step."""
    move_steps, settle_steps = 24, 20
    s = minimum_jerk(np.arange(1, move_steps + 1) / move_steps)
    for si in s:
        yield attach_start + si * (attach_goal - attach_start)
    for _ in range(settle_steps):
        yield attach_goal


# ---------------------------------------------------------------------------
# Obstacle task


@dataclass(frozen=True)
class ObstacleParams:
    start: tuple[float, float] = (-0.8, 0.0)
    goal: tuple[float, float] = (0.8, 0.0)
    goal_jitter: float = 0.05
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.25
    dt_sim: float = 0.005
    servo_omega: float = 20.0
    max_speed: float = 1.5


class ObstacleEnv:
    """Point-mass navigation around a disk; left and right routes both work."""

    task_id = OBSTACLE
    dof = 2
    obs_dim = 4
    n_markers = 1

    def __init__(self, params: ObstacleParams | None = None):
        self.params = params or ObstacleParams()
        self.pos = np.array(self.params.start, dtype=float)
        self.vel = np.zeros(2)
        self.goal = np.array(self.params.goal, dtype=float)
        self.collided = False

    def instrument_positions(self) -> np.ndarray:
        return self.pos.copy()

    def object_positions(self) -> np.ndarray:
        return self.pos.copy()

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal])

    def alignment_error(self) -> float:
        if self.collided:
            return float("inf")
        return float(np.linalg.norm(self.pos - self.goal))

    def success(self, threshold: float) -> bool:
        return (not self.collided) and np.linalg.norm(self.pos - self.goal) <= threshold

    def step(self, control: np.ndarray) -> None:
        p = self.params
        control = np.asarray(control, dtype=float).reshape(2)
        if not np.all(np.isfinite(control)):
            raise SimulationError("non-finite control input")
        new_pos, self.vel = servo_step(
            self.pos, self.vel, control, p.servo_omega, p.max_speed, p.dt_sim
        )
        center = np.asarray(p.center)
        offset = new_pos - center
        dist = np.linalg.norm(offset)
        if dist < p.radius:
            self.collided = True
            if dist < 1e-12:
                offset, dist = np.array([p.radius, 0.0]), p.radius
            new_pos = center + offset * (p.radius / dist)
            self.vel = np.zeros(2)
        self.pos = new_pos

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        self.pos = np.array(p.start, dtype=float)
        self.vel = np.zeros(2)
        self.goal = np.array(p.goal, dtype=float) + rng.uniform(
            -p.goal_jitter, p.goal_jitter, size=2
        )
        self.collided = False
        return self.observe()


def make_env(task: str):
    if task == LATTICE:
        return LatticeEnv()
    if task == OBSTACLE:
        return ObstacleEnv()
    raise ConfigurationError(f"unknown task {task!r}, expected one of {TASKS}")


# ---------------------------------------------------------------------------
# Episodes and datasets


@dataclass
class Episode:
    task: str
    dt: float
    observations: np.ndarray
    actions: np.ndarray
    seed: int
    mode: str
    success: bool

    def __post_init__(self) -> None:
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.dt <= 0:
            raise ContractError("episode dt must be positive")
        if self.observations.shape[0] != self.actions.shape[0]:
            raise ContractError(
                "episode observations and actions must have equal step counts"
            )

    @property
    def length(self) -> int:
        return self.actions.shape[0]


@dataclass
class Dataset:
    task: str
    dt: float
    dof: int
    obs_dim: int
    episodes: list[Episode] = field(default_factory=list)

    def validate(self) -> None:
        for ep in self.episodes:
            if ep.task != self.task:
                raise ContractError(f"episode task {ep.task!r} != dataset task {self.task!r}")
            if ep.dt != self.dt:
                raise ContractError("episode dt differs from dataset dt")
            if ep.actions.shape[1] != self.dof or ep.observations.shape[1] != self.obs_dim:
                raise ContractError("episode dimensions differ from dataset manifest")

    def __len__(self) -> int:
        return len(self.episodes)


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    dataset.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "task": dataset.task,
        "dt": dataset.dt,
        "dof": dataset.dof,
        "obs_dim": dataset.obs_dim,
        "episodes": [],
    }
    for i, ep in enumerate(dataset.episodes):
        name = f"episode_{i:04d}.csv"
        manifest["episodes"].append(
            {"file": name, "seed": ep.seed, "mode": ep.mode, "success": ep.success}
        )
        header = (
            "time,"
            + ",".join(f"obs_{j}" for j in range(dataset.obs_dim))
            + ","
            + ",".join(f"act_{j}" for j in range(dataset.dof))
        )
        times = dataset.dt * np.arange(ep.length)
        rows = np.column_stack([times, ep.observations, ep.actions])
        np.savetxt(root / name, rows, fmt=FLOAT_FMT, delimiter=",", header=header, comments="")
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    dataset = Dataset(
        task=manifest["task"],
        dt=manifest["dt"],
        dof=manifest["dof"],
        obs_dim=manifest["obs_dim"],
    )
    for entry in manifest["episodes"]:
        rows = np.loadtxt(root / entry["file"], delimiter=",", skiprows=1, ndmin=2)
        obs = rows[:, 1 : 1 + dataset.obs_dim]
        act = rows[:, 1 + dataset.obs_dim :]
        dataset.episodes.append(
            Episode(
                task=dataset.task,
                dt=dataset.dt,
                observations=obs,
                actions=act,
                seed=entry["seed"],
                mode=entry["mode"],
                success=entry["success"],
            )
        )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# Scripted demonstrators

DEMO_DT = 0.1
DEMO_SUCCESS_THRESHOLD = 0.05
MAX_DEMO_ATTEMPTS = 25


def _execute_script(env, actions: np.ndarray) -> np.ndarray:
    """Run low-rate actions through the simulator, holding each for dt."""
    substeps = int(round(DEMO_DT / env.params.dt_sim))
    observations = np.empty((len(actions), env.obs_dim))
    for i, action in enumerate(actions):
        observations[i] = env.observe()
        for _ in range(substeps):
            env.step(action)
    return observations


def _arc_actions(start, goal, bow_vector, move_steps, settle_steps):
    control_point = 0.5 * (start + goal) + bow_vector
    u = minimum_jerk(np.arange(1, move_steps + 1) / move_steps)
    moving = quadratic_bezier(start, control_point, goal, u)
    holding = np.tile(goal, (settle_steps, 1))
    return np.vstack([moving, holding])


def _catmull_rom(points: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Uniform Catmull-Rom spline through `points`, sampled at u in [0, 1]."""
    n_seg = len(points) - 1
    padded = np.vstack([2 * points[0] - points[1], points, 2 * points[-1] - points[-2]])
    s = np.clip(u, 0.0, 1.0) * n_seg
    idx = np.minimum(s.astype(int), n_seg - 1)
    t = (s - idx)[:, None]
    p0, p1, p2, p3 = (padded[idx + i] for i in range(4))
    return 0.5 * (
        2 * p1
        + (-p0 + p2) * t
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3
    )


def _wandering_path(start, goal, bow_vector, wander, rng, move_steps):
    """Human-like approach: waypoints along a bowed arc, each perturbed by at
    most `wander`, joined by a smooth spline with minimum-jerk timing."""
    control_point = 0.5 * (start + goal) + bow_vector
    u_wp = np.linspace(0.0, 1.0, 6)
    waypoints = quadratic_bezier(start, control_point, goal, u_wp)
    waypoints[1:-1] += rng.uniform(-wander, wander, size=(4, 2))
    u = minimum_jerk(np.arange(1, move_steps + 1) / move_steps)
    return _catmull_rom(waypoints, u)


def _obstacle_demo(env: ObstacleEnv, mode: str, rng: np.random.Generator) -> np.ndarray:
    side = 1.0 if mode == "A" else -1.0
    height = side * (0.8 + rng.uniform(-0.05, 0.05))
    start = np.array(env.params.start)
    bow = np.array([rng.uniform(-0.05, 0.05), height])
    return _arc_actions(start, env.goal, bow, move_steps=24, settle_steps=6)


def _lattice_demo(env: LatticeEnv, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Two-phase grasper motion mimicking a teleoperating demonstrator: a
    bowed, slightly wandering approach to a via point near the goal, a short
    hold, then a fine alignment segment onto the goal."""
    start = env.positions[env.attach_idx].copy()
    goal = env.attach_goal.reshape(2, 2)
    outward = np.array([[-1.0, 0.0], [1.0, 0.0]])
    sign = 1.0 if mode == "A" else -1.0
    per_grasper = []
    for g in range(2):
        amount = 0.12 + rng.uniform(-0.05, 0.05)
        bow = sign * amount * outward[g]
        via = goal[g] + np.array(
            [rng.uniform(-0.04, 0.04), 0.08 + rng.uniform(-0.03, 0.03)]
        )
        approach = _wandering_path(start[g], via, bow, 0.05, rng, move_steps=16)
        pause = np.tile(approach[-1], (2, 1))
        u = minimum_jerk(np.arange(1, 9) / 8.0)
        align = approach[-1] + u[:, None] * (goal[g] - approach[-1])
        hold = np.tile(goal[g], (8, 1))
        per_grasper.append(np.vstack([approach, pause, align, hold]))
    return np.concatenate(per_grasper, axis=1)


def scripted_demo(task: str, mode: str, rng: np.random.Generator) -> Episode:
    """One smooth, successful demonstration at 10 Hz.

    Mode selects the strategy: obstacle episodes pass above (A) or below (B)
    the disk; lattice grasper paths bow outward (A) or inward (B). Waypoints
    are jittered by at most 5 percent of the workspace. Regenerates with
    fresh jitter if the success check fails.
    """
    if mode not in ("A", "B"):
        raise ContractError(f"mode must be 'A' or 'B', got {mode!r}")
    env = make_env(task)
    for _ in range(MAX_DEMO_ATTEMPTS):
        env.reset(rng)
        if task == OBSTACLE:
            actions = _obstacle_demo(env, mode, rng)
        else:
            actions = _lattice_demo(env, mode, rng)
        observations = _execute_script(env, actions)
        if env.success(DEMO_SUCCESS_THRESHOLD):
            return Episode(
                task=task,
                dt=DEMO_DT,
                observations=observations,
                actions=actions,
                seed=-1,
                mode=mode,
                success=True,
            )
    raise GenerationError(f"scripted {task} demo failed after {MAX_DEMO_ATTEMPTS} attempts")


def generate_dataset(task: str, count: int, seed: int) -> Dataset:
    """Alternating-mode demonstrations with per-episode derived rng streams."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    env = make_env(task)
    dataset = Dataset(task=task, dt=DEMO_DT, dof=env.dof, obs_dim=env.obs_dim)
    children = np.random.SeedSequence(seed).spawn(count)
    for i, child in enumerate(children):
        mode = "A" if i % 2 == 0 else "B"
        episode = scripted_demo(task, mode, np.random.default_rng(child))
        episode.seed = i
        dataset.episodes.append(episode)
    return dataset
