"""
Home to the goal-conditioned locomotion environment.

One LeggedNavEnv steps a batch of robots on a shared TerrainWorld. Each robot
owns a counter-based random stream (Philox), so spawn poses, targets,
commands and observation noise do not depend on batch composition.

Observation layout (dimension 49 + K):

    base_linvel(3) base_angvel(3) projected_gravity(3) q - q0 (12) qd(12)
    command(4) prev_action(12) terrain_samples(K)

In position modes the command is (target in base frame, time left); in
velocity mode it is (vx, 0, yaw_rate, 0).
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from legnav import physics
from legnav.config import EnvConfig, RunConfig, TaskMode
from legnav.csvlog import CsvLog
from legnav.errors import NonFiniteError
from legnav.physics import NUM_JOINTS, NUM_LEGS, QuadrupedModel, RobotState
from legnav.rewards import (
    RewardTerms,
    air_time_reward,
    combine,
    exploration_bias,
    penalties,
    stall_penalty,
    task_reward_continuous,
    task_reward_final,
    tracking_reward_velocity,
)
from legnav.terrain import CurriculumGrid, HeightField, TerrainWorld, sample_target, update_curriculum

log = logging.getLogger(__name__)

BASE_OBS_DIM = 49
# command block inside an observation row
COMMAND_SLICE = slice(9 + 2 * NUM_JOINTS, 13 + 2 * NUM_JOINTS)
GRAVITY_DIR = np.array([0.0, 0.0, -1.0])
TRACE_COLUMNS = ("robot", "t") + RewardTerms.names() + ("distance", "speed")


def make_streams(seed: Union[int, Sequence[int]], count: int) -> List[np.random.Generator]:
    """
    Returns one independent Philox generator per robot.
    """
    return [
        np.random.Generator(np.random.Philox(s))
        for s in np.random.SeedSequence(seed).spawn(count)
    ]


def stream_states(streams: Sequence[np.random.Generator]) -> List[dict]:
    return [g.bit_generator.state for g in streams]


def restore_streams(states: Sequence[dict]) -> List[np.random.Generator]:
    streams = []
    for state in states:
        bitgen = np.random.Philox()
        bitgen.state = state
        streams.append(np.random.Generator(bitgen))
    return streams


@dataclass
class CommandOverride:
    """
    Replaces the sampled command during evaluation.

    Position modes: the target is always `distance` metres along the
    base-frame `direction` and time_left is held at `time_left`.
    Velocity mode: (vx, yaw_rate) are held at `velocity`.
    """

    direction: Tuple[float, float] = (1.0, 0.0)
    distance: float = 3.0
    time_left: Optional[float] = None
    velocity: Optional[Tuple[float, float]] = None


@dataclass
class EpisodeStats:
    """
    Outcome of the episodes that ended in one step, one entry per robot.
    """

    robots: np.ndarray
    success: np.ndarray
    crash: np.ndarray
    timeout: np.ndarray
    progress: np.ndarray
    final_distance: np.ndarray
    traveled: np.ndarray
    task_sum: np.ndarray
    total_return: np.ndarray
    stall_fraction: np.ndarray
    level: np.ndarray

    def __len__(self) -> int:
        return len(self.robots)


def terrain_offsets(config: EnvConfig) -> np.ndarray:
    """
    Returns the (K, 2) base-frame sample offsets, a centred square grid.
    """
    half = (config.terrain_grid - 1) / 2
    ticks = (np.arange(config.terrain_grid) - half) * config.terrain_spacing
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def observation_dim(config: EnvConfig) -> int:
    return BASE_OBS_DIM + config.num_terrain_samples


def noise_vector(config: EnvConfig) -> np.ndarray:
    """
    Per-entry uniform noise half-widths; command and prev_action stay clean.
    """
    parts = [
        np.full(3, config.noise_linvel),
        np.full(3, config.noise_angvel),
        np.full(3, config.noise_gravity),
        np.full(NUM_JOINTS, config.noise_q),
        np.full(NUM_JOINTS, config.noise_qd),
        np.zeros(4),
        np.zeros(NUM_JOINTS),
        np.full(config.num_terrain_samples, config.noise_terrain),
    ]
    return np.concatenate(parts)


def base_frame(state: RobotState) -> np.ndarray:
    return physics.quat_to_rot(state.base_quat)


def position_command(state: RobotState, world_target: np.ndarray, time_left) -> np.ndarray:
    """
    Returns (target in base frame, time_left) per robot.
    """
    rot = base_frame(state)
    local = physics.rotate_inv(rot, np.asarray(world_target) - state.base_pos)
    time_left = np.broadcast_to(np.asarray(time_left, dtype=np.float64), (state.num_robots,))
    return np.concatenate([local, time_left[:, None]], axis=-1)


def velocity_command(commands: np.ndarray) -> np.ndarray:
    zeros = np.zeros(commands.shape[0])
    return np.stack([commands[:, 0], zeros, commands[:, 1], zeros], axis=-1)


def compute_observation(
    state: RobotState,
    world_target: np.ndarray,
    episode_t,
    prev_action: np.ndarray,
    field: HeightField,
    noise_rngs: Optional[Sequence[np.random.Generator]],
    config: EnvConfig,
    model: QuadrupedModel,
    episode_length: float,
    command: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Builds the (robots, 49 + K) observation matrix.

    command, when given, replaces the position command block. noise_rngs None
    means a noiseless observation.
    """
    rot = base_frame(state)
    n = state.num_robots
    if command is None:
        command = position_command(state, world_target, episode_length - np.asarray(episode_t))

    linvel = physics.rotate_inv(rot, state.base_linvel)
    angvel = physics.rotate_inv(rot, state.base_angvel)
    gravity = physics.rotate_inv(rot, np.broadcast_to(GRAVITY_DIR, (n, 3)))
    if not config.observe_gravity:
        gravity = np.zeros_like(gravity)

    yaw = physics.yaw_from_quat(state.base_quat)
    offsets = terrain_offsets(config)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    px = state.base_pos[:, 0:1] + c * offsets[None, :, 0] - s * offsets[None, :, 1]
    py = state.base_pos[:, 1:2] + s * offsets[None, :, 0] + c * offsets[None, :, 1]
    height, _, _, hole = field.surface(px, py)
    samples = np.where(hole, -config.hole_obs_depth, height - state.base_pos[:, 2:3])

    raw = np.concatenate(
        [
            linvel,
            angvel,
            gravity,
            state.q - model.default_joint_pos,
            state.qd,
            command,
            prev_action,
            samples,
        ],
        axis=-1,
    )
    if noise_rngs is not None:
        scale = noise_vector(config)
        noise = np.stack([rng.uniform(-1.0, 1.0, size=raw.shape[1]) for rng in noise_rngs])
        raw = raw + noise * scale

    obs_scale = np.concatenate(
        [
            np.full(3, config.scale_linvel),
            np.full(3, config.scale_angvel),
            np.ones(3 + NUM_JOINTS),
            np.full(NUM_JOINTS, config.scale_qd),
            np.ones(4 + NUM_JOINTS + config.num_terrain_samples),
        ]
    )
    return raw * obs_scale


def check_success(final_base_pos, target, crashed=False, radius: float = 0.5):
    """
    True iff the 3D distance to the target is strictly below radius and no
    crash occurred.
    """
    diff = np.asarray(final_base_pos, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    result = (dist < radius) & ~np.asarray(crashed, dtype=bool)
    return bool(result) if np.ndim(result) == 0 else result


class RewardTrace:
    """
    Streams reward terms of selected robots to CSV, one row per control step.
    """

    def __init__(self, path, robots: Sequence[int], seed: Optional[int] = None) -> None:
        self.robots = list(robots)
        self._log = CsvLog(path, TRACE_COLUMNS, seed=seed)

    def write(self, t: np.ndarray, terms: RewardTerms, distance: np.ndarray, speed: np.ndarray) -> None:
        for robot in self.robots:
            self._log.write(
                {
                    "robot": robot,
                    "t": t[robot],
                    **terms.row(robot),
                    "distance": distance[robot],
                    "speed": speed[robot],
                }
            )

    def close(self) -> None:
        self._log.close()


class LeggedNavEnv:
    """
    Batched goal-conditioned environment.
    """

    def __init__(
        self,
        config: RunConfig,
        world: TerrainWorld,
        seed: int,
        num_robots: Optional[int] = None,
        grid: Optional[CurriculumGrid] = None,
        episode_length_s: Optional[float] = None,
        auto_reset: bool = True,
        learn_curriculum: bool = True,
        randomize_spawn: bool = True,
        workers: Optional[int] = None,
    ) -> None:
        self.config = config.resolve()
        self.mode = self.config.task_mode
        self.env_config = self.config.env
        self.weights = self.config.rewards
        self.model = QuadrupedModel.from_config(self.config.physics)
        self.world = world
        self.num_robots = num_robots or self.config.num_robots
        self.workers = workers or self.config.workers
        self.dt = self.config.physics.dt
        self.decimation = self.config.physics.decimation
        self.control_dt = self.dt * self.decimation
        self.episode_length = episode_length_s or self.env_config.episode_length_s
        self.max_steps = int(round(self.episode_length / self.control_dt))
        self.tilt_steps = int(round(self.env_config.tilt_time_s / self.control_dt))
        self.cos_tilt = math.cos(math.radians(self.env_config.tilt_limit_deg))
        self.auto_reset = auto_reset
        self.learn_curriculum = learn_curriculum
        self.randomize_spawn = randomize_spawn
        self.obs_dim = observation_dim(self.env_config)
        self.num_actions = NUM_JOINTS

        self.rngs = make_streams(seed, self.num_robots)
        self.grid = grid or CurriculumGrid.initial(
            self.config.terrain,
            self.num_robots,
            np.random.default_rng(np.random.SeedSequence([seed, 1])),
            families=[spec.family for spec in world.specs[0]],
        )

        n = self.num_robots
        self.bias_gate = self.mode.is_position
        self.override: Optional[CommandOverride] = None
        self.trace: Optional[RewardTrace] = None
        self.state = physics.standing_state(self.model, np.zeros((n, 3)))
        self.targets = np.zeros((n, 3))
        self.start_pos = np.zeros((n, 3))
        self.start_distance = np.ones(n)
        self.commands = np.zeros((n, 2))
        self.kill_z = np.zeros(n)
        self.step_count = np.zeros(n, dtype=np.int64)
        self.tilt_count = np.zeros(n, dtype=np.int64)
        self.prev_action = np.zeros((n, NUM_JOINTS))
        self.air_time = np.zeros((n, NUM_LEGS))
        self.last_contacts = np.zeros((n, NUM_LEGS), dtype=bool)
        self.task_sum = np.zeros(n)
        self.episode_return = np.zeros(n)
        self.stall_steps = np.zeros(n, dtype=np.int64)

    @property
    def episode_time(self) -> np.ndarray:
        return self.step_count * self.control_dt

    def reset(
        self,
        robots: Optional[Sequence[int]] = None,
        targets: Optional[np.ndarray] = None,
        yaw: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """
        Respawns the given robots (all by default) at their curriculum cell and
        samples new targets or velocity commands. Returns the full observation.
        """
        ids = np.arange(self.num_robots) if robots is None else np.asarray(robots, dtype=np.int64)
        if len(ids):
            self._respawn(ids, targets, yaw)
        return self.observe()

    def _respawn(self, ids: np.ndarray, targets: Optional[np.ndarray], yaw: Optional[np.ndarray]) -> None:
        cfg = self.env_config
        levels, cols = self.grid.levels[ids], self.grid.cols[ids]
        spawns = self.world.spawn_points(levels, cols).copy()
        yaws = np.zeros(len(ids))
        q = np.tile(self.model.default_joint_pos, (len(ids), 1))

        for k, robot in enumerate(ids):
            rng = self.rngs[robot]
            if self.randomize_spawn:
                yaws[k] = rng.uniform(0.0, 2 * math.pi)
                spawns[k, :2] += rng.uniform(-cfg.spawn_jitter / 2, cfg.spawn_jitter / 2, size=2)
            q[k] += rng.uniform(-cfg.joint_perturbation, cfg.joint_perturbation, size=NUM_JOINTS)
            ground = self.world.field.height_at(spawns[k, 0], spawns[k, 1])
            if not math.isnan(ground):
                spawns[k, 2] = ground

        if yaw is not None:
            yaws = np.broadcast_to(np.asarray(yaw, dtype=np.float64), (len(ids),)).copy()

        base = spawns.copy()
        base[:, 2] += self.model.nominal_height + cfg.spawn_height_margin
        fresh = physics.standing_state(self.model, base, yaws, q)
        self.state.put(ids, fresh)

        for k, robot in enumerate(ids):
            rng = self.rngs[robot]
            if targets is not None:
                self.targets[robot] = np.asarray(targets)[k]
            elif self.mode.is_position:
                self.targets[robot] = sample_target(
                    self.world.field,
                    spawns[k],
                    rng,
                    self.config.terrain,
                    cell=(int(levels[k]), int(cols[k])),
                )
            else:
                self.targets[robot] = spawns[k]
                self.commands[robot] = (
                    rng.uniform(*cfg.command_vx),
                    rng.uniform(*cfg.command_yaw_rate),
                )

        self.start_pos[ids] = base
        self.start_distance[ids] = self._distance(ids)
        self.kill_z[ids] = self.world.kill_heights(levels, cols, cfg.kill_margin)
        self.step_count[ids] = 0
        self.tilt_count[ids] = 0
        self.prev_action[ids] = 0.0
        self.air_time[ids] = 0.0
        self.last_contacts[ids] = False
        self.task_sum[ids] = 0.0
        self.episode_return[ids] = 0.0
        self.stall_steps[ids] = 0
        log.debug(f"reset {len(ids)} robots")

    def _distance(self, ids=slice(None)) -> np.ndarray:
        diff = self.state.base_pos[ids] - self.targets[ids]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def _command(self) -> Optional[np.ndarray]:
        o = self.override
        if self.mode is TaskMode.VELOCITY_TRACKING:
            if o is not None and o.velocity is not None:
                self.commands[:] = o.velocity
            return velocity_command(self.commands)
        if o is None:
            return None
        direction = np.asarray(o.direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        n = self.num_robots
        local = np.zeros((n, 3))
        local[:, :2] = o.distance * direction
        local[:, 2] = self.config.terrain.target_height - self.model.nominal_height
        time_left = self.episode_length - self.episode_time if o.time_left is None else o.time_left
        time_left = np.broadcast_to(np.asarray(time_left, dtype=np.float64), (n,))
        # Keep the world target consistent with the commanded one.
        self.targets[:] = self.state.base_pos + physics.rotate(base_frame(self.state), local)
        return np.concatenate([local, time_left[:, None]], axis=-1)

    def observe(self, noisy: bool = True) -> np.ndarray:
        return compute_observation(
            self.state,
            self.targets,
            self.episode_time,
            self.prev_action,
            self.world.field,
            self.rngs if noisy else None,
            self.env_config,
            self.model,
            self.episode_length,
            command=self._command(),
        )

    def step(self, action: np.ndarray) -> Tuple[np.ndarray, RewardTerms, np.ndarray, Dict[str, Any]]:
        """
        Applies one control step. Returns (obs, reward terms, done, info).

        Finished robots are reset when auto_reset is on; their last observation
        is info["terminal_obs"].
        """
        action = np.asarray(action, dtype=np.float64).reshape(self.num_robots, NUM_JOINTS)
        if not np.all(np.isfinite(action)):
            raise NonFiniteError("non-finite action")
        cfg = self.env_config
        action = np.clip(action, -cfg.clip_actions, cfg.clip_actions)
        q_des = self.model.default_joint_pos + cfg.action_scale * action

        result = physics.control_step(
            self.state,
            q_des,
            self.world.field,
            self.model,
            self.dt,
            self.decimation,
            self.workers,
        )
        self.state = result.state
        self.step_count += 1
        t = self.episode_time

        if self.override is not None and self.mode.is_position:
            self._command()

        terms = self._rewards(action, result, t)
        self.prev_action = action

        rot = base_frame(self.state)
        gravity_z = physics.rotate_inv(rot, np.broadcast_to(GRAVITY_DIR, (self.num_robots, 3)))[:, 2]
        tilted = gravity_z > -self.cos_tilt
        self.tilt_count = np.where(tilted, self.tilt_count + 1, 0)
        crash = (
            result.report.base_contact
            | (self.state.base_pos[:, 2] < self.kill_z)
            | (self.tilt_count > self.tilt_steps)
        )
        timeout = (self.step_count >= self.max_steps) & ~crash
        done = crash | timeout

        distance = self._distance()
        speed = np.sqrt(np.sum(self.state.base_linvel ** 2, axis=-1))
        if self.trace is not None:
            self.trace.write(t, terms, distance, speed)

        info: Dict[str, Any] = {
            "crash": crash,
            "timeout": timeout,
            "energy": result.energy,
            "torques": result.torques,
            "report": result.report,
            "time": t,
        }

        ended = np.flatnonzero(done)
        info["episodes"] = self._finish(ended, crash, timeout)
        if len(ended) and self.learn_curriculum:
            for k, robot in enumerate(ended):
                update_curriculum(
                    self.grid,
                    int(robot),
                    bool(info["episodes"].success[k]),
                    float(info["episodes"].progress[k]),
                    self.rngs[robot],
                )

        if len(ended) and self.auto_reset:
            info["terminal_obs"] = self.observe(noisy=False)
            self._respawn(ended, None, None)
        obs = self.observe()
        if "terminal_obs" not in info:
            info["terminal_obs"] = obs
        return obs, terms, done, info

    def _rewards(self, action: np.ndarray, result: physics.ControlResult, t: np.ndarray) -> RewardTerms:
        w = self.weights
        state = self.state
        n = self.num_robots
        zeros = np.zeros(n)

        if self.mode is TaskMode.FINAL_POSITION:
            task = task_reward_final(
                state.base_pos, self.targets, t, self.episode_length, self.env_config.reward_window_s
            )
            task_weight = w.w_task
        elif self.mode is TaskMode.CONTINUOUS_POSITION:
            task = task_reward_continuous(state.base_pos, self.targets, t, self.episode_length)
            task_weight = w.w_task
        else:
            rot = base_frame(state)
            linvel_b = physics.rotate_inv(rot, state.base_linvel)
            angvel_b = physics.rotate_inv(rot, state.base_angvel)
            actual = np.stack([linvel_b[:, 0], angvel_b[:, 2]], axis=-1)
            task = tracking_reward_velocity(self.commands, actual, w.tracking_sigma)
            task_weight = w.w_tracking

        penalty = penalties(
            state.qdd_last,
            result.tau,
            result.report.n_collisions,
            action,
            self.prev_action,
            state.feet_acc,
            w,
        )

        if self.mode.is_position:
            bias = exploration_bias(
                state.base_linvel, state.base_pos, self.targets, w.bias_min_speed, w.bias_min_distance
            )
            stall = stall_penalty(
                state.base_linvel, state.base_pos, self.targets, w.stall_speed, w.stall_distance
            )
        else:
            bias, stall = zeros, zeros

        contact = result.report.foot_contact
        contact_filt = contact | self.last_contacts
        first_contact = (self.air_time > 0.0) & contact_filt
        self.air_time = self.air_time + self.control_dt
        command_active = np.abs(self.commands[:, 0]) > 0.1
        if self.mode.is_position:
            command_active = np.zeros(n, dtype=bool)
        air = air_time_reward(self.air_time, first_contact, command_active, w.air_time_target)
        self.air_time = self.air_time * ~contact_filt
        self.last_contacts = contact

        terms = combine(
            task,
            penalty,
            bias,
            stall,
            air,
            self.bias_gate,
            w,
            self.control_dt,
            task_weight,
        )
        self.task_sum += terms.task * self.control_dt
        self.episode_return += terms.total
        self.stall_steps += (terms.stall < 0).astype(np.int64)
        return terms

    def _finish(self, ended: np.ndarray, crash: np.ndarray, timeout: np.ndarray) -> EpisodeStats:
        distance = self._distance(ended)
        delta = self.state.base_pos[ended, :2] - self.start_pos[ended, :2]
        traveled = np.sqrt(np.sum(delta * delta, axis=-1))
        crashed = crash[ended]

        if self.mode.is_position:
            success = check_success(
                self.state.base_pos[ended], self.targets[ended], crashed, self.env_config.success_radius
            )
            d0 = np.maximum(self.start_distance[ended], 1e-9)
            progress = (d0 - distance) / d0
        else:
            success = (traveled > self.world.tile_size[0] / 2) & ~crashed
            commanded = np.abs(self.commands[ended, 0]) * self.episode_length
            progress = np.where(commanded > 0, traveled / np.where(commanded > 0, commanded, 1.0), 1.0)

        steps = np.maximum(self.step_count[ended], 1)
        stats = EpisodeStats(
            robots=ended,
            success=np.asarray(success, dtype=bool),
            crash=crashed,
            timeout=timeout[ended],
            progress=progress,
            final_distance=distance,
            traveled=traveled,
            task_sum=self.task_sum[ended].copy(),
            total_return=self.episode_return[ended].copy(),
            stall_fraction=self.stall_steps[ended] / steps,
            level=self.grid.levels[ended].copy(),
        )
        if len(ended):
            log.debug(
                f"{len(ended)} episodes ended: {int(stats.success.sum())} successes, "
                f"{int(crashed.sum())} crashes"
            )
        return stats
