"""
Home to the evaluation protocols: maximum-difficulty sweeps, energy per
distance, pseudo-velocity driving and gait extraction.

Verdicts are pure functions of a TrajectoryLog so that saved logs can be
rejudged offline with identical results.
"""
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binomtest

from legnav.config import EvalConfig, RunConfig, TaskMode
from legnav.csvlog import CsvLog, read_csv
from legnav.env import COMMAND_SLICE, CommandOverride, LeggedNavEnv, check_success
from legnav.net import ActorCritic
from legnav.physics import FOOT_NAMES, NUM_JOINTS, NUM_LEGS
from legnav.store import TRAJECTORY_TAG, RunStore
from legnav.terrain import CurriculumGrid, Family, TerrainWorld

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "family",
    "level",
    "difficulty_param",
    "episodes",
    "success_count",
    "crash_count",
    "success_rate",
    "ci_low",
    "ci_high",
    "mean_final_distance",
)
ENERGY_COLUMNS = ("setting", "mean_speed", "energy_per_meter", "energy", "distance", "duration", "complete")
TORQUE_COLUMNS = ("setting", "t", "dt") + tuple(f"tau_{j}" for j in range(NUM_JOINTS))
TRAJECTORY_COLUMNS = ("t", "x", "y", "z", "cmd_0", "cmd_1", "cmd_2", "cmd_3") + FOOT_NAMES
CONTACT_COLUMNS = ("t",) + FOOT_NAMES + ("phase",)
PHASE_COLUMNS = ("phase", "feet", "start_s", "duration_s")

# Upper bound on pseudo-velocity speeds when sizing the drive arena.
DRIVE_MAX_SPEED = 1.5


def _seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class ProtocolResult:
    """
    Outcome of every episode run on one (family, level) cell.
    """

    family: str
    level: int
    difficulty_param: float
    episodes: int
    success_count: int
    crash_count: int
    mean_final_distance: float

    @property
    def failures(self) -> int:
        return self.episodes - self.success_count

    @property
    def success_rate(self) -> float:
        return self.success_count / self.episodes if self.episodes else 0.0

    def confidence_interval(self, level: float = 0.95) -> Tuple[float, float]:
        """
        Wilson interval of the success rate.
        """
        if not self.episodes:
            return 0.0, 1.0
        ci = binomtest(self.success_count, self.episodes).proportion_ci(
            confidence_level=level, method="wilson"
        )
        return float(ci.low), float(ci.high)

    def row(self) -> Dict[str, object]:
        low, high = self.confidence_interval()
        return {
            **asdict(self),
            "success_rate": self.success_rate,
            "ci_low": low,
            "ci_high": high,
        }


@dataclass
class ProtocolReport:
    results: List[ProtocolResult]
    max_level: Optional[int]
    threshold: float


@dataclass
class TrajectoryLog:
    """
    One evaluation episode: base positions from spawn until the episode ended.

    crashed marks an episode that ended in a crash at the last sample.
    """

    mode: str
    family: str
    level: int
    episode: int
    times: np.ndarray
    positions: np.ndarray
    crashed: bool
    target: Optional[np.ndarray] = None

    @property
    def key(self) -> str:
        return f"{self.mode}/{self.family}/{self.level:03d}/{self.episode:05d}"


def judge_velocity_episode(trajectory: TrajectoryLog, cross_distance: float = 4.0, time_limit: float = 8.0) -> bool:
    """
    Success iff the base got cross_distance away from its spawn point (on the
    ground plane) within time_limit, whatever happened afterwards.
    """
    times = np.asarray(trajectory.times, dtype=np.float64)
    pos = np.asarray(trajectory.positions, dtype=np.float64)
    delta = pos[:, :2] - pos[0, :2]
    traveled = np.sqrt(np.sum(delta * delta, axis=-1))
    return bool(np.any((traveled >= cross_distance) & (times <= time_limit + 1e-9)))


def judge_position_episode(trajectory: TrajectoryLog, radius: float = 0.5) -> bool:
    """
    Success iff the final base position is within radius of the target and
    the episode did not end in a crash.
    """
    if trajectory.target is None:
        raise ValueError(f"trajectory {trajectory.key} has no target")
    return check_success(trajectory.positions[-1], trajectory.target, trajectory.crashed, radius)


def judge(trajectory: TrajectoryLog, config: EvalConfig, success_radius: float = 0.5) -> bool:
    if TaskMode(trajectory.mode) is TaskMode.VELOCITY_TRACKING:
        return judge_velocity_episode(trajectory, config.velocity_cross_distance, config.protocol_duration_s)
    return judge_position_episode(trajectory, success_radius)


def final_distance(trajectory: TrajectoryLog, config: EvalConfig) -> float:
    """
    Distance left to the goal: the target in position modes, the crossing
    mark in velocity mode.
    """
    if trajectory.target is not None:
        return float(np.linalg.norm(trajectory.positions[-1] - trajectory.target))
    delta = trajectory.positions[:, :2] - trajectory.positions[0, :2]
    return max(0.0, config.velocity_cross_distance - float(np.max(np.linalg.norm(delta, axis=-1))))


def summarize(
    logs: Sequence[TrajectoryLog],
    config: EvalConfig,
    difficulty: Dict[Tuple[str, int], float],
    success_radius: float = 0.5,
) -> List[ProtocolResult]:
    """
    Groups trajectories by (family, level) and counts verdicts.
    """
    groups: Dict[Tuple[str, int], List[TrajectoryLog]] = defaultdict(list)
    for item in logs:
        groups[(item.family, item.level)].append(item)

    results = []
    for (family, level), items in sorted(groups.items()):
        results.append(
            ProtocolResult(
                family=family,
                level=level,
                difficulty_param=difficulty.get((family, level), math.nan),
                episodes=len(items),
                success_count=sum(judge(i, config, success_radius) for i in items),
                crash_count=sum(bool(i.crashed) for i in items),
                mean_final_distance=float(np.mean([final_distance(i, config) for i in items])),
            )
        )
    return results


def highest_solved(results: Sequence[ProtocolResult], threshold: float) -> Optional[int]:
    solved = [r.level for r in results if r.success_rate >= threshold]
    return max(solved) if solved else None


def _policy_action(ac: ActorCritic, obs: np.ndarray) -> np.ndarray:
    return ac.policy.mean(obs)


def run_episodes(
    ac: ActorCritic,
    env: LeggedNavEnv,
    targets: Optional[np.ndarray],
    steps: int,
    family: str,
    level: int,
) -> List[TrajectoryLog]:
    """
    Runs one episode per robot with the deterministic policy. Robots stop
    being recorded once they crash or time out.
    """
    n = env.num_robots
    obs = env.reset(targets=targets, yaw=np.zeros(n))
    times = [np.zeros(n)]
    positions = [env.state.base_pos.copy()]
    alive = np.ones(n, dtype=bool)
    ended_at = np.full(n, steps, dtype=np.int64)
    crashed = np.zeros(n, dtype=bool)
    goals = env.targets.copy()

    for k in range(1, steps + 1):
        obs, _, done, info = env.step(_policy_action(ac, obs))
        times.append(info["time"].copy())
        positions.append(env.state.base_pos.copy())
        ending = alive & done
        crashed |= ending & info["crash"]
        ended_at[ending] = k
        alive &= ~done
        if not alive.any():
            break

    times_arr = np.stack(times)
    pos_arr = np.stack(positions)
    mode = env.mode.value
    logs = []
    for robot in range(n):
        end = ended_at[robot] + 1
        logs.append(
            TrajectoryLog(
                mode=mode,
                family=family,
                level=level,
                episode=robot,
                times=times_arr[:end, robot].copy(),
                positions=pos_arr[:end, robot].copy(),
                crashed=bool(crashed[robot]),
                target=goals[robot].copy() if env.mode.is_position else None,
            )
        )
    return logs


def max_difficulty_protocol(
    ac: ActorCritic,
    config: RunConfig,
    family: Union[str, Family],
    levels: Optional[Sequence[int]] = None,
    episodes_per_level: Optional[int] = None,
    seed: int = 0,
    store: Optional[RunStore] = None,
    out_dir: Optional[Union[str, Path]] = None,
    checkpoint_digest: Optional[str] = None,
) -> ProtocolReport:
    """
    Runs episodes_per_level episodes on the protocol tile of every level.

    Velocity mode: a constant 1 m/s forward command, success when the robot
    crossed the distance within the time limit even if it crashed later.
    Position modes: the target is placed straight ahead of the spawn point and
    success means ending within the success radius without a crash.
    """
    config = config.resolve()
    ev = config.eval
    family = Family(family)
    episodes = episodes_per_level or ev.episodes_per_level
    levels = list(range(config.terrain.num_levels) if levels is None else levels)
    for level in levels:
        if not 0 <= level < config.terrain.num_levels:
            raise ValueError(f"level {level} outside [0, {config.terrain.num_levels})")

    world = TerrainWorld.build(config.terrain, seed, families=[family], protocol=True)
    velocity = config.task_mode is TaskMode.VELOCITY_TRACKING
    if velocity:
        duration = ev.protocol_duration_s
    else:
        duration = min(config.env.episode_length_s, ev.protocol_duration_s)

    difficulty = {}
    logs: List[TrajectoryLog] = []
    for level in levels:
        spec = world.specs[level][0]
        difficulty[(family.value, level)] = spec.difficulty_param
        grid = CurriculumGrid(
            num_levels=config.terrain.num_levels,
            families=[family],
            levels=np.full(episodes, level, dtype=np.int64),
            cols=np.zeros(episodes, dtype=np.int64),
        )
        env = LeggedNavEnv(
            config,
            world,
            _seed(seed, level),
            num_robots=episodes,
            grid=grid,
            episode_length_s=duration,
            auto_reset=False,
            learn_curriculum=False,
            randomize_spawn=False,
        )
        targets = None
        if velocity:
            env.override = CommandOverride(velocity=(ev.velocity_command, 0.0))
        else:
            spawn = world.spawn_points(np.array([level]), np.array([0]))[0]
            x, y = spawn[0] + ev.position_target_distance, spawn[1]
            ground = world.field.height_at(x, y)
            ground = spawn[2] if math.isnan(ground) else ground
            targets = np.tile([x, y, ground + config.terrain.target_height], (episodes, 1))

        level_logs = run_episodes(ac, env, targets, env.max_steps, family.value, level)
        logs.extend(level_logs)
        if store is not None:
            for item in level_logs:
                store.set(item.key, item, tag=TRAJECTORY_TAG)

        result = summarize(level_logs, ev, difficulty, config.env.success_radius)[0]
        log.info(
            f"{family.value} level {level} (param {spec.difficulty_param:.3f}): "
            f"{result.success_count}/{result.episodes} successes, {result.crash_count} crashes"
        )

    results = summarize(logs, ev, difficulty, config.env.success_radius)
    report = ProtocolReport(results, highest_solved(results, ev.success_threshold), ev.success_threshold)
    log.info(f"{family.value}: highest level solved at {ev.success_threshold:.0%}: {report.max_level}")
    if out_dir is not None:
        write_results(Path(out_dir) / "results.csv", results, seed, checkpoint_digest)
    return report


def write_results(path: Path, results: Sequence[ProtocolResult], seed=None, checkpoint=None) -> Path:
    with CsvLog(path, RESULT_COLUMNS, seed=seed, checkpoint=checkpoint) as out:
        out.write_many(r.row() for r in results)
    return path


def rejudge(
    store: RunStore,
    config: EvalConfig,
    tag: str = TRAJECTORY_TAG,
    success_radius: float = 0.5,
) -> List[ProtocolResult]:
    """
    Recomputes protocol results from the trajectory logs saved in store.
    """
    logs = [store.get(key, tag=tag) for key in store.keys(tag)]
    log.info(f"rejudging {len(logs)} trajectories under tag {tag!r}")
    return summarize(logs, config, {}, success_radius)


@dataclass
class EnergyResult:
    setting: float
    mean_speed: float
    energy_per_meter: float
    energy: float
    distance: float
    duration: float
    complete: bool


@dataclass
class DriveLog:
    """
    Per control step records of a single robot drive.
    """

    times: np.ndarray
    positions: np.ndarray
    commands: np.ndarray
    contacts: np.ndarray
    energy: np.ndarray
    crashed: bool

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    @property
    def mean_speed(self) -> float:
        """
        Path length on the ground plane over elapsed time.
        """
        if len(self.times) < 2 or self.duration <= 0:
            return 0.0
        steps = np.diff(self.positions[:, :2], axis=0)
        return float(np.sum(np.sqrt(np.sum(steps * steps, axis=-1))) / self.duration)


def _flat_env(config: RunConfig, length: float, width: float, spawn_x: float, seed: int, episode_length: float):
    world = TerrainWorld.flat(length, width, config.terrain, spawn_x)
    grid = CurriculumGrid(
        num_levels=1,
        families=[Family.FLAT],
        levels=np.zeros(1, dtype=np.int64),
        cols=np.zeros(1, dtype=np.int64),
    )
    return LeggedNavEnv(
        config,
        world,
        seed,
        num_robots=1,
        grid=grid,
        episode_length_s=episode_length,
        auto_reset=False,
        learn_curriculum=False,
        randomize_spawn=False,
        workers=1,
    )


def pseudo_velocity_drive(
    ac: ActorCritic,
    config: RunConfig,
    direction: Tuple[float, float] = (1.0, 0.0),
    fixed_time: float = 4.0,
    duration: float = 30.0,
    seed: int = 0,
    target_distance: Optional[float] = None,
    reverse_at: Optional[float] = None,
) -> DriveLog:
    """
    Steers a position policy like a velocity controller: every step the target
    is target_distance metres along direction in the base frame and the time
    left is held at fixed_time.

    reverse_at flips the direction at that time.
    """
    config = config.resolve()
    if not config.task_mode.is_position:
        raise ValueError("pseudo-velocity driving needs a position-mode policy")
    distance = target_distance or config.eval.drive_target_distance
    reach = DRIVE_MAX_SPEED * duration + distance + 2.0
    env = _flat_env(config, 2 * reach, 2 * reach, reach, seed, duration)
    env.override = CommandOverride(direction=tuple(direction), distance=distance, time_left=fixed_time)
    return _drive(ac, env, duration, reverse_at)


class _TorqueWindow:
    """
    Collects stride substeps of joint torque into one trace row.

    A row holds the root-mean-square torque of its substeps, signed like their
    mean, and the time they span, so summing tau^2 * dt over a coarse trace
    gives the same energy as the full one.
    """

    def __init__(self, stride: int) -> None:
        self.stride = stride
        self.count = 0
        self.square = np.zeros(NUM_JOINTS)
        self.total = np.zeros(NUM_JOINTS)

    def add(self, tau: np.ndarray) -> bool:
        self.square += tau * tau
        self.total += tau
        self.count += 1
        return self.count == self.stride

    def flush(self, out: CsvLog, setting: float, t_end: float, dt: float) -> None:
        rms = np.sqrt(self.square / self.count)
        signed = np.where(self.total < 0, -rms, rms)
        out.write([setting, t_end, dt * self.count, *signed.tolist()])
        self.count = 0
        self.square[:] = 0.0
        self.total[:] = 0.0


def _drive(
    ac: ActorCritic,
    env: LeggedNavEnv,
    duration: float,
    reverse_at: Optional[float] = None,
    stop_distance: Optional[float] = None,
    torque_log: Optional[CsvLog] = None,
    setting: float = 0.0,
    stride: int = 1,
) -> DriveLog:
    obs = env.reset(yaw=np.zeros(1))
    start = env.state.base_pos[0].copy()
    steps = int(round(duration / env.control_dt))
    times, positions, commands, contacts, energy = [0.0], [start.copy()], [obs[0, COMMAND_SLICE]], [], []
    contacts.append(np.zeros(NUM_LEGS, dtype=bool))
    energy.append(0.0)
    crashed = False
    substep = 0
    window = _TorqueWindow(stride) if torque_log is not None else None

    for _ in range(steps):
        t_now = times[-1]
        if reverse_at is not None and t_now >= reverse_at and env.override is not None:
            d = env.override.direction
            env.override.direction = (-d[0], -d[1])
            reverse_at = None
        obs, _, done, info = env.step(_policy_action(ac, obs))
        times.append(float(info["time"][0]))
        positions.append(env.state.base_pos[0].copy())
        commands.append(obs[0, COMMAND_SLICE].copy())
        contacts.append(info["report"].foot_contact[0].copy())
        energy.append(float(info["energy"][0]))

        if window is not None:
            for tau in info["torques"][:, 0]:
                substep += 1
                if window.add(tau):
                    window.flush(torque_log, setting, substep * env.dt, env.dt)

        if info["crash"][0]:
            crashed = True
            log.warning(f"drive ended in a crash at t={times[-1]:.2f} s")
            break
        if stop_distance is not None and np.linalg.norm(positions[-1][:2] - start[:2]) >= stop_distance:
            break

    if window is not None and window.count:
        window.flush(torque_log, setting, substep * env.dt, env.dt)

    return DriveLog(
        times=np.asarray(times),
        positions=np.stack(positions),
        commands=np.stack(commands),
        contacts=np.stack(contacts),
        energy=np.asarray(energy),
        crashed=crashed,
    )


def write_drive(path: Union[str, Path], drive: DriveLog, seed=None, checkpoint=None) -> Path:
    with CsvLog(path, TRAJECTORY_COLUMNS, seed=seed, checkpoint=checkpoint) as out:
        for k in range(len(drive.times)):
            out.write(
                [drive.times[k], *drive.positions[k].tolist(), *drive.commands[k].tolist(), *drive.contacts[k].tolist()]
            )
    return Path(path)


def energy_sweep(
    ac: ActorCritic,
    config: RunConfig,
    settings: Sequence[float],
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    checkpoint_digest: Optional[str] = None,
) -> List[EnergyResult]:
    """
    Walks each setting across flat ground and reports sum(tau^2 * dt) per
    metre travelled.

    The setting is the commanded forward speed in velocity mode, the fixed
    time left in final-position mode and the target distance in
    continuous-position mode, where the time left is held at the trained
    episode length. A crash or the time limit leaves the run
    incomplete.
    """
    config = config.resolve()
    ev = config.eval
    length = ev.energy_distance + 2 * config.terrain.protocol_spawn_x + 2.0
    width = 6.0
    torque_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torque_log = CsvLog(out_dir / "torque_trace.csv", TORQUE_COLUMNS, seed=seed, checkpoint=checkpoint_digest)

    results = []
    try:
        for k, setting in enumerate(settings):
            env = _flat_env(config, length, width, config.terrain.protocol_spawn_x, _seed(seed, k), ev.energy_time_limit_s)
            if config.task_mode is TaskMode.VELOCITY_TRACKING:
                env.override = CommandOverride(velocity=(float(setting), 0.0))
            elif config.task_mode is TaskMode.FINAL_POSITION:
                env.override = CommandOverride(distance=ev.drive_target_distance, time_left=float(setting))
            else:
                env.override = CommandOverride(distance=float(setting), time_left=config.env.episode_length_s)

            drive = _drive(
                ac,
                env,
                ev.energy_time_limit_s,
                stop_distance=ev.energy_distance,
                torque_log=torque_log,
                setting=float(setting),
                stride=ev.torque_log_stride,
            )
            results.append(energy_result(float(setting), drive, ev.energy_distance))
            r = results[-1]
            log.info(
                f"energy setting {setting}: {r.mean_speed:.3f} m/s, {r.energy_per_meter:.3f} per m"
                f"{'' if r.complete else ' (incomplete)'}"
            )
    finally:
        if torque_log is not None:
            torque_log.close()

    if out_dir is not None:
        with CsvLog(out_dir / "energy.csv", ENERGY_COLUMNS, seed=seed, checkpoint=checkpoint_digest) as out:
            out.write_many(asdict(r) for r in results)
    return results


def energy_result(setting: float, drive: DriveLog, target_distance: float) -> EnergyResult:
    """
    Accumulated energy over the drive divided by the ground distance covered.
    """
    delta = drive.positions[-1, :2] - drive.positions[0, :2]
    distance = float(np.sqrt(np.sum(delta * delta)))
    energy = float(np.sum(drive.energy))
    return EnergyResult(
        setting=setting,
        mean_speed=drive.mean_speed,
        energy_per_meter=energy / distance if distance > 0 else math.inf,
        energy=energy,
        distance=distance,
        duration=drive.duration,
        complete=not drive.crashed and distance >= target_distance,
    )


def energy_from_torque_csv(path: Union[str, Path]) -> Dict[float, float]:
    """
    Sums tau^2 * dt over a torque trace, per setting.
    """
    _, rows = read_csv(path)
    totals: Dict[float, float] = defaultdict(float)
    for row in rows:
        tau = np.array([float(row[f"tau_{j}"]) for j in range(NUM_JOINTS)])
        totals[float(row["setting"])] += float(np.sum(tau * tau)) * float(row["dt"])
    return dict(totals)


@dataclass(frozen=True)
class Phase:
    feet: frozenset
    start: int
    steps: int

    @property
    def label(self) -> str:
        return "+".join(f for f in FOOT_NAMES if f in self.feet) or "flight"


@dataclass
class GaitTimeline:
    """
    Foot contacts per control step and their segmentation into phases.

    cycle holds the contact sets of one repetition in order of appearance with
    their mean durations in seconds; label is stand, trot, <n>-phase or
    aperiodic.
    """

    contacts: np.ndarray
    dt: float
    phases: List[Phase]
    cycle: List[Tuple[frozenset, float]] = field(default_factory=list)
    period_s: Optional[float] = None
    label: str = "aperiodic"

    def reconstruct(self) -> np.ndarray:
        rows = []
        for phase in self.phases:
            row = np.array([name in phase.feet for name in FOOT_NAMES])
            rows.append(np.tile(row, (phase.steps, 1)))
        return np.concatenate(rows) if rows else np.zeros((0, NUM_LEGS), dtype=bool)


def _contact_set(row: np.ndarray) -> frozenset:
    return frozenset(name for name, on in zip(FOOT_NAMES, row) if on)


def segment(contacts: np.ndarray) -> List[Phase]:
    """
    Splits the timeline into maximal runs of identical contact sets.
    """
    contacts = np.asarray(contacts, dtype=bool)
    phases: List[Phase] = []
    start = 0
    for k in range(1, len(contacts) + 1):
        if k == len(contacts) or not np.array_equal(contacts[k], contacts[start]):
            phases.append(Phase(_contact_set(contacts[start]), start, k - start))
            start = k
    return phases


def _cycle_length(sequence: List[frozenset], min_match: float) -> Optional[int]:
    """
    Smallest lag at which the phase sequence matches itself at least
    min_match of the time, over at least two repetitions.
    """
    for lag in range(1, len(sequence) // 2 + 1):
        pairs = len(sequence) - lag
        matches = sum(sequence[k] == sequence[k + lag] for k in range(pairs))
        if matches / pairs >= min_match:
            return lag
    return None


TROT_PAIRS = {frozenset({"LF", "RH"}), frozenset({"RF", "LH"})}
ALL_FEET = frozenset(FOOT_NAMES)


def extract_gait(contacts: np.ndarray, dt: float, warmup_s: float = 0.0, min_match: float = 0.9) -> GaitTimeline:
    """
    Segments a (steps, 4) contact log and looks for a repeating cycle of
    contact sets.
    """
    contacts = np.asarray(contacts, dtype=bool)[int(round(warmup_s / dt)) :]
    phases = segment(contacts)
    timeline = GaitTimeline(contacts=contacts, dt=dt, phases=phases)
    if not phases:
        log.warning("empty contact log")
        return timeline

    sequence = [p.feet for p in phases]
    if len(phases) == 1:
        timeline.cycle = [(sequence[0], phases[0].steps * dt)]
        timeline.label = "stand" if sequence[0] == ALL_FEET else "1-phase"
        return timeline

    lag = _cycle_length(sequence, min_match)
    if lag is None:
        log.warning(f"no periodic gait found in {len(phases)} phases")
        return timeline

    # Edge phases are cut by the log window, keep them out of the durations.
    inner = phases[1:-1] if len(phases) > 2 * lag + 1 else phases
    cycle = []
    for k in range(lag):
        steps = [p.steps for p in inner if p.feet == sequence[k]]
        cycle.append((sequence[k], float(np.mean(steps)) * dt if steps else phases[k].steps * dt))
    timeline.cycle = cycle
    timeline.period_s = sum(d for _, d in cycle)
    sets = {feet for feet, _ in cycle}
    if sets == TROT_PAIRS:
        timeline.label = "trot"
    else:
        timeline.label = f"{lag}-phase"
    log.info(
        f"gait: {timeline.label}, period {timeline.period_s:.3f} s, cycle "
        + " -> ".join(Phase(feet, 0, 0).label for feet, _ in cycle)
    )
    return timeline


def write_gait(out_dir: Union[str, Path], timeline: GaitTimeline, seed=None, checkpoint=None) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    contacts_path = out_dir / "contacts.csv"
    phases_path = out_dir / "gait_phases.csv"
    with CsvLog(contacts_path, CONTACT_COLUMNS, seed=seed, checkpoint=checkpoint) as out:
        for index, phase in enumerate(timeline.phases):
            for k in range(phase.start, phase.start + phase.steps):
                out.write([k * timeline.dt, *timeline.contacts[k].tolist(), index])
    with CsvLog(phases_path, PHASE_COLUMNS, seed=seed, checkpoint=checkpoint) as out:
        for index, phase in enumerate(timeline.phases):
            out.write([index, phase.label, phase.start * timeline.dt, phase.steps * timeline.dt])
    return contacts_path, phases_path
