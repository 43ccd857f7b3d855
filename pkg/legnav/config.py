"""
Home to the run configuration.

A run is described by a YAML file with one nested section per concern. Every
section maps onto a dataclass below; loading coerces and validates each field
and raises ConfigError naming the dotted path of the first offending field.
"""
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml

from legnav.errors import ConfigError

log = logging.getLogger(__name__)


class TaskMode(str, Enum):
    """
    The task formulation a policy is trained on.
    """

    FINAL_POSITION = "final_position"
    CONTINUOUS_POSITION = "continuous_position"
    VELOCITY_TRACKING = "velocity_tracking"

    @property
    def is_position(self) -> bool:
        return self is not TaskMode.VELOCITY_TRACKING


FAMILIES = ("stairs", "slope", "random_steps", "obstacles", "gap", "pit", "flat")


@dataclass
class PhysicsConfig:
    dt: float = 0.005
    decimation: int = 4
    gravity: float = 9.81
    base_mass: float = 20.0
    base_inertia: List[float] = field(default_factory=lambda: [0.25, 0.85, 0.95])
    base_half_extents: List[float] = field(
        default_factory=lambda: [0.35, 0.15, 0.08]
    )
    # LF, RF, LH, RH
    hip_offsets: List[List[float]] = field(
        default_factory=lambda: [
            [0.3, 0.2, 0.0],
            [0.3, -0.2, 0.0],
            [-0.3, 0.2, 0.0],
            [-0.3, -0.2, 0.0],
        ]
    )
    thigh_length: float = 0.25
    shank_length: float = 0.25
    joint_armature: float = 0.05
    joint_damping: float = 0.0
    default_joint_pos: List[float] = field(default_factory=lambda: [0.0, 0.7, -1.4])
    kp: float = 50.0
    kd: float = 2.0
    tau_0: float = 35.0
    omega_max: float = 10.0
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    tangential_damping: float = 1000.0
    friction: float = 0.8
    penalize_knee_contacts: bool = False

    def validate(self, path: str) -> None:
        _positive(self, path, "dt", "gravity", "base_mass", "thigh_length")
        _positive(self, path, "shank_length", "joint_armature", "kp", "tau_0")
        _positive(self, path, "omega_max", "contact_stiffness", "friction")
        _non_negative(self, path, "kd", "joint_damping", "contact_damping")
        _non_negative(self, path, "tangential_damping")
        if self.decimation < 1:
            raise ConfigError(f"{path}.decimation", "must be >= 1")
        _vector(self, path, "base_inertia", 3, positive=True)
        _vector(self, path, "base_half_extents", 3, positive=True)
        _vector(self, path, "default_joint_pos", 3)
        if len(self.hip_offsets) != 4 or any(len(h) != 3 for h in self.hip_offsets):
            raise ConfigError(f"{path}.hip_offsets", "must be 4 rows of 3 values")


@dataclass
class TerrainConfig:
    families: List[str] = field(
        default_factory=lambda: [
            "stairs",
            "slope",
            "random_steps",
            "obstacles",
            "gap",
            "pit",
        ]
    )
    num_levels: int = 10
    variants_per_family: int = 2
    max_init_level: int = 0
    tile_length: float = 8.0
    tile_width: float = 8.0
    resolution: float = 0.05
    border: float = 5.0
    # Per-family overrides of the curriculum floor / ceiling.
    param_min: Dict[str, float] = field(default_factory=dict)
    param_max: Dict[str, float] = field(default_factory=dict)
    stairs_run: float = 0.3
    obstacle_height: float = 1.0
    obstacle_count: int = 6
    step_block: float = 0.2
    gap_offset: float = 0.5
    pit_size: float = 2.4
    platform_size: float = 1.0
    hole_fill_depth: float = 2.0
    protocol_tile_length: float = 12.0
    protocol_tile_width: float = 6.0
    protocol_spawn_x: float = 2.0
    target_radius: List[float] = field(default_factory=lambda: [1.0, 5.0])
    target_height: float = 0.5
    target_footprint: float = 0.2
    max_target_attempts: int = 100

    def validate(self, path: str) -> None:
        if not self.families:
            raise ConfigError(f"{path}.families", "at least one family required")
        for name in self.families:
            if name not in FAMILIES:
                raise ConfigError(f"{path}.families", f"unknown family {name!r}")
        for attr in ("param_min", "param_max"):
            for name in getattr(self, attr):
                if name not in FAMILIES:
                    raise ConfigError(f"{path}.{attr}", f"unknown family {name!r}")
        if self.num_levels < 1:
            raise ConfigError(f"{path}.num_levels", "must be >= 1")
        if self.variants_per_family < 1:
            raise ConfigError(f"{path}.variants_per_family", "must be >= 1")
        if not 0 <= self.max_init_level < self.num_levels:
            raise ConfigError(f"{path}.max_init_level", "must be in [0, num_levels)")
        _positive(self, path, "tile_length", "tile_width", "resolution")
        _positive(self, path, "stairs_run", "obstacle_height", "step_block")
        _positive(self, path, "pit_size", "target_footprint", "hole_fill_depth")
        _positive(self, path, "protocol_tile_length", "protocol_tile_width")
        _non_negative(self, path, "border", "gap_offset", "platform_size")
        _non_negative(self, path, "target_height", "protocol_spawn_x")
        if self.obstacle_count < 0:
            raise ConfigError(f"{path}.obstacle_count", "must be >= 0")
        if self.max_target_attempts < 1:
            raise ConfigError(f"{path}.max_target_attempts", "must be >= 1")
        _vector(self, path, "target_radius", 2)
        low, high = self.target_radius
        if not 0 < low <= high:
            raise ConfigError(f"{path}.target_radius", "need 0 < min <= max")

    @property
    def max_level(self) -> int:
        return self.num_levels - 1


@dataclass
class EnvConfig:
    # None resolves to 6 s for position modes and 20 s for velocity tracking.
    episode_length_s: Optional[float] = None
    reward_window_s: float = 1.0
    action_scale: float = 0.5
    clip_actions: float = 10.0
    observe_gravity: bool = True
    noise_linvel: float = 0.1
    noise_angvel: float = 0.2
    noise_gravity: float = 0.05
    noise_q: float = 0.01
    noise_qd: float = 1.5
    noise_terrain: float = 0.05
    scale_linvel: float = 2.0
    scale_angvel: float = 0.25
    scale_qd: float = 0.05
    terrain_grid: int = 11
    terrain_spacing: float = 0.15
    hole_obs_depth: float = 1.0
    kill_margin: float = 1.0
    tilt_limit_deg: float = 60.0
    tilt_time_s: float = 0.2
    spawn_jitter: float = 0.5
    joint_perturbation: float = 0.1
    spawn_height_margin: float = 0.02
    command_vx: List[float] = field(default_factory=lambda: [-1.0, 1.0])
    command_yaw_rate: List[float] = field(default_factory=lambda: [-1.0, 1.0])
    success_radius: float = 0.5

    def validate(self, path: str) -> None:
        if self.episode_length_s is not None and self.episode_length_s <= 0:
            raise ConfigError(f"{path}.episode_length_s", "must be > 0")
        _positive(self, path, "reward_window_s", "action_scale", "clip_actions")
        _positive(self, path, "terrain_spacing", "tilt_limit_deg", "success_radius")
        _non_negative(self, path, "noise_linvel", "noise_angvel", "noise_gravity")
        _non_negative(self, path, "noise_q", "noise_qd", "noise_terrain")
        _non_negative(self, path, "hole_obs_depth", "kill_margin", "tilt_time_s")
        _non_negative(self, path, "spawn_jitter", "joint_perturbation")
        _non_negative(self, path, "spawn_height_margin")
        if self.terrain_grid < 1:
            raise ConfigError(f"{path}.terrain_grid", "must be >= 1")
        _vector(self, path, "command_vx", 2)
        _vector(self, path, "command_yaw_rate", 2)
        if (
            self.episode_length_s is not None
            and self.reward_window_s > self.episode_length_s
        ):
            raise ConfigError(
                f"{path}.reward_window_s", "must not exceed episode_length_s"
            )

    @property
    def num_terrain_samples(self) -> int:
        return self.terrain_grid * self.terrain_grid


@dataclass
class RewardConfig:
    c1_joint_acc: float = 2.5e-7
    c2_torque: float = 2e-4
    c3_collision: float = 1.0
    c4_action_rate: float = 0.01
    c5_feet_acc: float = 2.5e-7
    w_task: float = 10.0
    w_bias: float = 1.0
    w_stall: float = 0.1
    # None resolves to 1.0 for velocity tracking and 0 for position modes.
    w_air_time: Optional[float] = None
    w_tracking: float = 1.0
    tracking_sigma: float = 0.25
    bias_min_speed: float = 0.05
    bias_min_distance: float = 0.05
    stall_speed: float = 0.1
    stall_distance: float = 0.5
    air_time_target: float = 0.5

    def validate(self, path: str) -> None:
        _non_negative(self, path, "c1_joint_acc", "c2_torque", "c3_collision")
        _non_negative(self, path, "c4_action_rate", "c5_feet_acc", "w_task")
        _non_negative(self, path, "w_bias", "w_stall", "w_tracking")
        _non_negative(self, path, "bias_min_speed", "bias_min_distance")
        _non_negative(self, path, "stall_speed", "stall_distance", "air_time_target")
        _positive(self, path, "tracking_sigma")
        if self.w_air_time is not None and self.w_air_time < 0:
            raise ConfigError(f"{path}.w_air_time", "must be >= 0")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    learning_rate: float = 1e-3
    schedule: str = "adaptive"
    desired_kl: float = 0.01
    value_loss_coef: float = 1.0
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    # None resolves to False for position modes and True for velocity tracking.
    bootstrap_timeouts: Optional[bool] = None
    total_iterations: int = 2000
    horizon: int = 48
    actor_hidden: List[int] = field(default_factory=lambda: [512, 256, 128])
    critic_hidden: List[int] = field(default_factory=lambda: [512, 256, 128])
    init_log_std: float = 0.0
    gate_threshold: float = 0.5

    def validate(self, path: str) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"{path}.gamma", "must be in (0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"{path}.lam", "must be in [0, 1]")
        _positive(self, path, "clip_ratio", "desired_kl", "max_grad_norm")
        _non_negative(self, path, "learning_rate", "value_loss_coef", "entropy_coef")
        for name in ("epochs", "minibatches", "total_iterations", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{path}.{name}", "must be >= 1")
        if self.schedule not in ("adaptive", "fixed"):
            raise ConfigError(f"{path}.schedule", "must be 'adaptive' or 'fixed'")
        for name in ("actor_hidden", "critic_hidden"):
            if any(size < 1 for size in getattr(self, name)):
                raise ConfigError(f"{path}.{name}", "layer sizes must be >= 1")
        if not -20.0 <= self.init_log_std <= 2.0:
            raise ConfigError(f"{path}.init_log_std", "must be in [-20, 2]")
        if not 0.0 < self.gate_threshold <= 1.0:
            raise ConfigError(f"{path}.gate_threshold", "must be in (0, 1]")


@dataclass
class EvalConfig:
    episodes_per_level: int = 100
    success_threshold: float = 0.95
    protocol_duration_s: float = 8.0
    velocity_cross_distance: float = 4.0
    velocity_command: float = 1.0
    position_target_distance: float = 5.0
    energy_distance: float = 20.0
    energy_time_limit_s: float = 120.0
    drive_target_distance: float = 3.0
    gait_warmup_s: float = 2.0
    torque_log_stride: int = 1

    def validate(self, path: str) -> None:
        if self.episodes_per_level < 1:
            raise ConfigError(f"{path}.episodes_per_level", "must be >= 1")
        if not 0.0 < self.success_threshold <= 1.0:
            raise ConfigError(f"{path}.success_threshold", "must be in (0, 1]")
        _positive(self, path, "protocol_duration_s", "velocity_cross_distance")
        _positive(self, path, "position_target_distance", "energy_distance")
        _positive(self, path, "energy_time_limit_s", "drive_target_distance")
        _non_negative(self, path, "gait_warmup_s")
        if self.torque_log_stride < 1:
            raise ConfigError(f"{path}.torque_log_stride", "must be >= 1")


@dataclass
class RunConfig:
    task_mode: TaskMode = TaskMode.FINAL_POSITION
    num_robots: int = 256
    seed: int = 0
    workers: int = 1
    out_dir: Optional[str] = None
    checkpoint_every: int = 100
    store_url: Optional[str] = None
    trace_robots: List[int] = field(default_factory=list)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    REQUIRED = ("run.task_mode",)

    def validate(self) -> None:
        if self.num_robots < 1:
            raise ConfigError("run.num_robots", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("run.workers", "must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("run.checkpoint_every", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("run.seed", "must be >= 0")
        for robot in self.trace_robots:
            if not 0 <= robot < self.num_robots:
                raise ConfigError("run.trace_robots", f"robot {robot} out of range")
        for name in ("physics", "terrain", "env", "rewards", "ppo", "eval"):
            getattr(self, name).validate(name)

    def resolve(self) -> "RunConfig":
        """
        Returns a copy with every mode-dependent auto field filled in.
        """
        velocity = self.task_mode is TaskMode.VELOCITY_TRACKING
        resolved = dataclasses.replace(
            self,
            env=dataclasses.replace(
                self.env,
                episode_length_s=_auto(
                    self.env.episode_length_s, 20.0 if velocity else 6.0
                ),
            ),
            rewards=dataclasses.replace(
                self.rewards,
                w_air_time=_auto(self.rewards.w_air_time, 1.0 if velocity else 0.0),
            ),
            ppo=dataclasses.replace(
                self.ppo,
                bootstrap_timeouts=_auto(self.ppo.bootstrap_timeouts, velocity),
            ),
        )
        resolved.validate()
        return resolved

    def to_dict(self) -> Dict[str, Any]:
        """
        Returns the nested-section layout used by config files.
        """
        data = dataclasses.asdict(self)
        data["task_mode"] = self.task_mode.value
        sections = {
            name: data.pop(name)
            for name in ("physics", "terrain", "env", "rewards", "ppo", "eval")
        }
        return {"run": data, **sections}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], require: bool = True) -> "RunConfig":
        """
        Builds and validates a config from the nested-section layout.

        If require is True, every field in REQUIRED must be present.
        """
        if not isinstance(data, Mapping):
            raise ConfigError("<root>", "config must be a mapping of sections")

        unknown = set(data) - {"run", *_SECTIONS}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")

        if require:
            for dotted in cls.REQUIRED:
                section, name = dotted.split(".")
                if name not in (data.get(section) or {}):
                    raise ConfigError(dotted, "required field is missing")

        run = dict(data.get("run") or {})
        for name, section_cls in _SECTIONS.items():
            run[name] = _build(section_cls, data.get(name) or {}, name)

        config = _build(cls, run, "run", nested=_SECTIONS)
        config.validate()
        return config


_SECTIONS = {
    "physics": PhysicsConfig,
    "terrain": TerrainConfig,
    "env": EnvConfig,
    "rewards": RewardConfig,
    "ppo": PpoConfig,
    "eval": EvalConfig,
}


def load_config(
    path: Union[str, Path, None], overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Loads a config file and applies dotted overrides (section.key=value).

    A path of None starts from the defaults. Overrides win over file values.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as ex:
            raise ConfigError(str(path), f"not valid YAML: {ex}") from ex

        if not isinstance(data, dict):
            raise ConfigError(str(path), "config must be a mapping of sections")

    for dotted, value in (overrides or {}).items():
        section, _, name = dotted.rpartition(".")
        if not section:
            section = "run"
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise ConfigError(section, "must be a mapping")
        data[section][name] = value

    config = RunConfig.from_dict(data, require=True)
    log.debug(f"loaded config from {path} with {len(overrides or {})} overrides")
    return config


def parse_override(text: str) -> Dict[str, Any]:
    """
    Parses a single 'section.key=value' override, the value as YAML.
    """
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(text, "override must look like section.key=value")
    return {key.strip(): yaml.safe_load(value)}


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    """
    Writes the config in the nested-section layout.
    """
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def _auto(value, default):
    return default if value is None else value


def _build(cls, data: Mapping[str, Any], path: str, nested=None):
    if not isinstance(data, Mapping):
        raise ConfigError(path, "must be a mapping")

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")

    kwargs = {}
    for name, value in data.items():
        if nested and name in nested:
            kwargs[name] = value
        else:
            kwargs[name] = _coerce(value, hints[name], f"{path}.{name}")
    return cls(**kwargs)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)

    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]

    if origin in (dict, Dict):
        if not isinstance(value, Mapping):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return {
            str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()
        }

    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(m.value for m in tp)
            raise ConfigError(path, f"must be one of {choices}, got {value!r}")

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value

    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value

    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)

    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value

    return value


def _positive(obj, path: str, *names: str) -> None:
    for name in names:
        if not getattr(obj, name) > 0:
            raise ConfigError(f"{path}.{name}", "must be > 0")


def _non_negative(obj, path: str, *names: str) -> None:
    for name in names:
        if not getattr(obj, name) >= 0:
            raise ConfigError(f"{path}.{name}", "must be >= 0")


def _vector(obj, path: str, name: str, size: int, positive: bool = False) -> None:
    values = getattr(obj, name)
    if len(values) != size:
        raise ConfigError(f"{path}.{name}", f"expected {size} values")
    if positive and any(v <= 0 for v in values):
        raise ConfigError(f"{path}.{name}", "values must be > 0")
