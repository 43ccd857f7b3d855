"""
Home to PPO training: rollout storage, GAE, the clipped-surrogate update,
exploration-reward gating and the training loop.
"""
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

import numpy as np

from legnav.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from legnav.config import PpoConfig, RunConfig, TaskMode, save_config
from legnav.csvlog import CsvLog
from legnav.env import (
    EpisodeStats,
    LeggedNavEnv,
    RewardTrace,
    make_streams,
    restore_streams,
    stream_states,
)
from legnav.errors import TrainingDivergedError
from legnav.net import ActorCritic, Adam, clip_grad_norm, gaussian_log_prob
from legnav.store import TERRAIN_TAG, RunStore, default_url
from legnav.terrain import TerrainWorld, generate

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "iteration",
    "mean_reward_total",
    "mean_task_sum",
    "success_rate",
    "mean_terrain_level",
    "bias_gate",
    "stall_fraction",
    "value_loss",
    "surrogate_loss",
    "entropy",
    "kl",
    "learning_rate",
    "clip_fraction",
)
TIMING_COLUMNS = ("iteration", "steps_per_second", "rollout_seconds", "update_seconds")

LR_MIN = 1e-5
LR_MAX = 1e-2
LR_FACTOR = 1.5


@dataclass
class RolloutBuffer:
    """
    One fixed-horizon rollout: arrays are (horizon, robots, ...).

    eps holds the standard-normal noise each action was drawn with, so actions
    can be replayed from the pre-update policy.
    """

    obs: np.ndarray
    actions: np.ndarray
    eps: np.ndarray
    means: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    timeout_values: np.ndarray
    last_values: np.ndarray
    log_std: np.ndarray
    filled: int = 0

    @classmethod
    def empty(cls, horizon: int, num_robots: int, obs_dim: int, num_actions: int) -> "RolloutBuffer":
        step = (horizon, num_robots)
        return cls(
            obs=np.zeros(step + (obs_dim,)),
            actions=np.zeros(step + (num_actions,)),
            eps=np.zeros(step + (num_actions,)),
            means=np.zeros(step + (num_actions,)),
            log_probs=np.zeros(step),
            values=np.zeros(step),
            rewards=np.zeros(step),
            dones=np.zeros(step, dtype=bool),
            timeouts=np.zeros(step, dtype=bool),
            timeout_values=np.zeros(step),
            last_values=np.zeros(num_robots),
            log_std=np.zeros(num_actions),
        )

    @property
    def horizon(self) -> int:
        return self.obs.shape[0]

    @property
    def full(self) -> bool:
        return self.filled == self.horizon

    def add(self, **values: np.ndarray) -> None:
        if self.full:
            raise IndexError("rollout buffer is full")
        for name, value in values.items():
            getattr(self, name)[self.filled] = value
        self.filled += 1

    def clear(self) -> None:
        self.filled = 0


@dataclass
class TrainState:
    """
    Bookkeeping that survives across iterations.
    """

    iteration: int = 0
    bias_gate: bool = True
    window: int = 256
    task_sums: Deque[float] = field(default_factory=deque)
    returns: Deque[float] = field(default_factory=deque)
    successes: Deque[float] = field(default_factory=deque)
    stall_fractions: Deque[float] = field(default_factory=deque)

    def __post_init__(self) -> None:
        for name in ("task_sums", "returns", "successes", "stall_fractions"):
            setattr(self, name, deque(getattr(self, name), maxlen=self.window))

    def record(self, episodes: EpisodeStats) -> None:
        self.task_sums.extend(episodes.task_sum.tolist())
        self.returns.extend(episodes.total_return.tolist())
        self.successes.extend(episodes.success.astype(float).tolist())
        self.stall_fractions.extend(episodes.stall_fraction.tolist())

    @staticmethod
    def _mean(values: Deque[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    @property
    def mean_task_sum(self) -> float:
        return self._mean(self.task_sums)

    @property
    def success_rate(self) -> float:
        return self._mean(self.successes)

    @property
    def stall_fraction(self) -> float:
        return self._mean(self.stall_fractions)


@dataclass
class UpdateStats:
    surrogate_loss: float
    value_loss: float
    entropy: float
    kl: float
    clip_fraction: float
    learning_rate: float


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    timeouts: np.ndarray,
    gamma: float,
    lam: float,
    bootstrap_timeouts: bool,
    last_values: Optional[np.ndarray] = None,
    timeout_values: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (advantages, returns) with time along axis 0.

    Every done step, timeouts included, ends the recursion. With
    bootstrap_timeouts, timeout steps add gamma * V(s_T) to their reward;
    timeout_values defaults to the value of the step itself.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    timeouts = np.asarray(timeouts, dtype=bool)
    if last_values is None:
        last_values = np.zeros(values.shape[1:])

    if bootstrap_timeouts:
        boot = values if timeout_values is None else np.asarray(timeout_values, dtype=np.float64)
        rewards = rewards + gamma * boot * timeouts

    horizon = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(horizon - 1, -1, -1):
        next_values = last_values if t == horizon - 1 else values[t + 1]
        alive = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values * alive - values[t]
        running = delta + gamma * lam * alive * running
        advantages[t] = running
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def clipped_surrogate(
    ratio: np.ndarray, advantages: np.ndarray, clip_ratio: float
) -> Tuple[float, np.ndarray, float]:
    """
    Returns (loss, dloss/dlog_prob per sample, clip fraction) of
    -mean(min(r A, clip(r, 1 - eps, 1 + eps) A)).
    """
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    grad = -(advantages * ratio * active) / ratio.size
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > clip_ratio))
    return loss, grad, clip_fraction


def gaussian_kl(old_mean, old_log_std, new_mean, new_log_std) -> float:
    """
    Mean over the batch of KL(old || new) for diagonal Gaussians.
    """
    old_var = np.exp(2 * old_log_std)
    new_var = np.exp(2 * new_log_std)
    kl = np.sum(
        new_log_std - old_log_std + (old_var + (old_mean - new_mean) ** 2) / (2 * new_var) - 0.5,
        axis=-1,
    )
    return float(np.mean(kl))


def adapt_learning_rate(lr: float, kl: float, desired_kl: float) -> float:
    if kl > 2.0 * desired_kl:
        return max(LR_MIN, lr / LR_FACTOR)
    if 0.0 < kl < desired_kl / 2.0:
        return min(LR_MAX, lr * LR_FACTOR)
    return lr


def ppo_update(
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    ac: ActorCritic,
    optimizer: Adam,
    config: PpoConfig,
    rng: np.random.Generator,
    iteration: int = 0,
) -> UpdateStats:
    """
    Runs epochs x minibatches clipped-surrogate steps over the buffer.

    Minibatch order comes from rng only. Advantages are normalized over the
    whole batch first.
    """
    obs = buffer.obs.reshape(-1, buffer.obs.shape[-1])
    actions = buffer.actions.reshape(-1, buffer.actions.shape[-1])
    old_means = buffer.means.reshape(-1, buffer.means.shape[-1])
    old_log_probs = buffer.log_probs.reshape(-1)
    adv = normalize_advantages(np.asarray(advantages).reshape(-1))
    ret = np.asarray(returns).reshape(-1)
    size = obs.shape[0]

    policy, critic = ac.policy, ac.value.net
    sums = {"surrogate_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0, "clip_fraction": 0.0}
    count = 0

    for epoch in range(config.epochs):
        order = rng.permutation(size)
        for k, index in enumerate(np.array_split(order, config.minibatches)):
            mb = len(index)
            mean, actor_cache = policy.mean_net.forward(obs[index])
            log_std = policy.log_std
            diff = actions[index] - mean
            inv_var = np.exp(-2.0 * log_std)
            new_log_probs = gaussian_log_prob(mean, log_std, actions[index])
            ratio = np.exp(new_log_probs - old_log_probs[index])

            surrogate, dlogp, clip_fraction = clipped_surrogate(ratio, adv[index], config.clip_ratio)

            values, critic_cache = critic.forward(obs[index])
            values = values[:, 0]
            value_err = values - ret[index]
            value_loss = float(np.mean(value_err * value_err))
            entropy = policy.entropy()
            loss = surrogate + config.value_loss_coef * value_loss - config.entropy_coef * entropy

            if not math.isfinite(loss):
                max_adv = float(np.max(np.abs(adv)))
                log.error(f"non-finite loss at iteration {iteration}, epoch {epoch}, minibatch {k}")
                raise TrainingDivergedError(iteration, k, max_adv)

            kl = gaussian_kl(old_means[index], buffer.log_std, mean, log_std)
            if config.schedule == "adaptive":
                optimizer.lr = adapt_learning_rate(optimizer.lr, kl, config.desired_kl)

            grad_mean = dlogp[:, None] * diff * inv_var
            grad_log_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
            grad_log_std = grad_log_std - config.entropy_coef
            actor_grads = policy.mean_net.backward(actor_cache, grad_mean)[0]
            grad_values = (2.0 * config.value_loss_coef / mb) * value_err
            critic_grads = critic.backward(critic_cache, grad_values[:, None])[0]

            grads = actor_grads + [grad_log_std] + critic_grads
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)
            policy.clamp()

            sums["surrogate_loss"] += surrogate
            sums["value_loss"] += value_loss
            sums["entropy"] += entropy
            sums["kl"] += kl
            sums["clip_fraction"] += clip_fraction
            count += 1

    means = {name: total / count for name, total in sums.items()}
    return UpdateStats(learning_rate=optimizer.lr, **means)


def gate_exploration(
    train_state: TrainState,
    mean_episode_task_sum: float,
    threshold: float = 0.5,
    maximum: float = 1.0,
) -> bool:
    """
    Switches the exploration reward off for good once the mean episode task
    sum reaches threshold * maximum. Returns the gate.
    """
    if train_state.bias_gate and mean_episode_task_sum >= threshold * maximum:
        train_state.bias_gate = False
        log.info(
            f"exploration reward removed at iteration {train_state.iteration} "
            f"(mean task sum {mean_episode_task_sum:.4f})"
        )
    return train_state.bias_gate


def draw_eps(streams: List[np.random.Generator], num_actions: int) -> np.ndarray:
    return np.stack([rng.standard_normal(num_actions) for rng in streams])


def replay_actions(params: Dict[str, np.ndarray], obs: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """
    Recomputes logged actions from saved policy parameters and noise.
    """
    ac = ActorCritic.from_arrays(params)
    return ac.policy.sample(obs, eps)[0]


def collect_rollout(
    env: LeggedNavEnv,
    ac: ActorCritic,
    buffer: RolloutBuffer,
    obs: np.ndarray,
    action_streams: List[np.random.Generator],
    train_state: TrainState,
    bootstrap_timeouts: bool,
) -> np.ndarray:
    """
    Fills the buffer with one horizon of experience. Returns the observation
    to continue from.
    """
    buffer.clear()
    buffer.log_std[:] = ac.policy.log_std
    for _ in range(buffer.horizon):
        eps = draw_eps(action_streams, ac.policy.num_actions)
        actions, means = ac.policy.sample(obs, eps)
        log_probs = gaussian_log_prob(means, ac.policy.log_std, actions)
        values = ac.value(obs)

        next_obs, terms, done, info = env.step(actions)
        timeout = info["timeout"]
        timeout_values = np.zeros(env.num_robots)
        if bootstrap_timeouts and timeout.any():
            timeout_values = np.where(timeout, ac.value(info["terminal_obs"]), 0.0)

        buffer.add(
            obs=obs,
            actions=actions,
            eps=eps,
            means=means,
            log_probs=log_probs,
            values=values,
            rewards=terms.total,
            dones=done,
            timeouts=timeout,
            timeout_values=timeout_values,
        )
        if len(info["episodes"]):
            train_state.record(info["episodes"])
        obs = next_obs

    buffer.last_values[:] = ac.value(obs)
    return obs


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics: Path
    iterations: int
    train_state: TrainState


def _make_checkpoint(
    config: RunConfig,
    ac: ActorCritic,
    env: LeggedNavEnv,
    action_streams: List[np.random.Generator],
    minibatch_rng: np.random.Generator,
    train_state: TrainState,
    optimizer: Adam,
) -> Checkpoint:
    return Checkpoint(
        config=config.to_dict(),
        params={k: v.copy() for k, v in ac.to_arrays().items()},
        curriculum=env.grid.snapshot(),
        iteration=train_state.iteration,
        rng={
            "env": stream_states(env.rngs),
            "actions": stream_states(action_streams),
            "minibatch": minibatch_rng.bit_generator.state,
        },
        train={"bias_gate": train_state.bias_gate, "learning_rate": optimizer.lr},
    )


def train(
    config: RunConfig,
    out_dir: Union[str, Path],
    task_mode: Optional[TaskMode] = None,
    seed: Optional[int] = None,
    resume: Optional[Union[str, Path]] = None,
    store: Optional[RunStore] = None,
) -> TrainResult:
    """
    Trains a policy and writes config.yaml, metrics.csv, timing.csv and
    checkpoints into out_dir.

    Checkpoints are written every checkpoint_every iterations and at the end.
    A divergence aborts with the last periodic checkpoint left in place.
    """
    if task_mode is not None:
        config = replace(config, task_mode=task_mode)
    if seed is not None:
        config = replace(config, seed=seed)
    config = config.resolve()
    seed = config.seed
    ppo_config = config.ppo

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.yaml")
    run_name = f"{config.task_mode.value}-seed{seed}"

    own_store = store is None
    store = store or RunStore(config.store_url or default_url(out_dir))
    try:
        world = TerrainWorld.build(
            config.terrain, seed, generator=store.memoize(tag=TERRAIN_TAG)(generate)
        )
        env = LeggedNavEnv(config, world, seed)
        ac = ActorCritic.init(
            env.obs_dim,
            env.num_actions,
            ppo_config.actor_hidden,
            ppo_config.critic_hidden,
            ppo_config.init_log_std,
            np.random.default_rng([seed, 3]),
        )
        action_streams = make_streams([seed, 2], env.num_robots)
        minibatch_rng = np.random.Generator(np.random.PCG64([seed, 4]))
        train_state = TrainState(bias_gate=config.task_mode.is_position, window=env.num_robots)
        learning_rate = ppo_config.learning_rate

        if resume is not None:
            ckpt = load_checkpoint(resume, expected_obs_dim=env.obs_dim)
            ac = ActorCritic.from_arrays(ckpt.params)
            env.grid.restore(ckpt.curriculum)
            env.rngs = restore_streams(ckpt.rng["env"])
            action_streams = restore_streams(ckpt.rng["actions"])
            minibatch_rng.bit_generator.state = ckpt.rng["minibatch"]
            train_state.iteration = ckpt.iteration
            train_state.bias_gate = bool(ckpt.train["bias_gate"])
            learning_rate = float(ckpt.train["learning_rate"])
            log.info(f"resuming {run_name} from {resume} at iteration {ckpt.iteration}")

        optimizer = Adam(ac.params(), learning_rate)
        env.bias_gate = train_state.bias_gate
        if config.trace_robots:
            env.trace = RewardTrace(out_dir / "reward_trace.csv", config.trace_robots, seed=seed)

        buffer = RolloutBuffer.empty(ppo_config.horizon, env.num_robots, env.obs_dim, env.num_actions)
        obs = env.reset()
        append = resume is not None
        metrics = CsvLog(out_dir / "metrics.csv", METRICS_COLUMNS, seed=seed, append=append)
        timing = CsvLog(out_dir / "timing.csv", TIMING_COLUMNS, seed=seed, append=append)
        last_checkpoint = Path(resume) if resume is not None else None

        try:
            while train_state.iteration < ppo_config.total_iterations:
                iteration = train_state.iteration
                start = time.perf_counter()
                obs = collect_rollout(
                    env, ac, buffer, obs, action_streams, train_state, ppo_config.bootstrap_timeouts
                )
                rolled = time.perf_counter()
                advantages, returns = compute_gae(
                    buffer.rewards,
                    buffer.values,
                    buffer.dones,
                    buffer.timeouts,
                    ppo_config.gamma,
                    ppo_config.lam,
                    ppo_config.bootstrap_timeouts,
                    buffer.last_values,
                    buffer.timeout_values,
                )
                stats = ppo_update(
                    buffer, advantages, returns, ac, optimizer, ppo_config, minibatch_rng, iteration
                )
                updated = time.perf_counter()

                if config.task_mode.is_position and train_state.task_sums:
                    env.bias_gate = gate_exploration(
                        train_state, train_state.mean_task_sum, ppo_config.gate_threshold
                    )

                row = {
                    "iteration": iteration,
                    "mean_reward_total": float(np.mean(buffer.rewards)),
                    "mean_task_sum": train_state.mean_task_sum,
                    "success_rate": train_state.success_rate,
                    "mean_terrain_level": float(np.mean(env.grid.levels)),
                    "bias_gate": train_state.bias_gate,
                    "stall_fraction": train_state.stall_fraction,
                    "value_loss": stats.value_loss,
                    "surrogate_loss": stats.surrogate_loss,
                    "entropy": stats.entropy,
                    "kl": stats.kl,
                    "learning_rate": stats.learning_rate,
                    "clip_fraction": stats.clip_fraction,
                }
                steps_per_second = buffer.rewards.size / max(updated - start, 1e-9)
                metrics.write(row)
                metrics.flush()
                timing.write(
                    {
                        "iteration": iteration,
                        "steps_per_second": steps_per_second,
                        "rollout_seconds": rolled - start,
                        "update_seconds": updated - rolled,
                    }
                )
                store.add_metrics(run_name, iteration, {**row, "steps_per_second": steps_per_second})
                log.info(
                    f"it {iteration}: reward {row['mean_reward_total']:.4f} "
                    f"task_sum {row['mean_task_sum']:.3f} success {row['success_rate']:.3f} "
                    f"level {row['mean_terrain_level']:.2f} gate {int(row['bias_gate'])} "
                    f"kl {stats.kl:.4f} lr {stats.learning_rate:.2e} "
                    f"{steps_per_second:.0f} steps/s"
                )

                train_state.iteration += 1
                if train_state.iteration % config.checkpoint_every == 0:
                    last_checkpoint = save_checkpoint(
                        out_dir / f"checkpoint_{train_state.iteration:06d}.json",
                        _make_checkpoint(config, ac, env, action_streams, minibatch_rng, train_state, optimizer),
                    )
        except Exception:
            log.error(f"training aborted; last checkpoint: {last_checkpoint or 'none'}")
            raise
        finally:
            metrics.close()
            timing.close()
            if env.trace is not None:
                env.trace.close()

        final = save_checkpoint(
            out_dir / "final.json",
            _make_checkpoint(config, ac, env, action_streams, minibatch_rng, train_state, optimizer),
        )
        return TrainResult(
            out_dir=out_dir,
            checkpoint=final,
            metrics=out_dir / "metrics.csv",
            iterations=train_state.iteration,
            train_state=train_state,
        )
    finally:
        if own_store:
            store.close()
