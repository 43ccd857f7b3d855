import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from legnav.checkpoint import load_checkpoint
from legnav.config import PpoConfig, load_config
from legnav.csvlog import read_csv
from legnav.env import EpisodeStats
from legnav.errors import TrainingDivergedError
from legnav.net import ActorCritic, Adam, gaussian_log_prob
from legnav.ppo import (
    LR_MAX,
    LR_MIN,
    METRICS_COLUMNS,
    RolloutBuffer,
    TrainState,
    adapt_learning_rate,
    clipped_surrogate,
    compute_gae,
    gate_exploration,
    gaussian_kl,
    normalize_advantages,
    ppo_update,
    replay_actions,
    train,
)


def _reference_gae(rewards, values, dones, last_value, gamma, lam):
    """
    Sums discounted TD errors forward until the episode ends.
    """
    horizon = len(rewards)
    advantages = np.zeros(horizon)
    for t in range(horizon):
        total, weight = 0.0, 1.0
        for k in range(t, horizon):
            next_value = last_value if k == horizon - 1 else values[k + 1]
            delta = rewards[k] + gamma * next_value * (1.0 - dones[k]) - values[k]
            total += weight * delta
            if dones[k]:
                break
            weight *= gamma * lam
        advantages[t] = total
    return advantages


def test_gae_single_episode_lambda_one():
    rewards = np.array([[1.0], [1.0], [1.0]])
    values = np.zeros((3, 1))
    dones = np.array([[False], [False], [True]])
    _, returns = compute_gae(rewards, values, dones, np.zeros_like(dones), 0.5, 1.0, False)
    assert returns[:, 0] == pytest.approx([1.75, 1.5, 1.0])


def test_gae_bootstraps_from_last_values():
    rewards = np.zeros((2, 1))
    values = np.zeros((2, 1))
    dones = np.zeros((2, 1), dtype=bool)
    advantages, _ = compute_gae(
        rewards, values, dones, dones, 0.9, 1.0, False, last_values=np.array([10.0])
    )
    assert advantages[:, 0] == pytest.approx([8.1, 9.0])


def test_gae_matches_reference():
    rng = np.random.default_rng(3)
    horizon, robots = 40, 25
    rewards = rng.standard_normal((horizon, robots))
    values = rng.standard_normal((horizon, robots))
    dones = rng.random((horizon, robots)) < 0.1
    last = rng.standard_normal(robots)
    advantages, returns = compute_gae(
        rewards, values, dones, np.zeros_like(dones), 0.99, 0.95, False, last_values=last
    )
    for robot in range(robots):
        expected = _reference_gae(
            rewards[:, robot], values[:, robot], dones[:, robot], last[robot], 0.99, 0.95
        )
        assert advantages[:, robot] == pytest.approx(expected, abs=1e-12)
    assert returns == pytest.approx(advantages + values)


def test_gae_return_estimates_mean_discounted_return():
    # 1000 independent one-step-reward episodes of length 5
    rng = np.random.default_rng(11)
    episodes, length, gamma = 1000, 5, 0.9
    rewards = rng.uniform(0, 1, size=(length, episodes))
    dones = np.zeros((length, episodes), dtype=bool)
    dones[-1] = True
    _, returns = compute_gae(rewards, np.zeros_like(rewards), dones, np.zeros_like(dones), gamma, 1.0, False)
    discounts = gamma ** np.arange(length)
    assert returns[0] == pytest.approx(discounts @ rewards, abs=1e-12)
    assert float(returns[0].mean()) == pytest.approx(0.5 * discounts.sum(), abs=0.05)


def test_timeout_without_bootstrap_truncates_return():
    rewards = np.array([[0.3]])
    values = np.array([[5.0]])
    dones = np.array([[True]])
    _, returns = compute_gae(rewards, values, dones, dones, 0.99, 0.95, False)
    assert returns[0, 0] == pytest.approx(0.3)


def test_timeout_bootstrap_adds_discounted_value():
    rewards = np.array([[0.3]])
    values = np.array([[5.0]])
    dones = np.array([[True]])
    _, returns = compute_gae(
        rewards, values, dones, dones, 0.99, 0.95, True, timeout_values=np.array([[2.0]])
    )
    assert returns[0, 0] == pytest.approx(0.3 + 0.99 * 2.0)
    _, returns = compute_gae(rewards, values, dones, dones, 0.99, 0.95, True)
    assert returns[0, 0] == pytest.approx(0.3 + 0.99 * 5.0)


def test_crash_is_not_bootstrapped():
    rewards = np.array([[0.3]])
    values = np.array([[5.0]])
    dones = np.array([[True]])
    _, returns = compute_gae(rewards, values, dones, np.zeros_like(dones), 0.99, 0.95, True)
    assert returns[0, 0] == pytest.approx(0.3)


def test_normalize_advantages():
    adv = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)
    assert adv.std() == pytest.approx(1.0, abs=1e-6)


def test_clipped_surrogate_at_ratio_one():
    adv = np.array([1.0, -2.0, 0.5])
    loss, grad, clip_fraction = clipped_surrogate(np.ones(3), adv, 0.2)
    assert loss == pytest.approx(-adv.mean())
    assert grad == pytest.approx(-adv / 3)
    assert clip_fraction == 0.0


def test_clipped_surrogate_clips():
    ratio = np.array([1.5, 0.5, 1.5, 0.5])
    adv = np.array([1.0, 1.0, -1.0, -1.0])
    loss, grad, clip_fraction = clipped_surrogate(ratio, adv, 0.2)
    # positive advantage caps at 1.2, negative advantage floors at 0.8
    assert loss == pytest.approx(-np.mean([1.2, 0.5, -1.5, -0.8]))
    assert grad[0] == 0.0 and grad[3] == 0.0
    assert grad[1] == pytest.approx(-0.5 / 4)
    assert grad[2] == pytest.approx(1.5 / 4)
    assert clip_fraction == 1.0


def test_gaussian_kl():
    zeros = np.zeros((2, 3))
    assert gaussian_kl(zeros, np.zeros(3), zeros, np.zeros(3)) == 0.0
    shifted = np.ones((2, 3))
    assert gaussian_kl(zeros, np.zeros(3), shifted, np.zeros(3)) == pytest.approx(1.5)


@pytest.mark.parametrize(
    "lr, kl, expected",
    [
        (1e-3, 0.05, 1e-3 / 1.5),
        (1e-3, 0.001, 1.5e-3),
        (1e-3, 0.01, 1e-3),
        (1e-3, 0.0, 1e-3),
        (LR_MIN, 1.0, LR_MIN),
        (LR_MAX, 1e-6, LR_MAX),
    ],
)
def test_adapt_learning_rate(lr, kl, expected):
    assert adapt_learning_rate(lr, kl, 0.01) == pytest.approx(expected)


def _filled_buffer(ac: ActorCritic, rng, horizon=4, robots=8):
    obs_dim, num_actions = ac.obs_dim, ac.policy.num_actions
    buffer = RolloutBuffer.empty(horizon, robots, obs_dim, num_actions)
    buffer.log_std[:] = ac.policy.log_std
    for _ in range(horizon):
        obs = rng.standard_normal((robots, obs_dim))
        eps = rng.standard_normal((robots, num_actions))
        actions, means = ac.policy.sample(obs, eps)
        buffer.add(
            obs=obs,
            actions=actions,
            eps=eps,
            means=means,
            log_probs=gaussian_log_prob(means, ac.policy.log_std, actions),
            values=ac.value(obs),
            rewards=rng.standard_normal(robots),
        )
    return buffer


def test_buffer_raises_when_full(rng):
    buffer = RolloutBuffer.empty(2, 3, 4, 2)
    buffer.add(rewards=np.ones(3))
    buffer.add(rewards=np.ones(3))
    assert buffer.full
    with pytest.raises(IndexError):
        buffer.add(rewards=np.ones(3))
    buffer.clear()
    assert not buffer.full


def test_zero_learning_rate_keeps_params(rng):
    ac = ActorCritic.init(6, 3, [8], [8], 0.0, rng)
    before = [p.copy() for p in ac.params()]
    buffer = _filled_buffer(ac, rng)
    advantages = rng.standard_normal(buffer.rewards.shape)
    config = dataclasses.replace(PpoConfig(), schedule="fixed", epochs=2, minibatches=2)
    stats = ppo_update(buffer, advantages, buffer.values + advantages, ac, Adam(ac.params(), 0.0), config, rng)
    assert all(np.array_equal(a, b) for a, b in zip(before, ac.params()))
    assert stats.learning_rate == 0.0
    assert stats.kl == pytest.approx(0.0, abs=1e-12)
    assert stats.clip_fraction == 0.0


def test_update_raises_more_likely_good_actions(rng):
    ac = ActorCritic.init(6, 3, [16], [16], 0.0, rng)
    buffer = _filled_buffer(ac, rng, horizon=8)
    advantages = buffer.eps[..., 0].copy()
    obs = buffer.obs.reshape(-1, 6)
    actions = buffer.actions.reshape(-1, 3)
    good = advantages.reshape(-1) > 0
    before = ac.policy.log_prob(obs, actions)
    config = dataclasses.replace(PpoConfig(), schedule="fixed", entropy_coef=0.0)
    ppo_update(buffer, advantages, buffer.values + advantages, ac, Adam(ac.params(), 1e-3), config, rng)
    after = ac.policy.log_prob(obs, actions)
    assert np.mean(after[good] - before[good]) > np.mean(after[~good] - before[~good])


def test_non_finite_loss_raises(rng):
    ac = ActorCritic.init(6, 3, [8], [8], 0.0, rng)
    buffer = _filled_buffer(ac, rng)
    advantages = np.full(buffer.rewards.shape, np.nan)
    with pytest.raises(TrainingDivergedError) as exc_info:
        ppo_update(buffer, advantages, advantages, ac, Adam(ac.params(), 1e-3), PpoConfig(), rng, iteration=7)
    assert exc_info.value.iteration == 7
    assert exc_info.value.minibatch == 0
    assert isinstance(exc_info.value, FloatingPointError)


def test_update_is_deterministic_given_rng():
    results = []
    for _ in range(2):
        rng = np.random.default_rng(9)
        ac = ActorCritic.init(6, 3, [8], [8], 0.0, rng)
        buffer = _filled_buffer(ac, rng)
        advantages = rng.standard_normal(buffer.rewards.shape)
        ppo_update(buffer, advantages, advantages, ac, Adam(ac.params(), 1e-3), PpoConfig(), rng)
        results.append(ac.params())
    assert all(np.array_equal(a, b) for a, b in zip(*results))


def _episodes(task_sums):
    n = len(task_sums)
    return EpisodeStats(
        robots=np.arange(n),
        success=np.zeros(n, dtype=bool),
        crash=np.zeros(n, dtype=bool),
        timeout=np.ones(n, dtype=bool),
        progress=np.zeros(n),
        final_distance=np.ones(n),
        traveled=np.zeros(n),
        task_sum=np.asarray(task_sums, dtype=float),
        total_return=np.zeros(n),
        stall_fraction=np.zeros(n),
        level=np.zeros(n, dtype=np.int64),
    )


def test_train_state_window():
    state = TrainState(window=3)
    state.record(_episodes([0.1, 0.2, 0.3, 0.9]))
    assert state.mean_task_sum == pytest.approx((0.2 + 0.3 + 0.9) / 3)
    assert TrainState().success_rate == 0.0


@pytest.mark.parametrize("mean, gate", [(0.49, True), (0.51, False)])
def test_gate_exploration(mean, gate):
    state = TrainState()
    assert gate_exploration(state, mean) is gate


def test_gate_never_reopens():
    state = TrainState()
    gate_exploration(state, 0.6)
    assert gate_exploration(state, 0.0) is False


def test_replay_actions(rng):
    ac = ActorCritic.init(5, 4, [8], [8], -0.3, rng)
    obs = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 4))
    actions, _ = ac.policy.sample(obs, eps)
    assert np.array_equal(replay_actions(ac.to_arrays(), obs, eps), actions)


def test_train_writes_outputs(tiny_config, tmp_path):
    result = train(tiny_config, tmp_path)
    assert result.iterations == 2
    assert result.checkpoint == tmp_path / "final.json"
    for name in ("config.yaml", "metrics.csv", "timing.csv", "checkpoint_000001.json", "checkpoint_000002.json"):
        assert (tmp_path / name).is_file()
    meta, rows = read_csv(result.metrics)
    assert meta["seed"] == "0"
    assert [row["iteration"] for row in rows] == ["0", "1"]
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert all(math.isfinite(float(row["kl"])) for row in rows)
    ckpt = load_checkpoint(result.checkpoint)
    assert ckpt.iteration == 2
    assert ckpt.obs_dim == 58


def test_train_is_deterministic(tiny_config, tmp_path):
    a = train(tiny_config, tmp_path / "a")
    b = train(tiny_config, tmp_path / "b")
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_train_seed_changes_run(tiny_config, tmp_path):
    a = train(tiny_config, tmp_path / "a")
    b = train(tiny_config, tmp_path / "b", seed=1)
    assert a.metrics.read_bytes() != b.metrics.read_bytes()


def test_train_resume_continues_iterations(tiny_config, tmp_path):
    short = dataclasses.replace(tiny_config, ppo=dataclasses.replace(tiny_config.ppo, total_iterations=1))
    first = train(short, tmp_path)
    assert first.iterations == 1
    resumed = train(tiny_config, tmp_path, resume=tmp_path / "checkpoint_000001.json")
    assert resumed.iterations == 2
    _, rows = read_csv(tmp_path / "metrics.csv")
    assert [row["iteration"] for row in rows] == ["0", "1"]


def test_checkpoint_train_state_is_optimizer_free(tiny_config, tmp_path):
    short = dataclasses.replace(tiny_config, ppo=dataclasses.replace(tiny_config.ppo, total_iterations=1))
    train(short, tmp_path)
    ckpt = load_checkpoint(tmp_path / "checkpoint_000001.json")
    assert set(ckpt.train) == {"bias_gate", "learning_rate"}
    assert LR_MIN <= ckpt.train["learning_rate"] <= LR_MAX
    assert ckpt.iteration == 1
    assert set(ckpt.rng) == {"env", "actions", "minibatch"}


def test_train_records_metrics_in_store(tiny_config, tmp_path, run_store):
    train(tiny_config, tmp_path, store=run_store)
    rows = run_store.metrics("final_position-seed0")
    assert [row["iteration"] for row in rows] == [0, 1]
    assert rows[0]["steps_per_second"] > 0
    # terrain tiles are memoized in the store
    assert run_store.keys(tag="terrain")


CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_train(name, tmp_path):
    config = load_config(CONFIGS / name, {"ppo.total_iterations": 1, "num_robots": 8})
    result = train(config, tmp_path)
    assert result.iterations == 1
    _, rows = read_csv(result.metrics)
    assert all(math.isfinite(float(value)) for value in rows[0].values())
