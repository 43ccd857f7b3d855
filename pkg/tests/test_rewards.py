import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from legnav.config import RewardConfig
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

ORIGIN = np.zeros(3)
finite = st.floats(min_value=-100, max_value=100, allow_nan=False)
vectors = st.lists(finite, min_size=3, max_size=3).map(np.array)


def _zeros():
    return dict(
        qdd=np.zeros(12),
        tau=np.zeros(12),
        n_c=0,
        a=np.zeros(12),
        a_prev=np.zeros(12),
        feet_acc=np.zeros((4, 3)),
    )


@pytest.mark.parametrize(
    "distance, t, expected",
    [
        (0.0, 5.5, 1.0),
        (1.0, 5.5, 0.5),
        (0.0, 4.9, 0.0),
        (3.0, 4.9, 0.0),
    ],
)
def test_task_reward_final(distance, t, expected):
    target = np.array([0.0, distance, 0.0])
    assert task_reward_final(ORIGIN, target, t, 6.0, 1.0) == pytest.approx(expected, abs=1e-9)


def test_task_reward_final_uses_3d_distance():
    target = np.array([0.0, 0.0, 1.0])
    assert task_reward_final(ORIGIN, target, 5.5, 6.0, 1.0) == pytest.approx(0.5, abs=1e-9)


def test_task_reward_final_window_edge():
    assert task_reward_final(ORIGIN, ORIGIN, 5.0, 6.0, 1.0) == 0.0


@pytest.mark.parametrize("window", [0.0, 7.0])
def test_task_reward_final_rejects_bad_window(window):
    with pytest.raises(ValueError):
        task_reward_final(ORIGIN, ORIGIN, 1.0, 6.0, window)


@pytest.mark.parametrize("window", [0.5, 1.0])
def test_window_integral_is_one(window):
    control_dt = 0.005 * 4
    steps = int(round(6.0 / control_dt))
    t = np.arange(1, steps + 1) * control_dt
    rewards = task_reward_final(np.zeros((steps, 3)), np.zeros((steps, 3)), t, 6.0, window)
    assert float(np.sum(rewards * control_dt)) == pytest.approx(1.0, abs=1e-9)


def test_task_reward_continuous_at_zero_distance():
    for t in (0.02, 3.0, 6.0):
        assert task_reward_continuous(ORIGIN, ORIGIN, t, 6.0) == pytest.approx(1 / 6, abs=1e-9)


def test_task_reward_continuous_distance_three():
    target = np.array([3.0, 0.0, 0.0])
    assert task_reward_continuous(ORIGIN, target, 2.0, 6.0) == pytest.approx(1 / 60, abs=1e-9)


@given(st.floats(min_value=0.01, max_value=6.0), vectors)
def test_continuous_equals_final_with_full_window(t, target):
    assert task_reward_continuous(ORIGIN, target, t, 6.0) == task_reward_final(ORIGIN, target, t, 6.0, 6.0)


@given(st.floats(min_value=0.0, max_value=6.0), vectors)
def test_task_reward_final_bounds(t, target):
    value = task_reward_final(ORIGIN, target, t, 6.0, 1.0)
    assert 0.0 <= value <= 1.0
    if t <= 5.0:
        assert value == 0.0


def test_tracking_reward_perfect():
    assert tracking_reward_velocity([1.0, 0.5], [1.0, 0.5]) == pytest.approx(2.0, abs=1e-9)


def test_tracking_reward_forward_error():
    assert tracking_reward_velocity([1.0, 0.0], [0.5, 0.0]) == pytest.approx(math.exp(-1) + 1, abs=1e-9)


def test_tracking_reward_ignores_lateral_velocity():
    # (vx, yaw rate, vy): the third entry plays no part
    assert tracking_reward_velocity([1.0, 0.0], [1.0, 0.0, 3.0]) == pytest.approx(2.0, abs=1e-9)


def test_penalties_zero():
    assert penalties(**_zeros()) == 0.0


def test_penalties_torque():
    inputs = _zeros()
    inputs["tau"] = np.ones(12)
    weights = RewardConfig(c1_joint_acc=0, c2_torque=1.0, c3_collision=0, c4_action_rate=0, c5_feet_acc=0)
    assert penalties(**inputs, weights=weights) == pytest.approx(-12.0, abs=1e-9)


def test_penalties_collisions():
    inputs = _zeros()
    inputs["n_c"] = 2
    weights = RewardConfig(c3_collision=1.0)
    assert penalties(**inputs, weights=weights) == pytest.approx(-2.0, abs=1e-9)


def test_penalties_batched():
    inputs = {k: np.stack([v, v]) if isinstance(v, np.ndarray) else np.array([v, 3]) for k, v in _zeros().items()}
    assert penalties(**inputs, weights=RewardConfig(c3_collision=1.0)) == pytest.approx([0.0, -3.0])


@given(
    st.lists(finite, min_size=12, max_size=12),
    st.integers(min_value=0, max_value=9),
    st.floats(min_value=1.0, max_value=3.0),
)
def test_penalties_non_positive_and_monotone(values, n_c, factor):
    base = _zeros()
    base.update(qdd=np.array(values), tau=np.array(values), n_c=n_c, a=np.array(values))
    scaled = dict(base, qdd=base["qdd"] * factor, tau=base["tau"] * factor, n_c=n_c + 1)
    assert penalties(**base) <= 0.0
    assert penalties(**scaled) <= penalties(**base)


@pytest.mark.parametrize(
    "velocity, expected",
    [
        ([1.0, 0.0, 0.0], 1.0),
        ([-1.0, 0.0, 0.0], -1.0),
        ([0.0, 1.0, 0.0], 0.0),
    ],
)
def test_exploration_bias(velocity, expected):
    target = np.array([2.0, 0.0, 0.0])
    assert exploration_bias(velocity, ORIGIN, target) == pytest.approx(expected, abs=1e-9)


def test_exploration_bias_guards():
    assert exploration_bias([0.01, 0.0, 0.0], ORIGIN, [2.0, 0.0, 0.0]) == 0.0
    assert exploration_bias([1.0, 0.0, 0.0], ORIGIN, [0.01, 0.0, 0.0]) == 0.0


@given(vectors, vectors, st.floats(min_value=0.2, max_value=10.0))
def test_exploration_bias_scale_invariant(velocity, target, scale):
    value = exploration_bias(velocity, ORIGIN, target)
    assert -1.0 <= value <= 1.0
    if np.linalg.norm(velocity) >= 0.5 and np.linalg.norm(target) >= 0.05:
        assert exploration_bias(velocity * scale, ORIGIN, target) == pytest.approx(value, abs=1e-9)


@pytest.mark.parametrize(
    "speed, distance, expected",
    [
        (0.05, 1.0, -1.0),
        (0.2, 1.0, 0.0),
        (0.05, 0.3, 0.0),
    ],
)
def test_stall_penalty(speed, distance, expected):
    assert stall_penalty([speed, 0.0, 0.0], ORIGIN, [distance, 0.0, 0.0]) == expected


@given(vectors, vectors)
def test_stall_penalty_values(velocity, target):
    assert stall_penalty(velocity, ORIGIN, target) in (-1.0, 0.0)


def test_air_time_reward():
    air = np.array([0.6, 0.2, 0.0, 0.0])
    first = np.array([True, True, False, False])
    assert air_time_reward(air, first, True, 0.5) == pytest.approx(-0.2)
    assert air_time_reward(air, first, False, 0.5) == 0.0


def test_combine_total():
    weights = RewardConfig(w_task=10.0, w_bias=1.0, w_stall=0.1, w_air_time=0.0)
    terms = combine(
        np.array([0.5]),
        np.array([-0.1]),
        np.array([1.0]),
        np.array([-1.0]),
        np.array([0.0]),
        True,
        weights,
        0.02,
        10.0,
    )
    assert terms.total[0] == pytest.approx(0.02 * (5.0 - 0.1 + 1.0 - 0.1))
    assert terms.row(0)["task"] == 0.5
    assert RewardTerms.names() == ("task", "penalties", "bias", "stall", "air_time", "total")


@given(finite, finite, st.floats(min_value=5.01, max_value=6.0))
def test_final_position_total_depends_only_on_distance_and_time(x, y, t):
    weights = RewardConfig()
    target = np.array([x, y, 0.5])
    # Two different paths that end at the same place
    totals = []
    for velocity in ([1.0, 0.0, 0.0], [0.0, -2.0, 0.3]):
        task = task_reward_final(ORIGIN, target, t, 6.0, 1.0)
        bias = exploration_bias(velocity, ORIGIN, target)
        terms = combine(task, 0.0, bias, 0.0, 0.0, False, weights, 0.02, weights.w_task)
        totals.append(float(terms.total))
    assert totals[0] == totals[1]
