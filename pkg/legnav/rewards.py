"""
Home to the reward terms.

All functions accept a single robot or a batch (leading axes) and return a
float for scalar input. Terms are per-second rates; the environment multiplies
the weighted sum by the control period.
"""
import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np

from legnav.config import RewardConfig

log = logging.getLogger(__name__)

# Control times are float multiples of dt; this keeps the window edge exact.
WINDOW_EPS = 1e-9


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def _norm(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sqrt(np.sum(v * v, axis=-1))


def task_reward_final(x_b, x_b_star, t, T: float, T_r: float):
    """
    (1 / T_r) / (1 + |x_b - x_b*|^2) while t > T - T_r, else 0.
    """
    if not 0 < T_r <= T:
        raise ValueError(f"need 0 < T_r <= T, got T_r={T_r}, T={T}")
    diff = np.asarray(x_b, dtype=np.float64) - np.asarray(x_b_star, dtype=np.float64)
    dist2 = np.sum(diff * diff, axis=-1)
    active = np.asarray(t, dtype=np.float64) > T - T_r + WINDOW_EPS
    return _out(np.where(active, (1.0 / T_r) / (1.0 + dist2), 0.0))


def task_reward_continuous(x_b, x_b_star, t, T: float):
    """
    The final-position reward paid over the whole episode (T_r = T).
    """
    return task_reward_final(x_b, x_b_star, t, T, T)


def tracking_reward_velocity(v_cmd, v_actual, sigma: float = 0.25):
    """
    exp(-(vx* - vx)^2 / sigma) + exp(-(w* - w)^2 / sigma) for (vx, yaw rate)
    pairs. Lateral velocity plays no part.
    """
    v_cmd = np.asarray(v_cmd, dtype=np.float64)
    v_actual = np.asarray(v_actual, dtype=np.float64)
    err = v_cmd[..., :2] - v_actual[..., :2]
    return _out(np.exp(-err[..., 0] ** 2 / sigma) + np.exp(-err[..., 1] ** 2 / sigma))


def penalties(qdd, tau, n_c, a, a_prev, feet_acc, weights: Optional[RewardConfig] = None):
    """
    -c1|qdd|^2 - c2|tau|^2 - c3 N_c - c4|a - a_prev|^2 - c5 sum_feet |feet_acc|^2
    """
    w = weights or RewardConfig()
    qdd, tau, a, a_prev, feet_acc = (
        np.asarray(v, dtype=np.float64) for v in (qdd, tau, a, a_prev, feet_acc)
    )
    da = a - a_prev
    feet = feet_acc.reshape(feet_acc.shape[:-2] + (-1,))
    total = (
        -w.c1_joint_acc * np.sum(qdd * qdd, axis=-1)
        - w.c2_torque * np.sum(tau * tau, axis=-1)
        - w.c3_collision * np.asarray(n_c, dtype=np.float64)
        - w.c4_action_rate * np.sum(da * da, axis=-1)
        - w.c5_feet_acc * np.sum(feet * feet, axis=-1)
    )
    return _out(total)


def exploration_bias(xdot_b, x_b, x_b_star, min_speed: float = 0.05, min_distance: float = 0.05):
    """
    Cosine between the base velocity and the direction to the target; 0 when
    either vector is shorter than its guard.
    """
    xdot_b = np.asarray(xdot_b, dtype=np.float64)
    to_target = np.asarray(x_b_star, dtype=np.float64) - np.asarray(x_b, dtype=np.float64)
    speed, dist = _norm(xdot_b), _norm(to_target)
    ok = (speed >= min_speed) & (dist >= min_distance)
    denom = np.where(ok, speed * dist, 1.0)
    cos = np.sum(xdot_b * to_target, axis=-1) / denom
    return _out(np.where(ok, np.clip(cos, -1.0, 1.0), 0.0))


def stall_penalty(xdot_b, x_b, x_b_star, stall_speed: float = 0.1, stall_distance: float = 0.5):
    """
    -1 while the base is slower than stall_speed and farther than
    stall_distance from the target, else 0.
    """
    speed = _norm(xdot_b)
    dist = _norm(np.asarray(x_b, dtype=np.float64) - np.asarray(x_b_star, dtype=np.float64))
    return _out(np.where((speed < stall_speed) & (dist > stall_distance), -1.0, 0.0))


def air_time_reward(air_time, first_contact, command_active, target: float = 0.5):
    """
    Sum over feet touching down this step of (time spent airborne - target),
    zero when no motion is commanded.
    """
    air_time = np.asarray(air_time, dtype=np.float64)
    first_contact = np.asarray(first_contact, dtype=bool)
    value = np.sum((air_time - target) * first_contact, axis=-1)
    return _out(value * np.asarray(command_active, dtype=np.float64))


@dataclass
class RewardTerms:
    """
    Per-robot reward decomposition of one control step.

    task holds the task reward of the active mode (final-position rate in position
    modes, velocity tracking in velocity mode); total is already multiplied by
    the control period.
    """

    task: np.ndarray
    penalties: np.ndarray
    bias: np.ndarray
    stall: np.ndarray
    air_time: np.ndarray
    total: np.ndarray

    def row(self, robot: int) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)[robot]) for f in fields(self)}

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))


def combine(
    task,
    penalty,
    bias,
    stall,
    air_time,
    gate,
    weights: RewardConfig,
    dt: float,
    task_weight: float,
) -> RewardTerms:
    """
    total = dt * (task_weight * task + penalties + gate * w_bias * bias
                  + w_stall * stall + w_air_time * air_time)
    """
    task, penalty, bias, stall, air_time = (
        np.asarray(v, dtype=np.float64) for v in (task, penalty, bias, stall, air_time)
    )
    w_air = weights.w_air_time or 0.0
    total = dt * (
        task_weight * task
        + penalty
        + float(gate) * weights.w_bias * bias
        + weights.w_stall * stall
        + w_air * air_time
    )
    return RewardTerms(
        task=task, penalties=penalty, bias=bias, stall=stall, air_time=air_time, total=total
    )
