import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from legnav import physics
from legnav.errors import NonFiniteError, SimulationDivergedError
from legnav.physics import (
    NUM_JOINTS,
    ActuatorModel,
    ContactMaterial,
    batch_step,
    clip_torque,
    contact_forces,
    control_step,
    pd_torque,
    standing_state,
    step,
    torque_limit,
)
from legnav.terrain import Cell, HeightField


def _flat_field(size: float = 4.0, resolution: float = 0.1, hole: bool = False) -> HeightField:
    n = int(round(size / resolution)) + 1
    validity = np.full((n, n), Cell.HOLE if hole else Cell.VALID, dtype=np.uint8)
    return HeightField(
        origin=(-size / 2, -size / 2),
        resolution=resolution,
        heights=np.zeros((n, n)),
        validity=validity,
    )


def _on_ground(model, n=1):
    base = np.zeros((n, 3))
    base[:, 0] = np.arange(n) * 0.01
    base[:, 2] = model.nominal_height
    return standing_state(model, base)


def test_pd_torque_zero_error():
    q = np.linspace(-1, 1, NUM_JOINTS)
    assert np.array_equal(pd_torque(q, q, np.zeros(NUM_JOINTS), ActuatorModel()), np.zeros(NUM_JOINTS))


def test_pd_torque_proportional():
    q_des = np.zeros(NUM_JOINTS)
    q_des[3] = 0.1
    tau = pd_torque(q_des, np.zeros(NUM_JOINTS), np.zeros(NUM_JOINTS), ActuatorModel(kp=50, kd=0))
    assert tau[3] == pytest.approx(5.0)
    assert np.count_nonzero(tau) == 1


def test_pd_torque_derivative():
    actuator = ActuatorModel(kp=1e-12, kd=2)
    tau = pd_torque(np.zeros(NUM_JOINTS), np.zeros(NUM_JOINTS), np.ones(NUM_JOINTS), actuator)
    assert tau == pytest.approx(np.full(NUM_JOINTS, -2.0))


def test_pd_torque_non_finite():
    q = np.zeros(NUM_JOINTS)
    q[0] = np.nan
    with pytest.raises(NonFiniteError):
        pd_torque(q, np.zeros(NUM_JOINTS), np.zeros(NUM_JOINTS), ActuatorModel())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kp": 0.0},
        {"kd": -1.0},
        {"tau_0": 0.0},
        {"omega_max": -2.0},
    ],
)
def test_actuator_model_invalid(kwargs):
    with pytest.raises(ValueError):
        ActuatorModel(**kwargs)


def test_clip_torque_saturates_at_zero_speed():
    actuator = ActuatorModel()
    tau = clip_torque(np.full(NUM_JOINTS, 2 * actuator.tau_0), np.zeros(NUM_JOINTS), actuator)
    assert np.array_equal(tau, np.full(NUM_JOINTS, actuator.tau_0))


def test_clip_torque_zero_at_max_speed():
    actuator = ActuatorModel()
    qd = np.full(NUM_JOINTS, actuator.omega_max)
    qd[::2] *= -1
    tau = clip_torque(np.linspace(-100, 100, NUM_JOINTS), qd, actuator)
    assert np.all(tau == 0.0)


def test_clip_torque_affine_and_sign():
    actuator = ActuatorModel()
    qd = np.full(NUM_JOINTS, actuator.omega_max / 2)
    tau = np.full(NUM_JOINTS, actuator.tau_0)
    tau[1] = -actuator.tau_0
    out = clip_torque(tau, qd, actuator)
    assert out[0] == pytest.approx(actuator.tau_0 / 2)
    assert out[1] == pytest.approx(-actuator.tau_0 / 2)


def test_torque_limit_beyond_max_speed():
    actuator = ActuatorModel()
    assert torque_limit(np.array([3 * actuator.omega_max]), actuator)[0] == 0.0


torques = arrays(np.float64, NUM_JOINTS, elements=st.floats(min_value=-1e3, max_value=1e3))
speeds = arrays(np.float64, NUM_JOINTS, elements=st.floats(min_value=-30.0, max_value=30.0))


@given(torques, speeds)
def test_clip_torque_stays_in_envelope(tau, qd):
    actuator = ActuatorModel()
    out = clip_torque(tau, qd, actuator)
    limit = torque_limit(qd, actuator)
    assert np.all(np.abs(out) <= limit)
    assert np.all(out * tau >= 0.0)
    inside = np.abs(tau) <= limit
    assert np.array_equal(out[inside], tau[inside])


def test_contact_forces_above_surface():
    force = contact_forces(np.array([[0.0, 0.0, 0.1]]), np.zeros((1, 3)), _flat_field(), ContactMaterial())
    assert np.array_equal(force, np.zeros((1, 3)))


def test_contact_forces_static_penetration():
    force = contact_forces(
        np.array([[0.0, 0.0, -0.01]]), np.zeros((1, 3)), _flat_field(), ContactMaterial(stiffness=5000)
    )
    assert force[0, 2] == pytest.approx(50.0)
    assert force[0, :2] == pytest.approx([0.0, 0.0])


def test_contact_forces_coulomb_cap():
    material = ContactMaterial(stiffness=5000, damping=0, tangential_damping=1000, friction=0.8)
    # demand 1000 * 0.1 = 100 N against a 40 N cap
    force = contact_forces(np.array([[0.0, 0.0, -0.01]]), np.array([[0.1, 0.0, 0.0]]), _flat_field(), material)
    assert force[0, 2] == pytest.approx(50.0)
    assert force[0, 0] == pytest.approx(-40.0)


def test_contact_forces_over_hole():
    force = contact_forces(np.array([[0.0, 0.0, -0.5]]), np.zeros((1, 3)), _flat_field(hole=True), ContactMaterial())
    assert np.array_equal(force, np.zeros((1, 3)))


def test_contact_forces_non_finite_points():
    with pytest.raises(NonFiniteError):
        contact_forces(np.array([[np.nan, 0.0, 0.0]]), np.zeros((1, 3)), _flat_field(), ContactMaterial())


def test_step_free_fall(model):
    state = standing_state(model, np.array([[0.0, 0.0, 5.0]]))
    nxt, report, tau = step(state, model.default_joint_pos, _flat_field(), 0.005, model)
    assert nxt.base_linvel[0, 2] == pytest.approx(-model.gravity * 0.005, rel=1e-12)
    assert np.all(tau == 0.0)
    assert report.n_collisions[0] == 0
    assert not report.foot_contact.any()


def test_step_rejects_non_positive_dt(model):
    state = _on_ground(model)
    with pytest.raises(ValueError):
        step(state, model.default_joint_pos, _flat_field(), 0.0, model)


def test_step_keeps_unit_quaternion(model, rng):
    state = _on_ground(model, 3)
    field = _flat_field()
    for _ in range(50):
        q_des = model.default_joint_pos + rng.uniform(-0.3, 0.3, size=(3, NUM_JOINTS))
        state, _, _ = step(state, q_des, field, 0.005, model)
        assert np.abs(np.linalg.norm(state.base_quat, axis=1) - 1.0).max() < 1e-9


def test_step_torque_envelope(model, rng):
    state = _on_ground(model, 4)
    field = _flat_field()
    for _ in range(40):
        q_des = model.default_joint_pos + rng.uniform(-1.0, 1.0, size=(4, NUM_JOINTS))
        limit = torque_limit(state.qd, model.actuator)
        state, _, tau = step(state, q_des, field, 0.005, model)
        assert np.all(np.abs(tau) <= limit + 1e-12)


def test_step_contact_report_invariants(model, rng):
    state = _on_ground(model, 4)
    field = _flat_field()
    mu = model.material.friction
    for _ in range(40):
        q_des = model.default_joint_pos + rng.uniform(-0.5, 0.5, size=(4, NUM_JOINTS))
        state, report, _ = step(state, q_des, field, 0.005, model)
        assert np.all(report.foot_normal_force >= 0)
        assert np.all(report.foot_tangential_force <= mu * report.foot_normal_force + 1e-9)


def test_step_is_deterministic(model):
    state = _on_ground(model, 2)
    q_des = model.default_joint_pos + 0.1
    a = step(state, q_des, _flat_field(), 0.005, model)
    b = step(state.copy(), q_des, _flat_field(), 0.005, model)
    assert np.array_equal(a[0].base_pos, b[0].base_pos)
    assert np.array_equal(a[0].qd, b[0].qd)
    assert np.array_equal(a[2], b[2])


def test_standing_robot_settles(model):
    state = _on_ground(model)
    field = _flat_field()
    for _ in range(200):
        state, report, _ = step(state, model.default_joint_pos, field, 0.005, model)
    settled = state.base_pos.copy()
    for _ in range(200):
        state, report, _ = step(state, model.default_joint_pos, field, 0.005, model)
        assert not report.base_contact.any()
    assert np.abs(state.base_pos - settled).max() < 5e-3
    assert state.base_pos[0, 2] > 0.5 * model.nominal_height


def test_batch_step_single_robot_matches_step(model):
    state = _on_ground(model)
    q_des = model.default_joint_pos + 0.05
    a = step(state, q_des, _flat_field(), 0.005, model)
    b = batch_step(state, q_des, _flat_field(), 0.005, model, workers=4)
    assert np.array_equal(a[0].base_pos, b[0].base_pos)
    assert np.array_equal(a[2], b[2])


def test_batch_step_independent_of_workers(model, rng):
    state = _on_ground(model, 6)
    q_des = model.default_joint_pos + rng.uniform(-0.3, 0.3, size=(6, NUM_JOINTS))
    field = _flat_field()
    serial = batch_step(state, q_des, field, 0.005, model, workers=1)
    threaded = batch_step(state, q_des, field, 0.005, model, workers=3)
    for name in ("base_pos", "base_quat", "base_linvel", "q", "qd", "feet_pos"):
        assert np.array_equal(getattr(serial[0], name), getattr(threaded[0], name))
    assert np.array_equal(serial[1].n_collisions, threaded[1].n_collisions)
    assert np.array_equal(serial[2], threaded[2])


def test_batch_step_permutation(model, rng):
    state = _on_ground(model, 5)
    q_des = model.default_joint_pos + rng.uniform(-0.3, 0.3, size=(5, NUM_JOINTS))
    perm = rng.permutation(5)
    field = _flat_field()
    out = batch_step(state, q_des, field, 0.005, model)
    out_perm = batch_step(state.take(perm), q_des[perm], field, 0.005, model)
    assert np.array_equal(out[0].base_pos[perm], out_perm[0].base_pos)
    assert np.array_equal(out[2][perm], out_perm[2])


def test_batch_step_reports_diverged_robot(model):
    state = _on_ground(model, 4)
    state.base_linvel[2, 0] = np.inf
    with pytest.raises(SimulationDivergedError) as exc_info:
        batch_step(state, np.tile(model.default_joint_pos, (4, 1)), _flat_field(), 0.005, model, workers=2)
    assert exc_info.value.robot_index == 2


def test_control_step_energy_matches_torque_stream(model, rng):
    state = _on_ground(model, 3)
    field = _flat_field()
    total = np.zeros(3)
    independent = np.zeros(3)
    for _ in range(10):
        q_des = model.default_joint_pos + rng.uniform(-0.5, 0.5, size=(3, NUM_JOINTS))
        result = control_step(state, q_des, field, model, 0.005, 4)
        state = result.state
        total += result.energy
        for tau in result.torques:
            for robot in range(3):
                independent[robot] += sum(t * t for t in tau[robot].tolist()) * 0.005
    assert total == pytest.approx(independent, rel=1e-9)



def test_control_step_tau_covers_every_substep(model, rng):
    state = _on_ground(model, 2)
    q_des = model.default_joint_pos + rng.uniform(-0.5, 0.5, size=(2, NUM_JOINTS))
    result = control_step(state, q_des, _flat_field(), model, 0.005, 4)
    assert (result.tau * result.tau).sum(axis=1) * 0.005 * 4 == pytest.approx(result.energy, rel=1e-9)
    nonzero = result.tau != 0
    assert np.array_equal(result.tau[nonzero] < 0, result.torques.sum(axis=0)[nonzero] < 0)
    assert np.all(np.abs(result.tau) <= np.abs(result.torques).max(axis=0) + 1e-12)


def test_control_step_feet_acc_finite_difference(model):
    state = _on_ground(model, 2)
    before = state.feet_vel.copy()
    result = control_step(state, model.default_joint_pos + 0.2, _flat_field(), model, 0.005, 4)
    expected = (result.state.feet_vel - before) / 0.02
    assert np.allclose(result.state.feet_acc, expected)


def test_no_teleportation(model, rng):
    state = _on_ground(model, 3)
    field = _flat_field()
    dt = 0.005
    for _ in range(40):
        q_des = model.default_joint_pos + rng.uniform(-0.5, 0.5, size=(3, NUM_JOINTS))
        nxt, _, _ = step(state, q_des, field, dt, model)
        moved = np.linalg.norm(nxt.base_pos - state.base_pos, axis=1)
        assert np.all(moved <= np.linalg.norm(nxt.base_linvel, axis=1) * dt + 1e-12)
        state = nxt


def test_quaternion_yaw_round_trip():
    yaw = np.array([-2.5, 0.0, 0.3, 3.0])
    assert physics.yaw_from_quat(physics.quat_from_yaw(yaw)) == pytest.approx(yaw)


def test_nominal_height_puts_feet_on_ground(model):
    state = _on_ground(model)
    assert state.feet_pos[0, :, 2] == pytest.approx(np.zeros(4), abs=1e-12)
