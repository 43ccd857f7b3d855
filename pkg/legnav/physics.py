"""
Home to the batched quadruped dynamics.

The robot is a rigid base box with four three-joint legs (HAA, HFE, KFE per
leg, legs ordered LF, RF, LH, RH). Limbs are massless; each joint carries a
reflected rotor inertia. Contacts are penalty springs/dampers against a
HeightField. One step advances every robot of a batch independently:

    generalized velocity u = (base linear velocity, base angular velocity, qd)
    (M / dt + D) du = f(u)        D = sum over contacts of G^T C G
    u' = u + du,  positions integrated with u' (semi-implicit Euler)

where C linearises contact damping and friction around the current state.
All small contractions are written as explicit ordered sums so that a robot's
result does not depend on the batch it is stepped in.
"""
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from legnav.errors import NonFiniteError, SimulationDivergedError
from legnav.terrain import HeightField

log = logging.getLogger(__name__)

NUM_LEGS = 4
JOINTS_PER_LEG = 3
NUM_JOINTS = NUM_LEGS * JOINTS_PER_LEG
NUM_GENERALIZED = 6 + NUM_JOINTS
FOOT_NAMES = ("LF", "RF", "LH", "RH")


@dataclass(frozen=True)
class ActuatorModel:
    """
    PD servo gains and the affine torque-speed envelope of a joint motor.
    """

    kp: float = 50.0
    kd: float = 2.0
    tau_0: float = 35.0
    omega_max: float = 10.0

    def __post_init__(self) -> None:
        if not (self.kp > 0 and self.kd >= 0 and self.tau_0 > 0 and self.omega_max > 0):
            raise ValueError(
                f"invalid actuator kp={self.kp} kd={self.kd} "
                f"tau_0={self.tau_0} omega_max={self.omega_max}"
            )


@dataclass(frozen=True)
class ContactMaterial:
    stiffness: float = 5000.0
    damping: float = 50.0
    tangential_damping: float = 1000.0
    friction: float = 0.8


@dataclass(frozen=True)
class QuadrupedModel:
    """
    Geometry, inertia, actuation and contact parameters of the robot.
    """

    mass: float
    inertia: Tuple[float, float, float]
    half_extents: Tuple[float, float, float]
    hip_offsets: np.ndarray
    thigh_length: float
    shank_length: float
    armature: float
    joint_damping: float
    default_joint_pos: np.ndarray
    actuator: ActuatorModel
    material: ContactMaterial
    gravity: float = 9.81
    penalize_knee_contacts: bool = False

    @classmethod
    def from_config(cls, config) -> "QuadrupedModel":
        """
        Builds the model from a legnav.config.PhysicsConfig.
        """
        return cls(
            mass=config.base_mass,
            inertia=tuple(config.base_inertia),
            half_extents=tuple(config.base_half_extents),
            hip_offsets=np.asarray(config.hip_offsets, dtype=np.float64),
            thigh_length=config.thigh_length,
            shank_length=config.shank_length,
            armature=config.joint_armature,
            joint_damping=config.joint_damping,
            default_joint_pos=np.tile(
                np.asarray(config.default_joint_pos, dtype=np.float64), NUM_LEGS
            ),
            actuator=ActuatorModel(
                kp=config.kp,
                kd=config.kd,
                tau_0=config.tau_0,
                omega_max=config.omega_max,
            ),
            material=ContactMaterial(
                stiffness=config.contact_stiffness,
                damping=config.contact_damping,
                tangential_damping=config.tangential_damping,
                friction=config.friction,
            ),
            gravity=config.gravity,
            penalize_knee_contacts=config.penalize_knee_contacts,
        )

    @property
    def base_corners(self) -> np.ndarray:
        hx, hy, hz = self.half_extents
        return np.array(
            [[sx * hx, sy * hy, sz * hz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)],
            dtype=np.float64,
        )

    @property
    def nominal_height(self) -> float:
        """
        Height of the base above flat ground with the default pose and feet touching.
        """
        legs = leg_kinematics(self.default_joint_pos[None, :], self)
        return float(-legs.foot[0, :, 2].min())


@dataclass
class RobotState:
    """
    World state of a batch of robots. Every array has a leading robot axis.

    Velocities are world-frame; base_quat is (w, x, y, z) rotating base to world.
    """

    base_pos: np.ndarray
    base_quat: np.ndarray
    base_linvel: np.ndarray
    base_angvel: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd_last: np.ndarray
    feet_pos: np.ndarray
    feet_vel: np.ndarray
    feet_acc: np.ndarray
    foot_contact: np.ndarray
    knee_contact: np.ndarray
    thigh_contact: np.ndarray
    base_contact: np.ndarray

    @property
    def num_robots(self) -> int:
        return self.base_pos.shape[0]

    def take(self, index) -> "RobotState":
        """
        Returns the robots selected by index (slice, integer array or mask).
        """
        return RobotState(
            **{f.name: getattr(self, f.name)[index].copy() for f in dataclasses.fields(self)}
        )

    def put(self, index, other: "RobotState") -> None:
        """
        Overwrites the robots selected by index with the robots of other.
        """
        for f in dataclasses.fields(self):
            getattr(self, f.name)[index] = getattr(other, f.name)

    def copy(self) -> "RobotState":
        return self.take(slice(None))

    @classmethod
    def concat(cls, states: Sequence["RobotState"]) -> "RobotState":
        return cls(
            **{
                f.name: np.concatenate([getattr(s, f.name) for s in states], axis=0)
                for f in dataclasses.fields(cls)
            }
        )


@dataclass
class ContactReport:
    """
    Contact summary of one step for a batch of robots.
    """

    n_collisions: np.ndarray
    foot_normal_force: np.ndarray
    foot_tangential_force: np.ndarray
    foot_contact: np.ndarray
    knee_contact: np.ndarray
    thigh_contact: np.ndarray
    base_contact: np.ndarray

    @classmethod
    def concat(cls, reports: Sequence["ContactReport"]) -> "ContactReport":
        return cls(
            **{
                f.name: np.concatenate([getattr(r, f.name) for r in reports], axis=0)
                for f in dataclasses.fields(cls)
            }
        )


class LegKinematics(NamedTuple):
    """
    Base-frame positions (robots, legs, 3) and Jacobians (robots, legs, 3, 3).
    """

    thigh: np.ndarray
    knee: np.ndarray
    foot: np.ndarray
    thigh_jac: np.ndarray
    knee_jac: np.ndarray
    foot_jac: np.ndarray


class ContactSample(NamedTuple):
    force: np.ndarray
    normal: np.ndarray
    normal_force: np.ndarray
    tangential_force: np.ndarray
    normal_damping: np.ndarray
    tangential_damping: np.ndarray
    in_contact: np.ndarray


class ControlResult(NamedTuple):
    state: RobotState
    report: ContactReport
    tau: np.ndarray
    energy: np.ndarray
    torques: np.ndarray


def pd_torque(
    q_des: np.ndarray, q: np.ndarray, qd: np.ndarray, model: ActuatorModel
) -> np.ndarray:
    """
    Returns kp * (q_des - q) - kd * qd, before any clipping.
    """
    q_des, q, qd = (np.asarray(a, dtype=np.float64) for a in (q_des, q, qd))
    _require_finite(q_des=q_des, q=q, qd=qd)
    return model.kp * (q_des - q) - model.kd * qd


def torque_limit(qd: np.ndarray, model: ActuatorModel) -> np.ndarray:
    """
    Returns the available torque tau_0 * (1 - |qd| / omega_max), floored at 0.
    """
    return np.maximum(0.0, model.tau_0 * (1.0 - np.abs(qd) / model.omega_max))


def clip_torque(tau: np.ndarray, qd: np.ndarray, model: ActuatorModel) -> np.ndarray:
    """
    Clips each torque to the speed dependent envelope, keeping its sign.
    """
    tau, qd = np.asarray(tau, dtype=np.float64), np.asarray(qd, dtype=np.float64)
    _require_finite(tau=tau, qd=qd)
    limit = torque_limit(qd, model)
    return np.clip(tau, -limit, limit)


def contact_forces(
    points: np.ndarray,
    point_vels: np.ndarray,
    field: HeightField,
    material: ContactMaterial,
) -> np.ndarray:
    """
    Returns the penalty contact force (..., 3) acting on each point.

    Points over hole cells or above the surface receive no force.
    """
    points = np.asarray(points, dtype=np.float64)
    point_vels = np.asarray(point_vels, dtype=np.float64)
    _require_finite(points=points)
    return _sample_contacts(points, point_vels, field, material).force


def quat_to_rot(quat: np.ndarray) -> np.ndarray:
    """
    Returns rotation matrices (..., 3, 3) for unit quaternions (w, x, y, z).
    """
    w, x, y, z = quat[..., 0], quat[..., 1], quat[..., 2], quat[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_from_yaw(yaw: np.ndarray) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    zeros = np.zeros_like(yaw)
    return np.stack([np.cos(yaw / 2), zeros, zeros, np.sin(yaw / 2)], axis=-1)


def yaw_from_quat(quat: np.ndarray) -> np.ndarray:
    w, x, y, z = quat[..., 0], quat[..., 1], quat[..., 2], quat[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


def quat_integrate(quat: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """
    Integrates a world-frame angular velocity over dt and renormalises.
    """
    w, x, y, z = quat[..., 0], quat[..., 1], quat[..., 2], quat[..., 3]
    ox, oy, oz = omega[..., 0], omega[..., 1], omega[..., 2]
    half = 0.5 * dt
    dq = np.stack(
        [
            -ox * x - oy * y - oz * z,
            ox * w + oy * z - oz * y,
            -ox * z + oy * w + oz * x,
            ox * y - oy * x + oz * w,
        ],
        axis=-1,
    )
    out = quat + half * dq
    norm = np.sqrt(
        out[..., 0] * out[..., 0]
        + out[..., 1] * out[..., 1]
        + out[..., 2] * out[..., 2]
        + out[..., 3] * out[..., 3]
    )
    return out / norm[..., None]


def rotate(rot: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Returns rot @ v for stacks of 3x3 matrices and 3-vectors.
    """
    return (
        rot[..., :, 0] * v[..., None, 0]
        + rot[..., :, 1] * v[..., None, 1]
        + rot[..., :, 2] * v[..., None, 2]
    )


def rotate_inv(rot: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Returns rot.T @ v for stacks of 3x3 matrices and 3-vectors.
    """
    return (
        rot[..., 0, :] * v[..., 0, None]
        + rot[..., 1, :] * v[..., 1, None]
        + rot[..., 2, :] * v[..., 2, None]
    )


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def leg_kinematics(q: np.ndarray, model: QuadrupedModel) -> LegKinematics:
    """
    Forward kinematics and point Jacobians of every leg in the base frame.

    HAA rotates about the base x axis, HFE and KFE about the rotated y axis.
    """
    q = q.reshape(q.shape[0], NUM_LEGS, JOINTS_PER_LEG)
    a, b, c = q[..., 0], q[..., 1], q[..., 2]
    sa, ca = np.sin(a), np.cos(a)
    sb, cb = np.sin(b), np.cos(b)
    sbc, cbc = np.sin(b + c), np.cos(b + c)
    l1, l2 = model.thigh_length, model.shank_length
    hip = model.hip_offsets[None, :, :]
    zeros = np.zeros_like(a)

    def place(px, pz):
        return np.stack([hip[..., 0] + px, hip[..., 1] - sa * pz, hip[..., 2] + ca * pz], axis=-1)

    def haa_column(pz):
        return np.stack([zeros, -ca * pz, -sa * pz], axis=-1)

    def planar_column(dx, dz):
        return np.stack([dx, -sa * dz, ca * dz], axis=-1)

    knee_x, knee_z = -l1 * sb, -l1 * cb
    foot_x, foot_z = knee_x - l2 * sbc, knee_z - l2 * cbc
    thigh_x, thigh_z = 0.5 * knee_x, 0.5 * knee_z

    no_column = np.zeros(a.shape + (3,))
    thigh_jac = np.stack(
        [haa_column(thigh_z), planar_column(-0.5 * l1 * cb, 0.5 * l1 * sb), no_column],
        axis=-1,
    )
    knee_jac = np.stack(
        [haa_column(knee_z), planar_column(-l1 * cb, l1 * sb), no_column], axis=-1
    )
    foot_jac = np.stack(
        [
            haa_column(foot_z),
            planar_column(-l1 * cb - l2 * cbc, l1 * sb + l2 * sbc),
            planar_column(-l2 * cbc, l2 * sbc),
        ],
        axis=-1,
    )
    return LegKinematics(
        thigh=place(thigh_x, thigh_z),
        knee=place(knee_x, knee_z),
        foot=place(foot_x, foot_z),
        thigh_jac=thigh_jac,
        knee_jac=knee_jac,
        foot_jac=foot_jac,
    )


def standing_state(
    model: QuadrupedModel,
    base_pos: np.ndarray,
    yaw: Optional[np.ndarray] = None,
    q: Optional[np.ndarray] = None,
) -> RobotState:
    """
    Returns robots at rest at base_pos, with the default pose unless q is given.
    """
    base_pos = np.asarray(base_pos, dtype=np.float64).reshape(-1, 3)
    n = base_pos.shape[0]
    yaw = np.zeros(n) if yaw is None else np.asarray(yaw, dtype=np.float64)
    q = np.tile(model.default_joint_pos, (n, 1)) if q is None else np.asarray(q, dtype=np.float64)
    state = RobotState(
        base_pos=base_pos.copy(),
        base_quat=quat_from_yaw(yaw),
        base_linvel=np.zeros((n, 3)),
        base_angvel=np.zeros((n, 3)),
        q=q.copy(),
        qd=np.zeros((n, NUM_JOINTS)),
        qdd_last=np.zeros((n, NUM_JOINTS)),
        feet_pos=np.zeros((n, NUM_LEGS, 3)),
        feet_vel=np.zeros((n, NUM_LEGS, 3)),
        feet_acc=np.zeros((n, NUM_LEGS, 3)),
        foot_contact=np.zeros((n, NUM_LEGS), dtype=bool),
        knee_contact=np.zeros((n, NUM_LEGS), dtype=bool),
        thigh_contact=np.zeros((n, NUM_LEGS), dtype=bool),
        base_contact=np.zeros(n, dtype=bool),
    )
    state.feet_pos, state.feet_vel = feet_world(state, model)
    return state


def feet_world(state: RobotState, model: QuadrupedModel) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns world-frame foot positions and velocities (robots, 4, 3).
    """
    rot = quat_to_rot(state.base_quat)[:, None]
    legs = leg_kinematics(state.q, model)
    qd = state.qd.reshape(-1, NUM_LEGS, JOINTS_PER_LEG)
    offset = rotate(rot, legs.foot)
    pos = state.base_pos[:, None, :] + offset
    local_vel = rotate(legs.foot_jac, qd)
    vel = (
        state.base_linvel[:, None, :]
        + cross(state.base_angvel[:, None, :], offset)
        + rotate(rot, local_vel)
    )
    return pos, vel


def step(
    state: RobotState,
    q_des: np.ndarray,
    terrain: HeightField,
    dt: float,
    model: QuadrupedModel,
    index_offset: int = 0,
) -> Tuple[RobotState, ContactReport, np.ndarray]:
    """
    Advances every robot of state by one physics substep of length dt.

    Returns the next state, the contact report of the step and the applied
    (clipped) joint torques.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")

    q_des = np.asarray(q_des, dtype=np.float64).reshape(state.num_robots, NUM_JOINTS)
    n = state.num_robots
    rot = quat_to_rot(state.base_quat)

    tau = clip_torque(pd_torque(q_des, state.q, state.qd, model.actuator), state.qd, model.actuator)

    # Contact points: per leg (thigh, knee, foot), then the 8 base corners.
    legs = leg_kinematics(state.q, model)
    leg_points = np.stack([legs.thigh, legs.knee, legs.foot], axis=2)
    leg_jacs = np.stack([legs.thigh_jac, legs.knee_jac, legs.foot_jac], axis=2)
    qd_legs = state.qd.reshape(n, NUM_LEGS, 1, JOINTS_PER_LEG)

    rot_legs = rot[:, None, None]
    leg_offsets = rotate(rot_legs, leg_points)
    leg_world_jacs = _matmul(rot_legs, leg_jacs)
    leg_vels = (
        state.base_linvel[:, None, None, :]
        + cross(state.base_angvel[:, None, None, :], leg_offsets)
        + rotate(leg_world_jacs, qd_legs)
    )
    leg_contacts = _sample_contacts(
        state.base_pos[:, None, None, :] + leg_offsets, leg_vels, terrain, model.material
    )

    corners = model.base_corners
    corner_offsets = rotate(rot[:, None], np.broadcast_to(corners, (n,) + corners.shape))
    corner_vels = state.base_linvel[:, None, :] + cross(
        state.base_angvel[:, None, :], corner_offsets
    )
    corner_contacts = _sample_contacts(
        state.base_pos[:, None, :] + corner_offsets, corner_vels, terrain, model.material
    )

    # Generalized forces and contact damping, accumulated in a fixed order.
    inertia_world = _world_inertia(rot, model.inertia)
    forces = np.zeros((n, NUM_GENERALIZED))
    forces[:, 2] = -model.mass * model.gravity
    forces[:, 3:6] = -cross(state.base_angvel, rotate(inertia_world, state.base_angvel))
    forces[:, 6:] = tau - model.joint_damping * state.qd

    system = np.zeros((n, NUM_GENERALIZED, NUM_GENERALIZED))
    system[:, 0, 0] = system[:, 1, 1] = system[:, 2, 2] = model.mass / dt
    system[:, 3:6, 3:6] = inertia_world / dt
    joint_diag = np.arange(6, NUM_GENERALIZED)
    system[:, joint_diag, joint_diag] = model.armature / dt

    for leg in range(NUM_LEGS):
        cols = slice(6 + JOINTS_PER_LEG * leg, 6 + JOINTS_PER_LEG * (leg + 1))
        for point in range(3):
            sample = _pick(leg_contacts, (slice(None), leg, point))
            jac = _point_jacobian(leg_offsets[:, leg, point], leg_world_jacs[:, leg, point], cols)
            _accumulate(system, forces, jac, sample)

    for corner in range(corners.shape[0]):
        sample = _pick(corner_contacts, (slice(None), corner))
        jac = _point_jacobian(corner_offsets[:, corner], None, None)
        _accumulate(system, forces, jac, sample)

    du = np.linalg.solve(system, forces[..., None])[..., 0]

    linvel = state.base_linvel + du[:, 0:3]
    angvel = state.base_angvel + du[:, 3:6]
    qd = state.qd + du[:, 6:]
    next_state = RobotState(
        base_pos=state.base_pos + linvel * dt,
        base_quat=quat_integrate(state.base_quat, angvel, dt),
        base_linvel=linvel,
        base_angvel=angvel,
        q=state.q + qd * dt,
        qd=qd,
        qdd_last=du[:, 6:] / dt,
        feet_pos=state.feet_pos,
        feet_vel=state.feet_vel,
        feet_acc=state.feet_acc.copy(),
        foot_contact=leg_contacts.in_contact[:, :, 2].copy(),
        knee_contact=leg_contacts.in_contact[:, :, 1].copy(),
        thigh_contact=leg_contacts.in_contact[:, :, 0].copy(),
        base_contact=corner_contacts.in_contact.any(axis=1),
    )
    next_state.feet_pos, next_state.feet_vel = feet_world(next_state, model)
    _require_finite_state(next_state, index_offset)

    n_collisions = next_state.base_contact.astype(np.int64) + next_state.thigh_contact.sum(axis=1)
    if model.penalize_knee_contacts:
        n_collisions = n_collisions + next_state.knee_contact.sum(axis=1)

    report = ContactReport(
        n_collisions=n_collisions,
        foot_normal_force=leg_contacts.normal_force[:, :, 2].copy(),
        foot_tangential_force=leg_contacts.tangential_force[:, :, 2].copy(),
        foot_contact=next_state.foot_contact.copy(),
        knee_contact=next_state.knee_contact.copy(),
        thigh_contact=next_state.thigh_contact.copy(),
        base_contact=next_state.base_contact.copy(),
    )
    return next_state, report, tau


def batch_step(
    state: RobotState,
    q_des: np.ndarray,
    terrain: HeightField,
    dt: float,
    model: QuadrupedModel,
    workers: int = 1,
) -> Tuple[RobotState, ContactReport, np.ndarray]:
    """
    Steps every robot independently, splitting the batch over worker threads.

    The result is identical to calling step on each robot alone.
    """
    q_des = np.asarray(q_des, dtype=np.float64).reshape(state.num_robots, NUM_JOINTS)
    n = state.num_robots
    workers = max(1, min(workers, n))
    if workers == 1:
        return step(state, q_des, terrain, dt, model)

    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(
                step, state.take(chunk), q_des[chunk], terrain, dt, model, chunk.start
            )
            for chunk in chunks
        ]
        results = [f.result() for f in futures]

    return (
        RobotState.concat([r[0] for r in results]),
        ContactReport.concat([r[1] for r in results]),
        np.concatenate([r[2] for r in results], axis=0),
    )


def control_step(
    state: RobotState,
    q_des: np.ndarray,
    terrain: HeightField,
    model: QuadrupedModel,
    dt: float,
    decimation: int,
    workers: int = 1,
) -> ControlResult:
    """
    Holds q_des for `decimation` substeps.

    Accumulates sum(tau^2) * dt per robot, ORs contact flags over the
    substeps, keeps the largest collision count and sets feet_acc to the
    finite difference of feet velocity over the control period.

    The returned tau is the per-joint root-mean-square torque over the
    substeps, signed like their mean, so sum(tau^2) * dt * decimation equals
    the step energy. Foot forces are substep means.
    """
    feet_vel_before = state.feet_vel.copy()
    energy = np.zeros(state.num_robots)
    torques = []
    normal, tangential = [], []
    merged: Optional[ContactReport] = None

    for _ in range(decimation):
        state, report, tau = batch_step(state, q_des, terrain, dt, model, workers)
        energy = energy + (tau * tau).sum(axis=1) * dt
        torques.append(tau)
        normal.append(report.foot_normal_force)
        tangential.append(report.foot_tangential_force)
        if merged is None:
            merged = dataclasses.replace(report)
        else:
            merged = ContactReport(
                n_collisions=np.maximum(merged.n_collisions, report.n_collisions),
                foot_normal_force=report.foot_normal_force,
                foot_tangential_force=report.foot_tangential_force,
                foot_contact=merged.foot_contact | report.foot_contact,
                knee_contact=merged.knee_contact | report.knee_contact,
                thigh_contact=merged.thigh_contact | report.thigh_contact,
                base_contact=merged.base_contact | report.base_contact,
            )

    state.feet_acc = (state.feet_vel - feet_vel_before) / (dt * decimation)
    torques = np.stack(torques)
    rms = np.sqrt(np.mean(torques * torques, axis=0))
    tau = np.where(torques.sum(axis=0) < 0, -rms, rms)
    merged.foot_normal_force = np.mean(normal, axis=0)
    merged.foot_tangential_force = np.mean(tangential, axis=0)
    return ControlResult(state, merged, tau, energy, torques)


def _sample_contacts(
    points: np.ndarray,
    vels: np.ndarray,
    field: HeightField,
    material: ContactMaterial,
) -> ContactSample:
    height, grad_x, grad_y, hole = field.surface(points[..., 0], points[..., 1])
    height = np.where(hole, 0.0, height)
    inv = 1.0 / np.sqrt(grad_x * grad_x + grad_y * grad_y + 1.0)
    normal = np.stack([-grad_x * inv, -grad_y * inv, inv], axis=-1)

    depth = (height - points[..., 2]) * inv
    in_contact = (depth > 0.0) & ~hole

    normal_vel = dot(vels, normal)
    spring = material.stiffness * depth - material.damping * normal_vel
    normal_force = np.where(in_contact, np.maximum(0.0, spring), 0.0)
    normal_damping = np.where(in_contact & (spring > 0.0), material.damping, 0.0)

    tangent_vel = vels - normal_vel[..., None] * normal
    slip = np.sqrt(dot(tangent_vel, tangent_vel))
    cap = material.friction * normal_force
    demand = material.tangential_damping * slip
    saturated = demand > cap
    tangential_damping = np.where(
        saturated, cap / np.where(saturated, slip, 1.0), material.tangential_damping
    )
    tangential_damping = np.where(normal_force > 0.0, tangential_damping, 0.0)
    tangential_force = tangential_damping * slip

    force = normal_force[..., None] * normal - tangential_damping[..., None] * tangent_vel
    return ContactSample(
        force=force,
        normal=normal,
        normal_force=normal_force,
        tangential_force=tangential_force,
        normal_damping=normal_damping,
        tangential_damping=tangential_damping,
        in_contact=in_contact,
    )


def _pick(sample: ContactSample, index) -> ContactSample:
    return ContactSample(*(getattr(sample, name)[index] for name in ContactSample._fields))


def _point_jacobian(offset: np.ndarray, joint_jac: Optional[np.ndarray], cols) -> np.ndarray:
    """
    Returns the (robots, 3, 18) map from generalized velocity to point velocity.
    """
    n = offset.shape[0]
    jac = np.zeros((n, 3, NUM_GENERALIZED))
    jac[:, 0, 0] = jac[:, 1, 1] = jac[:, 2, 2] = 1.0
    # omega x r == -[r]x omega
    rx, ry, rz = offset[:, 0], offset[:, 1], offset[:, 2]
    jac[:, 0, 4], jac[:, 0, 5] = rz, -ry
    jac[:, 1, 3], jac[:, 1, 5] = -rz, rx
    jac[:, 2, 3], jac[:, 2, 4] = ry, -rx
    if joint_jac is not None:
        jac[:, :, cols] = joint_jac
    return jac


def _accumulate(
    system: np.ndarray, forces: np.ndarray, jac: np.ndarray, sample: ContactSample
) -> None:
    n = sample.normal
    outer = n[..., :, None] * n[..., None, :]
    eye = np.eye(3)
    damping = (
        sample.normal_damping[..., None, None] * outer
        + sample.tangential_damping[..., None, None] * (eye - outer)
    )
    jac_t = np.swapaxes(jac, -1, -2)
    system += _matmul(jac_t, _matmul(damping, jac))
    forces += (
        jac_t[..., :, 0] * sample.force[..., None, 0]
        + jac_t[..., :, 1] * sample.force[..., None, 1]
        + jac_t[..., :, 2] * sample.force[..., None, 2]
    )


def _world_inertia(rot: np.ndarray, inertia: Sequence[float]) -> np.ndarray:
    scaled = rot * np.asarray(inertia)[None, None, :]
    return _matmul(scaled, np.swapaxes(rot, -1, -2))


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    a @ b over the last two axes, summed in index order.
    """
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for k in range(1, a.shape[-1]):
        out = out + a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def _require_finite(**arrays: np.ndarray) -> None:
    for name, value in arrays.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values in {name}")


def _require_finite_state(state: RobotState, index_offset: int) -> None:
    for f in dataclasses.fields(state):
        value = getattr(state, f.name)
        if value.dtype == bool:
            continue
        bad = ~np.isfinite(value.reshape(value.shape[0], -1)).all(axis=1)
        if bad.any():
            robot = int(np.flatnonzero(bad)[0]) + index_offset
            log.error(f"simulation diverged: robot {robot}, field {f.name}")
            raise SimulationDivergedError(robot, f.name)
