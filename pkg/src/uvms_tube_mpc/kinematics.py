"""Frames, Euler-angle transforms, DH chains and the task Jacobian of a UVMS.

Conventions
-----------
* Vehicle orientation ``eta2 = (phi, theta, psi)`` follows SNAME / ZYX, so the
  body-to-inertial rotation is ``Rz(psi) @ Ry(theta) @ Rx(phi)``.
* Poses are stacked as ``pose = [eta1, eta2, q]`` (length ``6 + n``) and body
  velocities as ``zeta = [nu1, nu2, qdot]`` (length ``6 + n``).
* The task state is ``chi = [p, o]`` with ``p`` the end-effector position and
  ``o`` its ZYX Euler angles, both relative to the inertial frame.
* Homogeneous transforms are plain 4x4 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GimbalLock, SingularOrientation

SINGULARITY_TOL = 1e-6
ORTHONORMAL_TOL = 1e-9


class EulerAngles(NamedTuple):
    phi: float
    theta: float
    psi: float


class TaskState(NamedTuple):
    p: np.ndarray
    o: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.o])


@dataclass(frozen=True)
class DhRow:
    """One link of a standard (distal) DH table.

    ``theta_offset`` is added to the joint variable before building the
    transform, for tables whose zero configuration differs from ``q = 0``.
    """

    d: float
    a: float
    alpha: float
    theta_offset: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.d, self.a, self.alpha, self.theta_offset])):
            raise ValueError("DH entries must be finite")


@dataclass(frozen=True)
class UvmsModel:
    dh: tuple[DhRow, ...]
    T_0B: np.ndarray = field(default_factory=lambda: np.eye(4))
    T_En: np.ndarray = field(default_factory=lambda: np.eye(4))
    joint_limits: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        object.__setattr__(self, "dh", tuple(self.dh))
        limits = np.asarray(self.joint_limits, dtype=float).reshape(-1, 2)
        if limits.shape[0] != len(self.dh):
            raise ValueError(
                f"expected {len(self.dh)} joint limit intervals, got {limits.shape[0]}"
            )
        if np.any(limits[:, 0] > limits[:, 1]):
            raise ValueError("joint limit intervals must be nonempty (lo <= hi)")
        object.__setattr__(self, "joint_limits", limits)
        for name in ("T_0B", "T_En"):
            T = np.asarray(getattr(self, name), dtype=float)
            check_transform(T)
            object.__setattr__(self, name, T)

    @property
    def n(self) -> int:
        return len(self.dh)

    def check_joints(self, q: Sequence[float], tol: float = 0.0) -> None:
        """Raise ``ValueError`` if any joint is outside its limit interval."""
        q = np.asarray(q, dtype=float)
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        bad = np.flatnonzero((q < lo - tol) | (q > hi + tol))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"joint q{i + 1} = {q[i]:.4g} outside [{lo[i]:.4g}, {hi[i]:.4g}]"
            )


@dataclass(frozen=True)
class ConfigurationState:
    eta1: np.ndarray
    eta2: np.ndarray
    q: np.ndarray
    nu1: np.ndarray
    nu2: np.ndarray
    qdot: np.ndarray

    @property
    def pose(self) -> np.ndarray:
        return np.concatenate([self.eta1, self.eta2, self.q])

    @property
    def zeta(self) -> np.ndarray:
        return np.concatenate([self.nu1, self.nu2, self.qdot])

    @classmethod
    def from_vectors(cls, pose, zeta) -> "ConfigurationState":
        pose = np.asarray(pose, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        if pose.shape != zeta.shape or pose.size < 6:
            raise ValueError("pose and zeta must both have length 6 + n")
        return cls(pose[:3], pose[3:6], pose[6:], zeta[:3], zeta[3:6], zeta[6:])


# --- elementary transforms ---------------------------------------------------

def skew(v) -> np.ndarray:
    """Matrix S(v) with S(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_transform(rotation=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def transform_from_rpy_xyz(rpy=(0.0, 0.0, 0.0), xyz=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Transform whose rotation is ZYX Euler ``rpy`` and translation ``xyz``."""
    return make_transform(euler_rotation(rpy), xyz)


def check_transform(T: np.ndarray, tol: float = ORTHONORMAL_TOL) -> None:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise ValueError(f"transform must be 4x4, got {T.shape}")
    R = T[:3, :3]
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or np.linalg.det(R) < 0:
        raise ValueError("transform rotation is not a proper orthonormal matrix")
    if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("transform bottom row must be [0, 0, 0, 1]")


# --- vehicle kinematics ------------------------------------------------------

def euler_rotation(eta2) -> np.ndarray:
    """Body-to-inertial rotation for ZYX Euler angles (phi, theta, psi)."""
    phi, theta, psi = eta2
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array(
        [
            [ct * cp, sf * st * cp - sp * cf, st * cf * cp + sf * sp],
            [sp * ct, sf * st * sp + cf * cp, st * sp * cf - sf * cp],
            [-st, sf * ct, cf * ct],
        ]
    )


def euler_rate_transform(eta2, tol: float = SINGULARITY_TOL) -> np.ndarray:
    """Map from body angular velocity to ZYX Euler-angle rates."""
    phi, theta, _ = eta2
    ct = np.cos(theta)
    if abs(ct) <= tol:
        raise SingularOrientation(f"pitch {theta:.6g} rad is at the +-pi/2 singularity")
    cf, sf, st = np.cos(phi), np.sin(phi), np.sin(theta)
    return np.array(
        [
            [1.0, sf * st / ct, cf * st / ct],
            [0.0, cf, -sf],
            [0.0, sf / ct, cf / ct],
        ]
    )


def euler_from_rotation(R: np.ndarray, tol: float = SINGULARITY_TOL) -> np.ndarray:
    """Inverse of :func:`euler_rotation` on the open pitch interval."""
    s = -R[2, 0]
    c = np.hypot(R[0, 0], R[1, 0])
    if c <= tol:
        raise GimbalLock("pitch of the rotation is within tolerance of +-pi/2")
    theta = np.arctan2(s, c)
    phi = np.arctan2(R[2, 1], R[2, 2])
    psi = np.arctan2(R[1, 0], R[0, 0])
    return np.array([phi, theta, psi])


def pose_rate_matrix(pose) -> np.ndarray:
    """Block-diagonal map ``d(pose)/dt = pose_rate_matrix(pose) @ zeta``."""
    pose = np.asarray(pose, dtype=float)
    n = pose.size - 6
    M = np.eye(6 + n)
    M[:3, :3] = euler_rotation(pose[3:6])
    M[3:6, 3:6] = euler_rate_transform(pose[3:6])
    return M


# --- manipulator chain -------------------------------------------------------

def dh_transform(row: DhRow, q_i: float) -> np.ndarray:
    """Standard DH link transform Rz(theta) Tz(d) Tx(a) Rx(alpha)."""
    theta = q_i + row.theta_offset
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, row.a * ct],
            [st, ct * ca, -ct * sa, row.a * st],
            [0.0, sa, ca, row.d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def vehicle_transform(eta1, eta2) -> np.ndarray:
    return make_transform(euler_rotation(eta2), eta1)


def _split_pose(model: UvmsModel, pose):
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (6 + model.n,):
        raise ValueError(f"pose must have length {6 + model.n}, got {pose.shape}")
    return pose[:3], pose[3:6], pose[6:]


def _chain(model: UvmsModel, q):
    """Frames 0..n expressed in frame 0, followed by the end-effector frame."""
    frames = [np.eye(4)]
    for row, qi in zip(model.dh, q):
        frames.append(frames[-1] @ dh_transform(row, qi))
    return frames, frames[-1] @ model.T_En


def end_effector_in_body(model: UvmsModel, q) -> np.ndarray:
    """Transform of the end-effector frame relative to the vehicle body frame."""
    _, T_E0 = _chain(model, np.asarray(q, dtype=float))
    return model.T_0B @ T_E0


def forward_transform(model: UvmsModel, pose) -> np.ndarray:
    eta1, eta2, q = _split_pose(model, pose)
    return vehicle_transform(eta1, eta2) @ end_effector_in_body(model, q)


def forward_kinematics(model: UvmsModel, pose) -> TaskState:
    T = forward_transform(model, pose)
    return TaskState(T[:3, 3].copy(), euler_from_rotation(T[:3, :3]))


def task_vector(model: UvmsModel, pose) -> np.ndarray:
    """``forward_kinematics`` stacked into the 6-vector chi."""
    return forward_kinematics(model, pose).as_vector()


def manipulator_jacobian(model: UvmsModel, q):
    """Geometric Jacobians (linear, angular) of the end-effector in frame 0."""
    frames, T_E0 = _chain(model, np.asarray(q, dtype=float))
    p_e = T_E0[:3, 3]
    n = model.n
    J_lin = np.zeros((3, n))
    J_ang = np.zeros((3, n))
    for i in range(n):
        z = frames[i][:3, 2]
        J_lin[:, i] = np.cross(z, p_e - frames[i][:3, 3])
        J_ang[:, i] = z
    return J_lin, J_ang


def task_jacobian(model: UvmsModel, pose) -> np.ndarray:
    """Jacobian ``J`` with ``d(chi)/dt = J(pose) @ zeta``.

    The position rows are ``[R_B | -R_B S(p_ee) | R_0 J_lin]`` and the
    orientation rows ``[0 | T(o) R_E^T R_B | T(o) R_E^T R_0 J_ang]`` where
    ``T(o)`` is the Euler-rate transform at the end-effector orientation.
    """
    eta1, eta2, q = _split_pose(model, pose)
    n = model.n
    R_B = euler_rotation(eta2)
    T_EB = end_effector_in_body(model, q)
    p_ee = T_EB[:3, 3]
    R_E = R_B @ T_EB[:3, :3]
    R_0 = R_B @ model.T_0B[:3, :3]
    Tor = euler_rate_transform(euler_from_rotation(R_E))
    J_lin, J_ang = manipulator_jacobian(model, q)

    J = np.zeros((6, 6 + n))
    J[:3, :3] = R_B
    J[:3, 3:6] = -R_B @ skew(p_ee)
    J[:3, 6:] = R_0 @ J_lin
    A = Tor @ R_E.T
    J[3:, 3:6] = A @ R_B
    J[3:, 6:] = A @ R_0 @ J_ang
    return J


def jacobian_time_derivative(model: UvmsModel, pose, zeta, step: float = 1e-6) -> np.ndarray:
    """Central difference of ``task_jacobian`` along the pose flow induced by zeta."""
    pose = np.asarray(pose, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if not np.any(zeta):
        return np.zeros((6, 6 + model.n))
    dpose = pose_rate_matrix(pose) @ zeta
    return (
        task_jacobian(model, pose + step * dpose) - task_jacobian(model, pose - step * dpose)
    ) / (2.0 * step)


def body_pose_for_task(model: UvmsModel, chi, q) -> np.ndarray:
    """Vehicle pose that puts the end-effector at ``chi`` for joint angles ``q``."""
    chi = np.asarray(chi, dtype=float)
    q = np.asarray(q, dtype=float)
    T_EB = end_effector_in_body(model, q)
    R_B = euler_rotation(chi[3:]) @ T_EB[:3, :3].T
    eta2 = euler_from_rotation(R_B)
    eta1 = chi[:3] - R_B @ T_EB[:3, 3]
    return np.concatenate([eta1, eta2, q])


def load_model(doc: dict) -> UvmsModel:
    """Build a model from a parsed model document.

    Expected keys: ``n``, ``dh`` (list of ``{d, a, alpha}``), ``T_0B`` and
    ``T_En`` (each ``{rpy, xyz}``) and ``joint_limits`` (list of ``[lo, hi]``).
    """
    rows = [DhRow(float(r["d"]), float(r["a"]), float(r["alpha"]), float(r.get("theta_offset", 0.0)))
            for r in doc.get("dh", [])]
    n = int(doc.get("n", len(rows)))
    if n != len(rows):
        raise ValueError(f"model declares n={n} but lists {len(rows)} DH rows")

    def tf(key):
        spec = doc.get(key) or {}
        return transform_from_rpy_xyz(spec.get("rpy", (0, 0, 0)), spec.get("xyz", (0, 0, 0)))

    return UvmsModel(
        dh=tuple(rows),
        T_0B=tf("T_0B"),
        T_En=tf("T_En"),
        joint_limits=np.asarray(doc.get("joint_limits", []), dtype=float).reshape(-1, 2),
    )
