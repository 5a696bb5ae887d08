"""JAX mirrors of the kinematics and synthetic dynamics, for autodiff in the FHOCP.

Only the pieces the optimiser needs are mirrored; the numpy versions in
:mod:`kinematics` and :mod:`dynamics` remain the reference implementation and
the tests check both agree.
"""

from __future__ import annotations

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from . import kinematics as kin  # noqa: E402


def euler_rotation(eta2):
    phi, theta, psi = eta2[0], eta2[1], eta2[2]
    cf, sf = jnp.cos(phi), jnp.sin(phi)
    ct, st = jnp.cos(theta), jnp.sin(theta)
    cp, sp = jnp.cos(psi), jnp.sin(psi)
    return jnp.array([
        [ct * cp, sf * st * cp - sp * cf, st * cf * cp + sf * sp],
        [sp * ct, sf * st * sp + cf * cp, st * sp * cf - sf * cp],
        [-st, sf * ct, cf * ct],
    ])


def euler_rate_transform(eta2):
    phi, theta = eta2[0], eta2[1]
    cf, sf = jnp.cos(phi), jnp.sin(phi)
    ct, st = jnp.cos(theta), jnp.sin(theta)
    return jnp.array([
        [1.0, sf * st / ct, cf * st / ct],
        [0.0, cf, -sf],
        [0.0, sf / ct, cf / ct],
    ])


def euler_from_rotation(R):
    theta = jnp.arctan2(-R[2, 0], jnp.sqrt(R[0, 0] ** 2 + R[1, 0] ** 2))
    return jnp.stack([jnp.arctan2(R[2, 1], R[2, 2]), theta, jnp.arctan2(R[1, 0], R[0, 0])])


def wrap(a):
    return jnp.arctan2(jnp.sin(a), jnp.cos(a))


def pose_rate(pose, zeta):
    """d(pose)/dt for body velocity zeta."""
    eta2 = pose[3:6]
    return jnp.concatenate([
        euler_rotation(eta2) @ zeta[:3],
        euler_rate_transform(eta2) @ zeta[3:6],
        zeta[6:],
    ])


def _dh(d, a, alpha, theta):
    ct, st = jnp.cos(theta), jnp.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return jnp.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def make_ee_in_body(model: kin.UvmsModel):
    rows = [(r.d, r.a, r.alpha, r.theta_offset) for r in model.dh]
    T_0B = jnp.asarray(model.T_0B)
    T_En = jnp.asarray(model.T_En)

    def ee_in_body(q):
        T = T_0B
        for i, (d, a, alpha, off) in enumerate(rows):
            T = T @ _dh(d, a, alpha, q[i] + off)
        return T @ T_En

    return ee_in_body


def make_task_fn(model: kin.UvmsModel):
    """pose -> chi (position and ZYX angles of the end-effector)."""
    ee_in_body = make_ee_in_body(model)

    def task(pose):
        R_B = euler_rotation(pose[3:6])
        T_EB = ee_in_body(pose[6:])
        R_E = R_B @ T_EB[:3, :3]
        return jnp.concatenate([pose[:3] + R_B @ T_EB[:3, 3], euler_from_rotation(R_E)])

    return task


def make_jacobian_fn(model: kin.UvmsModel):
    """pose -> J(pose), built as d(task)/d(pose) times the pose-rate map."""
    task = make_task_fn(model)
    dtask = jax.jacfwd(task)
    dim = 6 + model.n

    def jac(pose):
        return dtask(pose) @ jax.jacfwd(lambda z: pose_rate(pose, z))(jnp.zeros(dim))

    return jac


def make_body_pose_fn(model: kin.UvmsModel, q):
    """chi -> vehicle pose reaching chi with the joints frozen at ``q``."""
    T_EB = jnp.asarray(kin.end_effector_in_body(model, q))
    q = jnp.asarray(q, dtype=float)

    def lift(chi):
        R_B = euler_rotation(chi[3:]) @ T_EB[:3, :3].T
        eta2 = euler_from_rotation(R_B)
        return jnp.concatenate([chi[:3] - R_B @ T_EB[:3, 3], eta2, q])

    return lift


def make_synthetic_drift(model: kin.UvmsModel, coeffs: dict, contact):
    """JAX version of the synthetic-default drift f(chi, zeta) at a given pose."""
    m = jnp.asarray(coeffs["M_diag"])
    dl = jnp.asarray(coeffs["D_lin_diag"])
    dq = jnp.asarray(coeffs["D_quad_diag"])
    gv = jnp.asarray(coeffs["g_vec"])
    K = jnp.asarray(contact.K)
    chi_eq = jnp.asarray(contact.chi_eq)
    jac = make_jacobian_fn(model)

    def skew(v):
        return jnp.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])

    def drift(chi, zeta, pose):
        p1 = m[:3] * zeta[:3]
        p2 = m[3:6] * zeta[3:6]
        Cz = jnp.concatenate([
            -skew(p1) @ zeta[3:6],
            -skew(p1) @ zeta[:3] - skew(p2) @ zeta[3:6],
            jnp.zeros(zeta.size - 6),
        ])
        rhs = Cz + (dl + dq * jnp.abs(zeta)) * zeta + gv + jac(pose).T @ (K @ (chi - chi_eq))
        return -rhs / m

    return drift
