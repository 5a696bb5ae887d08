"""Ancillary feedback, composite input and deviation bookkeeping."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvms_tube_mpc.bounds import JacobianBounds, LipschitzBounds, tube_gains
from uvms_tube_mpc.dynamics import PlantState
from uvms_tube_mpc.errors import DimensionMismatch, InputConstraintViolation
from uvms_tube_mpc.feedback import (
    ancillary_feedback,
    backstepping_error,
    composite_input,
    deviation_update,
    helper_b,
    helper_l,
    kinematic_feedback,
)
from uvms_tube_mpc.sets import NormBall, ProductSet

N = 4
PAD = np.hstack([np.eye(6), np.zeros((6, N))])


def state(chi, zeta):
    return PlantState(0.0, np.asarray(chi, float), np.asarray(zeta, float), np.zeros(6 + N))


def test_zero_on_nominal():
    rng = np.random.default_rng(0)
    e, z = rng.normal(size=6), rng.normal(size=10)
    tube = SimpleNamespace(k=3.0, sigma=2.0)
    assert np.all(ancillary_feedback(e, e, z, z, rng.normal(size=(6, 10)), tube) == 0)


def test_hand_evaluation():
    tube = SimpleNamespace(k=1.0, sigma=1.0)
    kappa = ancillary_feedback(np.eye(6)[0], np.zeros(6), np.zeros(10), np.zeros(10), PAD, tube)
    assert np.allclose(kappa, -np.eye(10)[0])


def test_norm_bound_triangle_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        J = rng.normal(size=(6, 10))
        tube = SimpleNamespace(k=rng.uniform(0.1, 5), sigma=rng.uniform(0.1, 5))
        fe, fz = 0.3 * rng.normal(size=6), rng.normal(size=10)
        kappa = ancillary_feedback(fe, np.zeros(6), fz, np.zeros(10), J, tube)
        r = backstepping_error(fe, fz, J, tube.sigma)
        bound = tube.k * (tube.sigma * np.linalg.norm(J, 2) * np.linalg.norm(fe) + np.linalg.norm(fz))
        assert np.linalg.norm(kappa) <= tube.k * np.linalg.norm(r) * (1 + 1e-12) <= bound * (1 + 1e-12)


def test_dimension_checks():
    tube = SimpleNamespace(k=1.0, sigma=1.0)
    with pytest.raises(DimensionMismatch):
        ancillary_feedback(np.zeros(6), np.zeros(6), np.zeros(10), np.zeros(10), np.eye(6), tube)
    with pytest.raises(DimensionMismatch):
        ancillary_feedback(np.zeros(6), np.zeros(5), np.zeros(10), np.zeros(10), PAD, tube)
    with pytest.raises(DimensionMismatch):
        kinematic_feedback(np.zeros(6), np.zeros(6), np.eye(5), 1.0)


def test_kinematic_feedback_is_sigma_transpose():
    rng = np.random.default_rng(2)
    J = rng.normal(size=(6, 10))
    chi, chib = 0.1 * rng.normal(size=6), 0.1 * rng.normal(size=6)
    assert np.allclose(kinematic_feedback(chi, chib, J, 2.5), -2.5 * J.T @ (chi - chib))


def test_composite_input():
    U = ProductSet((NormBall.origin(3, 2), NormBall.origin(3, 2), NormBall.origin(4, 2)))
    ubar = np.r_[1.0, 0, 0, 0, 1, 0, 0, 0, 0, 1]
    u, margin = composite_input(ubar, np.zeros(10), U)
    assert np.array_equal(u, ubar) and margin == pytest.approx(1.0)
    kappa = 0.5 * np.ones(10) / np.sqrt(10)
    u, _ = composite_input(np.zeros(10), kappa, U)
    assert np.array_equal(u, kappa)
    with pytest.raises(InputConstraintViolation) as info:
        composite_input(ubar, np.r_[1.5, np.zeros(9)], U)
    assert info.value.margin == pytest.approx(-0.5)
    with pytest.raises(DimensionMismatch):
        composite_input(np.zeros(9), np.zeros(9), U)


def test_deviation_examples():
    rng = np.random.default_rng(3)
    chi_des = rng.normal(size=6) * 0.1
    s = state(rng.normal(size=6) * 0.3, rng.normal(size=10))
    dev = deviation_update(s, s, chi_des, PAD, SimpleNamespace(sigma=2.0))
    assert not dev.frak_e.any() and not dev.frak_z.any() and not dev.frak_r.any()
    a, b = state(np.full(6, 0.2), np.ones(10)), state(np.zeros(6), np.zeros(10))
    dev = deviation_update(a, b, chi_des, PAD, SimpleNamespace(sigma=0.0))
    assert np.array_equal(dev.frak_r, dev.frak_z)


@given(st.integers(0, 10_000), st.floats(0, 5))
def test_deviation_identities(seed, sigma):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(6, 10))
    a = state(0.4 * rng.normal(size=6), rng.normal(size=10))
    b = state(0.4 * rng.normal(size=6), rng.normal(size=10))
    dev = deviation_update(a, b, rng.normal(size=6) * 0.1, J, SimpleNamespace(sigma=sigma))
    assert np.allclose(dev.frak_r, dev.frak_z + sigma * J.T @ dev.frak_e, atol=1e-12)
    assert np.linalg.norm(dev.frak_y) ** 2 == pytest.approx(
        np.linalg.norm(dev.frak_e) ** 2 + np.linalg.norm(dev.frak_r) ** 2, rel=1e-12)


def lyapunov_rate(J, drift, tube, fe, fz, zbar, d):
    """d/dt of |y|^2/2 for a constant-Jacobian plant c = J zeta under kappa."""
    r = backstepping_error(fe, fz, J, tube.sigma)
    kappa = ancillary_feedback(fe, np.zeros(6), fz, np.zeros(fz.size), J, tube)
    e_dot = J @ fz
    z_dot = drift(zbar + fz) - drift(zbar) + kappa + d
    r_dot = z_dot + tube.sigma * J.T @ e_dot
    return fe @ e_dot + r @ r_dot


@given(st.integers(0, 10_000))
def test_lyapunov_decrease_outside_ball(seed):
    rng = np.random.default_rng(seed)
    U, _, Vt = np.linalg.svd(rng.normal(size=(6, 10)), full_matrices=False)
    s = rng.uniform(0.5, 2.0, 6)
    J = U @ np.diag(s) @ Vt
    # drag-like drift with Lipschitz constant max|D|
    D = rng.uniform(0.1, 1.0, 10)
    drift = lambda z: -D * z - 0.1 * np.tanh(z)
    L2 = D.max() + 0.1
    jb = JacobianBounds(float(np.linalg.eigvalsh(J @ J.T).min()), float(np.linalg.norm(J, 2)), 0.0)
    tube = tube_gains(jb, LipschitzBounds(0.0, 0.0, L2), d_tilde=0.05, sigma_under=1.0)
    threshold = tube.d_tilde / tube.alpha_min
    for _ in range(50):
        fe, fz = rng.normal(size=6), rng.normal(size=10)
        y = np.r_[fe, backstepping_error(fe, fz, J, tube.sigma)]
        scale = threshold * rng.uniform(1.0 + 1e-6, 5.0) / np.linalg.norm(y)
        fe, fz = scale * fe, scale * fz
        r = backstepping_error(fe, fz, J, tube.sigma)
        d = tube.d_tilde * (r / np.linalg.norm(r) if rng.random() < 0.5 else
                            NormBall.origin(10, 1.0).sample(rng, 1)[0])
        assert lyapunov_rate(J, drift, tube, fe, fz, rng.normal(size=10), d) < 0


def test_helper_bounds():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(6, 6))
    LA = np.linalg.norm(A, 2)
    c = lambda chi, z: A @ chi + z[:6]
    B = rng.normal(size=(10, 10))
    f = lambda chi, z: np.r_[np.sin(chi), np.zeros(4)] + np.tanh(B @ z)
    L = max(1.0, np.linalg.norm(B, 2))
    for _ in range(1000):
        chi, chib = rng.normal(size=6), rng.normal(size=6)
        z, zb = rng.normal(size=10), rng.normal(size=10)
        fe, fz = chi - chib, z - zb
        assert np.linalg.norm(helper_b(c, chi, chib, zb)) <= LA * np.linalg.norm(fe) * (1 + 1e-12)
        assert np.linalg.norm(helper_l(f, chi, z, chib, zb)) <= L * (np.linalg.norm(fe) + np.linalg.norm(fz)) * (1 + 1e-12)
