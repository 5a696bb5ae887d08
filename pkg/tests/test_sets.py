"""Set arithmetic against definition-level sampling oracles."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvms_tube_mpc.errors import DimensionMismatch, EmptyResult, UnsupportedCombination
from uvms_tube_mpc.sets import (
    Box,
    NormBall,
    ProductSet,
    error_constraint_set,
    matrix_set_multiply,
    minkowski_sum,
    pontryagin_diff,
    set_from_dict,
    tighten_constraints,
)

TOL = 1e-9
POINTS = 10_000


def sphere(rng, count, dim, radius):
    g = rng.standard_normal((count, dim))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def axis_probes(dim, radius):
    eye = np.eye(dim)
    return radius * np.vstack([eye, -eye])


def minkowski_violations(seed=0):
    rng = np.random.default_rng(seed)
    a, b = NormBall(np.eye(4)[0], 1.0), NormBall(-np.eye(4)[0], 1.0)
    s = minkowski_sum(a, b)
    bad = sum(not s.contains(x + y, TOL) for x, y in zip(a.sample(rng, POINTS), b.sample(rng, POINTS)))
    bx, by = Box([-1, -2, 0], [1, 0, 3]), Box([0, 0, -1], [0.5, 2, 1])
    s2 = minkowski_sum(bx, by)
    bad += sum(not s2.contains(x + y, TOL) for x, y in zip(bx.sample(rng, POINTS), by.sample(rng, POINTS)))
    return bad


def pontryagin_violations(seed=0):
    """x in (box - ball) iff x + s in box for every probe s (sphere samples plus axis tips)."""
    rng = np.random.default_rng(seed)
    box, r = Box.symmetric([2.0] * 3), 0.3
    er = pontryagin_diff(box, NormBall.origin(3, r))
    probes = np.vstack([sphere(rng, 1000, 3, r), axis_probes(3, r)])
    bad = 0
    for x in rng.uniform(-2.2, 2.2, (POINTS, 3)):
        inside = er.contains(x, TOL)
        robust = np.all(np.abs(x + probes) <= 2.0 + TOL)
        bad += inside != robust
    ball = NormBall.origin(3, 1.0)
    erb = pontryagin_diff(ball, NormBall.origin(3, r))
    for x in erb.sample(rng, POINTS):
        bad += not np.all(np.linalg.norm(x + probes, axis=1) <= 1.0 + TOL)
    return bad


def image_violations(seed=0):
    rng = np.random.default_rng(seed)
    k, sigma, jbar, w1, w2 = 3.0, 1.7, 2.2, 0.1, 0.25
    lam = np.diag(np.r_[np.full(6, -k), np.full(10, -k * sigma * jbar)])
    omega = ProductSet((NormBall.origin(6, w1), NormBall.origin(10, w2)))
    img = matrix_set_multiply(lam, omega)
    pts = omega.sample(rng, POINTS)
    bad = sum(not img.contains(lam @ x, TOL) for x in pts)
    full = np.diag(rng.uniform(-2, 2, 5)) + 0.3 * rng.normal(size=(5, 5))
    ball = NormBall(rng.normal(size=5), 0.7)
    img2 = matrix_set_multiply(full, ball)
    bad += sum(not img2.contains(full @ x, TOL) for x in ball.sample(rng, POINTS))
    return bad


def duality_violations(seed=0):
    rng = np.random.default_rng(seed)
    A, B = NormBall(np.ones(4), 2.0), NormBall.origin(4, 0.5)
    back = minkowski_sum(pontryagin_diff(A, B), B)
    pts = back.sample(rng, POINTS)
    return sum(not A.contains(p, TOL) for p in pts)


def test_minkowski_examples():
    s = minkowski_sum(NormBall.origin(3, 1.0), NormBall.origin(3, 0.5))
    assert s.radius == 1.5 and np.allclose(s.center, 0)
    box = Box.symmetric([1.0] * 6)
    same = minkowski_sum(box, NormBall.origin(6, 0.0))
    assert np.allclose(same.lo, box.lo) and np.allclose(same.hi, box.hi)
    s = minkowski_sum(NormBall(np.eye(3)[0], 1), NormBall(-np.eye(3)[0], 1))
    assert s.radius == 2 and np.allclose(s.center, 0)
    with pytest.raises(DimensionMismatch):
        minkowski_sum(NormBall.origin(2, 1), NormBall.origin(3, 1))


def test_minkowski_sampling_oracle():
    assert minkowski_violations() == 0


def test_pontryagin_examples():
    assert pontryagin_diff(NormBall.origin(4, 1.0), NormBall.origin(4, 0.3)).radius == pytest.approx(0.7)
    with pytest.raises(EmptyResult):
        pontryagin_diff(NormBall.origin(4, 0.2), NormBall.origin(4, 0.3))
    b = pontryagin_diff(Box.symmetric([2.0] * 3), NormBall.origin(3, 0.3))
    assert np.allclose(b.hi, 1.7) and np.allclose(b.lo, -1.7)
    with pytest.raises(UnsupportedCombination):
        pontryagin_diff(NormBall.origin(3, 1), Box.symmetric([0.1] * 3))


def test_pontryagin_sampling_oracle():
    assert pontryagin_violations() == 0


def test_matrix_image_examples():
    assert matrix_set_multiply(-2 * np.eye(3), NormBall.origin(3, 0.5)).radius == pytest.approx(1.0)
    assert matrix_set_multiply(np.zeros((3, 3)), NormBall.origin(3, 0.5)).radius == 0
    with pytest.raises(DimensionMismatch):
        matrix_set_multiply(np.eye(2), NormBall.origin(3, 1))


def test_matrix_image_sampling_oracle():
    assert image_violations() == 0


def test_block_image_is_tight():
    """The image radius is attained along the block directions."""
    k, s, jb, w1, w2 = 2.0, 1.5, 1.1, 0.2, 0.3
    lam = np.diag(np.r_[np.full(2, -k), np.full(3, -k * s * jb)])
    img = matrix_set_multiply(lam, ProductSet((NormBall.origin(2, w1), NormBall.origin(3, w2))))
    x = np.r_[w1, 0, w2, 0, 0]
    assert np.linalg.norm(lam @ x) == pytest.approx(img.radius)


def test_duality_sampling():
    assert duality_violations() == 0


@given(st.floats(0.01, 3), st.floats(0, 1), st.integers(1, 6), st.integers(0, 99))
def test_duality_property(R, frac, dim, seed):
    rng = np.random.default_rng(seed)
    A, B = NormBall(rng.normal(size=dim), R), NormBall.origin(dim, frac * R)
    back = minkowski_sum(pontryagin_diff(A, B), B)
    assert all(A.contains(p, 1e-9) for p in back.sample(rng, 200))


@given(st.lists(st.floats(0.5, 3), min_size=1, max_size=5), st.floats(0, 0.49))
def test_box_erosion_is_exact(half, r):
    box = Box.symmetric(half)
    er = pontryagin_diff(box, NormBall.origin(len(half), r))
    assert np.allclose(er.hi, np.array(half) - r)


def test_tighten_examples():
    E, Z, U = NormBall.origin(6, 1.0), NormBall.origin(10, 2.0), NormBall.origin(10, 2.0)
    zero = SimpleNamespace(omega1_radius=0.0, omega2_radius=0.0, k=5.0, sigma=2.0, J_bar=3.0)
    out = tighten_constraints(E, Z, U, zero)
    assert [s.radius for s in out] == [1.0, 2.0, 2.0]
    tube = SimpleNamespace(omega1_radius=0.3, omega2_radius=0.1, k=1.0, sigma=1.0, J_bar=1.0)
    assert tighten_constraints(E, Z, U, tube)[0].radius == pytest.approx(0.7)
    tube = SimpleNamespace(omega1_radius=0.1, omega2_radius=0.1, k=1.0, sigma=1.0, J_bar=1.0)
    E_bar, Z_bar, U_bar = tighten_constraints(E, Z, U, tube)
    assert U_bar.radius == pytest.approx(1.8)
    # the bound covers sampled images k w1 e (lifted) + k sigma Jbar w2 z
    rng = np.random.default_rng(0)
    for _ in range(1000):
        e, z = NormBall.origin(6, 0.1).sample(rng, 1)[0], NormBall.origin(10, 0.1).sample(rng, 1)[0]
        assert np.linalg.norm(np.r_[e, np.zeros(4)] + z) <= 2 - U_bar.radius + 1e-12


def test_tighten_empty_when_tube_too_big():
    tube = SimpleNamespace(omega1_radius=0.1, omega2_radius=0.1, k=10.0, sigma=1.0, J_bar=1.0)
    with pytest.raises(EmptyResult):
        tighten_constraints(NormBall.origin(6, 1), NormBall.origin(10, 1), NormBall.origin(10, 1), tube)


def test_error_constraint_set():
    X = NormBall(np.ones(6), 0.5)
    assert np.allclose(error_constraint_set(X, np.zeros(6)).center, X.center)
    chi_des = np.arange(6.0)
    assert np.allclose(error_constraint_set(X, chi_des).center, np.ones(6) - chi_des)
    box = Box(-np.ones(6), 2 * np.ones(6))
    E = error_constraint_set(box, chi_des)
    rng = np.random.default_rng(1)
    for x in box.sample(rng, 1000):
        assert E.contains(x - chi_des, 1e-12)


def test_set_documents_roundtrip():
    for s in (NormBall(np.ones(3), 2.0), Box([-1, 0], [1, 2]),
              ProductSet((NormBall.origin(3, 2), NormBall.origin(4, 1)))):
        back = set_from_dict(s.to_dict())
        rng = np.random.default_rng(0)
        assert all(back.contains(p, 1e-12) == s.contains(p, 1e-12) for p in rng.normal(size=(200, s.dim)) * 2)


def test_set_invariants():
    with pytest.raises(ValueError):
        NormBall.origin(3, -1.0)
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    assert NormBall(np.ones(2), 0.0).contains(np.ones(2))
    assert Box([-1, 2], [1, 4]).contains([0, 3])
