"""Bound estimation and tube gain synthesis."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvms_tube_mpc import kinematics as kin
from uvms_tube_mpc.bounds import (
    JacobianBounds,
    LipschitzBounds,
    bounds_from_report,
    bounds_report,
    estimate_jacobian_bounds,
    estimate_lipschitz_fn,
    format_radius_diagnostic,
    kinematic_tube,
    printed_radius_diagnostic,
    tighten_kinematic_inputs,
    tube_gains,
)
from uvms_tube_mpc.errors import InfeasibleGains
from uvms_tube_mpc.sets import Box, NormBall, ProductSet

UNIT = JacobianBounds(1.0, 1.0, 0.0)
FLAT = LipschitzBounds(0.0)


def reference_gains(Ju, Jb, Jt, Lc, L, su, d, rm=2.0, km=2.0):
    """Independent straight-line evaluation of the gain relations."""
    sigma = (Lc + su) / Ju
    l1 = L + Jb + sigma * (Lc + Jt)
    l2 = L + sigma * Jb * Jb
    rho = rm * l1 / (4 * su)
    k = km * (rho * l1 + l2)
    a = min(su - l1 / (4 * rho), k - rho * l1 - l2)
    return dict(sigma=sigma, Lambda1=l1, Lambda2=l2, rho=rho, k=k,
                omega1_radius=d / a, omega2_radius=2 * d / (Jb * a))


def test_trivial_gains_collapse():
    tp = tube_gains(UNIT, FLAT, d_tilde=0.0, sigma_under=1.0)
    assert tp.sigma == 1.0
    assert tp.Lambda1 == 1.0  # L + J_bar + sigma (L_c + J_tilde)
    assert tp.Lambda2 == 1.0
    assert tp.omega1_radius == 0.0 and tp.omega2_radius == 0.0


def test_radii_linear_in_disturbance():
    a = tube_gains(UNIT, FLAT, 0.1)
    b = tube_gains(UNIT, FLAT, 0.2)
    assert b.omega1_radius == pytest.approx(2 * a.omega1_radius, rel=1e-14)
    assert b.omega2_radius == pytest.approx(2 * a.omega2_radius, rel=1e-14)


def test_girona_style_gains_match_reference():
    jb = JacobianBounds(0.5095, 3.38, 16.7)
    lb = LipschitzBounds(2 * math.sqrt(2), 4.0, 7.0)
    tp = tube_gains(jb, lb, 0.2, 1.0)
    assert tp.alpha1 > 0 and tp.alpha2 > 0
    ref = reference_gains(0.5095, 3.38, 16.7, 2 * math.sqrt(2), 7.0, 1.0, 0.2)
    for key, val in ref.items():
        assert getattr(tp, key) == pytest.approx(val, rel=1e-12)


@given(st.floats(0.05, 2), st.floats(0.5, 5), st.floats(0, 20), st.floats(0, 5), st.floats(0, 5),
       st.floats(0.1, 5), st.floats(0, 1), st.floats(1.01, 4), st.floats(1.01, 4))
def test_gain_inequalities_have_slack(Ju, Jb, Jt, Lc, L, su, d, rm, km):
    Ju = min(Ju, Jb * Jb)
    tp = tube_gains(JacobianBounds(Ju, Jb, Jt), LipschitzBounds(Lc, L, 0.0), d, su, rm, km)
    tp.check()
    assert tp.rho - tp.Lambda1 / (4 * su) >= (rm - 1) * tp.Lambda1 / (4 * su) * (1 - 1e-12)
    assert tp.k - (tp.rho * tp.Lambda1 + tp.Lambda2) >= (km - 1) * (tp.rho * tp.Lambda1 + tp.Lambda2) * (1 - 1e-12)


@given(st.floats(0, 1), st.floats(0, 1))
def test_radii_monotone_in_disturbance(d1, d2):
    lo, hi = sorted((d1, d2))
    a, b = tube_gains(UNIT, FLAT, lo), tube_gains(UNIT, FLAT, hi)
    assert b.omega1_radius >= a.omega1_radius and b.omega2_radius >= a.omega2_radius


@pytest.mark.parametrize("kw", [dict(sigma_under=0.0), dict(rho_margin=1.0), dict(k_margin=0.5),
                                dict(d_tilde=-1.0)])
def test_gain_preconditions(kw):
    args = dict(d_tilde=0.1, sigma_under=1.0, rho_margin=2.0, k_margin=2.0) | kw
    with pytest.raises(InfeasibleGains):
        tube_gains(UNIT, FLAT, **args)


def test_overflow_guard():
    with pytest.raises(InfeasibleGains):
        tube_gains(JacobianBounds(1e-300, 1e300, 1e300), LipschitzBounds(1e300), 0.1)


def test_vehicle_only_norm_bound(bare):
    box = Box([-5, -5, -5, 0, 0, 0], [5, 5, 5, 0, 0, 0])
    jb = estimate_jacobian_bounds(bare, box, samples=1000, seed=0)
    assert jb.J_bar == pytest.approx(1.0, abs=1e-9)
    assert jb.J_under == pytest.approx(1.0, abs=1e-9)
    # pure translation leaves the Jacobian constant
    still = estimate_jacobian_bounds(bare, box, samples=1000, seed=0,
                                     zeta_set=Box([-1, -1, -1, 0, 0, 0], [1, 1, 1, 0, 0, 0]))
    assert still.J_tilde == pytest.approx(0.0, abs=1e-6)


def test_jacobian_bounds_bracket_samples(girona):
    from uvms_tube_mpc.scenario import pose_box
    box = pose_box(girona, 1.0, 0.5)
    jb = estimate_jacobian_bounds(girona, box, samples=1000, seed=3)
    rng = np.random.default_rng(11)
    for p in box.sample(rng, 200):
        J = kin.task_jacobian(girona, p)
        Jp = J @ J.T
        assert np.linalg.norm(J, 2) <= jb.J_bar * (1 + 1e-9)
        assert np.linalg.eigvalsh(0.5 * (Jp + Jp.T)).min() >= jb.J_under * (1 - 1e-9) - 1e-9
        assert jb.J_under <= jb.J_bar ** 2


def test_jacobian_bounds_monotone_in_samples(girona):
    from uvms_tube_mpc.scenario import pose_box
    box = pose_box(girona, 1.0, 0.5)
    few = estimate_jacobian_bounds(girona, box, samples=1000, seed=5, polish=False)
    many = estimate_jacobian_bounds(girona, box, samples=3000, seed=5, polish=False)
    assert many.J_under <= few.J_under and many.J_bar >= few.J_bar and many.J_tilde >= few.J_tilde


def test_lipschitz_of_linear_map():
    rng = np.random.default_rng(0)
    U, _, Vt = np.linalg.svd(rng.normal(size=(6, 6)))
    A = U @ np.diag([3.0, 2.0, 1.5, 1.0, 0.5, 0.1]) @ Vt
    L = estimate_lipschitz_fn(lambda chi, z: A @ chi, Box.symmetric([1.0] * 6), NormBall.origin(10, 1), 2000)
    assert L == pytest.approx(3.0, rel=0.02)
    assert L <= 3.0 * (1 + 1e-12)


def test_lipschitz_of_constant_map():
    L = estimate_lipschitz_fn(lambda chi, z: np.ones(6), Box.symmetric([1.0] * 6), NormBall.origin(4, 1), 1000)
    assert L == 0.0


def test_report_roundtrip():
    jb = JacobianBounds(0.4, 3.0, 10.0, 500, 7, (1.0, 2.0, 2.5))
    lb = LipschitzBounds(2.0, 1.0, 4.0, 500, 7)
    assert bounds_report(jb, lb)["L"] == 4.0
    jb2, lb2 = bounds_from_report(bounds_report(jb, lb))
    assert jb2 == jb and lb2 == lb


def test_bounds_consistency_invariant():
    with pytest.raises(ValueError):
        JacobianBounds(5.0, 2.0, 0.0)


def test_kinematic_tube_relations():
    jb = JacobianBounds(0.41108, 3.37987, 16.69, block_norms=(1.0, 2.2202, 2.6427))
    tube = kinematic_tube(jb, LipschitzBounds(2 * math.sqrt(2)), 0.2, 10.0)
    assert tube.sigma == pytest.approx((2 * math.sqrt(2) + 10) / 0.41108)
    assert tube.omega1_radius == pytest.approx(0.02)
    assert tube.omega2_radius == pytest.approx(tube.sigma * 3.37987 * 0.02)
    U = ProductSet(tuple(NormBall.origin(3 if i < 2 else 4, 2.0) for i in range(3)))
    U_bar = tighten_kinematic_inputs(U, tube)
    assert [p.radius for p in U_bar.parts] == pytest.approx([2 - r for r in tube.input_radii])


def test_kinematic_tube_decrease_rate():
    """sigma J_under - L_c equals sigma_under, so the radius is w/sigma_under."""
    jb = JacobianBounds(0.5, 2.0, 0.0)
    for su in (0.5, 1.0, 3.0):
        t = kinematic_tube(jb, LipschitzBounds(1.3), 0.4, su)
        assert t.sigma * 0.5 - 1.3 == pytest.approx(su)
        assert t.omega1_radius == pytest.approx(0.4 / su)


def test_kinematic_tube_rejects_bad_inputs():
    with pytest.raises(InfeasibleGains):
        kinematic_tube(UNIT, FLAT, 0.1, 0.0)
    with pytest.raises(InfeasibleGains):
        kinematic_tube(JacobianBounds(0.0, 1.0, 0.0), FLAT, 0.1, 1.0)


def test_radius_diagnostic():
    d = printed_radius_diagnostic()
    assert d["printed_radius"] == pytest.approx(0.2 / (3.084 * 0.5095 + 2 * math.sqrt(2)))
    assert d["printed_radius"] == pytest.approx(0.0455, abs=5e-4)
    assert not d["derived_feasible"] and d["derived_denominator"] < 0
    assert not d["consistent_with_claim"]
    text = format_radius_diagnostic(d)
    assert "infeasible" in text and "0.0455" in text
