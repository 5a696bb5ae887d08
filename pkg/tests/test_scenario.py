"""Closed-loop scenario, logging, Monte-Carlo bookkeeping and config files."""

import math
from dataclasses import replace

import numpy as np
import pytest

from uvms_tube_mpc import dynamics as dyn
from uvms_tube_mpc import kinematics as kin
from uvms_tube_mpc import scenario as sc
from uvms_tube_mpc.errors import ConfigError

ZERO = {"kind": "zero"}


def short(cfg, **kw):
    return replace(cfg, **({"duration": 1.0, "disturbance": ZERO} | kw))


# --- model and configuration ----------------------------------------------------------

def test_girona_model(girona):
    assert girona.n == 4
    assert (girona.dh[0].d, girona.dh[0].a, girona.dh[0].alpha) == (0.0, 0.1, -math.pi / 2)
    assert (girona.dh[3].d, girona.dh[3].a, girona.dh[3].alpha) == (0.29, 0.0, 0.0)
    assert np.allclose(girona.T_0B[:3, 3], [0.53, 0, 0.36]) and np.allclose(girona.T_0B[:3, :3], np.eye(3))
    assert np.allclose(girona.T_En[:3, :3], kin.rot_y(-math.pi / 2))
    assert np.allclose(girona.joint_limits, [[-0.52, 1.46], [-0.1471, 1.3114], [-1.297, 0.73], [-3.14, 3.14]])
    with pytest.raises(ValueError):
        girona.check_joints([0.0, 1.4, 0.0, 0.0])


def test_girona_defaults(girona_cfg):
    assert np.allclose(girona_cfg.chi0, [-1.0, 1.3, -1.0, 0, -math.pi / 8, math.pi / 12])
    assert np.allclose(girona_cfg.chi_des, [0, 0, 0, math.pi / 3, math.pi / 10, 0])
    assert (girona_cfg.T, girona_cfg.h, girona_cfg.steps) == (0.7, 0.1, 60)
    assert girona_cfg.Q == girona_cfg.P == girona_cfg.R == 0.5


def test_shipped_config_matches_defaults(girona_cfg):
    cfg = sc.load_config(sc.shipped_config_path())
    for key in ("chi0", "chi_des", "q0", "F_des", "input_radii"):
        assert np.allclose(getattr(cfg, key), getattr(girona_cfg, key))
    for key in ("w_tilde", "T", "h", "duration", "sigma_under", "Q", "P", "R"):
        assert getattr(cfg, key) == getattr(girona_cfg, key)
    assert cfg.bounds == pytest.approx(girona_cfg.bounds)


def test_config_validation():
    with pytest.raises(ConfigError):
        sc.ScenarioConfig(level="acoustic")
    with pytest.raises(ConfigError):
        sc.ScenarioConfig(duration=0.5)
    with pytest.raises(ConfigError):
        sc.ScenarioConfig(duration=1.05)
    with pytest.raises(ConfigError):
        sc.ScenarioConfig(chi0=[0, 0, 0])
    with pytest.raises(ConfigError):
        sc.ScenarioConfig(model={"n": 1, "dh": []})
    with pytest.raises(ConfigError):
        sc.synthesize(sc.girona_config(q0=[0.0, 0.0]))


@pytest.mark.parametrize("text, line, words", [
    ("T: 0.7\nhorizon: 3\n", 2, "unknown key 'horizon'"),
    ("h: 0.1\nchi0: [1, 2, x]\n", 2, "expected a list of numbers"),
    ("seed: 1.5\n", 1, "expected an integer"),
    ("renominalize: 1\n", 1, "true or false"),
    ("T: 0.7\nh: b: c\n", 2, "mapping values"),
])
def test_config_errors_name_the_line(tmp_path, text, line, words):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        sc.load_config(path)
    msg = str(info.value)
    assert f"{path}:{line}" in msg and words in msg


def test_config_file_references(tmp_path):
    (tmp_path / "b.yaml").write_text("J_under: 0.5\nJ_bar: 3.0\nJ_tilde: 10.0\nL_c: 2.0\n")
    (tmp_path / "s.yaml").write_text("bounds: b.yaml\nduration: 2.0\n")
    cfg = sc.load_config(tmp_path / "s.yaml")
    assert cfg.bounds["J_under"] == 0.5 and cfg.duration == 2.0
    (tmp_path / "t.yaml").write_text("bounds: missing.yaml\n")
    with pytest.raises(ConfigError, match="cannot read bounds"):
        sc.load_config(tmp_path / "t.yaml")


def test_synthesis_quantities(girona_ctl):
    t = girona_ctl.tube
    assert t.omega1_radius == pytest.approx(0.02)
    assert t.sigma == pytest.approx((2 * math.sqrt(2) + 10) / sc.SHIPPED_BOUNDS["J_under"])
    assert all(0 < p.radius < 2 for p in girona_ctl.U_bar.parts)
    assert girona_ctl.ingredients.epsilon > 0


# --- closed loop ------------------------------------------------------------------

def test_equilibrium_start_stays_put(girona_cfg):
    cfg = sc.girona_config(chi0=girona_cfg.chi_des, duration=1.0, disturbance=ZERO)
    log = sc.run_closed_loop(cfg, sc.synthesize(cfg))
    assert np.abs(log.chi - cfg.chi_des).max() < 1e-9
    assert np.abs(log.u).max() < 1e-9


def test_nominal_equivalence_without_disturbance(girona_cfg, girona_ctl):
    cfg = short(girona_cfg, plant_substeps=4)
    log = sc.run_closed_loop(cfg, girona_ctl, strict=False)
    assert log.e_dev.max() <= 1e-8


def test_logging_and_determinism(girona_cfg, girona_ctl, tmp_path):
    cfg = replace(girona_cfg, duration=0.8, seed=5)
    a = sc.run_closed_loop(cfg, girona_ctl, strict=False)
    b = sc.run_closed_loop(cfg, girona_ctl, strict=False)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.rows == 81
    assert np.allclose(np.diff(a.t), 0.01, atol=1e-12) and np.all(np.diff(a.t) > 0)
    cols = sc.read_csv_columns(tmp_path / "a.csv")
    assert list(cols) == sc.csv_header(10)
    assert np.array_equal(cols["chi_1"], a.chi[:, 0])
    assert np.allclose(a.u, a.u_bar + a.kappa, atol=1e-15)


def test_csv_header_exact():
    head = sc.csv_header(10)
    assert head[:2] == ["t", "chi_1"] and head[-4:] == ["e_dev_norm", "z_dev_norm", "fhocp_cost", "fhocp_status"]
    assert len(head) == 1 + 6 + 6 + 4 * 10 + 4
    assert ",".join(head).startswith("t,chi_1,chi_2,chi_3,chi_4,chi_5,chi_6,chibar_1")
    assert head.index("u_1") == 23 and head.index("kappa_10") == 52


def test_monte_carlo_zero_disturbance(girona_cfg, girona_ctl):
    cfg = short(girona_cfg)
    report = sc.monte_carlo_tube_check(cfg, 1, controller=girona_ctl,
                                       disturbances=[dyn.DisturbanceSignal(dim=6)])
    assert report["max_e_ratio"] < 1e-4 and report["violations"] == 0 and not report["failures"]
    assert set(report) >= {"runs", "seed", "max_e_ratio", "max_z_ratio", "violations", "theorem1_residuals"}


def test_adversarial_disturbance_stays_in_tube(girona_cfg, girona_ctl):
    cfg = replace(girona_cfg, duration=1.0)
    adv = dyn.DisturbanceSignal(kind="adversarial", amplitude=cfg.w_tilde, dim=6)
    log = sc.run_closed_loop(cfg, girona_ctl, disturbance=adv, strict=False)
    e, z = log.tube_ratios()
    assert e.max() <= 1 and z.max() <= 1
    assert e.max() > 0.3  # the probe does push the error outwards


def test_random_disturbances_are_admissible(girona_cfg):
    for run in range(6):
        d = sc.random_disturbance(girona_cfg, run, seed=3)
        vals = np.array([d(t) for t in np.linspace(0, 6, 601)])
        assert np.linalg.norm(vals, axis=1).max() <= girona_cfg.w_tilde * (1 + 1e-12)


def test_terminal_invariance(girona_ctl):
    dec, level, inside = sc.terminal_invariance_check(girona_ctl, count=10)
    assert dec <= 0 and inside
    assert level <= 1 + 1e-9


# --- dynamic level -----------------------------------------------------------

VEHICLE = {"n": 0, "dh": [], "T_0B": {"rpy": [0, 0, 0], "xyz": [0, 0, 0]},
           "T_En": {"rpy": [0, 0, 0], "xyz": [0, 0, 0]}, "joint_limits": []}


@pytest.fixture(scope="module")
def vehicle_bounds():
    from uvms_tube_mpc.bounds import bounds_report, estimate_jacobian_bounds, LipschitzBounds
    from uvms_tube_mpc.sets import Box, NormBall
    model = kin.load_model(VEHICLE)
    jb = estimate_jacobian_bounds(model, Box([-1] * 3 + [-0.3] * 3, [1] * 3 + [0.3] * 3),
                                  samples=2000, zeta_set=NormBall.origin(6, 1.0), seed=0)
    return bounds_report(jb, LipschitzBounds(0.0))


@pytest.mark.slow
def test_dynamic_level_scenario(vehicle_bounds):
    cfg = sc.ScenarioConfig(
        model=VEHICLE, level="dynamic", F_des=np.zeros(6), q0=[],
        chi0=[0.1, -0.1, 0.05, 0.05, -0.05, 0.1], bounds=vehicle_bounds,
        dynamics={"g_vec": [0.0] * 6}, d_tilde=0.01, sigma_under=1.0, zeta_radius=1.0,
        accel_radius=150.0, input_radii=(1.0, 1.0), Q=1.0, P=1.0, R=1e-3,
        disturbance={"kind": "sinusoidal", "freq": 2.0},
        T=0.1, h=0.05, duration=0.2, substeps=10, plant_substeps=3,
    )
    ctl = sc.synthesize(cfg)
    assert ctl.tube.alpha1 > 0 and ctl.tube.alpha2 > 0
    log = sc.run_closed_loop(cfg, ctl, strict=False)
    e, z = log.tube_ratios()
    assert log.rows == 41
    assert e.max() <= 1 and z.max() <= 1
    assert np.all(log.input_margin >= -1e-9)
