import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uvms_tube_mpc import kinematics as kin
from uvms_tube_mpc import scenario as sc

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def girona():
    return sc.build_girona_arm5e()


@pytest.fixture(scope="session")
def bare():
    """n = 0 model: the task frame is the vehicle frame."""
    return kin.UvmsModel(dh=())


@pytest.fixture(scope="session")
def girona_cfg():
    return sc.girona_config()


@pytest.fixture(scope="session")
def girona_ctl(girona_cfg):
    return sc.synthesize(girona_cfg)


@pytest.fixture(scope="session")
def girona_run(girona_cfg, girona_ctl):
    """One disturbed closed-loop run of the shipped scenario, with its wall time."""
    start = time.perf_counter()
    log = sc.run_closed_loop(girona_cfg, girona_ctl, strict=False)
    return log, time.perf_counter() - start


def random_pose(model, rng, pitch=1.2):
    lim = model.joint_limits
    return np.r_[
        rng.uniform(-2, 2, 3),
        rng.uniform(-np.pi, np.pi), rng.uniform(-pitch, pitch), rng.uniform(-np.pi, np.pi),
        rng.uniform(lim[:, 0], lim[:, 1]) if model.n else np.zeros(0),
    ]
