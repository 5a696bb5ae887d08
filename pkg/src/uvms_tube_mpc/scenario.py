"""Girona500 + ARM 5E Micro closed-loop scenario, Monte-Carlo tube checks, logs.

The shipped experiment runs at the kinematic level: the body velocity
``zeta`` is the (virtual) input, the plant is ``chi' = J(pose) zeta + w`` and
the tube feedback is ``zeta = zeta_bar - sigma J(pose_bar)^T (chi - chi_bar)``.
A second, smaller scenario exercises the two-level dynamic tube on the
synthetic dynamics.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import bounds as bd
from . import dynamics as dyn
from . import kinematics as kin
from . import nmpc
from .errors import (
    ConfigError,
    Infeasible,
    InputConstraintViolation,
    NumericalFailure,
    TubeViolation,
    UvmsError,
)
from .feedback import wrap_task
from .sets import Box, NormBall, ProductSet, pontryagin_diff, tighten_constraints

log = logging.getLogger(__name__)

GIRONA_ARM5E = {
    "n": 4,
    "dh": [
        {"d": 0.0, "a": 0.1, "alpha": -math.pi / 2},
        {"d": 0.0, "a": 0.26, "alpha": 0.0},
        {"d": 0.0, "a": 0.09, "alpha": math.pi / 2},
        {"d": 0.29, "a": 0.0, "alpha": 0.0},
    ],
    "T_0B": {"rpy": [0.0, 0.0, 0.0], "xyz": [0.53, 0.0, 0.36]},
    "T_En": {"rpy": [0.0, -math.pi / 2, 0.0], "xyz": [0.0, 0.0, 0.0]},
    "joint_limits": [[-0.52, 1.46], [-0.1471, 1.3114], [-1.297, 0.73], [-3.14, 3.14]],
}

PITCH_LIMIT = math.pi / 2 - 0.1


def build_girona_arm5e() -> kin.UvmsModel:
    return kin.load_model(GIRONA_ARM5E)


def vehicle_only_model() -> kin.UvmsModel:
    return kin.UvmsModel(dh=(), T_0B=np.eye(4), T_En=np.eye(4), joint_limits=np.zeros((0, 2)))


def pose_box(model: kin.UvmsModel, position: float = 1.0, pitch: float = PITCH_LIMIT) -> Box:
    """Pose set: free roll/yaw, bounded pitch, joint limits (position is irrelevant to J)."""
    lim = np.asarray(model.joint_limits, float).reshape(-1, 2)
    lo = np.r_[[-position] * 3, -math.pi, -pitch, -math.pi, lim[:, 0]]
    hi = np.r_[[position] * 3, math.pi, pitch, math.pi, lim[:, 1]]
    return Box(lo, hi)


# --- configuration -------------------------------------------------------------

@dataclass
class ScenarioConfig:
    model: dict = field(default_factory=lambda: dict(GIRONA_ARM5E))
    level: str = "kinematic"
    chi0: np.ndarray = field(default_factory=lambda: np.array(
        [-1.0, 1.3, -1.0, 0.0, -math.pi / 8, math.pi / 12]))
    chi_des: Optional[np.ndarray] = None
    F_des: np.ndarray = field(default_factory=lambda: np.array(
        [0.0, 0.0, 0.0, math.pi / 3, math.pi / 10, 0.0]))
    q0: np.ndarray = field(default_factory=lambda: np.array([0.47, 0.58, -0.28, 0.0]))
    K: np.ndarray = field(default_factory=lambda: np.eye(6))
    chi_eq: np.ndarray = field(default_factory=lambda: np.zeros(6))
    disturbance: dict = field(default_factory=lambda: {"kind": "sinusoidal", "freq": 1.0})
    w_tilde: float = 0.2
    ee_pitch_max: float = math.pi / 4
    position_bound: float = 10.0
    input_radii: tuple = (2.0, 2.0, 2.0)
    pose_margin: float = 0.05
    sigma_under: float = 10.0
    bounds: Optional[dict] = None
    bound_samples: int = 10_000
    Q: float = 0.5
    P: float = 0.5
    R: float = 0.5
    T: float = 0.7
    h: float = 0.1
    substeps: int = 10
    plant_substeps: int = 1
    duration: float = 6.0
    renominalize: bool = False
    terminal_fallback: bool = True
    terminal_samples: int = 1000
    seed: int = 0
    # dynamic-level extras
    dynamics: Optional[dict] = None
    d_tilde: float = 0.0
    rho_margin: float = 2.0
    k_margin: float = 2.0
    zeta_radius: float = 2.0
    accel_radius: float = 2.0

    def __post_init__(self):
        for name in ("chi0", "F_des", "q0", "chi_eq"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.K = np.asarray(self.K, dtype=float)
        if self.chi_des is None:
            self.chi_des = self.contact.desired_pose(self.F_des)
        self.chi_des = np.asarray(self.chi_des, dtype=float)
        if self.level not in ("kinematic", "dynamic"):
            raise ConfigError(f"unknown level {self.level!r}")
        if self.duration <= self.T:
            raise ConfigError("duration must exceed the horizon T")
        steps = self.duration / self.h
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("duration must be a whole number of sampling periods")
        if self.chi0.shape != (6,) or self.chi_des.shape != (6,):
            raise ConfigError("chi0 and chi_des must be 6-vectors")
        if self.plant_substeps < 1:
            raise ConfigError("plant_substeps must be positive")
        try:
            kin.load_model(self.model)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model description: {exc}") from None

    @property
    def contact(self) -> dyn.ContactModel:
        return dyn.ContactModel(self.K, self.chi_eq)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.h))

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        doc = dict(doc)
        if "K" in doc and np.ndim(doc["K"]) == 1:
            doc["K"] = np.diag(doc["K"])
        if "input_radii" in doc:
            doc["input_radii"] = tuple(float(r) for r in doc["input_radii"])
        return cls(**doc)


def girona_config(**overrides) -> ScenarioConfig:
    """The kinematic-level experiment with cached design-set bounds."""
    base = dict(bounds=dict(SHIPPED_BOUNDS))
    base.update(overrides)
    return ScenarioConfig(**base)


# Jacobian bounds of the Girona+ARM5E over the design set (vehicle pitch within
# pi/2 - 0.1, joint limits, end-effector pitch within pi/4), 10^4 samples,
# seed 0; L_c is the reference value (no finite sampled value exists for the
# redundant chain).
SHIPPED_BOUNDS = {
    "J_under": 0.4110801010371058,
    "J_bar": 3.3798688237310888,
    "J_tilde": 16.685717673670936,
    "block_norms": [1.0000000000000009, 2.2202292451686296, 2.642675082681625],
    "L_c": 2 * math.sqrt(2),
    "L1": 0.0,
    "L2": 0.0,
    "samples": 10000,
    "seed": 0,
}


# --- controller synthesis -------------------------------------------------------

@dataclass
class Controller:
    """Everything synthesised off-line for one scenario."""

    config: ScenarioConfig
    model: kin.UvmsModel
    jac_bounds: bd.JacobianBounds
    lip_bounds: bd.LipschitzBounds
    tube: object
    E: object
    E_bar: object
    U: object
    U_bar: object
    Z: object = None
    Z_bar: object = None
    ingredients: nmpc.TerminalIngredients = None
    fhocp: nmpc.FhocpConfig = None
    pose0: np.ndarray = None
    pose_star: np.ndarray = None
    params: object = None

    @property
    def omega1(self) -> float:
        return self.tube.omega1_radius

    @property
    def omega2(self) -> float:
        return self.tube.omega2_radius


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UvmsError as exc:
        exc.stage = name
        raise


def task_design_set(cfg: ScenarioConfig) -> Box:
    big = cfg.position_bound
    return Box([-big, -big, -big, -math.pi, -cfg.ee_pitch_max, -math.pi],
               [big, big, big, math.pi, cfg.ee_pitch_max, math.pi])


def nominal_pose_limits(model: kin.UvmsModel, margin: float):
    lim = np.asarray(model.joint_limits, float).reshape(-1, 2)
    lo = np.r_[[-np.inf] * 4, -(PITCH_LIMIT - margin), -np.inf, lim[:, 0] + margin]
    hi = np.r_[[np.inf] * 4, PITCH_LIMIT - margin, np.inf, lim[:, 1] - margin]
    return lo, hi


def estimate_scenario_bounds(cfg: ScenarioConfig, samples: Optional[int] = None, seed=None):
    model = kin.load_model(cfg.model)
    Z = _velocity_set(model, cfg)
    ps = pose_box(model)
    samples = samples or cfg.bound_samples
    seed = cfg.seed if seed is None else seed
    jb = bd.estimate_jacobian_bounds(model, ps, samples, Z, seed=seed, task_set=task_design_set(cfg))
    params = load_params(cfg, model) if cfg.level == "dynamic" else None
    lb = bd.estimate_lipschitz(model, params, {"pose": ps, "zeta": Z, "task": task_design_set(cfg)},
                               samples, seed=seed, contact=cfg.contact)
    return jb, lb


def _velocity_set(model, cfg):
    if model.n:
        return ProductSet(tuple(NormBall.origin(d, r) for d, r in zip((3, 3, model.n), cfg.input_radii)))
    return ProductSet(tuple(NormBall.origin(3, r) for r in cfg.input_radii[:2]))


def load_params(cfg, model):
    return dyn.load_dynamics_params(cfg.dynamics, model.n)


def synthesize(cfg: ScenarioConfig) -> Controller:
    """Bounds -> tube -> tightened sets -> terminal ingredients -> FHOCP config."""
    model = kin.load_model(cfg.model)
    if cfg.q0.size != model.n:
        raise ConfigError(f"q0 has {cfg.q0.size} entries but the arm has {model.n} joints")
    if cfg.bounds is not None:
        jb, lb = bd.bounds_from_report(cfg.bounds)
    else:
        jb, lb = _stage("bounds", estimate_scenario_bounds, cfg)
    pose0 = kin.body_pose_for_task(model, cfg.chi0, cfg.q0)
    pose_star = kin.body_pose_for_task(model, cfg.chi_des, cfg.q0)
    model.check_joints(cfg.q0)
    E = _stage("tightening", task_design_set(cfg).translate, -cfg.chi_des)
    p_lo, p_hi = nominal_pose_limits(model, cfg.pose_margin)
    if cfg.level == "kinematic":
        return _synthesize_kinematic(cfg, model, jb, lb, E, pose0, pose_star, p_lo, p_hi)
    return _synthesize_dynamic(cfg, model, jb, lb, E, pose0, pose_star, p_lo, p_hi)


def _synthesize_kinematic(cfg, model, jb, lb, E, pose0, pose_star, p_lo, p_hi):
    tube = _stage("gains", bd.kinematic_tube, jb, lb, cfg.w_tilde, cfg.sigma_under)
    U = _velocity_set(model, cfg)
    U_bar = _stage("tightening", bd.tighten_kinematic_inputs, U, tube)
    E_bar = _stage("tightening", pontryagin_diff, E, NormBall.origin(6, tube.omega1_radius))
    Q = cfg.Q * np.eye(6)
    R = cfg.R * np.eye(6 + model.n)
    J_star = kin.task_jacobian(model, pose_star)
    # K and P come from the LQR design; the nonlinear decrease check then
    # shapes the epsilon search
    lin = nmpc.terminal_ingredients(np.zeros((6, 6)), J_star, Q, R, None, eps_max=1.0)
    dec = kinematic_decrease_residual(model, cfg.chi_des, pose_star, lin)
    ingredients = _stage("terminal", nmpc.terminal_ingredients, np.zeros((6, 6)), J_star, Q, R,
                         U_bar, samples=cfg.terminal_samples, seed=cfg.seed, decrease=dec,
                         eps_max=10.0)
    nominal = nmpc.kinematic_model(model, cfg.chi_des, p_lo, p_hi)
    fh = nmpc.FhocpConfig(nominal, cfg.T, cfg.h, Q, cfg.P * np.eye(6), R, E_bar, U_bar,
                          substeps=cfg.substeps, terminal_fallback=cfg.terminal_fallback)
    return Controller(cfg, model, jb, lb, tube, E, E_bar, U, U_bar, ingredients=ingredients,
                      fhocp=fh, pose0=pose0, pose_star=pose_star)


def kinematic_decrease_residual(model, chi_des, pose_star, lin, tol: float = 1e-8):
    """Batch residual ``d/dt ||xi||_P^2 + ||xi||_Qt^2 - tol`` of the nonlinear
    nominal error under ``zeta = K xi``, with the pose lifted from ``xi`` by
    moving only the vehicle (joints frozen at ``pose_star``)."""
    if lin is None:
        return None
    import jax
    import jax.numpy as jnp
    from . import jaxkin

    lift = jaxkin.make_body_pose_fn(model, pose_star[6:])
    jac = jaxkin.make_jacobian_fn(model)
    K, P, Qt = (jnp.asarray(a) for a in (lin.K, lin.P, lin.Q_tilde))
    chi_des = jnp.asarray(chi_des)

    @jax.jit
    def one(xi):
        pose = lift(chi_des + xi)
        xidot = jac(pose) @ (K @ xi)
        return 2 * xi @ P @ xidot + xi @ Qt @ xi

    batch = jax.jit(jax.vmap(one))
    return lambda xi: np.asarray(batch(jnp.asarray(xi))) - tol


def _synthesize_dynamic(cfg, model, jb, lb, E, pose0, pose_star, p_lo, p_hi):
    params = load_params(cfg, model)
    contact = cfg.contact
    tube = _stage("gains", bd.tube_gains, jb, lb, cfg.d_tilde, cfg.sigma_under,
                  cfg.rho_margin, cfg.k_margin)
    dim = 6 + model.n
    Z = NormBall.origin(dim, cfg.zeta_radius)
    U = NormBall.origin(dim, cfg.accel_radius)
    E_bar, Z_bar, U_bar = _stage("tightening", tighten_constraints, E, Z, U, tube)
    Q = cfg.Q * np.eye(6 + dim)
    R = cfg.R * np.eye(dim)

    def g(xi, u):
        chi = cfg.chi_des + xi[:6]
        zeta = xi[6:]
        pose = kin.body_pose_for_task(model, chi, pose_star[6:])
        return np.concatenate([kin.task_jacobian(model, pose) @ zeta,
                               dyn.drift(model, params, contact, chi, zeta, pose) + u])

    A, B = nmpc.jacobian_linearize(g, np.zeros(6 + dim), np.zeros(dim))
    ingredients = _stage("terminal", nmpc.terminal_ingredients, A, B, Q, R,
                         U_bar,
                         samples=cfg.terminal_samples, seed=cfg.seed, eps_max=10.0)
    xi_set = ProductSet((E_bar, Z_bar))
    nominal = nmpc.dynamic_model(model, params, contact, cfg.chi_des, p_lo, p_hi)
    fh = nmpc.FhocpConfig(nominal, cfg.T, cfg.h, Q, cfg.P * np.eye(6 + dim), R, xi_set, U_bar,
                          substeps=cfg.substeps, terminal_fallback=cfg.terminal_fallback)
    return Controller(cfg, model, jb, lb, tube, E, E_bar, U, U_bar, Z, Z_bar, ingredients, fh,
                      pose0, pose_star, params)


# --- trajectory log --------------------------------------------------------------

def csv_header(n_in: int = 10) -> list[str]:
    cols = ["t"]
    cols += [f"chi_{i}" for i in range(1, 7)]
    cols += [f"chibar_{i}" for i in range(1, 7)]
    for name in ("zeta", "u", "ubar", "kappa"):
        cols += [f"{name}_{i}" for i in range(1, n_in + 1)]
    return cols + ["e_dev_norm", "z_dev_norm", "fhocp_cost", "fhocp_status"]


@dataclass
class TrajectoryLog:
    t: np.ndarray
    chi: np.ndarray
    chi_bar: np.ndarray
    zeta: np.ndarray
    u: np.ndarray
    u_bar: np.ndarray
    kappa: np.ndarray
    e_dev: np.ndarray
    z_dev: np.ndarray
    cost: np.ndarray
    status: list
    pose: np.ndarray
    pose_bar: np.ndarray
    zeta_bar: np.ndarray
    input_margin: np.ndarray
    terminal_level: np.ndarray
    solutions: list = field(default_factory=list)
    omega1: float = 0.0
    omega2: float = 0.0
    epsilon: float = 0.0
    radius_bound: float = 0.0
    chi_des: np.ndarray = None

    @property
    def rows(self) -> int:
        return self.t.size

    def columns(self) -> dict:
        out = {"t": self.t}
        for name, arr in (("chi", self.chi), ("chibar", self.chi_bar), ("zeta", self.zeta),
                          ("u", self.u), ("ubar", self.u_bar), ("kappa", self.kappa)):
            for i in range(arr.shape[1]):
                out[f"{name}_{i + 1}"] = arr[:, i]
        out["e_dev_norm"] = self.e_dev
        out["z_dev_norm"] = self.z_dev
        out["fhocp_cost"] = self.cost
        out["fhocp_status"] = np.asarray(self.status)
        return out

    def write_csv(self, path) -> None:
        header = csv_header(self.u.shape[1])
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in range(self.rows):
                w.writerow([cols[c][r] if c == "fhocp_status" else repr(float(cols[c][r]))
                            for c in header])

    # monitors
    def tube_ratios(self):
        e = self.e_dev / self.omega1 if self.omega1 > 0 else np.where(self.e_dev > 0, np.inf, 0.0)
        z = self.z_dev / self.omega2 if self.omega2 > 0 else np.where(self.z_dev > 0, np.inf, 0.0)
        return e, z

    def entry_index(self) -> Optional[int]:
        """First sample at which the nominal error is inside the terminal set."""
        inside = np.flatnonzero(self.terminal_level <= self.epsilon)
        return int(inside[0]) if inside.size else None

    def theorem1_residuals(self):
        """max over samples after entry of ||chi - chi_des|| - (eps/sqrt(lmin P) + w1)
        and ||zeta|| - (eps/sqrt(lmin P) + w2); None before any entry."""
        k = self.entry_index()
        if k is None:
            return None
        err = np.linalg.norm(np.array([wrap_task(c - self.chi_des) for c in self.chi[k:]]), axis=1)
        zn = np.linalg.norm(self.zeta[k:], axis=1)
        return (float(np.max(err - (self.radius_bound + self.omega1))),
                float(np.max(zn - (self.radius_bound + self.omega2))))


def read_csv_columns(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in data]
        out[name] = vals if name == "fhocp_status" else np.array([float(v) for v in vals])
    return out


# --- closed loop -------------------------------------------------------------------

def make_disturbance(cfg: ScenarioConfig, spec: Optional[dict] = None, dim: int = 6):
    spec = dict(cfg.disturbance if spec is None else spec)
    amplitude = spec.pop("amplitude", cfg.w_tilde if cfg.level == "kinematic" else cfg.d_tilde)
    return dyn.DisturbanceSignal(amplitude=amplitude, dim=dim, seed=spec.pop("seed", cfg.seed), **spec)


class PlanCache:
    """FHOCP solutions and nominal stage data keyed by sampling instant.

    Without re-anchoring the nominal trajectory never sees the disturbance, so
    Monte-Carlo runs can share one set of solves.
    """

    def __init__(self):
        self.steps: dict[int, tuple] = {}


def _nominal_task(model, x):
    dim = 6 + model.n
    return kin.task_vector(model, x[:dim]) + x[dim:]


def _nominal_stages(model, x, u_bar, h, substeps):
    """RK4 on the kinematic nominal, returning per-step stage (chi_bar, J_bar) and states."""
    dim = 6 + model.n

    def f(xx):
        return np.concatenate([kin.pose_rate_matrix(xx[:dim]) @ u_bar, np.zeros(6)])

    stages, states = [], [x.copy()]
    for _ in range(substeps):
        k1 = f(x)
        x2 = x + 0.5 * h * k1
        k2 = f(x2)
        x3 = x + 0.5 * h * k2
        k3 = f(x3)
        x4 = x + h * k3
        k4 = f(x4)
        stages.append([(_nominal_task(model, s), kin.task_jacobian(model, s[:dim])) for s in (x, x2, x3, x4)])
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states.append(x.copy())
    return stages, states


def _wrap_pose(pose):
    pose = pose.copy()
    pose[3:6] = (pose[3:6] + np.pi) % (2 * np.pi) - np.pi
    return pose


def run_closed_loop(cfg: ScenarioConfig, controller: Optional[Controller] = None,
                    disturbance=None, cache: Optional[PlanCache] = None,
                    strict: bool = True) -> TrajectoryLog:
    """Simulate the scenario; with ``strict`` any tube or input violation aborts."""
    ctl = controller or synthesize(cfg)
    if cfg.level == "dynamic":
        return _run_dynamic(cfg, ctl, disturbance, strict)
    model = ctl.model
    dim = 6 + model.n
    w_sig = disturbance if disturbance is not None else make_disturbance(cfg)
    sigma = ctl.tube.sigma
    h_plant = cfg.h / cfg.substeps / cfg.plant_substeps
    ing = ctl.ingredients

    pose = ctl.pose0.copy()
    chi = cfg.chi0.copy()
    x_nom = np.r_[pose, cfg.chi0 - kin.task_vector(model, pose)]
    x_nom[dim + 3:] = (x_nom[dim + 3:] + np.pi) % (2 * np.pi) - np.pi
    rows = {k: [] for k in ("t", "chi", "chi_bar", "zeta", "u", "u_bar", "kappa", "e", "z",
                            "cost", "status", "pose", "pose_bar", "zeta_bar", "margin", "level")}
    solutions = []
    prev = None
    t = 0.0

    def record(t, chi, pose, chi_bar, pose_bar, J_nom, u_bar, sol):
        kappa = -sigma * J_nom.T @ wrap_task(chi - chi_bar)
        u = u_bar + kappa
        rows["t"].append(t)
        rows["chi"].append(chi.copy())
        rows["chi_bar"].append(chi_bar.copy())
        rows["zeta"].append(u)
        rows["u"].append(u)
        rows["u_bar"].append(u_bar.copy())
        rows["kappa"].append(kappa)
        e_dev = float(np.linalg.norm(wrap_task(chi - chi_bar)))
        rows["e"].append(e_dev)
        rows["z"].append(float(np.linalg.norm(kappa)))
        rows["cost"].append(sol.cost)
        rows["status"].append(sol.status)
        rows["pose"].append(pose.copy())
        rows["pose_bar"].append(pose_bar.copy())
        rows["zeta_bar"].append(u_bar.copy())
        margin = ctl.U.margin(u)
        rows["margin"].append(margin)
        rows["level"].append(ing.level(wrap_task(chi_bar - cfg.chi_des)))
        if strict:
            if e_dev > ctl.omega1:
                raise TubeViolation(f"t={t:.2f}: ||e_dev||={e_dev:.4g} exceeds omega1={ctl.omega1:.4g}")
            if margin < -1e-9:
                raise InputConstraintViolation(f"t={t:.2f}: input leaves U by {-margin:.3g}", margin)

    for k in range(cfg.steps):
        t_k = k * cfg.h
        if cfg.renominalize:
            x_nom = np.r_[pose, wrap_task(chi - kin.task_vector(model, pose))]
        cached = cache.steps.get(k) if (cache is not None and not cfg.renominalize) else None
        if cached is None:
            try:
                _, _, sol = nmpc.receding_horizon_step(x_nom, ctl.fhocp, ing, prev)
            except Infeasible as exc:
                exc.stage = "fhocp"
                raise Infeasible(f"t={t_k:.2f}: {exc}", getattr(exc, "violation", None)) from exc
            stages, states = _nominal_stages(model, x_nom, sol.u_seq[0], h_plant,
                                             cfg.substeps * cfg.plant_substeps)
            if cache is not None and not cfg.renominalize:
                cache.steps[k] = (sol, stages, states)
        else:
            sol, stages, states = cached
        prev = sol
        solutions.append(sol)
        u_bar = sol.u_seq[0]

        for j in range(cfg.substeps * cfg.plant_substeps):
            t = t_k + j * h_plant
            if j % cfg.plant_substeps == 0:
                chi_bar0, J0 = stages[j][0]
                record(t, chi, pose, chi_bar0, states[j][:dim], J0, u_bar, sol)
            y = np.r_[chi, pose]

            def f(s, yy, stage):
                c, p = yy[:6], yy[6:]
                chi_bar_s, J_s = stages[j][stage]
                dev = wrap_task(c - chi_bar_s)
                zeta = u_bar - sigma * J_s.T @ dev
                w = w_sig(s, along=dev) if w_sig.kind == "adversarial" else w_sig(s)
                return np.concatenate([kin.task_jacobian(model, p) @ zeta + w,
                                       kin.pose_rate_matrix(p) @ zeta])

            k1 = f(t, y, 0)
            k2 = f(t + 0.5 * h_plant, y + 0.5 * h_plant * k1, 1)
            k3 = f(t + 0.5 * h_plant, y + 0.5 * h_plant * k2, 2)
            k4 = f(t + h_plant, y + h_plant * k3, 3)
            y = y + (h_plant / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)):
                raise NumericalFailure(f"non-finite plant state at t={t:.3f}")
            chi, pose = y[:6], _wrap_pose(y[6:])
        x_nom = states[-1].copy()
        x_nom[3:6] = (x_nom[3:6] + np.pi) % (2 * np.pi) - np.pi

    t = cfg.steps * cfg.h
    chi_bar_end = _nominal_task(model, x_nom)
    record(t, chi, pose, chi_bar_end, x_nom[:dim], kin.task_jacobian(model, x_nom[:dim]),
           prev.u_seq[0], prev)

    return TrajectoryLog(
        t=np.round(np.array(rows["t"]), 12), chi=np.array(rows["chi"]), chi_bar=np.array(rows["chi_bar"]),
        zeta=np.array(rows["zeta"]), u=np.array(rows["u"]), u_bar=np.array(rows["u_bar"]),
        kappa=np.array(rows["kappa"]), e_dev=np.array(rows["e"]), z_dev=np.array(rows["z"]),
        cost=np.array(rows["cost"]), status=rows["status"], pose=np.array(rows["pose"]),
        pose_bar=np.array(rows["pose_bar"]), zeta_bar=np.array(rows["zeta_bar"]),
        input_margin=np.array(rows["margin"]), terminal_level=np.array(rows["level"]),
        solutions=solutions, omega1=ctl.omega1, omega2=ctl.omega2, epsilon=ing.epsilon,
        radius_bound=ing.radius_bound, chi_des=cfg.chi_des.copy(),
    )


def _run_dynamic(cfg, ctl, disturbance, strict):
    """Two-level tube on the dynamic plant; nominal and plant integrated jointly."""
    model, params, contact = ctl.model, ctl.params, cfg.contact
    dim = 6 + model.n
    tube = ctl.tube
    d_sig = disturbance if disturbance is not None else make_disturbance(cfg, dim=dim)
    h_plant = cfg.h / cfg.substeps / cfg.plant_substeps
    ing = ctl.ingredients
    nominal = ctl.fhocp.model

    chi, zeta, pose = cfg.chi0.copy(), np.zeros(dim), ctl.pose0.copy()
    xb = np.r_[chi, zeta, pose]
    rows = {k: [] for k in ("t", "chi", "chi_bar", "zeta", "u", "u_bar", "kappa", "e", "z",
                            "cost", "status", "pose", "pose_bar", "zeta_bar", "margin", "level")}
    solutions, prev = [], None

    def kappa_of(chi, zeta, xb):
        pose_b = xb[6 + dim:]
        J_nom = kin.task_jacobian(model, pose_b)
        fe = wrap_task(chi - xb[:6])
        fz = zeta - xb[6:6 + dim]
        return -tube.k * (fz + tube.sigma * J_nom.T @ fe), fe, fz

    def record(t, chi, zeta, pose, xb, u_bar, sol):
        kap, fe, fz = kappa_of(chi, zeta, xb)
        u = u_bar + kap
        for key, val in (("t", t), ("chi", chi.copy()), ("chi_bar", xb[:6].copy()),
                         ("zeta", zeta.copy()), ("u", u), ("u_bar", u_bar.copy()), ("kappa", kap),
                         ("e", float(np.linalg.norm(fe))), ("z", float(np.linalg.norm(fz))),
                         ("cost", sol.cost), ("status", sol.status), ("pose", pose.copy()),
                         ("pose_bar", xb[6 + dim:].copy()), ("zeta_bar", xb[6:6 + dim].copy()),
                         ("margin", ctl.U.margin(u)),
                         ("level", ing.level(nominal.np_output(xb)))):
            rows[key].append(val)
        if strict and (rows["e"][-1] > ctl.omega1 or rows["z"][-1] > ctl.omega2):
            raise TubeViolation(f"t={t:.3f}: deviation left the tube")
        if strict and rows["margin"][-1] < -1e-9:
            raise InputConstraintViolation(f"t={t:.3f}: input leaves U", rows["margin"][-1])

    for k in range(cfg.steps):
        t_k = k * cfg.h
        if cfg.renominalize:
            xb = np.r_[chi, zeta, pose]
        _, _, sol = nmpc.receding_horizon_step(xb, ctl.fhocp, ing, prev)
        prev = sol
        solutions.append(sol)
        u_bar = sol.u_seq[0]
        for j in range(cfg.substeps * cfg.plant_substeps):
            t = t_k + j * h_plant
            if j % cfg.plant_substeps == 0:
                record(t, chi, zeta, pose, xb, u_bar, sol)
            y = np.r_[chi, zeta, pose, xb]

            def f(s, yy):
                c, z, p, xbb = yy[:6], yy[6:6 + dim], yy[6 + dim:6 + 2 * dim], yy[6 + 2 * dim:]
                kap, fe, _ = kappa_of(c, z, xbb)
                if d_sig.kind == "adversarial":
                    d = d_sig(s, along=kin.task_jacobian(model, xbb[6 + dim:]).T @ fe + (z - xbb[6:6 + dim]))
                else:
                    d = d_sig(s)
                acc = dyn.drift(model, params, contact, c, z, p) + u_bar + kap + d
                return np.concatenate([kin.task_jacobian(model, p) @ z, acc,
                                       kin.pose_rate_matrix(p) @ z, nominal.np_rhs(xbb, u_bar)])

            y = dyn.rk4_step(f, t, y, h_plant)
            chi, zeta, pose, xb = (y[:6], y[6:6 + dim], _wrap_pose(y[6 + dim:6 + 2 * dim]),
                                   y[6 + 2 * dim:])
    record(cfg.steps * cfg.h, chi, zeta, pose, xb, prev.u_seq[0], prev)
    return TrajectoryLog(
        t=np.round(np.array(rows["t"]), 12), chi=np.array(rows["chi"]), chi_bar=np.array(rows["chi_bar"]),
        zeta=np.array(rows["zeta"]), u=np.array(rows["u"]), u_bar=np.array(rows["u_bar"]),
        kappa=np.array(rows["kappa"]), e_dev=np.array(rows["e"]), z_dev=np.array(rows["z"]),
        cost=np.array(rows["cost"]), status=rows["status"], pose=np.array(rows["pose"]),
        pose_bar=np.array(rows["pose_bar"]), zeta_bar=np.array(rows["zeta_bar"]),
        input_margin=np.array(rows["margin"]), terminal_level=np.array(rows["level"]),
        solutions=solutions, omega1=ctl.omega1, omega2=ctl.omega2, epsilon=ing.epsilon,
        radius_bound=ing.radius_bound, chi_des=cfg.chi_des.copy(),
    )


# --- Monte-Carlo tube verification --------------------------------------------------

def random_disturbance(cfg: ScenarioConfig, run: int, seed: int, dim: int = 6):
    """Admissible disturbance for run ``run``: alternately a random sinusoid and
    uniform samples in the ball, both bounded by the scenario amplitude."""
    bound = cfg.w_tilde if cfg.level == "kinematic" else cfg.d_tilde
    rng = np.random.default_rng([seed, run])
    if run % 2 == 0:
        return dyn.DisturbanceSignal(
            kind="sinusoidal", amplitude=bound * rng.uniform(0.5, 1.0), dim=dim,
            freq=rng.uniform(0.2, 3.0), phase=rng.uniform(0, 2 * np.pi),
            direction=rng.standard_normal(dim),
        )
    return dyn.DisturbanceSignal(kind="uniform", amplitude=bound, dim=dim,
                                 seed=int(rng.integers(2 ** 31)), hold=cfg.h / cfg.substeps)


@dataclass
class _RunResult:
    run: int
    max_e_ratio: float
    max_z_ratio: float
    violations: int
    input_violations: int
    pose_violations: int
    theorem1: Optional[tuple]
    error: Optional[str] = None


def pose_violations(log: TrajectoryLog, model: kin.UvmsModel) -> int:
    lim = np.asarray(model.joint_limits, float).reshape(-1, 2)
    p = log.pose
    bad = np.abs(p[:, 4]) > PITCH_LIMIT
    bad |= np.abs(p[:, 3]) > math.pi + 1e-12
    bad |= np.abs(p[:, 5]) > math.pi + 1e-12
    if model.n:
        bad |= np.any(p[:, 6:] < lim[:, 0], axis=1) | np.any(p[:, 6:] > lim[:, 1], axis=1)
    return int(np.sum(bad))


def summarize_run(run, log: TrajectoryLog, ctl: Controller) -> _RunResult:
    e_r, z_r = log.tube_ratios()
    viol = int(np.sum((e_r > 1.0) | (z_r > 1.0)))
    return _RunResult(run, float(e_r.max()), float(z_r.max()), viol,
                      int(np.sum(log.input_margin < -1e-9)), pose_violations(log, ctl.model),
                      log.theorem1_residuals())


def _mc_worker(args):
    cfg, ctl, cache, run, dist = args
    try:
        log = run_closed_loop(cfg, ctl, disturbance=dist, cache=cache, strict=False)
        return summarize_run(run, log, ctl)
    except UvmsError as exc:
        return _RunResult(run, np.inf, np.inf, 1, 0, 0, None, error=f"{exc.stage}: {exc}")


def monte_carlo_tube_check(cfg: ScenarioConfig, runs: int, seed: Optional[int] = None,
                           controller: Optional[Controller] = None, workers: int = 1,
                           disturbances=None) -> dict:
    """Repeat the closed loop under independent admissible disturbances."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    seed = cfg.seed if seed is None else seed
    ctl = controller or synthesize(cfg)
    cache = PlanCache()
    dim = 6 if cfg.level == "kinematic" else 6 + ctl.model.n
    if disturbances is None:
        disturbances = [random_disturbance(cfg, r, seed, dim) for r in range(runs)]
    if cfg.level == "kinematic" and not cfg.renominalize:
        # fill the shared plan cache once (the nominal ignores the disturbance)
        run_closed_loop(cfg, ctl, disturbance=dyn.DisturbanceSignal(dim=dim), cache=cache, strict=False)
    shared = cfg.level == "kinematic" and not cfg.renominalize
    if workers > 1 and shared:
        # workers replay the cached plan, so the (unpicklable) solver stays here
        import multiprocessing

        jobs = [(cfg, replace(ctl, fhocp=None), cache, r, disturbances[r]) for r in range(runs)]
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_mc_worker, jobs))
    else:
        results = [_mc_worker((cfg, ctl, cache, r, disturbances[r])) for r in range(runs)]
    res_e = [r.theorem1[0] for r in results if r.theorem1 is not None]
    res_z = [r.theorem1[1] for r in results if r.theorem1 is not None]
    return {
        "runs": runs,
        "seed": seed,
        "omega1": ctl.omega1,
        "omega2": ctl.omega2,
        "max_e_ratio": max(r.max_e_ratio for r in results),
        "max_z_ratio": max(r.max_z_ratio for r in results),
        "violations": sum(r.violations for r in results),
        "input_violations": sum(r.input_violations for r in results),
        "pose_violations": sum(r.pose_violations for r in results),
        "theorem1_residuals": {
            "chi": max(res_e) if res_e else None,
            "zeta": max(res_z) if res_z else None,
            "runs_entering_terminal_set": len(res_e),
        },
        "failures": [f"run {r.run}: {r.error}" for r in results if r.error],
    }


def fhocp_status_counts(log: TrajectoryLog) -> dict:
    out: dict[str, int] = {}
    for sol in log.solutions:
        out[sol.status] = out.get(sol.status, 0) + 1
    return out


def terminal_invariance_check(ctl: Controller, count: int = 50, seed: int = 0, tol: float = 1e-8):
    """Simulate the kinematic nominal from sampled points of the terminal-set
    boundary for one period under ``zeta = K xi``.

    Returns ``(max decrease residual, max level / epsilon, all K xi in U_bar)``
    over all RK4 substeps.
    """
    cfg, model, ing = ctl.config, ctl.model, ctl.ingredients
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(ing.P)
    h_int = cfg.h / cfg.substeps
    worst_dec, worst_level, inside_u = -np.inf, 0.0, True
    for _ in range(count):
        s = rng.standard_normal(6)
        xi = ing.epsilon * np.linalg.solve(L.T, s / np.linalg.norm(s))
        pose = kin.body_pose_for_task(model, cfg.chi_des + xi, ctl.pose_star[6:])

        def xi_of(p):
            return wrap_task(kin.task_vector(model, p) - cfg.chi_des)

        def f(_, p):
            return kin.pose_rate_matrix(p) @ (ing.K @ xi_of(p))

        for step in range(cfg.substeps + 1):
            e = xi_of(pose)
            u = ing.K @ e
            inside_u &= bool(ctl.U_bar.contains(u))
            dV = 2 * e @ ing.P @ (kin.task_jacobian(model, pose) @ u)
            worst_dec = max(worst_dec, dV + e @ ing.Q_tilde @ e - tol)
            worst_level = max(worst_level, ing.level(e) / ing.epsilon)
            if step < cfg.substeps:
                pose = dyn.rk4_step(f, 0.0, pose, h_int)
    return worst_dec, worst_level, inside_u


# --- config files -------------------------------------------------------------------

_VECTOR_FIELDS = {"chi0", "chi_des", "F_des", "q0", "chi_eq", "input_radii"}
_NUMBER_FIELDS = {"w_tilde", "ee_pitch_max", "position_bound", "pose_margin", "sigma_under",
                  "Q", "P", "R", "T", "h", "duration", "d_tilde", "rho_margin", "k_margin",
                  "zeta_radius", "accel_radius"}
_INT_FIELDS = {"bound_samples", "substeps", "plant_substeps", "terminal_samples", "seed"}
_BOOL_FIELDS = {"renominalize", "terminal_fallback"}


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_value(key, value) -> Optional[str]:
    if key in _VECTOR_FIELDS:
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            return "expected a list of numbers"
    elif key in _NUMBER_FIELDS and not _is_number(value):
        return "expected a number"
    elif key in _INT_FIELDS and not (isinstance(value, int) and not isinstance(value, bool)):
        return "expected an integer"
    elif key in _BOOL_FIELDS and not isinstance(value, bool):
        return "expected true or false"
    elif key == "K" and not (isinstance(value, list) and value):
        return "expected a list (diagonal) or a list of rows"
    elif key in ("model", "bounds") and value is not None and not isinstance(value, (dict, str)):
        return "expected a mapping or a file name"
    return None


def _load_yaml(path):
    import yaml

    with open(path) as fh:
        text = fh.read()
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    return root, doc


def load_config(path, **overrides) -> ScenarioConfig:
    """Read a YAML scenario; errors name the offending line."""
    import os

    root, doc = _load_yaml(path)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = {}
    if root is not None:
        lines = {k.value: k.start_mark.line + 1 for k, _ in root.value}
    known = set(ScenarioConfig.__dataclass_fields__)
    for key, value in doc.items():
        where = f"{path}:{lines.get(key, '?')}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        problem = _check_value(key, value)
        if problem:
            raise ConfigError(f"{where}: {key}: {problem}")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("model", "bounds"):
        if isinstance(doc.get(key), str):
            ref = os.path.join(base, doc[key])
            try:
                doc[key] = _load_yaml(ref)[1]
            except OSError as exc:
                raise ConfigError(f"{path}:{lines.get(key, '?')}: cannot read {key} file: {exc}") from None
    doc.update(overrides)
    try:
        return ScenarioConfig.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: invalid configuration: {exc}") from None


def shipped_config_path() -> str:
    from importlib.resources import files

    return str(files("uvms_tube_mpc") / "data" / "girona.yaml")
