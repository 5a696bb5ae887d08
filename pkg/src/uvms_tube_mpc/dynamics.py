"""Continuous-time UVMS dynamics, contact wrench, disturbances and RK4 stepping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kinematics as kin
from .errors import NumericalFailure

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class ContactModel:
    """Elastic frictionless surface: wrench = K (chi - chi_eq)."""

    K: np.ndarray = field(default_factory=lambda: np.eye(6))
    chi_eq: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != (6, 6):
            raise ValueError("stiffness matrix must be 6x6")
        if not np.allclose(K, K.T) or np.linalg.eigvalsh(K).min() <= 0.0:
            raise ValueError("stiffness matrix must be symmetric positive definite")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "chi_eq", np.asarray(self.chi_eq, dtype=float).reshape(6))

    def desired_pose(self, F_des) -> np.ndarray:
        """Task state at which the surface pushes back with ``F_des``."""
        return np.linalg.solve(self.K, np.asarray(F_des, dtype=float)) + self.chi_eq


def contact_wrench(contact: ContactModel, chi) -> np.ndarray:
    return contact.K @ (np.asarray(chi, dtype=float) - contact.chi_eq)


@dataclass(frozen=True)
class DynamicsParams:
    """Providers for inertia ``M(pose)``, Coriolis ``C(zeta, pose)``,
    dissipation ``D(zeta, pose)`` and restoring forces ``g(pose)``."""

    M: Callable[[np.ndarray], np.ndarray]
    C: Callable[[np.ndarray, np.ndarray], np.ndarray]
    D: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    # raw coefficients when built by ``synthetic`` (lets other backends rebuild it)
    coeffs: Optional[dict] = None

    @classmethod
    def synthetic(cls, n: int, M_diag=None, D_lin_diag=None, D_quad_diag=None, g_vec=None):
        """Constant diagonal inertia, energy-neutral rigid-body Coriolis,
        linear plus quadratic diagonal drag and constant restoring force.

        The defaults are loosely sized after a 150 kg hovering vehicle
        carrying a light arm; they are placeholders, not identified values.
        """
        dim = 6 + n
        m = np.asarray(M_diag if M_diag is not None else [180, 200, 220, 20, 25, 20] + [1.5] * n, float)
        dl = np.asarray(D_lin_diag if D_lin_diag is not None else [30, 40, 50, 10, 12, 10] + [2.0] * n, float)
        dq = np.asarray(D_quad_diag if D_quad_diag is not None else [60, 80, 90, 15, 15, 15] + [0.5] * n, float)
        gv = np.asarray(g_vec if g_vec is not None else [0, 0, -2.0, 0, 0, 0] + [0.0] * n, float)
        for name, arr in (("M_diag", m), ("D_lin_diag", dl), ("D_quad_diag", dq), ("g_vec", gv)):
            if arr.shape != (dim,):
                raise ValueError(f"{name} must have length {dim}")
        if np.any(m <= 0):
            raise ValueError("M_diag entries must be positive")
        if np.any(dl < 0) or np.any(dq < 0):
            raise ValueError("drag coefficients must be nonnegative")
        M = np.diag(m)

        def C(zeta, pose):
            # rigid-body Coriolis of the vehicle block; skew so zeta' C zeta = 0
            out = np.zeros((dim, dim))
            p1 = M[:3, :3] @ zeta[:3]
            p2 = M[3:6, 3:6] @ zeta[3:6]
            out[:3, 3:6] = -kin.skew(p1)
            out[3:6, :3] = -kin.skew(p1)
            out[3:6, 3:6] = -kin.skew(p2)
            return out

        return cls(
            M=lambda pose: M,
            C=C,
            D=lambda zeta, pose: np.diag(dl + dq * np.abs(zeta)),
            g=lambda pose: gv,
            coeffs={"M_diag": m, "D_lin_diag": dl, "D_quad_diag": dq, "g_vec": gv},
        )


def load_dynamics_params(doc: Optional[dict], n: int) -> DynamicsParams:
    doc = doc or {}
    return DynamicsParams.synthetic(
        n,
        M_diag=doc.get("M_diag"),
        D_lin_diag=doc.get("D_lin_diag"),
        D_quad_diag=doc.get("D_quad_diag"),
        g_vec=doc.get("g_vec"),
    )


@dataclass
class PlantState:
    t: float
    chi: np.ndarray
    zeta: np.ndarray
    pose: np.ndarray

    @property
    def task(self) -> kin.TaskState:
        return kin.TaskState(self.chi[:3], self.chi[3:])


def drift(model, params: DynamicsParams, contact: ContactModel, chi, zeta, pose) -> np.ndarray:
    """f(chi, zeta) = -M^-1 (C zeta + D zeta + g + J^T F)."""
    M = params.M(pose)
    if np.linalg.cond(M) > CONDITION_LIMIT:
        raise NumericalFailure("inertia matrix is too ill-conditioned to solve")
    J = kin.task_jacobian(model, pose)
    rhs = (
        params.C(zeta, pose) @ zeta
        + params.D(zeta, pose) @ zeta
        + params.g(pose)
        + J.T @ contact_wrench(contact, chi)
    )
    return -np.linalg.solve(M, rhs)


def dynamics_rhs(model, params, contact, state: PlantState, u, d) -> np.ndarray:
    """Body acceleration f(chi, zeta) + u + d."""
    return drift(model, params, contact, state.chi, state.zeta, state.pose) + u + d


def kinematics_rhs(model, state: PlantState, w) -> np.ndarray:
    """Task velocity J(pose) zeta + w."""
    return kin.task_jacobian(model, state.pose) @ state.zeta + np.asarray(w, dtype=float)


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = f(t, x)``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure(f"non-finite state after RK4 step at t={t:.4g}")
    return out


def integrate_step(rhs, state: PlantState, h_int: float, u=None, d=None, w=None,
                   model=None, params=None, contact=None) -> PlantState:
    """Advance a plant state by one RK4 step.

    ``rhs`` is either ``"kinematic"`` (zeta held as the input, chi and pose
    integrated) or ``"dynamic"`` (zeta integrated too), or any callable
    ``f(t, x)`` acting on a flat vector, in which case ``state`` is that
    vector and the result is returned unwrapped.
    ``u``, ``d`` and ``w`` may be constants or callables of time.
    """
    if callable(rhs):
        return rk4_step(rhs, state.t if isinstance(state, PlantState) else 0.0, state, h_int)

    def at(sig, t, size):
        if sig is None:
            return np.zeros(size)
        return np.asarray(sig(t) if callable(sig) else sig, dtype=float)

    n6 = state.zeta.size
    if rhs == "kinematic":
        zeta = state.zeta

        def f(t, x):
            pose = x[6:]
            J = kin.task_jacobian(model, pose)
            return np.concatenate([J @ zeta + at(w, t, 6), kin.pose_rate_matrix(pose) @ zeta])

        x = rk4_step(f, state.t, np.concatenate([state.chi, state.pose]), h_int)
        return PlantState(state.t + h_int, x[:6], zeta.copy(), x[6:])

    if rhs == "dynamic":

        def f(t, x):
            chi, zeta, pose = x[:6], x[6:6 + n6], x[6 + n6:]
            ps = PlantState(t, chi, zeta, pose)
            return np.concatenate([
                kinematics_rhs(model, ps, at(w, t, 6)),
                dynamics_rhs(model, params, contact, ps, at(u, t, n6), at(d, t, n6)),
                kin.pose_rate_matrix(pose) @ zeta,
            ])

        x = rk4_step(f, state.t, np.concatenate([state.chi, state.zeta, state.pose]), h_int)
        return PlantState(state.t + h_int, x[:6], x[6:6 + n6], x[6 + n6:])

    raise ValueError(f"unknown rhs kind {rhs!r}")


# --- disturbances ------------------------------------------------------------

@dataclass
class DisturbanceSignal:
    """Bounded disturbance generator with ``||d(t)||_2 <= amplitude``.

    kinds
        ``zero``; ``sinusoidal`` (``amplitude * sin(freq t + phase) * direction``
        with a unit ``direction``); ``uniform`` (piecewise constant on a grid of
        width ``hold``, each cell uniform in the ball); ``adversarial``
        (magnitude ``amplitude`` along a state-supplied direction).
    """

    kind: str = "zero"
    amplitude: float = 0.0
    dim: int = 6
    freq: float = 1.0
    phase: float = 0.0
    direction: Optional[np.ndarray] = None
    seed: int = 0
    hold: float = 0.01

    def __post_init__(self):
        if self.kind not in ("zero", "sinusoidal", "uniform", "adversarial"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("disturbance amplitude must be nonnegative")
        if self.direction is None:
            self.direction = np.ones(self.dim) / math.sqrt(self.dim)
        else:
            v = np.asarray(self.direction, dtype=float)
            nv = np.linalg.norm(v)
            if v.shape != (self.dim,) or nv == 0:
                raise ValueError("direction must be a nonzero vector of length dim")
            self.direction = v / nv
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, t: float, along=None) -> np.ndarray:
        if self.kind == "zero" or self.amplitude == 0.0:
            return np.zeros(self.dim)
        if self.kind == "sinusoidal":
            return self.amplitude * math.sin(self.freq * t + self.phase) * self.direction
        if self.kind == "uniform":
            cell = int(math.floor(t / self.hold + 1e-9))
            v = self._cache.get(cell)
            if v is None:
                rng = np.random.default_rng([self.seed, cell])
                g = rng.standard_normal(self.dim)
                r = self.amplitude * rng.random() ** (1.0 / self.dim)
                v = self._cache[cell] = r * g / np.linalg.norm(g)
            return v.copy()
        # adversarial: push along the supplied direction (e.g. the deviation)
        if along is None or not np.any(along):
            return self.amplitude * self.direction
        a = np.asarray(along, dtype=float)
        return self.amplitude * a / np.linalg.norm(a)
