"""Ancillary feedback, composite input and deviation bookkeeping for the tube.

The deviation states are ``e_dev = e - e_bar`` (task error about the nominal
error) and ``z_dev = zeta - zeta_bar``.  The backstepping variable is
``r = z_dev + sigma J(pose_bar)^T e_dev`` and the feedback is ``kappa = -k r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InputConstraintViolation
from .sets import ConstraintSet


def _vec(x, name):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector")
    return v


def wrap_task(d) -> np.ndarray:
    """Wrap the Euler-angle part of a task-space difference into (-pi, pi]."""
    d = np.array(d, dtype=float)
    d[3:6] = (d[3:6] + np.pi) % (2 * np.pi) - np.pi
    return d


@dataclass(frozen=True)
class DeviationState:
    frak_e: np.ndarray
    frak_z: np.ndarray
    frak_r: np.ndarray

    @property
    def frak_y(self) -> np.ndarray:
        return np.concatenate([self.frak_e, self.frak_r])

    @property
    def e_norm(self) -> float:
        return float(np.linalg.norm(self.frak_e))

    @property
    def z_norm(self) -> float:
        return float(np.linalg.norm(self.frak_z))


def backstepping_error(frak_e, frak_z, J_nom, sigma) -> np.ndarray:
    return np.asarray(frak_z, float) + sigma * np.asarray(J_nom, float).T @ np.asarray(frak_e, float)


def ancillary_feedback(e, e_bar, zeta, zeta_bar, J_nom, tube) -> np.ndarray:
    """kappa = -k (zeta - zeta_bar) - k sigma J(pose_bar)^T (e - e_bar)."""
    e, e_bar = _vec(e, "e"), _vec(e_bar, "e_bar")
    zeta, zeta_bar = _vec(zeta, "zeta"), _vec(zeta_bar, "zeta_bar")
    J_nom = np.asarray(J_nom, dtype=float)
    if e.shape != e_bar.shape or zeta.shape != zeta_bar.shape:
        raise DimensionMismatch("actual and nominal states differ in size")
    if J_nom.shape != (e.size, zeta.size):
        raise DimensionMismatch(f"Jacobian must be {e.size}x{zeta.size}, got {J_nom.shape}")
    return -tube.k * backstepping_error(wrap_task(e - e_bar), zeta - zeta_bar, J_nom, tube.sigma)


def kinematic_feedback(chi, chi_bar, J_nom, sigma) -> np.ndarray:
    """Velocity-level correction -sigma J(pose_bar)^T (chi - chi_bar)."""
    chi, chi_bar = _vec(chi, "chi"), _vec(chi_bar, "chi_bar")
    J_nom = np.asarray(J_nom, dtype=float)
    if J_nom.shape[0] != chi.size or chi.shape != chi_bar.shape:
        raise DimensionMismatch("Jacobian rows must match the task dimension")
    return -sigma * J_nom.T @ wrap_task(chi - chi_bar)


def composite_input(u_bar, kappa, U: ConstraintSet, tol: float = 1e-9):
    """Return ``(u_bar + kappa, margin)``; raise if the sum leaves ``U``."""
    u_bar, kappa = _vec(u_bar, "u_bar"), _vec(kappa, "kappa")
    if u_bar.shape != kappa.shape or u_bar.size != U.dim:
        raise DimensionMismatch("input, feedback and input set sizes differ")
    u = u_bar + kappa
    margin = U.margin(u)
    if margin < -tol:
        raise InputConstraintViolation(
            f"applied input leaves the input set by {-margin:.3g}", margin=margin
        )
    return u, margin


def deviation_update(actual, nominal, chi_des, J_nom, tube) -> DeviationState:
    """Deviation of a plant state from its nominal twin.

    Both states carry ``chi`` and ``zeta``; ``chi_des`` cancels in
    ``e - e_bar`` but is kept in the signature so callers can pass the
    errors they log.
    """
    e = wrap_task(np.asarray(actual.chi, float) - chi_des)
    e_bar = wrap_task(np.asarray(nominal.chi, float) - chi_des)
    fe = wrap_task(e - e_bar)
    fz = np.asarray(actual.zeta, float) - np.asarray(nominal.zeta, float)
    return DeviationState(fe, fz, backstepping_error(fe, fz, J_nom, tube.sigma))


def helper_b(c, chi, chi_bar, zeta_bar) -> np.ndarray:
    """b = c(chi, zeta_bar) - c(chi_bar, zeta_bar), the kinematic coupling defect."""
    return np.asarray(c(chi, zeta_bar), float) - np.asarray(c(chi_bar, zeta_bar), float)


def helper_l(f, chi, zeta, chi_bar, zeta_bar) -> np.ndarray:
    """l = f(chi, zeta) - f(chi_bar, zeta_bar), the drift defect."""
    return np.asarray(f(chi, zeta), float) - np.asarray(f(chi_bar, zeta_bar), float)
