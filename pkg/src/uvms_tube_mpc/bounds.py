"""Jacobian/Lipschitz bound estimation and tube gain synthesis.

The bounds are estimated by uniform sampling with running extrema followed by
a gradient-free coordinate search around the extremal sample.  Sampled
extrema are estimates from the inside (the true infimum of the smallest
eigenvalue can only be lower, the true suprema only higher), so reports carry
the sample count and seed for reproducibility.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kinematics as kin
from .errors import InfeasibleGains, SingularOrientation
from .sets import Box, ConstraintSet, NormBall, ProductSet


@dataclass(frozen=True)
class JacobianBounds:
    J_under: float
    J_bar: float
    J_tilde: float
    samples: int = 0
    seed: int = 0
    # spectral norms of the column blocks [nu1 | nu2 | qdot]
    block_norms: tuple = ()

    def __post_init__(self):
        if self.J_bar > 0 and self.J_under / self.J_bar > self.J_bar * (1 + 1e-9):
            raise ValueError("J_under cannot exceed J_bar**2")


@dataclass(frozen=True)
class LipschitzBounds:
    L_c: float
    L1: float = 0.0
    L2: float = 0.0
    samples: int = 0
    seed: int = 0

    @property
    def L(self) -> float:
        return max(self.L1, self.L2)


def bounds_report(jb: JacobianBounds, lb: LipschitzBounds) -> dict:
    return {
        "J_under": jb.J_under,
        "J_bar": jb.J_bar,
        "J_tilde": jb.J_tilde,
        "block_norms": list(jb.block_norms),
        "L_c": lb.L_c,
        "L1": lb.L1,
        "L2": lb.L2,
        "L": lb.L,
        "samples": jb.samples,
        "seed": jb.seed,
    }


def bounds_from_report(doc: dict) -> tuple[JacobianBounds, LipschitzBounds]:
    jb = JacobianBounds(
        float(doc["J_under"]), float(doc["J_bar"]), float(doc.get("J_tilde", 0.0)),
        int(doc.get("samples", 0)), int(doc.get("seed", 0)),
        tuple(float(v) for v in doc.get("block_norms", ())),
    )
    lb = LipschitzBounds(
        float(doc["L_c"]), float(doc.get("L1", 0.0)), float(doc.get("L2", 0.0)),
        int(doc.get("samples", 0)), int(doc.get("seed", 0)),
    )
    return jb, lb


# --- sampling helpers ----------------------------------------------------------

def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def task_difference(chi_a, chi_b) -> np.ndarray:
    """chi_a - chi_b with the Euler-angle part wrapped to (-pi, pi]."""
    d = np.asarray(chi_a, dtype=float) - np.asarray(chi_b, dtype=float)
    d[3:] = _wrap(d[3:])
    return d


def _admissible(model, pose, task_set):
    """Jacobian at ``pose`` or None if the pose is singular / outside the task set."""
    try:
        J = kin.task_jacobian(model, pose)
        if task_set is not None and not task_set.contains(kin.task_vector(model, pose)):
            return None
        return J
    except SingularOrientation:
        return None


def _block_slices(n: int) -> list[slice]:
    return [slice(0, 3), slice(3, 6)] + ([slice(6, 6 + n)] if n else [])


def _coordinate_search(score, x0, lo, hi, step0, iters=60):
    """Maximise ``score`` by compass search inside a box; returns (x, value)."""
    x = np.array(x0, dtype=float)
    best = score(x)
    step = np.array(step0, dtype=float)
    for _ in range(iters):
        improved = False
        for i in range(x.size):
            if step[i] <= 0:
                continue
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[i] = np.clip(y[i] + sgn * step[i], lo[i], hi[i])
                v = score(y)
                if v > best:
                    x, best, improved = y, v, True
                    break
        if not improved:
            step *= 0.5
            if np.all(step < 1e-7):
                break
    return x, best


def estimate_jacobian_bounds(model: kin.UvmsModel, pose_set: Box, samples: int = 10_000,
                             zeta_set: Optional[ConstraintSet] = None, seed: int = 0,
                             task_set: Optional[ConstraintSet] = None,
                             polish: bool = True) -> JacobianBounds:
    """Sampled J_under (min eigenvalue of J J^T), J_bar (max ||J||_2) and
    J_tilde (max ||dJ/dt||_2 with zeta drawn from ``zeta_set``).

    Singular samples, and samples whose task state leaves ``task_set``, are
    rejected and redrawn.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    if not isinstance(pose_set, Box) or pose_set.dim != 6 + model.n:
        raise ValueError(f"pose_set must be a box of dimension {6 + model.n}")
    if not np.all(np.isfinite(pose_set.lo)) or not np.all(np.isfinite(pose_set.hi)):
        raise ValueError("pose_set must be bounded")
    rng = np.random.default_rng(seed)
    if zeta_set is None:
        zeta_set = NormBall.origin(6 + model.n, 1.0)
    slices = _block_slices(model.n)

    lam_min, nrm_max, dot_max = np.inf, 0.0, 0.0
    blocks = np.zeros(len(slices))
    arg_lam = arg_nrm = arg_dot = None
    accepted = attempts = 0
    while accepted < samples:
        attempts += 1
        if attempts > 50 * samples:
            raise RuntimeError("too many rejected samples; is the pose set admissible?")
        pose = pose_set.sample(rng, 1)[0]
        J = _admissible(model, pose, task_set)
        if J is None:
            continue
        zeta = zeta_set.sample(rng, 1)[0]
        try:
            Jd = kin.jacobian_time_derivative(model, pose, zeta)
        except SingularOrientation:
            continue
        accepted += 1
        lam = np.linalg.eigvalsh(J @ J.T)[0]
        nrm = np.linalg.norm(J, 2)
        dn = np.linalg.norm(Jd, 2)
        for b, sl in enumerate(slices):
            blocks[b] = max(blocks[b], np.linalg.norm(J[:, sl], 2))
        if lam < lam_min:
            lam_min, arg_lam = lam, pose
        if nrm > nrm_max:
            nrm_max, arg_nrm = nrm, pose
        if dn > dot_max or arg_dot is None:
            dot_max, arg_dot = dn, (pose, zeta)

    if polish:
        lo, hi = pose_set.lo, pose_set.hi
        step = 0.02 * (hi - lo)

        def neg_lam(p):
            J = _admissible(model, p, task_set)
            return -np.inf if J is None else -np.linalg.eigvalsh(J @ J.T)[0]

        def nrm(p):
            J = _admissible(model, p, task_set)
            return -np.inf if J is None else np.linalg.norm(J, 2)

        _, v = _coordinate_search(neg_lam, arg_lam, lo, hi, step)
        lam_min = min(lam_min, -v)
        _, v = _coordinate_search(nrm, arg_nrm, lo, hi, step)
        nrm_max = max(nrm_max, v)
        z = arg_dot[1]

        def dot(p):
            if _admissible(model, p, task_set) is None:
                return -np.inf
            try:
                return np.linalg.norm(kin.jacobian_time_derivative(model, p, z), 2)
            except SingularOrientation:
                return -np.inf

        _, v = _coordinate_search(dot, arg_dot[0], lo, hi, step, iters=20)
        dot_max = max(dot_max, v)

    return JacobianBounds(float(lam_min), float(nrm_max), float(dot_max), samples, seed,
                          tuple(float(b) for b in blocks))


def lipschitz_constant(quotient: Callable[[np.ndarray, np.ndarray], float],
                       draw: Callable[[np.random.Generator], tuple],
                       samples: int, rng: np.random.Generator,
                       polish_steps: int = 200) -> float:
    """Largest sampled difference quotient.

    ``draw(rng)`` returns a pair ``(x, dx)``; ``quotient(x, dx)`` the ratio
    ``||F(x + dx) - F(x)|| / ||G(x + dx) - G(x)||`` or ``nan`` to skip.  The
    best pair is then refined by random-restart perturbation of ``dx``.
    """
    best, arg = 0.0, None
    for _ in range(samples):
        x, dx = draw(rng)
        v = quotient(x, dx)
        if np.isfinite(v) and v > best:
            best, arg = v, (x, dx)
    if arg is None:
        return 0.0
    x, dx = arg
    scale = 0.3
    for _ in range(polish_steps):
        trial = dx + scale * np.linalg.norm(dx) * rng.standard_normal(dx.shape) / math.sqrt(dx.size)
        v = quotient(x, trial)
        if np.isfinite(v) and v > best:
            best, dx = v, trial
        else:
            scale *= 0.97
    return float(best)


def estimate_lipschitz_fn(c: Callable, chi_set: ConstraintSet, zeta_set: ConstraintSet,
                          samples: int = 10_000, seed: int = 0) -> float:
    """Lipschitz constant of ``c(chi, zeta)`` in ``chi`` over the given sets."""
    rng = np.random.default_rng(seed)

    def draw(r):
        a, b = chi_set.sample(r, 2)
        z = zeta_set.sample(r, 1)[0]
        return np.concatenate([a, z]), b - a

    d = chi_set.dim

    def quotient(x, dx):
        den = np.linalg.norm(dx)
        if den < 1e-12:
            return np.nan
        a, z = x[:d], x[d:]
        return np.linalg.norm(np.asarray(c(a + dx, z)) - np.asarray(c(a, z))) / den

    return lipschitz_constant(quotient, draw, samples, rng)


def estimate_lipschitz(model: kin.UvmsModel, params, sets: dict, samples: int = 10_000,
                       seed: int = 0, contact=None, pair_scale: float = 0.05) -> LipschitzBounds:
    """Sampled Lipschitz constants of ``c(chi, zeta) = J(pose) zeta`` in chi and,
    when dynamics ``params`` are given, of the drift ``f`` in chi and zeta.

    ``sets`` holds ``pose`` (a box), ``zeta`` and optionally ``task``.  Pairs
    are a sampled pose and a second pose displaced by a random vector with
    entries scaled to ``pair_scale`` of the box widths; ``chi`` is evaluated
    through forward kinematics on both.
    """
    from .dynamics import ContactModel, drift

    pose_set: Box = sets["pose"]
    zeta_set: ConstraintSet = sets["zeta"]
    task_set = sets.get("task")
    rng = np.random.default_rng(seed)
    widths = pose_set.hi - pose_set.lo
    dim = 6 + model.n
    contact = contact or ContactModel()

    def draw_pose(r):
        while True:
            p = pose_set.sample(r, 1)[0]
            if _admissible(model, p, task_set) is not None:
                return p

    def draw(r):
        p = draw_pose(r)
        z = zeta_set.sample(r, 1)[0]
        dp = pair_scale * widths * r.uniform(-1, 1, dim)
        return np.concatenate([p, z]), dp

    def chi_quotient(fun):
        def q(x, dp):
            p, z = x[:dim], x[dim:]
            p2 = np.clip(p + dp, pose_set.lo, pose_set.hi)
            if _admissible(model, p2, task_set) is None:
                return np.nan
            try:
                c1, c2 = kin.task_vector(model, p), kin.task_vector(model, p2)
                den = np.linalg.norm(task_difference(c2, c1))
                if den < 1e-9:
                    return np.nan
                return np.linalg.norm(fun(c2, z, p2) - fun(c1, z, p)) / den
            except SingularOrientation:
                return np.nan
        return q

    L_c = lipschitz_constant(chi_quotient(lambda c, z, p: kin.task_jacobian(model, p) @ z),
                             draw, samples, rng)
    L1 = L2 = 0.0
    if params is not None:
        f = lambda c, z, p: drift(model, params, contact, c, z, p)
        L1 = lipschitz_constant(chi_quotient(f), draw, samples, rng)

        def draw_z(r):
            p = draw_pose(r)
            a, b = zeta_set.sample(r, 2)
            return np.concatenate([p, a]), b - a

        def z_quotient(x, dz):
            p, z = x[:dim], x[dim:]
            den = np.linalg.norm(dz)
            if den < 1e-12:
                return np.nan
            c = kin.task_vector(model, p)
            return np.linalg.norm(f(c, z + dz, p) - f(c, z, p)) / den

        L2 = lipschitz_constant(z_quotient, draw_z, samples, rng)
    return LipschitzBounds(L_c, L1, L2, samples, seed)


# --- tube gains ---------------------------------------------------------------

@dataclass(frozen=True)
class TubeParameters:
    """Gains, bounds and invariant-tube radii of the two-level ancillary law."""

    sigma_under: float
    sigma: float
    rho: float
    k: float
    Lambda1: float
    Lambda2: float
    alpha1: float
    alpha2: float
    omega1_radius: float
    omega2_radius: float
    d_tilde: float
    J_under: float
    J_bar: float
    J_tilde: float
    L_c: float
    L: float

    def check(self, rtol: float = 1e-12) -> None:
        """Re-verify every defining relation; raise InfeasibleGains otherwise."""
        def close(a, b):
            return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))

        problems = []
        if not self.sigma_under > 0:
            problems.append("sigma_under must be positive")
        if not close(self.sigma, (self.L_c + self.sigma_under) / self.J_under):
            problems.append("sigma != (L_c + sigma_under)/J_under")
        if not close(self.Lambda1, self.L + self.J_bar + self.sigma * (self.L_c + self.J_tilde)):
            problems.append("Lambda1 mismatch")
        if not close(self.Lambda2, self.L + self.sigma * self.J_bar ** 2):
            problems.append("Lambda2 mismatch")
        if not self.rho > self.Lambda1 / (4 * self.sigma_under):
            problems.append("rho <= Lambda1/(4 sigma_under)")
        if not self.k > self.rho * self.Lambda1 + self.Lambda2:
            problems.append("k <= rho Lambda1 + Lambda2")
        if not (self.alpha1 > 0 and self.alpha2 > 0):
            problems.append("alpha1 and alpha2 must be positive")
        if problems:
            raise InfeasibleGains("; ".join(problems))

    @property
    def alpha_min(self) -> float:
        return min(self.alpha1, self.alpha2)

    def to_dict(self) -> dict:
        return asdict(self)


def tube_gains(bounds: JacobianBounds, lips: LipschitzBounds, d_tilde: float,
               sigma_under: float = 1.0, rho_margin: float = 2.0,
               k_margin: float = 2.0) -> TubeParameters:
    if sigma_under <= 0:
        raise InfeasibleGains("sigma_under must be positive")
    if rho_margin <= 1 or k_margin <= 1:
        raise InfeasibleGains("safety margins must exceed 1")
    if d_tilde < 0:
        raise InfeasibleGains("disturbance bound must be nonnegative")
    Ju, Jb, Jt = bounds.J_under, bounds.J_bar, bounds.J_tilde
    if not (Ju > 0 and Jb > 0):
        raise InfeasibleGains("Jacobian bounds must be positive")
    Lc, L = np.float64(lips.L_c), np.float64(lips.L)
    Ju, Jb, Jt = np.float64(Ju), np.float64(Jb), np.float64(Jt)
    with np.errstate(all="ignore"):
        sigma = (Lc + sigma_under) / Ju
        lam1 = L + Jb + sigma * (Lc + Jt)
        lam2 = L + sigma * Jb ** 2
        rho = rho_margin * lam1 / (4 * sigma_under)
        k = k_margin * (rho * lam1 + lam2)
        a1 = sigma_under - lam1 / (4 * rho)
        a2 = k - rho * lam1 - lam2
    amin = min(a1, a2)
    if not np.isfinite([sigma, lam1, lam2, rho, k, a1, a2]).all() or not amin > 0:
        raise InfeasibleGains("gain synthesis produced non-finite or non-positive constants")
    sigma, lam1, lam2, rho, k, a1, a2, amin = map(float, (sigma, lam1, lam2, rho, k, a1, a2, amin))
    Ju, Jb, Jt, Lc, L = map(float, (Ju, Jb, Jt, Lc, L))
    tp = TubeParameters(
        sigma_under=sigma_under, sigma=sigma, rho=rho, k=k, Lambda1=lam1, Lambda2=lam2,
        alpha1=a1, alpha2=a2, omega1_radius=d_tilde / amin,
        omega2_radius=2 * d_tilde / (Jb * amin), d_tilde=d_tilde,
        J_under=Ju, J_bar=Jb, J_tilde=Jt, L_c=Lc, L=L,
    )
    tp.check()
    return tp


@dataclass(frozen=True)
class KinematicTube:
    """Single-level tube when the body velocity itself is the input.

    The feedback ``zeta = zeta_bar - sigma J(pose_bar)^T e_dev`` gives
    ``d/dt ||e_dev||^2/2 <= -(sigma J_under - L_c) ||e_dev||^2 + w_tilde ||e_dev||``,
    so with ``sigma = (L_c + sigma_under)/J_under`` the ball of radius
    ``w_tilde/sigma_under`` is invariant.  ``omega2_radius`` bounds the
    feedback (= velocity deviation) and ``input_radii`` its per-block size.
    """

    sigma_under: float
    sigma: float
    w_tilde: float
    omega1_radius: float
    omega2_radius: float
    J_under: float
    J_bar: float
    L_c: float
    input_radii: tuple

    def to_dict(self) -> dict:
        return asdict(self)


def kinematic_tube(bounds: JacobianBounds, lips: LipschitzBounds, w_tilde: float,
                   sigma_under: float = 1.0) -> KinematicTube:
    if sigma_under <= 0:
        raise InfeasibleGains("sigma_under must be positive")
    if bounds.J_under <= 0:
        raise InfeasibleGains("J_under must be positive")
    sigma = (lips.L_c + sigma_under) / bounds.J_under
    w1 = w_tilde / sigma_under
    blocks = bounds.block_norms or (bounds.J_bar,)
    return KinematicTube(
        sigma_under=sigma_under, sigma=sigma, w_tilde=w_tilde, omega1_radius=w1,
        omega2_radius=sigma * bounds.J_bar * w1, J_under=bounds.J_under,
        J_bar=bounds.J_bar, L_c=lips.L_c,
        input_radii=tuple(sigma * b * w1 for b in blocks),
    )


def tighten_kinematic_inputs(U: ProductSet, tube: KinematicTube) -> ProductSet:
    """U minus the per-block image of the error tube under the feedback."""
    from .sets import pontryagin_diff

    if not isinstance(U, ProductSet) or len(U.parts) != len(tube.input_radii):
        raise ValueError("input set must be a product with one factor per Jacobian block")
    return pontryagin_diff(
        U, ProductSet(tuple(NormBall.origin(p.dim, r) for p, r in zip(U.parts, tube.input_radii)))
    )


def printed_radius_diagnostic(w_tilde: float = 0.2, sigma: float = 3.084,
                              J_under: float = 0.5095, L_c: float = 2 * math.sqrt(2),
                              claimed: float = 0.3) -> dict:
    """Evaluate the claimed kinematic tube radius both ways.

    The claimed expression divides by ``sigma J_under + L_c``; the
    Lyapunov derivation needs ``sigma J_under - L_c`` (= sigma_under) to be
    positive and then gives ``w_tilde / (sigma J_under - L_c)``.
    """
    printed_den = sigma * J_under + L_c
    derived_den = sigma * J_under - L_c
    return {
        "w_tilde": w_tilde,
        "sigma": sigma,
        "J_under": J_under,
        "L_c": L_c,
        "claimed_radius": claimed,
        "printed_denominator": printed_den,
        "printed_radius": w_tilde / printed_den,
        "derived_denominator": derived_den,
        "derived_feasible": derived_den > 0,
        "derived_radius": w_tilde / derived_den if derived_den > 0 else None,
        "min_sigma_for_derivation": L_c / J_under,
        "consistent_with_claim": math.isclose(w_tilde / printed_den, claimed, rel_tol=0.05)
        or (derived_den > 0 and math.isclose(w_tilde / derived_den, claimed, rel_tol=0.05)),
    }


def format_radius_diagnostic(diag: dict) -> str:
    lines = [
        f"claimed radius            : {diag['claimed_radius']:.4g}",
        f"printed  w/(sigma*J+L_c)  : {diag['w_tilde']:.4g}/({diag['sigma']:.4g}*{diag['J_under']:.4g}"
        f"+{diag['L_c']:.4g}) = {diag['printed_radius']:.4f}",
    ]
    if diag["derived_feasible"]:
        lines.append(f"derived  w/(sigma*J-L_c)  : {diag['derived_radius']:.4f}")
    else:
        lines.append(
            f"derived  sigma*J-L_c      : {diag['derived_denominator']:.4f} <= 0 -> infeasible "
            f"(needs sigma > {diag['min_sigma_for_derivation']:.4f})"
        )
    lines.append(f"consistent with claim     : {diag['consistent_with_claim']}")
    return "\n".join(lines)
