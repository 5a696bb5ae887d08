"""Terminal ingredients, FHOCP transcription and the receding-horizon step.

The FHOCP is transcribed by single shooting: ``N = T/h`` piecewise-constant
inputs, the nominal model integrated by RK4 with ``substeps`` steps per
interval, Simpson quadrature of the running cost on that grid and all path
constraints imposed at every substep.  It is solved with a PHR augmented
Lagrangian whose inner problems go to L-BFGS-B, with exact gradients from JAX.
"""

from __future__ import annotations

import logging
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from . import jaxkin
from .errors import EmptyResult, Infeasible, MaxIter, NotStabilizable, NumericalFailure
from .sets import Box, ConstraintSet, NormBall, ProductSet

import jax  # noqa: E402  (jaxkin enables x64 first)
import jax.numpy as jnp  # noqa: E402

log = logging.getLogger(__name__)


# --- nominal models ----------------------------------------------------------

@dataclass(eq=False)
class NominalModel:
    """Nominal dynamics ``x' = rhs(x, u)`` with error output ``xi = output(x)``.

    ``rhs`` and ``output`` must be JAX-traceable.  ``x_lo``/``x_hi`` optionally
    bound raw state components (use +-inf for free ones).
    """

    rhs: Callable
    output: Callable
    nx: int
    nu: int
    nxi: int
    x_lo: Optional[np.ndarray] = None
    x_hi: Optional[np.ndarray] = None
    name: str = "nominal"

    def __post_init__(self):
        self._rhs = jax.jit(self.rhs)
        self._out = jax.jit(self.output)

    def np_rhs(self, x, u) -> np.ndarray:
        return np.asarray(self._rhs(jnp.asarray(x, float), jnp.asarray(u, float)))

    def np_output(self, x) -> np.ndarray:
        return np.asarray(self._out(jnp.asarray(x, float)))


def linear_model(A, B) -> NominalModel:
    """``x' = A x + B u`` with the state itself as the output."""
    A = jnp.asarray(np.atleast_2d(A), float)
    B = jnp.asarray(np.atleast_2d(B), float)
    nx, nu = B.shape
    return NominalModel(lambda x, u: A @ x + B @ u, lambda x: x, nx, nu, nx, name="linear")


def kinematic_model(model, chi_des, pose_lo=None, pose_hi=None) -> NominalModel:
    """Kinematic-level nominal UVMS: the body velocity is the input.

    State ``x = [pose, c]`` where ``c`` is a constant task offset so that the
    nominal task state is ``FK(pose) + c`` (zero unless re-anchored to a plant
    whose integrated task state has drifted from its forward kinematics).
    Output is the wrapped task error.
    """
    task = jaxkin.make_task_fn(model)
    chi_des = jnp.asarray(chi_des, float)
    dim = 6 + model.n

    def rhs(x, u):
        return jnp.concatenate([jaxkin.pose_rate(x[:dim], u), jnp.zeros(6)])

    def output(x):
        d = task(x[:dim]) + x[dim:] - chi_des
        return jnp.concatenate([d[:3], jaxkin.wrap(d[3:])])

    lo = np.full(dim + 6, -np.inf)
    hi = np.full(dim + 6, np.inf)
    if pose_lo is not None:
        lo[:dim] = pose_lo
    if pose_hi is not None:
        hi[:dim] = pose_hi
    return NominalModel(rhs, output, dim + 6, dim, 6, lo, hi, name="kinematic")


def dynamic_model(model, params, contact, chi_des, pose_lo=None, pose_hi=None) -> NominalModel:
    """Dynamic-level nominal UVMS, state ``[chi, zeta, pose]``, output ``[e, zeta]``.

    Requires dynamics built by ``DynamicsParams.synthetic`` (their JAX mirror
    is generated from the stored coefficients).
    """
    if params.coeffs is None:
        raise ValueError("dynamic nominal model needs synthetic-default coefficients")
    drift = jaxkin.make_synthetic_drift(model, params.coeffs, contact)
    jac = jaxkin.make_jacobian_fn(model)
    chi_des = jnp.asarray(chi_des, float)
    dim = 6 + model.n

    def rhs(x, u):
        chi, zeta, pose = x[:6], x[6:6 + dim], x[6 + dim:]
        return jnp.concatenate([jac(pose) @ zeta, drift(chi, zeta, pose) + u,
                                jaxkin.pose_rate(pose, zeta)])

    def output(x):
        d = x[:6] - chi_des
        return jnp.concatenate([d[:3], jaxkin.wrap(d[3:]), x[6:6 + dim]])

    lo = np.full(6 + 2 * dim, -np.inf)
    hi = np.full(6 + 2 * dim, np.inf)
    if pose_lo is not None:
        lo[6 + dim:] = pose_lo
    if pose_hi is not None:
        hi[6 + dim:] = pose_hi
    return NominalModel(rhs, output, 6 + 2 * dim, dim, 6 + dim, lo, hi, name="dynamic")


# --- configuration and results ------------------------------------------------

def _check_pd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


@dataclass(eq=False)
class FhocpConfig:
    model: NominalModel
    T: float
    h: float
    Q: np.ndarray
    P: np.ndarray
    R: np.ndarray
    xi_set: Optional[ConstraintSet] = None
    u_set: Optional[ConstraintSet] = None
    substeps: int = 10
    tol: float = 1e-6
    max_iter: int = 500
    # re-solve without the terminal constraint when it alone is unreachable
    terminal_fallback: bool = False

    def __post_init__(self):
        if not 0 < self.h <= self.T:
            raise ValueError("need 0 < h <= T")
        N = self.T / self.h
        if abs(N - round(N)) > 1e-9 * max(1.0, N):
            raise ValueError(f"T/h = {N:.6g} is not an integer")
        self.N = int(round(N))
        if self.substeps < 2 or self.substeps % 2:
            raise ValueError("substeps must be a positive even number (Simpson rule)")
        self.Q = _check_pd(self.Q, "Q")
        self.P = _check_pd(self.P, "P")
        self.R = _check_pd(self.R, "R")
        m = self.model
        if self.Q.shape != (m.nxi, m.nxi) or self.P.shape != (m.nxi, m.nxi):
            raise ValueError(f"Q and P must be {m.nxi}x{m.nxi}")
        if self.R.shape != (m.nu, m.nu):
            raise ValueError(f"R must be {m.nu}x{m.nu}")
        if self.xi_set is not None and self.xi_set.dim != m.nxi:
            raise ValueError("xi_set dimension does not match the model output")
        if self.u_set is not None and self.u_set.dim != m.nu:
            raise ValueError("u_set dimension does not match the model input")

    @property
    def h_int(self) -> float:
        return self.h / self.substeps


@dataclass(frozen=True)
class TerminalIngredients:
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    P: np.ndarray
    Q_tilde: np.ndarray
    epsilon: float
    eps_capped: bool = False
    beta: float = 1e-6

    def level(self, xi) -> float:
        """||xi||_P."""
        xi = np.asarray(xi, dtype=float)
        return float(np.sqrt(xi @ self.P @ xi))

    def contains(self, xi, tol: float = 0.0) -> bool:
        return self.level(xi) <= self.epsilon + tol

    @property
    def radius_bound(self) -> float:
        """Largest Euclidean norm inside the terminal set, eps/sqrt(lambda_min(P))."""
        return self.epsilon / math.sqrt(np.linalg.eigvalsh(self.P)[0])


@dataclass
class FhocpSolution:
    u_seq: np.ndarray
    x_path: np.ndarray
    xi_path: np.ndarray
    cost: float
    status: str
    kkt: float = float("nan")
    iterations: int = 0
    max_violation: float = 0.0
    terminal_margin: float = float("inf")
    substeps: int = 10

    @property
    def xi_pred(self) -> np.ndarray:
        """Predicted errors at the sampling instants (N + 1 rows)."""
        return self.xi_path[:: self.substeps]

    @property
    def x_pred(self) -> np.ndarray:
        return self.x_path[:: self.substeps]


# --- linearisation and terminal ingredients -----------------------------------

def jacobian_linearize(rhs, xi_eq, u_eq, step: float = 1e-6):
    """Central-difference ``(A, B)`` of ``rhs(xi, u)`` at ``(xi_eq, u_eq)``."""
    x0 = np.asarray(xi_eq, dtype=float)
    u0 = np.asarray(u_eq, dtype=float)
    f0 = np.asarray(rhs(x0, u0), dtype=float)
    A = np.zeros((f0.size, x0.size))
    B = np.zeros((f0.size, u0.size))
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = step * (1 + abs(x0[i]))
        A[:, i] = (np.asarray(rhs(x0 + dx, u0)) - np.asarray(rhs(x0 - dx, u0))) / (2 * dx[i])
    for i in range(u0.size):
        du = np.zeros_like(u0)
        du[i] = step * (1 + abs(u0[i]))
        B[:, i] = (np.asarray(rhs(x0, u0 + du)) - np.asarray(rhs(x0, u0 - du))) / (2 * du[i])
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalFailure("non-finite finite differences in linearisation")
    return A, B


def is_stabilizable(A, B, tol: float = 1e-9) -> bool:
    """PBH test on the eigenvalues with nonnegative real part."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-8 * max(1.0, np.abs(M).max())) < n:
                return False
    return True


def _unit_sphere(rng, count, dim):
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def terminal_ingredients(A, B, Q, R, U_bar: Optional[ConstraintSet] = None, beta: float = 1e-6,
                         samples: int = 1000, eps_max: float = 1e3, decrease=None,
                         use_lqr: bool = True, seed: int = 0, shrink: float = 0.05,
                         iters: int = 60) -> TerminalIngredients:
    """Local LQR gain, Lyapunov terminal weight and terminal radius.

    ``epsilon`` is the largest radius (found by bisection, then shrunk by
    ``shrink``) for which ``K xi`` stays in ``U_bar`` on ``samples`` points of
    the level set ``||xi||_P = epsilon`` and, when given, ``decrease(xi_batch)``
    (a nonlinear decrease residual per row) is nonpositive there too.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = _check_pd(Q, "Q")
    R = _check_pd(R, "R")
    nx = A.shape[0]
    hurwitz = np.max(np.linalg.eigvals(A).real) < 0
    if use_lqr:
        if not is_stabilizable(A, B):
            raise NotStabilizable("(A, B) is not stabilizable")
        try:
            X = sla.solve_continuous_are(A, B, Q, R)
            K = -np.linalg.solve(R, B.T @ X)
        except (np.linalg.LinAlgError, ValueError) as exc:
            if not hurwitz:
                raise NotStabilizable(f"Riccati solve failed: {exc}") from exc
            K = np.zeros((B.shape[1], nx))
    else:
        if not hurwitz:
            raise NotStabilizable("K = 0 requires a Hurwitz A")
        K = np.zeros((B.shape[1], nx))
    Acl = A + B @ K
    if np.max(np.linalg.eigvals(Acl).real) >= 0:
        raise NotStabilizable("closed loop A + B K is not Hurwitz")
    Q_tilde = Q + K.T @ R @ K
    P = sla.solve_continuous_lyapunov(Acl.T, -(Q_tilde + beta * np.eye(nx)))
    P = 0.5 * (P + P.T)

    L = np.linalg.cholesky(P)
    dirs = np.linalg.solve(L.T, _unit_sphere(np.random.default_rng(seed), samples, nx).T).T

    def ok(eps):
        xi = eps * dirs
        if U_bar is not None:
            u = xi @ K.T
            if not all(U_bar.contains(ui) for ui in u):
                return False
        if decrease is not None and np.any(np.asarray(decrease(xi)) > 0):
            return False
        return True

    if ok(eps_max):
        return TerminalIngredients(A, B, K, P, Q_tilde, float(eps_max), True, beta)
    lo, hi = 0.0, eps_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise EmptyResult("no positive terminal radius keeps the local controller admissible")
    return TerminalIngredients(A, B, K, P, Q_tilde, float((1 - shrink) * lo), False, beta)


# --- FHOCP ---------------------------------------------------------------------

def _set_constraints(S: Optional[ConstraintSet]):
    """JAX function v -> vector g with g <= 0 iff v in S (finite parts only)."""
    if S is None:
        return None
    if isinstance(S, Box):
        lo_idx = np.flatnonzero(np.isfinite(S.lo))
        hi_idx = np.flatnonzero(np.isfinite(S.hi))
        if lo_idx.size + hi_idx.size == 0:
            return None
        lo, hi = jnp.asarray(S.lo[lo_idx]), jnp.asarray(S.hi[hi_idx])
        return lambda v: jnp.concatenate([lo - v[lo_idx], v[hi_idx] - hi])
    if isinstance(S, NormBall):
        if not np.isfinite(S.radius):
            return None
        c, r = jnp.asarray(S.center), S.radius
        # squared form keeps it smooth; scaled to read as a distance near the boundary
        return lambda v: jnp.atleast_1d((jnp.sum((v - c) ** 2) - r ** 2) / (2 * max(r, 1e-3)))
    if isinstance(S, ProductSet):
        fns = [(sl, _set_constraints(p)) for p, sl in zip(S.parts, S.slices)]
        fns = [(sl, f) for sl, f in fns if f is not None]
        if not fns:
            return None
        return lambda v: jnp.concatenate([f(v[sl]) for sl, f in fns])
    raise TypeError(f"unsupported set {type(S).__name__}")


def simpson_weights(m: int, dt: float) -> np.ndarray:
    w = np.ones(m + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return w * dt / 3


class FhocpSolver:
    """Compiled single-shooting transcription of one FHOCP configuration."""

    def __init__(self, config: FhocpConfig, ingredients: Optional[TerminalIngredients] = None):
        self.config = config
        self.ingredients = ingredients
        cfg, m = config, config.model
        N, M, h_int = cfg.N, cfg.substeps, cfg.h_int
        Q, P, R = (jnp.asarray(a) for a in (cfg.Q, cfg.P, cfg.R))
        w = jnp.asarray(simpson_weights(M, h_int))
        rhs, out = m.rhs, m.output

        g_xi = _set_constraints(cfg.xi_set)
        g_u = _set_constraints(cfg.u_set)
        g_x = None
        if m.x_lo is not None:
            g_x = _set_constraints(Box(m.x_lo, m.x_hi))
        Pf = jnp.asarray(ingredients.P) if ingredients is not None else None
        terminal = ingredients is not None and not ingredients.eps_capped

        def rk4(x, u):
            k1 = rhs(x, u)
            k2 = rhs(x + 0.5 * h_int * k1, u)
            k3 = rhs(x + 0.5 * h_int * k2, u)
            k4 = rhs(x + h_int * k3, u)
            return x + (h_int / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        def rollout(U, x0):
            def interval(x, u):
                def sub(x, _):
                    xn = rk4(x, u)
                    return xn, xn
                xe, xs = jax.lax.scan(sub, x, None, length=M)
                return xe, jnp.concatenate([x[None], xs], axis=0)
            xN, traj = jax.lax.scan(interval, x0, U)
            return xN, traj

        def evaluate(z, x0, eps2):
            U = z.reshape(N, m.nu)
            xN, traj = rollout(U, x0)
            xi = jax.vmap(jax.vmap(out))(traj)
            stage = jnp.einsum("nmi,ij,nmj->nm", xi, Q, xi)
            xiN = out(xN)
            cost = jnp.sum(stage @ w) + cfg.h * jnp.einsum("ni,ij,nj->", U, R, U) + xiN @ P @ xiN
            gs = []
            # the very first sample is fixed by x0 and checked before solving
            pts = traj.reshape(-1, m.nx)[1:]
            xis = xi.reshape(-1, m.nxi)[1:]
            if g_xi is not None:
                gs.append(jax.vmap(g_xi)(xis).ravel())
            if g_x is not None:
                gs.append(jax.vmap(g_x)(pts).ravel())
            if g_u is not None:
                gs.append(jax.vmap(g_u)(U).ravel())
            if terminal:
                # eps2 = inf switches the terminal constraint off; the finite
                # branch reads as ||xi||_P - eps near the boundary
                off = jnp.isinf(eps2)
                e2 = jnp.where(off, 1.0, eps2)
                gt = (xiN @ Pf @ xiN - e2) / (2 * jnp.sqrt(e2))
                gs.append(jnp.atleast_1d(jnp.where(off, -1.0, gt)))
            g = jnp.concatenate(gs) if gs else jnp.zeros(0)
            return cost, g

        def aug(z, x0, eps2, lam, mu):
            cost, g = evaluate(z, x0, eps2)
            return cost + (jnp.sum(jnp.maximum(0.0, lam + mu * g) ** 2) - jnp.sum(lam ** 2)) / (2 * mu)

        self._evaluate = jax.jit(evaluate)
        self._aug = jax.jit(jax.value_and_grad(aug))
        self._rollout = jax.jit(lambda z, x0: rollout(z.reshape(N, m.nu), x0))
        self._xi_path = jax.jit(lambda traj: jax.vmap(jax.vmap(out))(traj))
        self.terminal = terminal
        self.inner_cap = 150
        self.stall_mu = 1e6

    def check_initial(self, x0):
        cfg, m = self.config, self.config.model
        xi0 = m.np_output(x0)
        viol = 0.0
        if cfg.xi_set is not None:
            viol = max(viol, -cfg.xi_set.margin(xi0))
        if m.x_lo is not None:
            viol = max(viol, float(np.max(np.r_[m.x_lo - x0, x0 - m.x_hi])))
        if viol > cfg.tol:
            raise Infeasible(f"initial state violates the tightened state constraints by {viol:.3g}",
                             violation=viol)

    def solve(self, x0, warm_start=None) -> FhocpSolution:
        if not (self.terminal and self.config.terminal_fallback):
            return self._solve(x0, warm_start, relax=False)
        # a relaxed optimum that already ends in the terminal set is also the
        # constrained optimum (the terminal multiplier is zero)
        relaxed = self._solve(x0, warm_start, relax=True)
        if relaxed.status == "solved" and relaxed.terminal_margin >= -self.config.tol * self.ingredients.epsilon:
            return relaxed
        sol = self._solve(x0, relaxed.u_seq if relaxed.status == "solved" else warm_start, relax=False)
        if sol.status != "infeasible":
            return sol
        if relaxed.status == "solved":
            relaxed.status = "relaxed"
        log.info("terminal constraint unreachable (violation %.3g); relaxed solve: %s",
                 sol.max_violation, relaxed.status)
        return relaxed

    def _solve(self, x0, warm_start, relax) -> FhocpSolution:
        cfg, m = self.config, self.config.model
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (m.nx,) or not np.all(np.isfinite(x0)):
            raise ValueError(f"initial state must be a finite vector of length {m.nx}")
        self.check_initial(x0)
        N = cfg.N
        z = np.zeros(N * m.nu) if warm_start is None else np.asarray(warm_start, float).reshape(-1).copy()
        if z.size != N * m.nu:
            raise ValueError(f"warm start must hold {N} inputs of size {m.nu}")
        x0j = jnp.asarray(x0)
        eps2 = np.inf if (relax or not self.terminal) else self.ingredients.epsilon ** 2
        _, g = self._evaluate(jnp.asarray(z), x0j, eps2)
        lam = np.zeros(g.size)
        mu = 10.0
        tol = cfg.tol
        used = 0
        prev_viol = np.inf
        status, kkt, viol = "max-iter", np.inf, np.inf

        def fg(zz, lam_j, mu_):
            v, gr = self._aug(jnp.asarray(zz), x0j, eps2, lam_j, mu_)
            return float(v), np.asarray(gr, dtype=float)

        while used < cfg.max_iter:
            lam_j = jnp.asarray(lam)
            res = minimize(fg, z, args=(lam_j, mu), jac=True, method="L-BFGS-B",
                           options={"maxiter": min(cfg.max_iter - used, self.inner_cap), "gtol": 0.1 * tol,
                                    "ftol": 1e-16, "maxcor": 20})
            used += max(int(res.nit), 1)
            z = res.x
            cost, g = self._evaluate(jnp.asarray(z), x0j, eps2)
            g = np.asarray(g)
            lam_new = np.maximum(0.0, lam + mu * g)
            viol = float(np.max(g, initial=0.0))
            compl = float(np.max(np.abs(np.minimum(-g, lam_new)), initial=0.0))
            # gradient of the Lagrangian at the updated multipliers equals the
            # inner gradient, so this is the stationarity part of the KKT residual
            kkt = max(float(np.max(np.abs(res.jac), initial=0.0)), compl)
            lam = lam_new
            if viol <= tol and kkt <= tol:
                status = "solved"
                break
            if viol > tol and viol > 0.25 * prev_viol:
                if mu >= self.stall_mu and viol > tol and viol > 0.9 * prev_viol:
                    # penalty is large and the violation no longer moves
                    status = "infeasible"
                    break
                mu = min(mu * 10.0, 1e9)
            prev_viol = viol
        else:
            status = "infeasible" if viol > tol else "max-iter"

        xN, traj = self._rollout(jnp.asarray(z), x0j)
        traj = np.asarray(traj)
        x_path = np.concatenate([traj[:, :-1].reshape(-1, m.nx), np.asarray(xN)[None]], axis=0)
        xi_path = np.asarray(self._xi_path(jnp.asarray(x_path)[None]))[0]
        term = np.inf
        if self.ingredients is not None:
            term = self.ingredients.epsilon - self.ingredients.level(xi_path[-1])
        return FhocpSolution(
            u_seq=z.reshape(N, m.nu), x_path=x_path, xi_path=xi_path, cost=float(cost),
            status=status, kkt=float(kkt), iterations=used, max_violation=viol,
            terminal_margin=float(term), substeps=cfg.substeps,
        )


_SOLVERS: "weakref.WeakKeyDictionary[FhocpConfig, tuple]" = weakref.WeakKeyDictionary()


def get_solver(config: FhocpConfig, ingredients=None) -> FhocpSolver:
    cached = _SOLVERS.get(config)
    if cached is not None and cached[0] is ingredients:
        return cached[1]
    solver = FhocpSolver(config, ingredients)
    _SOLVERS[config] = (ingredients, solver)
    return solver


def solve_fhocp(x0, config: FhocpConfig, ingredients: Optional[TerminalIngredients] = None,
                warm_start=None, strict: bool = False) -> FhocpSolution:
    """Solve one FHOCP from the nominal state ``x0``.

    Raises Infeasible straight away if ``x0`` violates the state constraints.
    Otherwise the status is reported on the solution; with ``strict`` a
    non-solved status is raised instead.
    """
    sol = get_solver(config, ingredients).solve(x0, warm_start)
    if strict and sol.status == "infeasible":
        raise Infeasible(f"FHOCP infeasible, max violation {sol.max_violation:.3g}",
                         violation=sol.max_violation)
    if strict and sol.status == "max-iter":
        raise MaxIter(f"FHOCP stopped after {sol.iterations} iterations, KKT residual {sol.kkt:.3g}")
    return sol


def shift_warm_start(previous: FhocpSolution, ingredients: Optional[TerminalIngredients]) -> np.ndarray:
    """Previous inputs shifted by one interval, with the local controller appended."""
    u = previous.u_seq
    tail = np.zeros(u.shape[1]) if ingredients is None else ingredients.K @ previous.xi_path[-1]
    return np.vstack([u[1:], tail[None]])


def receding_horizon_step(x_nominal, config: FhocpConfig, ingredients=None, previous=None,
                          kappa=None, anchor=None):
    """One sampling instant: solve, apply the first input plus feedback, advance.

    ``anchor`` (the plant state mapped into nominal coordinates) replaces the
    nominal state before solving when re-anchoring is wanted.  Returns
    ``(u_applied, x_nominal_next, solution)``; the next nominal state is the
    predicted state one period ahead.
    """
    x0 = np.asarray(anchor if anchor is not None else x_nominal, dtype=float)
    warm = shift_warm_start(previous, ingredients) if previous is not None else None
    sol = solve_fhocp(x0, config, ingredients, warm)
    if sol.status == "infeasible":
        raise Infeasible(f"FHOCP infeasible, max violation {sol.max_violation:.3g}",
                         violation=sol.max_violation)
    if sol.status == "relaxed":
        log.info("FHOCP solved without the terminal constraint (KKT %.2e)", sol.kkt)
    elif sol.status != "solved":
        log.warning("FHOCP returned %s (KKT %.2e)", sol.status, sol.kkt)
    u_bar = sol.u_seq[0]
    u = u_bar + (np.zeros_like(u_bar) if kappa is None else np.asarray(kappa, float))
    return u, sol.x_path[config.substeps].copy(), sol
