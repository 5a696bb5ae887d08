"""Norm-ball and box constraint sets with Minkowski/Pontryagin/linear-map ops.

Three concrete set shapes are supported:

* :class:`NormBall` -- Euclidean ball ``{x : ||x - center|| <= radius}``
* :class:`Box` -- axis-aligned box ``{x : lo <= x <= hi}``
* :class:`ProductSet` -- Cartesian product of the above over consecutive
  coordinate blocks, e.g. ``{||nu1|| <= 2} x {||nu2|| <= 2} x {||qdot|| <= 2}``.

Operations return exact results where the shapes allow it and documented
outer (for sums and images) or inner (for differences) approximations
otherwise, so that tightening stays conservative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DimensionMismatch, EmptyResult, UnsupportedCombination


class ConstraintSet:
    dim: int

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.margin(x) >= -tol

    def margin(self, x) -> float:
        """Signed slack: >= 0 inside, < 0 outside."""
        raise NotImplementedError

    def translate(self, v) -> "ConstraintSet":
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class NormBall(ConstraintSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        if self.radius < 0 or not np.isfinite(self.radius) and self.radius != np.inf:
            raise ValueError("ball radius must be nonnegative")

    @classmethod
    def origin(cls, dim: int, radius: float) -> "NormBall":
        return cls(np.zeros(dim), radius)

    @property
    def dim(self) -> int:
        return self.center.size

    def margin(self, x) -> float:
        return self.radius - float(np.linalg.norm(np.asarray(x, dtype=float) - self.center))

    def translate(self, v):
        return NormBall(self.center + np.asarray(v, dtype=float), self.radius)

    def sample(self, rng, count):
        g = rng.standard_normal((count, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.random(count) ** (1.0 / self.dim)
        return self.center + g * r[:, None]

    def to_dict(self):
        return {"type": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Box(ConstraintSet):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds have different shapes")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_widths) -> "Box":
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def margin(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.min(np.minimum(x - self.lo, self.hi - x)))

    def translate(self, v):
        v = np.asarray(v, dtype=float)
        return Box(self.lo + v, self.hi + v)

    def sample(self, rng, count):
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))

    def to_dict(self):
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class ProductSet(ConstraintSet):
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("product set needs at least one factor")

    @property
    def dim(self) -> int:
        return sum(p.dim for p in self.parts)

    @property
    def slices(self) -> list[slice]:
        out, i = [], 0
        for p in self.parts:
            out.append(slice(i, i + p.dim))
            i += p.dim
        return out

    def split(self, x) -> list[np.ndarray]:
        x = np.asarray(x, dtype=float)
        return [x[s] for s in self.slices]

    def margin(self, x) -> float:
        return min(p.margin(xi) for p, xi in zip(self.parts, self.split(x)))

    def translate(self, v):
        return ProductSet(tuple(p.translate(vi) for p, vi in zip(self.parts, self.split(v))))

    def sample(self, rng, count):
        return np.hstack([p.sample(rng, count) for p in self.parts])

    def to_dict(self):
        return {"type": "product", "parts": [p.to_dict() for p in self.parts]}


AnySet = Union[NormBall, Box, ProductSet]


def set_from_dict(doc: dict) -> ConstraintSet:
    kind = doc.get("type")
    if kind == "ball":
        c = doc.get("center")
        if c is None:
            c = np.zeros(int(doc["dim"]))
        return NormBall(c, doc["radius"])
    if kind == "box":
        if "half_widths" in doc:
            return Box.symmetric(doc["half_widths"])
        return Box(doc["lo"], doc["hi"])
    if kind == "product":
        return ProductSet(tuple(set_from_dict(p) for p in doc["parts"]))
    raise ValueError(f"unknown set type {kind!r}")


def _check_dims(a, b):
    if a.dim != b.dim:
        raise DimensionMismatch(f"set dimensions differ: {a.dim} vs {b.dim}")


def minkowski_sum(a: ConstraintSet, b: ConstraintSet) -> ConstraintSet:
    """Outer representation of ``a + b``.

    ball+ball is exact; box+box is exact; box+ball inflates each face by the
    radius, which is the tightest enclosing box of the (rounded) true sum.
    """
    _check_dims(a, b)
    if isinstance(a, NormBall) and isinstance(b, NormBall):
        return NormBall(a.center + b.center, a.radius + b.radius)
    if isinstance(a, Box) and isinstance(b, Box):
        return Box(a.lo + b.lo, a.hi + b.hi)
    if isinstance(a, NormBall) and isinstance(b, Box):
        a, b = b, a
    if isinstance(a, Box) and isinstance(b, NormBall):
        return Box(a.lo + b.center - b.radius, a.hi + b.center + b.radius)
    if isinstance(a, ProductSet) and isinstance(b, ProductSet) and _same_blocks(a, b):
        return ProductSet(tuple(minkowski_sum(p, r) for p, r in zip(a.parts, b.parts)))
    raise UnsupportedCombination(f"no Minkowski sum for {type(a).__name__} + {type(b).__name__}")


def _same_blocks(a: ProductSet, b: ProductSet) -> bool:
    return [p.dim for p in a.parts] == [p.dim for p in b.parts]


def pontryagin_diff(a: ConstraintSet, b: ConstraintSet) -> ConstraintSet:
    """Erosion ``a - b = {x : x + s in a for all s in b}`` by a ball ``b``.

    For a box the result shifts every face inward by the radius; for the
    per-axis interval constraints stored in a box this is exact.  A product
    set is eroded block by block with the ball's radius (the ball contains
    every block projection, so this is conservative) unless ``b`` is itself a
    product of balls with matching blocks, in which case each block is eroded
    by its own radius.
    """
    _check_dims(a, b)
    if isinstance(b, ProductSet) and isinstance(a, ProductSet) and _same_blocks(a, b):
        return ProductSet(tuple(pontryagin_diff(p, r) for p, r in zip(a.parts, b.parts)))
    if not isinstance(b, NormBall):
        raise UnsupportedCombination("Pontryagin difference only supports a ball subtrahend")
    if isinstance(a, NormBall):
        r = a.radius - b.radius
        if r < 0:
            raise EmptyResult(
                f"ball of radius {a.radius:.6g} cannot absorb a tube of radius {b.radius:.6g}"
            )
        return NormBall(a.center - b.center, r)
    if isinstance(a, Box):
        lo = a.lo - b.center + b.radius
        hi = a.hi - b.center - b.radius
        if np.any(lo > hi):
            i = int(np.argmax(lo - hi))
            raise EmptyResult(
                f"box axis {i} of width {a.hi[i] - a.lo[i]:.6g} cannot absorb a tube of radius {b.radius:.6g}"
            )
        return Box(lo, hi)
    if isinstance(a, ProductSet):
        parts = []
        start = 0
        for p in a.parts:
            sub = NormBall(b.center[start:start + p.dim], b.radius)
            parts.append(pontryagin_diff(p, sub))
            start += p.dim
        return ProductSet(tuple(parts))
    raise UnsupportedCombination(f"no Pontryagin difference for {type(a).__name__}")


def matrix_set_multiply(Lam, s: ConstraintSet) -> ConstraintSet:
    """Image ``{Lam x : x in s}`` as a ball.

    For a ball the result uses ``||Lam||_2 * radius``, exact for scalar
    multiples of the identity and an outer bound otherwise.  For a product of
    balls the bound is ``sqrt(sum_i (||Lam_i||_2 r_i)^2)`` where ``Lam_i`` are
    the column blocks, which is exact for block-scalar diagonal maps such as
    ``diag(-k I, -k sigma Jbar I)``.
    """
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    if Lam.shape[1] != s.dim:
        raise DimensionMismatch(f"matrix has {Lam.shape[1]} columns, set has dimension {s.dim}")
    if isinstance(s, NormBall):
        return NormBall(Lam @ s.center, np.linalg.norm(Lam, 2) * s.radius if s.radius else 0.0)
    if isinstance(s, ProductSet) and all(isinstance(p, NormBall) for p in s.parts):
        center = np.zeros(Lam.shape[0])
        sq = 0.0
        for p, sl in zip(s.parts, s.slices):
            block = Lam[:, sl]
            center += block @ p.center
            sq += (np.linalg.norm(block, 2) * p.radius) ** 2
        return NormBall(center, float(np.sqrt(sq)))
    if isinstance(s, Box):
        mid = s.midpoint
        half = 0.5 * (s.hi - s.lo)
        return NormBall(Lam @ mid, float(np.linalg.norm(Lam, 2) * np.linalg.norm(half)))
    raise UnsupportedCombination(f"no linear image for {type(s).__name__}")


def error_constraint_set(X: ConstraintSet, chi_des) -> ConstraintSet:
    """Task constraints re-expressed on the error ``e = chi - chi_des``."""
    chi_des = np.asarray(chi_des, dtype=float)
    if chi_des.shape != (X.dim,):
        raise DimensionMismatch("chi_des must match the task-set dimension")
    return X.translate(-chi_des)


def tighten_constraints(E: ConstraintSet, Z: ConstraintSet, U: ConstraintSet, tube):
    """Return ``(E - Omega1, Z - Omega2, U - Lam(Omega1 x Omega2))``.

    ``tube`` must expose ``omega1_radius``, ``omega2_radius``, ``k``,
    ``sigma`` and ``J_bar``.
    """
    om1 = NormBall.origin(E.dim, tube.omega1_radius)
    om2 = NormBall.origin(Z.dim, tube.omega2_radius)
    E_bar = pontryagin_diff(E, om1)
    Z_bar = pontryagin_diff(Z, om2)
    # the feedback enters U with the first block lifted to U's dimension, so
    # the image of Omega1 x Omega2 is a ball of radius k*w1 + k*sigma*Jbar*w2
    # (triangle inequality, exact along aligned directions)
    lam = np.diag(np.concatenate([np.full(E.dim, -tube.k),
                                  np.full(Z.dim, -tube.k * tube.sigma * tube.J_bar)]))
    img1 = matrix_set_multiply(lam[:E.dim, :E.dim], om1)
    img2 = matrix_set_multiply(lam[E.dim:, E.dim:], om2)
    radius = img1.radius + img2.radius
    U_bar = pontryagin_diff(U, NormBall.origin(U.dim, radius))
    return E_bar, Z_bar, U_bar
