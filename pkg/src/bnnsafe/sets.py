"""Boxes, polyhedra and finite unions of polyhedra in state space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = ["BoxSet", "PolyhedronSet", "UnionSet", "box_complement", "as_parts", "UnboundedSetError"]


class UnboundedSetError(ValueError):
    """A set that must be bounded for MILP encoding is not."""


@dataclass(frozen=True)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lower <= upper with matching shapes")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise UnboundedSetError("box bounds must be finite")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=np.float64)
        inside = np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)
        return bool(inside) if x.ndim == 1 else inside

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def intersect(self, other: "BoxSet") -> "BoxSet | None":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(lo > hi):
            return None
        return BoxSet(lo, hi)

    def as_polyhedron(self) -> "PolyhedronSet":
        eye = np.eye(self.dim)
        return PolyhedronSet(np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]))

    def grid(self, points_per_dim: int | Sequence[int]) -> np.ndarray:
        counts = [points_per_dim] * self.dim if np.isscalar(points_per_dim) else list(points_per_dim)
        axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_json(self) -> dict:
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class PolyhedronSet:
    """Conjunction of linear inequalities ``A x <= b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if a.shape[0] != b.size:
            raise ValueError("A and b have inconsistent row counts")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("polyhedron coefficients must be finite")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def halfspace(cls, a, b: float) -> "PolyhedronSet":
        """``{x : a . x <= b}``."""
        return cls(np.atleast_2d(a), [b])

    @classmethod
    def at_least(cls, dim: int, k: int, value: float) -> "PolyhedronSet":
        """``{x : x_k >= value}``."""
        a = np.zeros(dim)
        a[k] = -1.0
        return cls.halfspace(a, -value)

    @classmethod
    def at_most(cls, dim: int, k: int, value: float) -> "PolyhedronSet":
        a = np.zeros(dim)
        a[k] = 1.0
        return cls.halfspace(a, value)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=np.float64)
        inside = np.all(x @ self.A.T <= self.b + tol, axis=-1)
        return bool(inside) if x.ndim == 1 else inside

    def intersect(self, other: "PolyhedronSet | BoxSet") -> "PolyhedronSet":
        if isinstance(other, BoxSet):
            other = other.as_polyhedron()
        return PolyhedronSet(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]))

    def bounding_box(self, within: BoxSet | None = None) -> BoxSet | None:
        """Tightest axis-aligned box around ``self`` (intersected with ``within``).

        Returns ``None`` when the intersection is empty and raises
        :class:`UnboundedSetError` when it is unbounded.
        """
        from .milp import Status, solve_lp

        poly = self
        n = self.dim
        big = 1e6
        lo_b = np.full(n, -big) if within is None else within.lower
        hi_b = np.full(n, big) if within is None else within.upper
        senses = -np.ones(poly.b.size)
        lo = np.empty(n)
        hi = np.empty(n)
        for k in range(n):
            for sign, out in ((1.0, lo), (-1.0, hi)):
                c = np.zeros(n)
                c[k] = sign
                res = solve_lp(c, poly.A, senses, poly.b, lo_b, hi_b)
                if res.status is Status.INFEASIBLE:
                    return None
                val = res.x[k]
                if within is None and abs(val) > big / 10:
                    raise UnboundedSetError("polyhedron is unbounded")
                out[k] = val
        return BoxSet(lo, np.maximum(hi, lo))

    def sample(self, rng: np.random.Generator, n: int, within: BoxSet | None = None, max_tries: int = 10000) -> np.ndarray:
        box = self.bounding_box(within)
        if box is None:
            raise ValueError("cannot sample from an empty set")
        out = []
        need = n
        for _ in range(max_tries):
            pts = box.sample(rng, max(4 * need, 16))
            pts = pts[self.contains(pts, tol=1e-12)]
            out.append(pts[:need])
            need -= len(out[-1])
            if need <= 0:
                return np.concatenate(out)
        raise ValueError("rejection sampling from polyhedron failed: region has negligible volume")

    def to_json(self) -> dict:
        return {"type": "polyhedron", "A": self.A.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True)
class UnionSet:
    """Finite union of polyhedra; each member is one disjunct."""

    parts: tuple[PolyhedronSet, ...]

    def __post_init__(self):
        parts = tuple(p.as_polyhedron() if isinstance(p, BoxSet) else p for p in self.parts)
        if not parts:
            raise ValueError("union needs at least one disjunct")
        object.__setattr__(self, "parts", parts)

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=np.float64)
        inside = np.any([p.contains(x, tol) for p in self.parts], axis=0)
        return bool(inside) if x.ndim == 1 else inside

    def sample(self, rng: np.random.Generator, n: int, within: BoxSet | None = None) -> np.ndarray:
        """Uniform-ish samples: disjuncts chosen by bounding-box volume, then rejection."""
        boxes = [p.bounding_box(within) for p in self.parts]
        live = [(p, b) for p, b in zip(self.parts, boxes) if b is not None]
        if not live:
            raise ValueError("cannot sample from an empty set")
        vol = np.array([np.prod(np.maximum(b.upper - b.lower, 1e-9)) for _, b in live])
        counts = rng.multinomial(n, vol / vol.sum())
        pts = [p.sample(rng, c, within) for (p, _), c in zip(live, counts) if c > 0]
        return np.concatenate(pts) if pts else np.zeros((0, self.dim))

    def to_json(self) -> dict:
        return {"type": "union", "parts": [p.to_json() for p in self.parts]}


StateSet = Union[BoxSet, PolyhedronSet, UnionSet]


def box_complement(lower, upper) -> UnionSet:
    """``{x : x_k >= upper_k or x_k <= lower_k for some k}`` as 2m half-spaces."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    m = lower.size
    parts = []
    for k in range(m):
        parts.append(PolyhedronSet.at_least(m, k, upper[k]))
        parts.append(PolyhedronSet.at_most(m, k, lower[k]))
    return UnionSet(tuple(parts))


def as_parts(s: StateSet) -> list[PolyhedronSet]:
    if isinstance(s, UnionSet):
        return list(s.parts)
    if isinstance(s, BoxSet):
        return [s.as_polyhedron()]
    return [s]


def set_from_json(obj: dict) -> StateSet:
    kind = obj.get("type", "box")
    if kind == "box":
        return BoxSet(obj["lower"], obj["upper"])
    if kind == "polyhedron":
        return PolyhedronSet(obj["A"], obj["b"])
    if kind == "union":
        return UnionSet(tuple(set_from_json(p) for p in obj["parts"]))
    if kind == "box_complement":
        return box_complement(obj["lower"], obj["upper"])
    raise ValueError(f"unknown set type {kind!r}")
