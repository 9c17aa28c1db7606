"""Strategy and parameter space geometry.

Every solver in the package moves iterates through one of four convex sets:
boxes, scaled simplices, the nonnegative orthant, and Cartesian products of
those. Each space knows its dimension, how to project onto itself, how to test
membership and (when compact) how to draw a uniform-ish point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FEAS_TOL = 1e-10


class Space:
    dim: int

    def project(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, z: np.ndarray, tol: float = FEAS_TOL) -> bool:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @property
    def bounded(self) -> bool:
        return True

    def _check_dim(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"expected a vector of dimension {self.dim}, got shape {z.shape}")
        return z


@dataclass(frozen=True, eq=False)
class Box(Space):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("Box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("Box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, dim: int, lower: float, upper: float) -> "Box":
        return cls(np.full(dim, float(lower)), np.full(dim, float(upper)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, z):
        return np.clip(self._check_dim(z), self.lower, self.upper)

    def contains(self, z, tol=FEAS_TOL):
        z = self._check_dim(z)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol))

    def sample(self, rng):
        if not self.bounded:
            raise ValueError("cannot sample uniformly from an unbounded box")
        return rng.uniform(self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class Simplex(Space):
    """{z >= 0 : sum(z) = scale}."""

    n: int
    scale: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("Simplex dimension must be positive")
        if not self.scale > 0:
            raise ValueError("Simplex scale must be positive")

    @property
    def dim(self) -> int:
        return self.n

    def project(self, z):
        return project_simplex(self._check_dim(z), self.scale)

    def contains(self, z, tol=FEAS_TOL):
        z = self._check_dim(z)
        return bool(np.all(z >= -tol) and abs(z.sum() - self.scale) <= tol * max(1.0, self.scale) * self.n)

    def sample(self, rng):
        e = rng.exponential(size=self.n)
        return self.scale * e / e.sum()


@dataclass(frozen=True, eq=False)
class NonnegativeOrthant(Space):
    n: int

    @property
    def dim(self) -> int:
        return self.n

    @property
    def bounded(self) -> bool:
        return False

    def project(self, z):
        return np.maximum(self._check_dim(z), 0.0)

    def contains(self, z, tol=FEAS_TOL):
        return bool(np.all(self._check_dim(z) >= -tol))

    def sample(self, rng):
        raise ValueError("cannot sample uniformly from the unbounded nonnegative orthant")


@dataclass(frozen=True, eq=False)
class Product(Space):
    factors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        dims = [f.dim for f in self.factors]
        object.__setattr__(self, "offsets", np.concatenate([[0], np.cumsum(dims)]).astype(int))

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    @property
    def bounded(self) -> bool:
        return all(f.bounded for f in self.factors)

    def block(self, z: np.ndarray, k: int) -> np.ndarray:
        return z[self.offsets[k]:self.offsets[k + 1]]

    def split(self, z: np.ndarray) -> list[np.ndarray]:
        return [self.block(z, k) for k in range(len(self.factors))]

    def project(self, z):
        z = self._check_dim(z)
        return np.concatenate([f.project(b) for f, b in zip(self.factors, self.split(z))]) if self.factors else z.copy()

    def contains(self, z, tol=FEAS_TOL):
        z = self._check_dim(z)
        return all(f.contains(b, tol) for f, b in zip(self.factors, self.split(z)))

    def sample(self, rng):
        if not self.bounded:
            raise ValueError("cannot sample uniformly from an unbounded product space")
        return np.concatenate([f.sample(rng) for f in self.factors]) if self.factors else np.zeros(0)


def project_simplex(z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {w >= 0 : sum(w) = scale} by sort-and-threshold."""
    z = np.asarray(z, dtype=float)
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - scale
    k = np.arange(1, z.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(z - tau, 0.0)


def project(space: Space, z: np.ndarray) -> np.ndarray:
    return space.project(z)


def sample_uniform(space: Space, rng: np.random.Generator) -> np.ndarray:
    return space.sample(rng)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for stream `keys` under a 64-bit master seed.

    Streams with different keys are statistically independent, so per-instance
    generators can be created in any order (or in different processes) without
    changing the draws each instance sees.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def product_of(spaces: Sequence[Space]) -> Product:
    return Product(tuple(spaces))
