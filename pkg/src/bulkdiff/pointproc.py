"""Finite point configurations and Poisson sampling."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class Box:
    """Open axis-aligned cube of given side and center."""

    side: float
    center: tuple

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"box side must be positive, got {self.side}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def cube(cls, m: int, d: int) -> "Box":
        """The cube of side 3^m centered at the origin."""
        return cls(float(3 ** m), (0.0,) * d)

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def volume(self) -> float:
        return self.side ** self.dim

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - self.side / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + self.side / 2

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        return np.all((pts > self.lower) & (pts < self.upper), axis=1)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the closed box."""
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        gap = np.maximum(np.maximum(self.lower - pts, pts - self.upper), 0.0)
        return np.sqrt((gap ** 2).sum(axis=1))


@dataclass(frozen=True, eq=False)
class PointConfiguration:
    """A finite multiset of points in R^d, optionally tagged with a region."""

    points: np.ndarray
    dim: int
    region: Optional[Box] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, self.dim)
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.region is not None and len(pts) and not self.region.contains(pts).all():
            raise ValueError("points outside the stated region")

    @classmethod
    def empty(cls, dim: int, region: Optional[Box] = None) -> "PointConfiguration":
        return cls(np.zeros((0, dim)), dim, region)

    def __len__(self) -> int:
        return len(self.points)

    def sorted_points(self) -> np.ndarray:
        if not len(self.points):
            return self.points
        order = np.lexsort(self.points.T[::-1])
        return self.points[order]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointConfiguration):
            return NotImplemented
        return (self.dim == other.dim and len(self) == len(other)
                and np.array_equal(self.sorted_points(), other.sorted_points()))

    def __hash__(self):
        return hash(self.sorted_points().tobytes())

    def digest(self, quantum: float = 1e-12) -> str:
        """Order-free digest of the point multiset after rounding to `quantum`."""
        q = np.round(self.sorted_points() / quantum).astype(np.int64)
        q = q[np.lexsort(q.T[::-1])] if len(q) else q
        return hashlib.sha256(f"{self.dim}:".encode() + q.tobytes()).hexdigest()

    # text format: header line then one point per line
    def to_text(self) -> str:
        if self.region is None:
            head = f"dim {self.dim}; region none"
        else:
            c = " ".join(repr(float(v)) for v in self.region.center)
            head = f"dim {self.dim}; region {c} {self.region.side!r}"
        lines = [head] + [" ".join(repr(float(v)) for v in p) for p in self.points]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PointConfiguration":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        dim_part, region_part = (s.strip() for s in lines[0].split(";"))
        dim = int(dim_part.split()[1])
        tokens = region_part.split()[1:]
        region = None
        if tokens != ["none"]:
            vals = [float(t) for t in tokens]
            region = Box(vals[-1], tuple(vals[:-1]))
        pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:]]).reshape(-1, dim)
        return cls(pts, dim, region)


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        return rng_stream(*seed)
    return rng_stream(seed)


def sample_poisson(intensity: float, region: Box, seed) -> PointConfiguration:
    if intensity < 0:
        raise ValueError(f"intensity must be nonnegative, got {intensity}")
    rng = _as_rng(seed)
    count = int(rng.poisson(intensity * region.volume)) if intensity > 0 else 0
    pts = region.lower + region.side * rng.random((count, region.dim))
    return PointConfiguration(pts, region.dim, region)


def restrict(mu: PointConfiguration, U: Box) -> PointConfiguration:
    return PointConfiguration(mu.points[U.contains(mu.points)], mu.dim, U)


def translate(mu: PointConfiguration, x) -> PointConfiguration:
    """Points p - x; region metadata is shifted along."""
    x = np.asarray(x, dtype=float).reshape(mu.dim)
    region = None
    if mu.region is not None:
        region = Box(mu.region.side, tuple(np.asarray(mu.region.center) - x))
    return PointConfiguration(mu.points - x, mu.dim, region)


def superpose(mu: PointConfiguration, nu: PointConfiguration) -> PointConfiguration:
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    return PointConfiguration(np.vstack([mu.points, nu.points]), mu.dim)


def add_point(mu: PointConfiguration, x) -> PointConfiguration:
    return superpose(mu, PointConfiguration(np.asarray(x, dtype=float), mu.dim))


def collar_cells(U: Box, reach: float, h_ext: float) -> np.ndarray:
    """Midpoints of the h_ext-cells outside U whose midpoint lies within `reach` of U."""
    d = U.dim
    if reach <= 0:
        return np.zeros((0, d))
    layers = int(math.ceil(reach / h_ext))
    n_in = int(round(U.side / h_ext))
    if abs(n_in * h_ext - U.side) > 1e-9:
        raise ValueError("collar spacing must divide the box side")
    ticks = U.lower[0] + h_ext * (np.arange(-layers, n_in + layers) + 0.5)
    mesh = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    dist = U.distance(mesh)
    keep = (~U.contains(mesh)) & (dist < reach)
    return mesh[keep]


@dataclass
class MeckeResult:
    residual: float
    stderr: float
    lhs: float
    rhs: float


def mecke_residual(H: Callable[[PointConfiguration, np.ndarray], float], rho: float,
                   U: Box, n_samples: int, seed=0) -> MeckeResult:
    """Compare E[(1/rho|U|) sum_{x in mu} H(mu, x)] with E[H(mu + delta_x, x)], x uniform."""
    if rho <= 0:
        raise ValueError("Mecke residual needs rho > 0")
    rng_l, rng_r = rng_stream(seed, 1), rng_stream(seed, 2)
    lhs = np.empty(n_samples)
    rhs = np.empty(n_samples)
    for s in range(n_samples):
        mu = sample_poisson(rho, U, rng_l)
        lhs[s] = sum(H(mu, p) for p in mu.points) / (rho * U.volume)
        nu = sample_poisson(rho, U, rng_r)
        x = U.lower + U.side * rng_r.random(U.dim)
        rhs[s] = H(add_point(nu, x), x)
    se = float(np.sqrt(lhs.var(ddof=1) / n_samples + rhs.var(ddof=1) / n_samples))
    return MeckeResult(abs(lhs.mean() - rhs.mean()), se, float(lhs.mean()), float(rhs.mean()))


def indicator_identity_residual(F: Callable[[PointConfiguration], float], rho: float, window: Box,
                                cell: Box, n_samples: int, seed=0) -> MeckeResult:
    """E[F(mu) 1{mu(cell)=1}] against rho int_cell E[F(mu + delta_x) 1{mu(cell)=0}] dx.

    mu is Poisson on `window`, which must contain `cell` and the support F reads.
    """
    if rho <= 0:
        raise ValueError("identity needs rho > 0")
    rng_l, rng_r = rng_stream(seed, 3), rng_stream(seed, 4)
    lhs = np.zeros(n_samples)
    rhs = np.zeros(n_samples)
    for s in range(n_samples):
        mu = sample_poisson(rho, window, rng_l)
        if int(cell.contains(mu.points).sum()) == 1:
            lhs[s] = F(mu)
        nu = sample_poisson(rho, window, rng_r)
        x = cell.lower + cell.side * rng_r.random(cell.dim)
        if not cell.contains(nu.points).any():
            rhs[s] = rho * cell.volume * F(add_point(nu, x))
    se = float(np.sqrt(lhs.var(ddof=1) / n_samples + rhs.var(ddof=1) / n_samples))
    return MeckeResult(abs(lhs.mean() - rhs.mean()), se, float(lhs.mean()), float(rhs.mean()))
