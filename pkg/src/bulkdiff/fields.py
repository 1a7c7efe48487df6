"""Local conductance fields a(mu) and their stationary extension a(mu, x).

A field sees the configuration from the evaluation particle: displacements of
all *other* particles. Built-in fields are isotropic, so the batched hook
returns a scalar multiple of the identity.
"""
from __future__ import annotations

import hashlib
import json
from typing import Optional

import numpy as np

from .pointproc import Box, PointConfiguration, rng_stream, translate

LOCALITY_RADIUS = 0.5


class InvariantViolation(RuntimeError):
    """A field produced a value outside its declared ellipticity band."""


class ConductanceField:
    name = "abstract"
    isotropic = True

    def __init__(self, lam: float = 2.0, **params):
        if lam < 1:
            raise ValueError(f"ellipticity bound must be >= 1, got {lam}")
        self.lam = float(lam)
        self.params = {k: float(v) for k, v in params.items()}

    @property
    def interaction_range(self) -> float:
        """Radius beyond which other particles have no influence (at most 1/2)."""
        return LOCALITY_RADIUS

    @property
    def field_id(self) -> str:
        blob = json.dumps({"name": self.name, "lam": self.lam, **self.params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {"name": self.name, "lam": self.lam, **self.params}

    def scalar_batch(self, disp: np.ndarray) -> np.ndarray:
        """disp: (B, k, d) displacements of the other particles; returns (B,) scalars.

        Padding rows may be filled with +inf.
        """
        raise NotImplementedError

    def matrix(self, disp: np.ndarray) -> np.ndarray:
        """Full matrix for a single configuration seen from the origin particle."""
        d = disp.shape[-1]
        return float(self.scalar_batch(disp[None])[0]) * np.eye(d)

    def exterior_average(self, disp_in: np.ndarray, disp_cells: np.ndarray, mass: float,
                         samples: int = 256) -> np.ndarray:
        """Mean scalar when every collar cell independently holds Poisson(mass) points at its midpoint.

        disp_in: (B, k, d) interior displacements; disp_cells: (B, C, d) cell
        midpoint displacements. The generic version averages over a fixed
        Philox stream, so it is deterministic but carries Monte Carlo error.
        """
        rng = np.random.Generator(np.random.Philox(key=0x0E7E))
        counts = rng.poisson(mass, size=(samples, disp_cells.shape[1]))
        total = np.zeros(disp_in.shape[0])
        for row in counts:
            ext = np.repeat(disp_cells, row, axis=1)
            total += self.scalar_batch(np.concatenate([disp_in, ext], axis=1))
        return total / samples

    def reduce_exterior(self, ext: np.ndarray, U: Box) -> np.ndarray:
        """Smallest part of an exterior configuration that still determines a(., x) on U.

        Default: points within the interaction range of U, sorted.
        """
        ext = np.asarray(ext, dtype=float).reshape(-1, U.dim)
        keep = ext[U.distance(ext) < self.interaction_range]
        return keep[np.lexsort(keep.T[::-1])] if len(keep) else keep


class ConstantField(ConductanceField):
    name = "constant"

    def __init__(self, c: float = 1.0, lam: Optional[float] = None):
        lam = max(float(c), 1.0) if lam is None else lam
        super().__init__(lam, c=c)
        if not 1 <= c <= self.lam:
            raise ValueError(f"constant {c} outside [1, {self.lam}]")

    @property
    def interaction_range(self) -> float:
        return 0.0

    def exterior_average(self, disp_in, disp_cells, mass, samples=256):
        return np.full(disp_in.shape[0], self.params["c"])

    def scalar_batch(self, disp):
        return np.full(disp.shape[0], self.params["c"])


class CrowdingField(ConductanceField):
    """Conductance jumps to lam when another particle sits within r."""

    name = "crowding"

    def __init__(self, lam: float = 2.0, r: float = 0.25):
        super().__init__(lam, r=r)
        if not 0 < r <= LOCALITY_RADIUS:
            raise ValueError(f"crowding radius {r} outside (0, 1/2]")

    @property
    def interaction_range(self) -> float:
        return self.params["r"]

    def exterior_average(self, disp_in, disp_cells, mass, samples=256):
        r2 = self.params["r"] ** 2
        close = (np.square(disp_in).sum(axis=2) < r2).any(axis=1) if disp_in.shape[1] else np.zeros(len(disp_in), bool)
        near = (np.square(disp_cells).sum(axis=2) < r2).sum(axis=1)
        p_free = np.where(close, 0.0, np.exp(-mass * near))
        return 1.0 + (self.lam - 1.0) * (1.0 - p_free)

    def scalar_batch(self, disp):
        r = self.params["r"]
        if disp.shape[1] == 0:
            return np.ones(disp.shape[0])
        close = (np.square(disp).sum(axis=2) < r * r).any(axis=1)
        return 1.0 + (self.lam - 1.0) * close

    def reduce_exterior(self, ext, U):
        ext = super().reduce_exterior(ext, U)
        if U.dim != 1 or len(ext) == 0:
            return ext
        # in 1-D only the nearest point on each side can switch a conductance on
        x = ext[:, 0]
        left, right = x[x < U.center[0]], x[x > U.center[0]]
        keep = ([left.max()] if len(left) else []) + ([right.min()] if len(right) else [])
        return np.array(keep).reshape(-1, 1)


def bump(t: np.ndarray) -> np.ndarray:
    """C^1 bump equal to 1 at 0 and vanishing on [1/2, inf)."""
    s = np.clip(2.0 * np.asarray(t), 0.0, 1.0)
    return (1.0 - s * s) ** 2


class SmoothPairField(ConductanceField):
    name = "smooth_pair"

    def scalar_batch(self, disp):
        if disp.shape[1] == 0:
            return np.ones(disp.shape[0])
        dist = np.sqrt(np.square(disp).sum(axis=2))
        with np.errstate(invalid="ignore"):
            total = np.where(np.isfinite(dist), bump(np.nan_to_num(dist, posinf=1.0)), 0.0).sum(axis=1)
        return 1.0 + (self.lam - 1.0) * np.minimum(1.0, total)


FIELDS = {cls.name: cls for cls in (ConstantField, CrowdingField, SmoothPairField)}


def make_field(spec: dict) -> ConductanceField:
    spec = dict(spec)
    name = spec.pop("name")
    if name not in FIELDS:
        raise ValueError(f"unknown field {name!r}; known: {sorted(FIELDS)}")
    return FIELDS[name](**spec)


def _others_from_origin(points: np.ndarray) -> np.ndarray:
    """Drop one atom sitting exactly at the origin, if any."""
    at0 = np.flatnonzero(np.all(points == 0.0, axis=1))
    if len(at0):
        points = np.delete(points, at0[0], axis=0)
    return points


def check_matrix(field: ConductanceField, a: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    if not np.array_equal(a, a.T):
        raise InvariantViolation(f"{field.name}: non-symmetric conductance {a}")
    eig = np.linalg.eigvalsh(a)
    if eig.min() < 1 - rtol or eig.max() > field.lam * (1 + rtol):
        raise InvariantViolation(f"{field.name}: eigenvalues {eig} outside [1, {field.lam}]")
    return a


def evaluate_origin(field: ConductanceField, mu: PointConfiguration) -> np.ndarray:
    others = _others_from_origin(mu.points)
    others = others[np.sqrt((others ** 2).sum(axis=1)) < LOCALITY_RADIUS]
    return check_matrix(field, field.matrix(others.reshape(-1, mu.dim)))


def evaluate(field: ConductanceField, mu: PointConfiguration, x) -> np.ndarray:
    return evaluate_origin(field, translate(mu, x))


def locality_probe(field: ConductanceField, mu: PointConfiguration, n_trials: int = 100,
                   seed=0) -> bool:
    """Randomly add and remove points outside B_{1/2}; True if a(mu) never changes.

    The probe calls the raw field hook, so a field reading beyond 1/2 is caught.
    """
    rng = rng_stream(seed, 7)
    d = mu.dim
    base_pts = _others_from_origin(mu.points)
    base = field.matrix(base_pts.reshape(-1, d))
    inside = np.sqrt((base_pts ** 2).sum(axis=1)) < LOCALITY_RADIUS
    for _ in range(n_trials):
        k = rng.integers(1, 4)
        direc = rng.normal(size=(k, d))
        direc /= np.linalg.norm(direc, axis=1, keepdims=True)
        radius = LOCALITY_RADIUS + rng.random((k, 1)) * 1.0
        extra = direc * radius
        kept = base_pts[inside | (rng.random(len(base_pts)) < 0.5)]
        trial = np.vstack([kept, extra])
        if not np.array_equal(field.matrix(trial), base):
            return False
    return True
