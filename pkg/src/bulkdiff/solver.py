"""Conditioned n-particle problems on symmetric grids over U^n.

The dual problem maximizes

    S_n(u) = sum_e W_e ( -1/2 a_e g_e^2 + q_k g_e ),   g_e = (u(hi) - u(lo)) / h,

over grid functions u, where the sum runs over edges of the n-particle grid
(one particle moving along axis k, the others frozen on nodes). The weights
W_e reproduce the average over U^n of the sum over particles, so a constant
conductance c gives g_e = q_k / c on every edge. No boundary data is imposed,
which is the natural (no-flux) condition of the unconstrained maximization.
"""
from __future__ import annotations

import hashlib
import itertools
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fields import ConductanceField, InvariantViolation
from .grid import Lattice, Sector, sector
from .pointproc import Box

CHUNK = 400_000
MAX_STATES = 3_000_000


class SolverError(RuntimeError):
    pass


class UnconvergedError(SolverError):
    pass


@dataclass(frozen=True)
class GridSpec:
    U: Box
    n: int
    h: float

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("particle count must be >= 0")
        lat = Lattice(self.U, self.h)
        from math import comb
        if comb(lat.P + self.n - 1, self.n) > MAX_STATES:
            raise MemoryError(f"grid with n={self.n}, h={self.h} exceeds the state budget")

    @property
    def lattice(self) -> Lattice:
        return Lattice(self.U, self.h)


def edge_conductance(field_: ConductanceField, sec: Sector, ext: np.ndarray,
                     dense_idx: Optional[np.ndarray] = None) -> np.ndarray:
    """Scalar conductance of the moving particle on each listed edge."""
    if not field_.isotropic:
        raise NotImplementedError("grid solver supports isotropic conductances only")
    idx = sec.edges if dense_idx is None else dense_idx
    out = np.empty(len(idx))
    ext = np.asarray(ext, dtype=float).reshape(-1, sec.lat.d)
    for start in range(0, len(idx), CHUNK):
        chunk = idx[start:start + CHUNK]
        mid, others, _ = sec.edge_positions(chunk)
        pts = np.concatenate([others, np.broadcast_to(ext, (len(chunk),) + ext.shape)], axis=1)
        out[start:start + CHUNK] = field_.scalar_batch(pts - mid[:, None, :])
    if out.size and (out.min() < 1 - 1e-12 or out.max() > field_.lam * (1 + 1e-12)):
        raise InvariantViolation(f"{field_.name}: conductance outside [1, {field_.lam}]")
    return out


def edge_conductance_averaged(field_: ConductanceField, sec: Sector, cells: np.ndarray,
                              mass: float) -> np.ndarray:
    """Conductance on each edge averaged over a Poisson exterior on the collar cells."""
    idx = sec.edges
    out = np.empty(len(idx))
    cells = np.asarray(cells, dtype=float).reshape(-1, sec.lat.d)
    step = max(1, CHUNK // max(1, len(cells)))
    for start in range(0, len(idx), step):
        chunk = idx[start:start + step]
        mid, others, _ = sec.edge_positions(chunk)
        out[start:start + step] = field_.exterior_average(others - mid[:, None, :],
                                                          cells[None, :, :] - mid[:, None, :], mass)
    if out.size and (out.min() < 1 - 1e-12 or out.max() > field_.lam * (1 + 1e-12)):
        raise InvariantViolation(f"{field_.name}: averaged conductance outside [1, {field_.lam}]")
    return out


def pcg(A, b, diag, mass, tol, maxiter):
    """Jacobi-preconditioned CG on the mass-weighted mean-zero subspace."""
    x = np.zeros_like(b)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
    z = inv * r
    z -= z.mean()
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        x -= (mass @ x) / mass.sum()
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, it, res
        z = inv * r
        z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise UnconvergedError(f"CG stopped after {maxiter} iterations, relative residual {res:.3e}")


@dataclass
class DiscreteCorrector:
    grid: GridSpec
    values: np.ndarray
    exterior: np.ndarray
    q: np.ndarray
    field_id: str
    mean: float = 0.0
    iterations: int = 0
    residual: float = 0.0
    # edge data, aligned with sector.edges
    grad: np.ndarray = field(default=None, repr=False)
    cond: np.ndarray = field(default=None, repr=False)

    @property
    def sector(self) -> Sector:
        return sector(self.grid.lattice, self.grid.n)

    @property
    def edge_weight(self) -> np.ndarray:
        return self.sector.W[self.sector.edges]

    def edge_q(self) -> np.ndarray:
        sec = self.sector
        _, _, k = sec.edge_parts(sec.edges)
        return self.q[k]

    def energy(self) -> float:
        """Maximal value of S_n; the per-n energy before the 1/(rho|U|) factor."""
        if self.grid.n == 0:
            return 0.0
        W = self.edge_weight
        return float(np.sum(W * (-0.5 * self.cond * self.grad ** 2 + self.edge_q() * self.grad)))

    def flux_energy(self) -> float:
        """sum W a g^2; equals sum W q g at the maximizer."""
        return float(np.sum(self.edge_weight * self.cond * self.grad ** 2)) if self.grid.n else 0.0

    def gradient_energy(self) -> float:
        return float(np.sum(self.edge_weight * self.grad ** 2)) if self.grid.n else 0.0

    def to_tensor(self) -> np.ndarray:
        return self.sector.to_tensor(self.values)

    # binary blob: JSON header, 8-byte length prefix, float64 values in multiset order
    def header(self) -> dict:
        return {"field_id": self.field_id, "side": self.grid.U.side,
                "center": list(self.grid.U.center), "n": self.grid.n, "h": self.grid.h,
                "q": [float(v) for v in self.q],
                "exterior": exterior_digest(self.exterior),
                "layout": "colex-multiset"}

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        ext = np.ascontiguousarray(self.exterior, dtype="<f8").tobytes()
        return (struct.pack("<QQQ", len(head), len(ext), len(self.values)) + head + ext
                + np.ascontiguousarray(self.values, dtype="<f8").tobytes()
                + struct.pack("<Qd", self.iterations, self.residual))

    @classmethod
    def from_bytes(cls, blob: bytes, field_: ConductanceField) -> "DiscreteCorrector":
        lh, le, nv = struct.unpack_from("<QQQ", blob, 0)
        off = 24
        head = json.loads(blob[off:off + lh])
        off += lh
        grid = GridSpec(Box(head["side"], tuple(head["center"])), head["n"], head["h"])
        ext = np.frombuffer(blob[off:off + le], dtype="<f8").reshape(-1, grid.U.dim).copy()
        off += le
        values = np.frombuffer(blob[off:off + 8 * nv], dtype="<f8").copy()
        off += 8 * nv
        its, res = struct.unpack_from("<Qd", blob, off)
        if head["field_id"] != field_.field_id:
            raise ValueError("blob belongs to a different field")
        cor = cls(grid, values, ext, np.array(head["q"]), head["field_id"], 0.0, its, res)
        _attach_edges(cor, field_)
        return cor


def exterior_digest(ext: np.ndarray, quantum: float = 1e-12) -> str:
    ext = np.asarray(ext, dtype=float)
    qz = np.round(ext / quantum).astype(np.int64)
    if len(qz):
        qz = qz[np.lexsort(qz.T[::-1])]
    return hashlib.sha256(qz.tobytes() + str(ext.shape[-1] if ext.ndim > 1 else 0).encode()).hexdigest()[:20]


def _attach_edges(cor: DiscreteCorrector, field_: ConductanceField):
    sec = cor.sector
    if cor.grid.n == 0:
        cor.grad = np.zeros(0)
        cor.cond = np.zeros(0)
        return
    e = sec.edges
    cor.cond = edge_conductance(field_, sec, cor.exterior)
    cor.grad = (cor.values[sec.hi[e]] - cor.values[sec.lo[e]]) / cor.grid.h


def assemble(sec: Sector, cond: np.ndarray, q: np.ndarray, h: float):
    e = sec.edges
    _, _, k = sec.edge_parts(e)
    lo, hi, W = sec.lo[e], sec.hi[e], sec.W[e]
    c = W * cond / h ** 2
    n = sec.size
    diag = np.bincount(lo, c, n) + np.bincount(hi, c, n)
    A = sp.coo_matrix((np.concatenate([-c, -c]), (np.concatenate([lo, hi]), np.concatenate([hi, lo]))),
                      shape=(n, n)).tocsr() + sp.diags(diag)
    f = W * q[k] / h
    b = np.bincount(hi, f, n) - np.bincount(lo, f, n)
    return A.tocsr(), b, diag


def solve_dual(field_: ConductanceField, grid: GridSpec, q, exterior=None,
               tol: float = 1e-10) -> DiscreteCorrector:
    """Maximizer of the discretized n-particle dual functional, mean zero."""
    lat = grid.lattice
    q = np.asarray(q, dtype=float).reshape(lat.d)
    ext = np.zeros((0, lat.d)) if exterior is None else np.asarray(exterior, dtype=float).reshape(-1, lat.d)
    if len(ext) and grid.U.contains(ext).any():
        raise ValueError("exterior points must lie outside U")
    ext = field_.reduce_exterior(ext, grid.U)
    sec = sector(lat, grid.n)
    if grid.n == 0:
        cor = DiscreteCorrector(grid, np.zeros(1), ext, q, field_.field_id)
        _attach_edges(cor, field_)
        return cor
    cond = edge_conductance(field_, sec, ext)
    A, b, diag = assemble(sec, cond, q, grid.h)
    maxiter = int(50 * np.sqrt(sec.size)) + 10
    u, its, res = pcg(A, b, diag, sec.mass, tol, maxiter)
    u -= (sec.mass @ u) / sec.mass.sum()
    cor = DiscreteCorrector(grid, u, ext, q, field_.field_id, float(sec.mass @ u), its, res)
    cor.cond = cond
    e = sec.edges
    cor.grad = (u[sec.hi[e]] - u[sec.lo[e]]) / grid.h
    return cor


def dual_value(cor: DiscreteCorrector, rho0: float) -> float:
    """The conditioned functional at its maximizer, including 1/(rho0 |U|)."""
    return cor.energy() / (rho0 * cor.grid.U.volume)


def dirichlet_energy(cor: DiscreteCorrector, rho0: float) -> float:
    return cor.gradient_energy() / (rho0 * cor.grid.U.volume)


def slice_energy(cor: DiscreteCorrector) -> float:
    """(1/n) sum_i avg |grad_i psi|^2, bounded by |q|^2."""
    return cor.gradient_energy() / cor.grid.n if cor.grid.n else 0.0


def first_variation_residual(cor: DiscreteCorrector, test: np.ndarray) -> float:
    """sum_e W_e (-a_e g_e + q_k) Dv_e for a grid function `test` on the same sector."""
    sec = cor.sector
    if cor.grid.n == 0:
        return 0.0
    test = np.asarray(test, dtype=float)
    if test.shape != cor.values.shape:
        raise ValueError("test function lives on a different grid")
    e = sec.edges
    dv = (test[sec.hi[e]] - test[sec.lo[e]]) / cor.grid.h
    return float(np.sum(cor.edge_weight * (-cor.cond * cor.grad + cor.edge_q()) * dv))


@dataclass
class PrimalSolution:
    value: float
    functions: list  # DiscreteCorrector per n (values on the full sector, f_0 = 0)
    sector_energy: list  # per-n averaged energy, before Poisson weights
    p: np.ndarray
    n_max: int
    rho0: float
    iterations: int = 0


def _interior_reduction(lat: Lattice, sec: Sector):
    """For every state of `sec`, its count and rank after dropping boundary nodes."""
    on_bnd = np.any((lat.index == 0) | (lat.index == lat.N), axis=1)
    inner_id = np.cumsum(~on_bnd) - 1
    P_in = int((~on_bnd).sum())
    st = sec.states
    keep = ~on_bnd[st]
    count = keep.sum(axis=1)
    big = np.iinfo(np.int32).max
    rows = np.sort(np.where(keep, inner_id[st], big), axis=1)
    from .grid import rank as _rank
    out = np.zeros(len(st), dtype=np.int64)
    for c in np.unique(count):
        sel = count == c
        out[sel] = _rank(rows[sel, :c], P_in)
    return count, out, P_in


def solve_primal(field_: ConductanceField, U: Box, p, rho0: float, n_max: int, h: float,
                 tol: float = 1e-10, h_ext: Optional[float] = 1 / 16) -> PrimalSolution:
    """Jointly minimize the discretized K functional over (f_n)_{n <= n_max}.

    The compatibility condition is imposed exactly on the grid: a particle on a
    boundary node is dropped, so f_n there equals f_{n-1} of the remaining
    particles. The unknowns are f_n on multisets of interior nodes, f_0 = 0.
    The unknowns do not see the exterior, so the exterior enters only through
    the conductance, which is averaged exactly over the Poisson(rho0) law on
    the h_ext collar cells. With h_ext=None the exterior is left out.
    """
    from math import comb, exp, factorial
    lat = Lattice(U, h)
    p = np.asarray(p, dtype=float).reshape(lat.d)
    lam = rho0 * U.volume
    beta = [exp(-lam) * lam ** n / factorial(n) / (2 * lam) for n in range(n_max + 1)]
    P_in = int(np.prod([lat.N - 1] * lat.d))
    offsets = [0]
    for n in range(1, n_max + 1):
        offsets.append(offsets[-1] + comb(P_in + n - 1, n))
    total = offsets[-1]
    rows, cols, vals = [], [], []
    rhs = np.zeros(total)
    const = 0.0
    maps, edge_data = {}, {}
    if h_ext is not None:
        from .pointproc import collar_cells
        cells = collar_cells(U, field_.interaction_range, h_ext)
        mass = rho0 * h_ext ** lat.d
    for n in range(1, n_max + 1):
        sec = sector(lat, n)
        count, rk, _ = _interior_reduction(lat, sec)
        gidx = np.where(count > 0, np.array(offsets)[np.maximum(count - 1, 0)] + rk, -1)
        maps[n] = gidx
        e = sec.edges
        _, _, k = sec.edge_parts(e)
        if h_ext is None:
            a = edge_conductance(field_, sec, np.zeros((0, lat.d)))
        else:
            a = edge_conductance_averaged(field_, sec, cells, mass)
        edge_data[n] = a
        c = 2 * beta[n] * sec.W[e] * a
        lo, hi = gidx[sec.lo[e]], gidx[sec.hi[e]]
        const += 0.5 * float(np.sum(c * p[k] ** 2))
        # energy 1/2 sum c (p + (x_hi - x_lo)/h)^2
        for (i, si), (j, sj) in itertools.product(((lo, -1.0), (hi, 1.0)), repeat=2):
            ok = (i >= 0) & (j >= 0)
            rows.append(i[ok])
            cols.append(j[ok])
            vals.append(si * sj * c[ok] / h ** 2)
        for i, si in ((lo, -1.0), (hi, 1.0)):
            ok = i >= 0
            rhs -= np.bincount(i[ok], si * c[ok] * p[k[ok]] / h, total)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(total, total)).tocsr()
    diag = A.diagonal()
    if total:
        from scipy.sparse.linalg import cg
        M = sp.diags(1.0 / diag)
        x, info = cg(A, rhs, rtol=tol, atol=0.0, maxiter=int(50 * np.sqrt(total)) + 10, M=M)
        if info != 0:
            raise UnconvergedError(f"primal CG did not converge (info={info})")
    else:
        x = np.zeros(0)
    value = const + 0.5 * float(x @ (A @ x)) - float(rhs @ x)
    functions, energies = [], []
    for n in range(0, n_max + 1):
        grid = GridSpec(U, n, h)
        if n == 0:
            cor = DiscreteCorrector(grid, np.zeros(1), np.zeros((0, lat.d)), p, field_.field_id)
            _attach_edges(cor, field_)
            functions.append(cor)
            energies.append(0.0)
            continue
        sec = sector(lat, n)
        vals_n = np.where(maps[n] >= 0, x[np.maximum(maps[n], 0)], 0.0)
        cor = DiscreteCorrector(grid, vals_n, np.zeros((0, lat.d)), p, field_.field_id)
        cor.cond = edge_data[n]
        e = sec.edges
        cor.grad = (vals_n[sec.hi[e]] - vals_n[sec.lo[e]]) / h
        _, _, k = sec.edge_parts(e)
        energies.append(float(np.sum(sec.W[e] * cor.cond * (p[k] + cor.grad) ** 2)))
        functions.append(cor)
    return PrimalSolution(value, functions, energies, p, n_max, rho0)
