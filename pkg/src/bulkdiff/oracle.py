"""Brute-force reference values at tiny scale.

Independent of the main solver on purpose: full (unsymmetrized) tensor grid,
one-sided differences with the conductance taken at the left node of each
edge, and a sparse LU factorization with one node pinned. The scheme is first
order, which is what the Richardson step assumes and checks.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fields import ConductanceField
from .pointproc import Box, collar_cells


@dataclass
class OracleResult:
    value: float
    method: str
    ladder: list
    raw: list
    error: float
    order: float = float("nan")
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"value": self.value, "method": self.method, "ladder": self.ladder, "raw": self.raw,
                "error": self.error, "order": self.order, "converged": self.converged, **self.extra}


def richardson(values, ladder, order_band=(0.5, 1.6)) -> tuple:
    """First-order extrapolation on a halving ladder; returns (value, error, order, ok)."""
    v = list(values)
    if len(v) < 3:
        raise ValueError("need three ladder levels")
    if any(abs(ladder[i] / ladder[i + 1] - 2) > 1e-9 for i in range(len(ladder) - 1)):
        raise ValueError("ladder must halve h at every step")
    d1, d2 = v[-3] - v[-2], v[-2] - v[-1]
    best = 2 * v[-1] - v[-2]
    prev = 2 * v[-2] - v[-3]
    scale = max(abs(best), 1e-300)
    if abs(d1) < 1e-11 * scale and abs(d2) < 1e-11 * scale:
        return best, abs(d2) + 1e-14 * scale, float("nan"), True
    order = math.log2(abs(d1 / d2)) if d2 != 0 and d1 != 0 else float("nan")
    ok = np.isfinite(order) and order_band[0] <= order <= order_band[1] and d1 * d2 > 0
    err = abs(best - prev)
    return best, max(err, 1e-14 * scale), order, bool(ok)


def _tensor_energy(field_: ConductanceField, U: Box, n: int, h: float, q, ext) -> float:
    """The maximal S_n of the tensor-grid problem."""
    return _tensor_solve(field_, U, n, h, q, ext)[1]


def _tensor_solve(field_: ConductanceField, U: Box, n: int, h: float, q, ext):
    """Assemble and solve the tensor-grid problem; returns (u on the tensor grid, S_n)."""
    d = U.dim
    N = int(round(U.side / h))
    n1 = N + 1
    D = d * n
    q = np.asarray(q, dtype=float).reshape(d)
    ext = np.asarray(ext, dtype=float).reshape(-1, d)
    if n == 0:
        return np.zeros(()), 0.0
    shape = (n1,) * D
    total = n1 ** D
    grid1 = U.lower[0] + h * np.arange(n1)  # same for every axis of a cube
    w1 = np.full(n1, 1.0 / N)
    w1[[0, -1]] = 0.5 / N
    idx = np.indices(shape).reshape(D, -1).T  # column j = particle j // d, axis j % d
    pos = grid1[idx].reshape(total, n, d)
    rows, cols, vals, rhs = [], [], [], np.zeros(total)
    for i in range(n):
        others = np.delete(pos, i, axis=1)
        disp = np.concatenate([others, np.broadcast_to(ext, (total,) + ext.shape)], axis=1) - pos[:, i:i + 1, :]
        a_node = field_.scalar_batch(disp)
        for k in range(d):
            col = i * d + k
            stride = n1 ** (D - 1 - col)
            left = np.flatnonzero(idx[:, col] < N)
            right = left + stride
            wt = np.prod(np.delete(w1[idx[left]], col, axis=1), axis=1) / N
            c = wt * a_node[left] / h ** 2
            rows += [left, right, left, right]
            cols += [left, right, right, left]
            vals += [c, c, -c, -c]
            f = wt * q[k] / h
            np.add.at(rhs, right, f)
            np.add.at(rhs, left, -f)
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(total, total))
    # pin node 0 to remove the constant mode
    keep = np.arange(1, total)
    Ared = A[keep][:, keep].tocsc()
    u = np.zeros(total)
    u[1:] = splu(Ared).solve(rhs[1:])
    return u.reshape(shape), 0.5 * float(rhs @ u)


def oracle_dual_energy(field_: ConductanceField, U: Box, n: int, q, exterior=None, rho0: float = 1.0,
                       h_ladder=(1 / 128, 1 / 256, 1 / 512)) -> OracleResult:
    """Extrapolated conditioned dual value J_n (includes 1/(rho0 |U|))."""
    if U.dim * n > 2:
        raise ValueError("oracle restricted to d*n <= 2")
    ext = np.zeros((0, U.dim)) if exterior is None else np.asarray(exterior, dtype=float).reshape(-1, U.dim)
    ext = ext[U.distance(ext) < field_.interaction_range] if len(ext) else ext
    raw = [_tensor_energy(field_, U, n, h, q, ext) / (rho0 * U.volume) for h in h_ladder]
    val, err, order, ok = richardson(raw, list(h_ladder))
    return OracleResult(val, "dense-solve", list(h_ladder), raw, err, order, ok)


def poisson_pmf(lam: float, n: int) -> float:
    return math.exp(-lam) * lam ** n / math.factorial(n)


def exterior_law(field_: ConductanceField, U: Box, rho: float, h_ext: float, k_max: int):
    """Exact law of the reduced exterior for lattice Poisson points on the collar cells.

    Returns ({reduced key: (points, probability)}, missing mass for more than k_max points).
    """
    cells = collar_cells(U, field_.interaction_range, h_ext)
    mu = rho * h_ext ** U.dim
    base = math.exp(-mu * len(cells))
    law: dict = {}
    mass = 0.0
    for k in range(k_max + 1):
        for combo in itertools.combinations_with_replacement(range(len(cells)), k):
            counts = np.bincount(np.array(combo, dtype=int), minlength=len(cells)) if k else np.zeros(len(cells), int)
            p = base * np.prod([mu ** c / math.factorial(c) for c in counts])
            pts = field_.reduce_exterior(cells[list(combo)] if k else np.zeros((0, U.dim)), U)
            key = pts.round(12).tobytes()
            if key in law:
                law[key] = (law[key][0], law[key][1] + p)
            else:
                law[key] = (pts, p)
            mass += p
    return law, max(0.0, 1.0 - mass)


def oracle_nu_star_series(field_: ConductanceField, U: Box, q, rho0: float, n_max: int,
                          h_ladder=(1 / 128, 1 / 256, 1 / 512), h_ext: float = 1 / 16,
                          k_ext: int = 6) -> OracleResult:
    """Truncated Poisson mixture of extrapolated per-n dual values.

    The exterior is averaged exactly over its lattice law; tail terms (interior
    count above n_max, exterior count above k_ext) are bounded by the slice
    energy bound and added to the error estimate.
    """
    q = np.asarray(q, dtype=float)
    lam = rho0 * U.volume
    law, ext_missing = exterior_law(field_, U, rho0, h_ext, k_ext)
    total, err, per_n = 0.0, 0.0, []
    converged = True
    for n in range(n_max + 1):
        pn = poisson_pmf(lam, n)
        mean_n, err_n = 0.0, 0.0
        for pts, p in law.values():
            res = oracle_dual_energy(field_, U, n, q, pts, rho0, h_ladder) if n else None
            if res is not None:
                mean_n += p * res.value
                err_n += p * res.error
                converged &= res.converged
        # unenumerated exterior mass: per-n value lies in [n|q|^2/(2 lam_max), n|q|^2/2] / lam
        lo, hi = n * q @ q / (2 * field_.lam) / lam, n * q @ q / 2 / lam
        mean_n += ext_missing * 0.5 * (lo + hi)
        err_n += ext_missing * 0.5 * (hi - lo)
        per_n.append({"n": n, "weight": pn, "value": mean_n, "error": err_n})
        total += pn * mean_n
        err += pn * err_n
    # interior tail: sum_{n>n_max} P[n] n / lam = P[N >= n_max]
    tail_w = 1.0 - sum(poisson_pmf(lam, j) for j in range(n_max))
    tail_hi = tail_w * q @ q / 2
    tail_lo = tail_w * q @ q / (2 * field_.lam)
    return OracleResult(total, "exact-series", list(h_ladder), per_n, err, converged=converged,
                        extra={"tail_lower": tail_lo, "tail_upper": tail_hi, "n_max": n_max,
                               "exterior_missing_mass": ext_missing, "h_ext": h_ext})


def _c1_edge_sum(field_, U, h, u, u1, ext, ext1, label=None):
    """sum over particles and left-node edges of w * g (a - a^1) g^1 on a 1-D tensor grid.

    `label` is the node index of an interior added particle (its own axis in u1
    is the last one), or None when the added particle sits in the exterior.
    """
    N = int(round(U.side / h))
    n = u.ndim
    grid1 = U.lower[0] + h * np.arange(N + 1)
    w1 = np.full(N + 1, 1.0 / N)
    w1[[0, -1]] = 0.5 / N
    idx = np.indices(u.shape).reshape(n, -1).T
    pos = grid1[idx]
    total = 0.0
    for i in range(n):
        left = idx[:, i] < N
        li = idx[left]
        ri = li.copy()
        ri[:, i] += 1
        g = (u[tuple(ri.T)] - u[tuple(li.T)]) / h
        if label is None:
            g1 = (u1[tuple(ri.T)] - u1[tuple(li.T)]) / h
        else:
            lab = np.full((len(li), 1), label)
            g1 = (u1[tuple(np.hstack([ri, lab]).T)] - u1[tuple(np.hstack([li, lab]).T)]) / h
        x = pos[left][:, i]
        others = np.delete(pos[left], i, axis=1)[:, :, None]
        base_pts = np.concatenate([others, np.broadcast_to(ext.reshape(1, -1, 1), (len(x), len(ext), 1))], axis=1)
        pert_pts = np.concatenate([others, np.broadcast_to(ext1.reshape(1, -1, 1), (len(x), len(ext1), 1))], axis=1)
        a = field_.scalar_batch(base_pts - x[:, None, None])
        a1 = field_.scalar_batch(pert_pts - x[:, None, None])
        wt = np.prod(np.delete(w1[li], i, axis=1), axis=1) / N
        total += float(np.sum(wt * g * (a - a1) * g1))
    return total


def oracle_c1(field_: ConductanceField, U: Box, q, rho0: float, n_max: int = 2,
              h_ladder=(1 / 64, 1 / 128, 1 / 256), h_ext: float = 1 / 16, k_ext: int = 6) -> OracleResult:
    """Exhaustive x_1 quadrature of the first-order coefficient.

    x_1 runs over the grid nodes of U (trapezoid weights) and over the collar
    cell midpoints (weight h_ext). The interior count and the exterior are
    summed exactly; a configuration is kept only if its interior count,
    x_1 included, is at most n_max.
    """
    if U.dim != 1 or not 1 <= n_max <= 2:
        raise ValueError("oracle_c1 needs d = 1 and n_max <= 2")
    q = np.asarray(q, dtype=float).reshape(1)
    lam = rho0 * U.volume
    law, ext_missing = exterior_law(field_, U, rho0, h_ext, k_ext)
    cells = collar_cells(U, field_.interaction_range, h_ext)
    raw = []
    for h in h_ladder:
        N = int(round(U.side / h))
        w1 = np.full(N + 1, 1.0 / N)
        w1[[0, -1]] = 0.5 / N
        memo: dict = {}

        def sol(n, ext):
            ext = field_.reduce_exterior(np.asarray(ext, dtype=float).reshape(-1, 1), U)
            key = (n, ext.round(12).tobytes())
            if key not in memo:
                memo[key] = (_tensor_solve(field_, U, n, h, q, ext)[0], ext)
            return memo[key]

        total = 0.0
        for pts, p in law.values():
            val = 0.0
            if n_max >= 2:
                u, ext = sol(1, pts)
                u2, _ = sol(2, pts)
                for y in range(N + 1):
                    ext1 = np.append(ext, U.lower[0] + h * y)
                    val += poisson_pmf(lam, 1) * U.volume * w1[y] * _c1_edge_sum(field_, U, h, u, u2, ext, ext1, label=y)
            for c in cells[:, 0]:
                for n in range(1, n_max + 1):
                    u, ext = sol(n, pts)
                    u1, ext1 = sol(n, np.append(pts, c))
                    val += poisson_pmf(lam, n) * h_ext * _c1_edge_sum(field_, U, h, u, u1, ext, np.append(ext, c))
            total += p * val
        raw.append(total / lam)
    best, err, order, ok = richardson(raw, list(h_ladder))
    bound = ext_missing * field_.lam * float(q @ q) * (U.volume + len(cells) * h_ext)
    return OracleResult(best, "exhaustive-quadrature", list(h_ladder), raw, err + bound, order, ok,
                        extra={"n_max": n_max, "h_ext": h_ext, "exterior_missing_mass": ext_missing})
