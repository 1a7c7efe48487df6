"""Continuum-consistency residuals for discrete correctors.

The discrete first variation vanishes to solver tolerance by construction, so
it cannot show discretization error. These residuals instead test the grid
solution against the continuum bilinear form: on each edge the conductance is
the average along the segment the moving particle sweeps, which is exact for
piecewise-linear functions in the moving coordinate. The gap to the discrete
form is then O(h) for fields with jumps.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .fields import ConductanceField
from .pointproc import Box
from .solver import DiscreteCorrector, GridSpec, solve_dual

SUB_SAMPLES = 48


def segment_conductance(field_: ConductanceField, cor: DiscreteCorrector, ext=None,
                        sub: int = SUB_SAMPLES) -> np.ndarray:
    """Average conductance along each edge of the corrector's sector.

    `ext` overrides the corrector's exterior, so a gradient can be paired with
    the conductance of a different configuration on the same grid.
    """
    sec = cor.sector
    if cor.grid.n == 0:
        return np.zeros(0)
    d = sec.lat.d
    ext = cor.exterior if ext is None else np.asarray(ext, dtype=float).reshape(-1, d)
    mid, others, k = sec.edge_positions(sec.edges)
    pts = np.concatenate([others, np.broadcast_to(ext, (len(mid),) + ext.shape)], axis=1)
    rows = np.arange(len(k))
    total = np.zeros(len(mid))
    for t in (np.arange(sub) + 0.5) / sub - 0.5:
        x = mid.copy()
        x[rows, k] += t * cor.grid.h
        total += field_.scalar_batch(pts - x[:, None, :])
    return total / sub


def symmetric_sum(lat, n: int, fn: Callable) -> np.ndarray:
    """Symmetric grid function sum_i fn(x_i) on the n-particle sector; fn maps (..., d) to (...)."""
    from .grid import sector
    sec = sector(lat, n)
    return fn(lat.coords[sec.states]).sum(axis=1) if n else np.zeros(1)


def first_variation_residual_continuum(field_: ConductanceField, cor: DiscreteCorrector,
                                       test: np.ndarray, sub: int = SUB_SAMPLES) -> float:
    """sum_e W_e (-abar_e g_e + q_k) Dv_e with segment-averaged conductance."""
    if cor.grid.n == 0:
        return 0.0
    sec = cor.sector
    e = sec.edges
    dv = (test[sec.hi[e]] - test[sec.lo[e]]) / cor.grid.h
    abar = segment_conductance(field_, cor, sub=sub)
    return float(np.sum(cor.edge_weight * (-abar * cor.grad + cor.edge_q()) * dv))


def harmonic_residual_fixture(field_: ConductanceField, U: Box, n: int, h: float, q, ext,
                              labels, E, F, tol: float = 1e-12, sub: int = SUB_SAMPLES) -> float:
    """Label-averaged grad psi^F . (abar^E grad psi^E - q) on a fixed exterior.

    `labels` lists (position, weight) pairs for a single added point outside
    U; E and F are subsets of {1}. With E = F the integrand is the energy
    identity, otherwise the two correctors only share the grid.
    """
    E, F = set(E), set(F)
    if not E <= {1} or not F <= {1}:
        raise ValueError("E and F must be subsets of {1}")
    q = np.asarray(q, dtype=float).reshape(U.dim)
    ext = np.asarray(ext, dtype=float).reshape(-1, U.dim)
    grid = GridSpec(U, n, h)
    base = solve_dual(field_, grid, q, ext, tol)
    total = 0.0
    for x, w in labels:
        ext1 = np.vstack([ext, np.reshape(x, (1, U.dim))])
        pert = solve_dual(field_, grid, q, ext1, tol)
        cE, cF = (pert if E else base), (pert if F else base)
        abar = segment_conductance(field_, cE, ext1 if E else ext, sub)
        total += w * float(np.sum(cE.edge_weight * cF.grad * (abar * cE.grad - cE.edge_q())))
    return total


def refinement_ratios(values) -> list:
    """|r(h)| / |r(h/2)| for consecutive entries of a halving ladder."""
    v = np.abs(np.asarray(values, dtype=float))
    return [float(a / b) if b > 0 else float("inf") for a, b in zip(v[:-1], v[1:])]


def collar_quadrature(U: Box, reach: float, points: int = 128) -> list:
    """Gauss-Legendre nodes on the collar slab to the right of U along axis 0.

    Averaging over the added point spreads its conductance jump across all
    cell fractions, so the refinement ratio is not aliased by where a single
    jump happens to fall relative to the grid.
    """
    x, w = np.polynomial.legendre.leggauss(points)
    lo = U.upper[0]
    pos = np.zeros((points, U.dim))
    pos[:, 0] = lo + 0.5 * reach * (x + 1)
    for k in range(1, U.dim):
        pos[:, k] = U.center[k]
    return list(zip(pos, 0.5 * reach * w))


def refinement_study(field_: ConductanceField, U: Box, n: int, q, ladder, kind: str = "first_variation",
                     E=(1,), F=(), test: Optional[Callable] = None, points: int = 128,
                     tol: float = 1e-12) -> dict:
    """Continuum residuals along a halving ladder, averaged over collar points."""
    q = np.asarray(q, dtype=float).reshape(U.dim)
    labels = collar_quadrature(U, field_.interaction_range, points)
    if test is None:
        coef = np.array([0.8, -0.5, 0.3, -0.2])
        test = lambda x: sum(c * np.cos((j + 1) * np.pi * (x[..., 0] - U.lower[0]) / U.side)
                             for j, c in enumerate(coef))
    values = []
    for h in ladder:
        if kind == "first_variation":
            r = 0.0
            for x, w in labels:
                cor = solve_dual(field_, GridSpec(U, n, h), q, x.reshape(1, -1), tol)
                r += w * first_variation_residual_continuum(field_, cor, symmetric_sum(cor.grid.lattice, n, test))
        elif kind == "harmonic":
            r = harmonic_residual_fixture(field_, U, n, h, q, np.zeros((0, U.dim)), labels, E, F, tol)
        else:
            raise ValueError(f"unknown residual kind {kind!r}")
        values.append(float(r))
    return {"kind": kind, "n": n, "ladder": [float(h) for h in ladder], "values": values,
            "ratios": refinement_ratios(values)}
