"""Vertex grids on U and symmetric (multiset) grids on U^n.

A function on U^n that is symmetric under particle exchange is stored once per
multiset of grid nodes. Multisets are ranked in colex order via the
combinatorial number system, which makes all lookups vectorized array
arithmetic.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

from .pointproc import Box


class Lattice:
    """Vertex grid with spacing h on the closure of a box."""

    def __init__(self, U: Box, h: float):
        N = U.side / h
        if abs(N - round(N)) > 1e-9 or round(N) < 1:
            raise ValueError(f"side {U.side} is not a multiple of h={h}")
        self.U, self.h, self.N = U, float(h), int(round(N))
        self.d = U.dim
        n1 = self.N + 1
        self.P = n1 ** self.d
        idx = np.indices((n1,) * self.d).reshape(self.d, -1).T  # row-major, last axis fastest
        self.index = idx
        self.coords = U.lower + idx * self.h
        w1 = np.full(n1, 1.0 / self.N)
        w1[[0, -1]] = 0.5 / self.N
        self.w1 = w1
        self.weight = np.prod(w1[idx], axis=1)  # trapezoid weights, sum to 1
        self.strides = np.array([n1 ** (self.d - 1 - k) for k in range(self.d)])

    def key(self) -> tuple:
        return (self.U.side, self.U.center, self.h)

    def edge_weight(self, k: int) -> np.ndarray:
        """Weight of the edge leaving each node along axis k (0 where it leaves the grid)."""
        w = np.prod(np.delete(self.w1[self.index], k, axis=1), axis=1) / self.N
        return np.where(self.index[:, k] < self.N, w, 0.0)


@lru_cache(maxsize=None)
def _binom_table(top: int, depth: int) -> np.ndarray:
    t = np.zeros((top + 1, depth + 1), dtype=np.int64)
    for c in range(top + 1):
        for j in range(depth + 1):
            t[c, j] = comb(c, j)
    return t


def multiset_count(P: int, n: int) -> int:
    return comb(P + n - 1, n)


def multisets(P: int, n: int) -> np.ndarray:
    """All sorted n-tuples over range(P), in colex order."""
    rows = np.zeros((1, 0), dtype=np.int32)
    for size in range(1, n + 1):
        blocks = []
        for t in range(P):
            cnt = comb(t + size - 1, size - 1)
            blk = np.empty((cnt, size), dtype=np.int32)
            blk[:, :-1] = rows[:cnt]
            blk[:, -1] = t
            blocks.append(blk)
        rows = np.concatenate(blocks)
    return rows


def rank(rows: np.ndarray, P: int) -> np.ndarray:
    """Colex rank of sorted rows of node ids."""
    rows = np.asarray(rows)
    n = rows.shape[1]
    if n == 0:
        return np.zeros(len(rows), dtype=np.int64)
    table = _binom_table(P + n, n + 1)
    c = rows.astype(np.int64) + np.arange(n)
    return table[c, np.arange(1, n + 1)].sum(axis=1)


def multiplicity(rows: np.ndarray) -> np.ndarray:
    """Number of distinct orderings of each sorted row: n! / prod(counts!)."""
    n = rows.shape[1]
    denom = np.ones(len(rows), dtype=np.float64)
    run = np.zeros(len(rows), dtype=np.float64)
    for i in range(1, n):
        run = np.where(rows[:, i] == rows[:, i - 1], run + 1, 0)
        denom *= run + 1
    fact = float(np.prod(np.arange(1, n + 1))) if n else 1.0
    return fact / denom


class Sector:
    """Geometry of the n-particle symmetric grid on U^n.

    Edges move one particle by one lattice step along one axis while the
    others (the multiset `S` of size n-1) stay on nodes. Edge arrays are laid
    out densely by (rank of S, node, axis) with `valid` marking edges inside U.
    """

    def __init__(self, lat: Lattice, n: int):
        self.lat, self.n = lat, n
        P, d = lat.P, lat.d
        self.states = multisets(P, n)
        self.size = len(self.states)
        self.mass = multiplicity(self.states) * np.prod(lat.weight[self.states], axis=1)
        if n == 0:
            self.n_edges_dense = 0
            self.valid = np.zeros(0, dtype=bool)
            return
        others = multisets(P, n - 1)
        self.others = others
        ns = len(others)
        # rank of S + {v} for every S and node v
        table = _binom_table(P + n, n + 1)
        m = n - 1
        pre = np.zeros((ns, m + 1), dtype=np.int64)
        suf = np.zeros((ns, m + 1), dtype=np.int64)
        if m:
            i = np.arange(m)
            cur = table[others.astype(np.int64) + i, i + 1]
            nxt = table[others.astype(np.int64) + i + 1, i + 2]
            pre[:, 1:] = np.cumsum(cur, axis=1)
            suf[:, :m] = np.cumsum(nxt[:, ::-1], axis=1)[:, ::-1]
        v = np.arange(P)
        pos = (others[:, :, None] <= v[None, None, :]).sum(axis=1) if m else np.zeros((ns, P), dtype=np.int64)
        rows = np.arange(ns)[:, None]
        ins = pre[rows, pos] + table[v[None, :] + pos, pos + 1] + suf[rows, pos]  # (ns, P)
        s_weight = multiplicity(others) * np.prod(lat.weight[others], axis=1) * n
        lo, hi, W, valid = [], [], [], []
        for k in range(d):
            step = lat.strides[k]
            ok = lat.index[:, k] < lat.N
            nb = np.where(ok, v + step, v)
            lo.append(ins)
            hi.append(ins[:, nb])
            W.append(s_weight[:, None] * lat.edge_weight(k)[None, :])
            valid.append(np.broadcast_to(ok, (ns, P)))
        # dense layout (s, v, k)
        self.lo = np.stack(lo, axis=2).reshape(-1)
        self.hi = np.stack(hi, axis=2).reshape(-1)
        self.W = np.stack(W, axis=2).reshape(-1)
        self.valid = np.stack(valid, axis=2).reshape(-1)
        self.n_edges_dense = ns * P * d
        self.edges = np.flatnonzero(self.valid)
        self.edge_slot = np.full(self.n_edges_dense, -1, dtype=np.int64)
        self.edge_slot[self.edges] = np.arange(len(self.edges))

    def edge_parts(self, dense_idx: np.ndarray):
        """Split dense edge indices into (others rank, node, axis)."""
        P, d = self.lat.P, self.lat.d
        s, rem = np.divmod(dense_idx, P * d)
        v, k = np.divmod(rem, d)
        return s, v, k

    def edge_positions(self, dense_idx: np.ndarray):
        """Moving particle at the edge midpoint and the others on nodes."""
        s, v, k = self.edge_parts(dense_idx)
        lat = self.lat
        mid = lat.coords[v].copy()
        mid[np.arange(len(k)), k] += 0.5 * lat.h
        return mid, lat.coords[self.others[s]], k

    def to_tensor(self, values: np.ndarray) -> np.ndarray:
        """Expand symmetric values to the full tensor grid (small n only)."""
        lat = self.lat
        shape = (lat.P,) * self.n
        if np.prod(shape, dtype=float) > 5e7:
            raise MemoryError("tensor expansion too large")
        idx = np.indices(shape).reshape(self.n, -1).T
        return values[rank(np.sort(idx, axis=1), lat.P)].reshape(shape)


_SECTORS: dict = {}


def sector(lat: Lattice, n: int) -> Sector:
    key = lat.key() + (n,)
    if key not in _SECTORS:
        _SECTORS[key] = Sector(lat, n)
    return _SECTORS[key]
