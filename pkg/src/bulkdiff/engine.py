"""Shared machinery for the estimators: cached correctors, exterior sampling,
and quadrature over labelled added particles.

Added particles ("labels") range over W = U plus the collar cells. A label in
U sits on a lattice node with its trapezoid weight, a label in the collar
sits at a cell midpoint. Both weights are normalized so that the label
weights sum to one over W; integrals over W are |W| times these averages.
"""
from __future__ import annotations

import itertools
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .cache import CacheKey, CorrectorCache
from .fields import ConductanceField
from .grid import Lattice, multiplicity, multisets, rank, sector
from .pointproc import Box, collar_cells, rng_stream
from .solver import DiscreteCorrector, GridSpec, SolverError, solve_dual

ITEM_BUDGET = 2_000_000


class TruncationError(SolverError):
    """Poisson truncation tail above the configured threshold."""


@dataclass(frozen=True)
class MCConfig:
    n_outer: int = 64
    n_max: int = 6
    h: float = 1 / 16
    h_ext: float = 1 / 16
    tol: float = 1e-10
    seed: int = 0
    tail_tol: float = 1e-3
    threads: int = 1
    label_cap: int = 4

    def __post_init__(self):
        if self.n_outer < 2:
            raise ValueError("n_outer must be at least 2")
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if not (0 < self.h <= 1 and 0 < self.h_ext <= 1):
            raise ValueError("grid spacings must lie in (0, 1]")


def poisson_pmf(lam: float, n: int) -> float:
    if lam == 0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-lam + n * math.log(lam) - math.lgamma(n + 1))


def poisson_tail(lam: float, n: int) -> float:
    """P(N >= n)."""
    return max(0.0, 1.0 - sum(poisson_pmf(lam, j) for j in range(n)))


def label_count_cap(lam: float, cap: int, eps: float = 1e-6) -> tuple:
    """Smallest count E with P(N > E) <= eps (at most `cap`), and the neglected mass."""
    for E in range(cap + 1):
        rest = poisson_tail(lam, E + 1)
        if rest <= eps:
            return E, rest
    return cap, poisson_tail(lam, cap + 1)


@dataclass
class Block:
    """Quadrature items sharing one interior/collar split of the labels."""

    weight: np.ndarray
    g: dict
    a: dict
    axis: np.ndarray
    base: np.ndarray
    loc: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    dense: Optional[np.ndarray] = None  # base edge, dense index in sector n


class Problem:
    """A field on the cube of side 3^m together with its discretization."""

    def __init__(self, field_: ConductanceField, m: int, d: int, mc: MCConfig,
                 cache: Optional[CorrectorCache] = None):
        self.field, self.m, self.d, self.mc = field_, m, d, mc
        self.U = Box.cube(m, d)
        self.lat = Lattice(self.U, mc.h)
        self.cells = collar_cells(self.U, field_.interaction_range, mc.h_ext)
        self.cell_vol = mc.h_ext ** d
        self.vol_W = self.U.volume + len(self.cells) * self.cell_vol
        self.cache = cache if cache is not None else CorrectorCache()
        self._memo: dict = {}
        self._groups: dict = {}
        self._lock = threading.Lock()

    # -- exteriors -----------------------------------------------------
    def reduce(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.d)
        return self.field.reduce_exterior(pts, self.U)

    @staticmethod
    def key(ext: np.ndarray) -> bytes:
        return np.round(ext, 12).tobytes()

    def sample_exterior(self, rho: float, s: int, stream_base: int = 1000) -> np.ndarray:
        rng = rng_stream(self.mc.seed, stream_base + s)
        counts = rng.poisson(rho * self.cell_vol, len(self.cells))
        return self.reduce(np.repeat(self.cells, counts, axis=0))

    def exterior_samples(self, rho: float, stream_base: int = 1000) -> list:
        return [self.sample_exterior(rho, s, stream_base) for s in range(self.mc.n_outer)]

    def added_exterior_law(self, rho: float, eps: float = 1e-10, k_cap: int = 6) -> list:
        """Lattice Poisson points of intensity rho on the collar: [(cell ids, prob)]."""
        mu = rho * self.cell_vol
        nc = len(self.cells)
        if nc == 0 or rho == 0:
            return [((), 1.0)]
        base = math.exp(-mu * nc)
        out, mass = [], 0.0
        for k in range(k_cap + 1):
            for combo in itertools.combinations_with_replacement(range(nc), k):
                counts = np.bincount(np.array(combo, dtype=int), minlength=nc) if k else np.zeros(nc, int)
                p = base * float(np.prod([mu ** c / math.factorial(c) for c in counts]))
                out.append((combo, p))
                mass += p
            if 1.0 - mass <= eps:
                break
        return out

    # -- correctors ----------------------------------------------------
    def corrector(self, n: int, ext: np.ndarray, q) -> DiscreteCorrector:
        q = np.asarray(q, dtype=float).reshape(self.d)
        raw_key = (n, self.key(np.asarray(ext, dtype=float)), q.tobytes())
        cor = self._memo.get(raw_key)
        if cor is not None:
            return cor
        ext = self.reduce(ext)
        memo_key = (n, self.key(ext), q.tobytes())
        cor = self._memo.get(memo_key)
        if cor is not None:
            with self._lock:
                self._memo[raw_key] = cor
            return cor
        ckey = CacheKey.make(self.field, self.U, n, self.mc.h, q, ext)
        cor = self.cache.get_or_solve(
            ckey, lambda: solve_dual(self.field, GridSpec(self.U, n, self.mc.h), q, ext, self.mc.tol),
            self.field)
        with self._lock:
            self._memo[memo_key] = cor
            self._memo[raw_key] = cor
        return cor

    def energy(self, n: int, ext: np.ndarray, q) -> float:
        return self.corrector(n, ext, q).energy() if n else 0.0

    def map_exteriors(self, exts: list, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate fn once per distinct exterior; rows come back in sample order."""
        index, uniq = [], {}
        for ext in exts:
            k = self.key(ext)
            if k not in uniq:
                uniq[k] = (len(uniq), ext)
            index.append(uniq[k][0])
        reps = [e for _, e in sorted(uniq.values(), key=lambda t: t[0])]
        if self.mc.threads > 1:
            with ThreadPoolExecutor(self.mc.threads) as pool:
                vals = list(pool.map(fn, reps))
        else:
            vals = [fn(e) for e in reps]
        vals = np.array([np.atleast_1d(np.asarray(v, dtype=float)) for v in vals])
        return vals[np.array(index)]

    # -- labelled quadrature --------------------------------------------
    def _collar_groups(self, ext0: np.ndarray, nk: int, group: bool, kmasks: tuple) -> list:
        """Collar positions of nk labels, grouped by the reduced exteriors they induce.

        Only the label subsets in `kmasks` are resolved. Returns
        [({subset mask: reduced exterior}, multiplicity, cell ids)].
        """
        ck = (self.key(ext0), nk, group, kmasks)
        hit = self._groups.get(ck)
        if hit is not None:
            return hit
        if nk == 0:
            out = [({0: self.reduce(ext0)}, 1, ())]
        else:
            reduced: dict = {}

            def red(cells_sorted):
                if cells_sorted not in reduced:
                    reduced[cells_sorted] = self.reduce(
                        np.vstack([ext0.reshape(-1, self.d), self.cells[list(cells_sorted)]]))
                return reduced[cells_sorted]

            groups: dict = {}
            out = []
            for X in itertools.product(range(len(self.cells)), repeat=nk):
                exts = {km: red(tuple(sorted(X[i] for i in range(nk) if km >> i & 1))) for km in kmasks}
                if not group:
                    out.append((exts, 1, X))
                    continue
                sig = tuple(self.key(exts[km]) for km in kmasks)
                if sig in groups:
                    groups[sig][1] += 1
                else:
                    groups[sig] = [exts, 1, X]
            if group:
                out = [tuple(v) for v in groups.values()]
        with self._lock:
            self._groups[ck] = out
        return out

    def _node_batches(self, j: int, n_items: int, symmetric: bool) -> Iterator[tuple]:
        """Batches of label node tuples with their ordering multiplicities.

        With `symmetric`, only sorted tuples are produced, each standing for
        all its orderings.
        """
        P = self.lat.P
        if j == 0:
            yield np.zeros((1, 0), dtype=np.int64), np.ones(1)
            return
        step = max(1, ITEM_BUDGET // max(n_items, 1))
        if symmetric:
            rows = multisets(P, j).astype(np.int64)
            mult = multiplicity(rows)
            for start in range(0, len(rows), step):
                yield rows[start:start + step], mult[start:start + step]
            return
        total = P ** j
        for start in range(0, total, step):
            flat = np.arange(start, min(total, start + step))
            Y = np.stack(np.unravel_index(flat, (P,) * j), axis=1).astype(np.int64)
            yield Y, np.ones(len(Y))

    def label_blocks(self, ext0: np.ndarray, n: int, e: int, q, n_max: int,
                     group: bool = True, masks=None) -> Iterator[Block]:
        """Quadrature items for base sector n with e labels spread over W.

        Item weights combine the base edge weight and the normalized label
        weights, so summing weight * f over all blocks gives the base edge sum
        averaged over W^e. Splits whose interior count exceeds n_max are skipped.
        Blocks carry g and a for the label subsets in `masks` (default: all).
        """
        masks = sorted(set(range(1 << e)) if masks is None else set(masks) | {0})
        if n == 0:
            return
        lat, d = self.lat, self.d
        P = lat.P
        sec = sector(lat, n)
        edges = sec.edges
        s, v, k = sec.edge_parts(edges)
        S = sec.others[s].astype(np.int64)
        Wb = sec.W[edges]
        nE = len(edges)
        wU = self.U.volume / self.vol_W
        wC = self.cell_vol / self.vol_W
        for jmask in range(1 << e):
            J = [l for l in range(e) if jmask >> l & 1]
            K = [l for l in range(e) if not jmask >> l & 1]
            if n + len(J) > n_max or (K and len(self.cells) == 0):
                continue
            split = {}
            for G in masks:
                jm = sum(1 << i for i, l in enumerate(J) if G >> l & 1)
                km = sum(1 << i for i, l in enumerate(K) if G >> l & 1)
                split[G] = (jm, km, n + bin(jm).count("1"))
            kmasks = tuple(sorted({km for _, km, _ in split.values()}))
            jmasks = sorted({jm for jm, _, _ in split.values()} - {0})
            groups = self._collar_groups(ext0, len(K), group, kmasks)
            local: dict = {}
            full_j = (1 << len(J)) - 1
            symmetric = group and all(jm in (0, full_j) for jm, _, _ in split.values())
            for Y, mult in self._node_batches(len(J), nE, symmetric):
                B = len(Y)
                yw = np.prod(lat.weight[Y], axis=1) * mult if J else np.ones(1)
                weight0 = (np.repeat(Wb, B) * np.tile(yw, nE)) * (wU ** len(J) * wC ** len(K))
                kk = np.repeat(k, B)
                base = np.repeat(np.arange(nE), B)
                slots = {0: base}
                for jm in jmasks:
                    gj = [i for i in range(len(J)) if jm >> i & 1]
                    rows = np.concatenate([np.repeat(S, B, axis=0), np.tile(Y[:, gj], (nE, 1))], axis=1)
                    rows.sort(axis=1)
                    dense = (rank(rows, P) * P + np.repeat(v, B)) * d + kk
                    slots[jm] = sector(lat, n + len(gj)).edge_slot[dense]
                loc_J = {l: np.tile(Y[:, i], nE) for i, l in enumerate(J)}
                om_J = {l: wU * np.tile(lat.weight[Y[:, i]], nE) for i, l in enumerate(J)}
                for exts, count, X in groups:
                    g, a = {}, {}
                    for G, (jm, km, nn) in split.items():
                        ck = (nn, id(exts[km]))
                        cor = local.get(ck)
                        if cor is None:
                            cor = local[ck] = self.corrector(nn, exts[km], q)
                        g[G] = cor.grad[slots[jm]]
                        a[G] = cor.cond[slots[jm]]
                    blk = Block(weight0 * count if count != 1 else weight0, g, a, kk, base,
                                dict(loc_J), dict(om_J), edges[base])
                    for i, l in enumerate(K):
                        blk.loc[l] = np.full(nE * B, P + X[i], dtype=np.int64) if not group else None
                        blk.omega[l] = wC
                    yield blk

    def label_moments(self, ext0: np.ndarray, q, e: int, integrands: list, n_max: int,
                      rho0: float, normalize: bool = True, masks=None) -> np.ndarray:
        """sum_n pi_n * (1/rho0|U|) * avg over W^e of sum_edges W * integrand.

        Each integrand maps a Block to per-item values and may only read the
        label subsets listed in `masks`. With normalize=False the 1/(rho0 |U|)
        factor is dropped.
        """
        lam = rho0 * self.U.volume
        out = np.zeros(len(integrands))
        for n in range(1, n_max + 1):
            pn = poisson_pmf(lam, n)
            acc = np.zeros(len(integrands))
            for blk in self.label_blocks(ext0, n, e, q, n_max, masks=masks):
                for i, f in enumerate(integrands):
                    acc[i] += float(blk.weight @ f(blk))
            out += pn * acc
        return out / lam if normalize else out


def mean_stderr(samples: np.ndarray) -> tuple:
    """Column means and standard errors of per-sample rows."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se
