"""Monte Carlo + quadrature estimates of the finite-volume quantities.

The expectation over the Poisson configuration is split as follows: the
reduced collar exterior is sampled (outer Monte Carlo), the interior count n
is summed with exact Poisson weights up to n_max, and interior positions are
integrated by the grid quadrature inside the sector solver.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from . import diff_calculus as dc
from .cache import CorrectorCache
from .engine import (MCConfig, Problem, TruncationError, label_count_cap, mean_stderr,
                     poisson_pmf, poisson_tail)
from .fields import ConductanceField, InvariantViolation
from .pointproc import Box
from .solver import solve_primal

log = logging.getLogger(__name__)


@dataclass
class MCEstimate:
    value: object
    stderr: object
    n_outer: int
    n_max: int
    seed: int
    tail_lower: float = 0.0
    tail_upper: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("estimate is not finite")
        if np.any(np.asarray(self.stderr) < 0):
            raise ValueError("negative standard error")


def _problem(field_, m, d, mc, cache, problem):
    if problem is not None:
        return problem
    return Problem(field_, m, d, mc, cache)


def _unit(q, d) -> np.ndarray:
    return np.asarray(q if q is not None else np.eye(d)[0], dtype=float).reshape(d)


# ---------------------------------------------------------------- nu, nu*
def nu_star_sample(pb: Problem, ext: np.ndarray, q, rho0: float, n_max: int) -> float:
    lam = rho0 * pb.U.volume
    return sum(poisson_pmf(lam, n) * pb.energy(n, ext, q) for n in range(1, n_max + 1)) / lam


def estimate_nu_star(field_: ConductanceField, m: int, q, rho0: float, mc: MCConfig, d: int = 1,
                     cache: Optional[CorrectorCache] = None, problem: Optional[Problem] = None) -> MCEstimate:
    """Truncated sum over n <= n_max; the neglected tail is reported as an interval."""
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    pb = _problem(field_, m, d, mc, cache, problem)
    q = _unit(q, d)
    exts = pb.exterior_samples(rho0)
    vals = pb.map_exteriors(exts, lambda e: nu_star_sample(pb, e, q, rho0, mc.n_max))
    mean, se = mean_stderr(vals[:, 0])
    tw = poisson_tail(rho0 * pb.U.volume, mc.n_max)
    lo, hi = tw * (q @ q) / (2 * field_.lam), tw * (q @ q) / 2
    if (hi - lo) / 2 > mc.tail_tol * max(mean, 1e-300):
        raise TruncationError(f"nu* truncation tail {hi:.2e} above threshold; increase n_max beyond {mc.n_max}")
    return MCEstimate(float(mean), float(se), mc.n_outer, mc.n_max, mc.seed, lo, hi,
                      {"samples": vals[:, 0], "distinct_exteriors": len({pb.key(e) for e in exts})})


def estimate_nu(field_: ConductanceField, m: int, p, rho0: float, mc: MCConfig, d: int = 1) -> MCEstimate:
    """The primal quantity; the exterior is averaged exactly, so there is no sampling error."""
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    U = Box.cube(m, d)
    p = _unit(p, d)
    sol = solve_primal(field_, U, p, rho0, mc.n_max, mc.h, mc.tol, mc.h_ext)
    tw = poisson_tail(rho0 * U.volume, mc.n_max)
    lo, hi = tw * (p @ p) / 2, tw * field_.lam * (p @ p) / 2
    if (hi - lo) / 2 > mc.tail_tol * max(sol.value, 1e-300):
        raise TruncationError(f"nu truncation tail {hi:.2e} above threshold; increase n_max beyond {mc.n_max}")
    return MCEstimate(float(sol.value), 0.0, 1, mc.n_max, mc.seed, lo, hi,
                      {"sector_energy": sol.sector_energy})


@dataclass
class AbarResult:
    a_bar: np.ndarray
    a_bar_stderr: np.ndarray
    a_star: np.ndarray
    a_star_stderr: np.ndarray
    tail_err: tuple  # (a_bar, a_star) spread caused by the truncation tail


def _polarize(values: dict, d: int) -> np.ndarray:
    """Quadratic form M with values[v] = v.M.v / 2 for v in {e_i, e_i + e_j}."""
    M = np.zeros((d, d))
    for i in range(d):
        M[i, i] = 2 * values[(i,)]
    for i, j in combinations(range(d), 2):
        M[i, j] = M[j, i] = values[(i, j)] - values[(i,)] - values[(j,)]
    return M


def _directions(d: int) -> dict:
    out = {(i,): np.eye(d)[i] for i in range(d)}
    for i, j in combinations(range(d), 2):
        out[(i, j)] = np.eye(d)[i] + np.eye(d)[j]
    return out


def abar_matrices(field_: ConductanceField, m: int, rho0: float, mc: MCConfig, d: int = 1,
                  cache: Optional[CorrectorCache] = None) -> AbarResult:
    """a_bar from nu and a_bar_* from nu* by polarization; tails at their midpoints."""
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    pb = Problem(field_, m, d, mc, cache)
    dirs = _directions(d)
    star_samples, star_mid, star_half = {}, {}, {}
    prim, prim_half = {}, {}
    for key, v in dirs.items():
        est = estimate_nu_star(field_, m, v, rho0, mc, d, problem=pb)
        star_samples[key] = est.extra["samples"] + (est.tail_lower + est.tail_upper) / 2
        star_half[key] = (est.tail_upper - est.tail_lower) / 2
        pr = estimate_nu(field_, m, v, rho0, mc, d)
        prim[key] = pr.value + (pr.tail_lower + pr.tail_upper) / 2
        prim_half[key] = (pr.tail_upper - pr.tail_lower) / 2
    star_mean = {k: float(np.mean(s)) for k, s in star_samples.items()}
    M = _polarize(star_mean, d)
    a_star = np.linalg.inv(M)
    # per-sample linearization of the inverse for the standard error
    lin = []
    for s in range(mc.n_outer):
        Ms = _polarize({k: float(v[s]) for k, v in star_samples.items()}, d)
        lin.append((a_star - a_star @ (Ms - M) @ a_star).ravel())
    _, se_star = mean_stderr(np.array(lin))
    a_bar = _polarize(prim, d)
    Mh = _polarize(star_half, d)
    tail_star = float(np.abs(a_star @ np.abs(Mh) @ a_star).max()) * 3
    tail_bar = float(np.abs(_polarize(prim_half, d)).max()) * 3
    return AbarResult(a_bar, np.zeros((d, d)), a_star, se_star.reshape(d, d), (tail_bar, tail_star))


def sandwich_margin(r: AbarResult, lam: float, sigmas: float = 2.0) -> float:
    """Smallest slack in Id <= a_star <= a_bar <= lam Id; negative means violated.

    Each comparison is loosened by `sigmas` standard errors plus the tail spread.
    """
    d = len(r.a_bar)
    slack = sigmas * float(np.abs(r.a_star_stderr).max()) + sum(r.tail_err)
    gaps = [r.a_star - np.eye(d), r.a_bar - r.a_star, lam * np.eye(d) - r.a_bar]
    return min(float(np.linalg.eigvalsh((g + g.T) / 2).min()) for g in gaps) + slack


def check_sandwich(r: AbarResult, lam: float, sigmas: float = 2.0) -> None:
    margin = sandwich_margin(r, lam, sigmas)
    if margin < 0:
        raise InvariantViolation(f"ellipticity sandwich violated by {-margin:.3g}: "
                                 f"a_star={r.a_star.tolist()}, a_bar={r.a_bar.tolist()}")


# ---------------------------------------------------------------- increments
def _delta_def_sample(pb: Problem, ext0, q, rho0, rho, law) -> np.ndarray:
    """2 (nu*_{rho0+rho} - nu*_{rho0}) for one exterior, and the truncation boundary term."""
    n_max = pb.mc.n_max
    base = nu_star_sample(pb, ext0, q, rho0, n_max)
    groups: dict = {}
    for combo, p in law:
        ext = pb.reduce(np.vstack([ext0.reshape(-1, pb.d), pb.cells[list(combo)]])) if combo else pb.reduce(ext0)
        k = pb.key(ext)
        groups[k] = (ext, groups.get(k, (ext, 0.0))[1] + p)
    plus = sum(p * nu_star_sample(pb, ext, q, rho0 + rho, n_max) for ext, p in groups.values())
    plus += (1.0 - sum(p for _, p in law)) * nu_star_sample(pb, ext0, q, rho0 + rho, n_max)
    # -(1/lam0) E[int q.grad psi dmu ; n <= n_max < n + j], j = added interior count
    lam0, lamj = rho0 * pb.U.volume, rho * pb.U.volume
    boundary = -sum(poisson_pmf(lam0, n) * 2 * pb.energy(n, ext0, q) * poisson_tail(lamj, n_max - n + 1)
                    for n in range(1, n_max + 1)) / lam0
    return np.array([2 * (plus - base), boundary])


def delta_rho_def(field_: ConductanceField, m: int, rho0: float, rho: float, mc: MCConfig, d: int = 1,
                  q=None, cache: Optional[CorrectorCache] = None, problem: Optional[Problem] = None,
                  coupled: bool = True) -> MCEstimate:
    """q.a*^{-1}(rho0+rho)q - q.a*^{-1}(rho0)q.

    With coupled=True the densities share the exterior at rho0 and the extra
    points at intensity rho are summed exactly. With coupled=False both
    densities are sampled from independent streams.
    """
    if rho0 <= 0 or rho0 + rho <= 0:
        raise ValueError("densities must be positive")
    pb = _problem(field_, m, d, mc, cache, problem)
    q = _unit(q, d)
    if rho == 0:
        return MCEstimate(0.0, 0.0, mc.n_outer, mc.n_max, mc.seed)
    if rho < 0:
        # roles swapped: rho0 + rho is the base density
        est = delta_rho_def(field_, m, rho0 + rho, -rho, mc, d, q, cache, pb, coupled)
        return MCEstimate(-est.value, est.stderr, est.n_outer, est.n_max, est.seed,
                          est.tail_lower, est.tail_upper, {**est.extra, "boundary": -est.extra.get("boundary", 0.0)})
    if coupled:
        law = pb.added_exterior_law(rho)
        vals = pb.map_exteriors(pb.exterior_samples(rho0), lambda e: _delta_def_sample(pb, e, q, rho0, rho, law))
        samples = vals[:, 0]
        boundary, _ = mean_stderr(vals[:, 1])
    else:
        lo = pb.map_exteriors(pb.exterior_samples(rho0, 1000), lambda e: nu_star_sample(pb, e, q, rho0, mc.n_max))
        hi = pb.map_exteriors(pb.exterior_samples(rho0 + rho, 500_000),
                              lambda e: nu_star_sample(pb, e, q, rho0 + rho, mc.n_max))
        samples = 2 * (hi[:, 0] - lo[:, 0])
        boundary = float("nan")
    mean, se = mean_stderr(samples)
    tw = poisson_tail((rho0 + rho) * pb.U.volume, mc.n_max) + poisson_tail(rho0 * pb.U.volume, mc.n_max)
    return MCEstimate(float(mean), float(se), mc.n_outer, mc.n_max, mc.seed, -tw * (q @ q), tw * (q @ q),
                      {"samples": samples, "boundary": float(boundary)})


# moments B(G1, G2) = (1/lam) E[ sum W g^0 a^{G1} g^{G2} ] averaged over labels in W
def _moment_masks(n_both: int, n_a: int, n_g: int) -> tuple:
    """Label masks for a^{G1}, g^{G2} with |G1 & G2| = n_both, |G1 - G2| = n_a, |G2 - G1| = n_g."""
    both = (1 << n_both) - 1
    only_a = ((1 << n_a) - 1) << n_both
    only_g = ((1 << n_g) - 1) << (n_both + n_a)
    return both | only_a, both | only_g


class MomentTable:
    """Per-exterior labelled moments, computed one label count at a time."""

    def __init__(self, pb: Problem, q, rho0: float):
        self.pb, self.q, self.rho0 = pb, q, rho0
        self._cache: dict = {}

    def get(self, ext0: np.ndarray, triples: list) -> dict:
        by_e: dict = {}
        for t in triples:
            by_e.setdefault(sum(t), []).append(t)
        out = {}
        for e, ts in sorted(by_e.items()):
            key = (self.pb.key(ext0), e)
            have = self._cache.setdefault(key, {})
            need = [t for t in ts if t not in have]
            if need:
                fns, masks = [], {0}
                for t in need:
                    ma, mg = _moment_masks(*t)
                    masks |= {ma, mg}
                    fns.append(lambda b, ma=ma, mg=mg: b.g[0] * b.a[ma] * b.g[mg])
                vals = self.pb.label_moments(ext0, self.q, e, fns, self.pb.mc.n_max, self.rho0,
                                             masks=masks)
                have.update(zip(need, vals))
            out.update({t: have[t] for t in ts})
        return out


def _table(pb: Problem, q, rho0: float) -> MomentTable:
    key = ("moments", np.asarray(q, dtype=float).tobytes(), float(rho0))
    with pb._lock:
        if key not in pb._groups:
            pb._groups[key] = MomentTable(pb, q, rho0)
        return pb._groups[key]


def _A_values(table: MomentTable, ext0, e_max: int) -> np.ndarray:
    """A_e = (1/lam) E[sum W g (a - a^{[e]}) g^{[e]}] averaged over e labels; A_0 = 0."""
    triples = [t for e in range(1, e_max + 1) for t in ((0, 0, e), (e, 0, 0))]
    B = table.get(ext0, triples)
    return np.array([0.0] + [B[(0, 0, e)] - B[(e, 0, 0)] for e in range(1, e_max + 1)])


def _repr_sample(pb: Problem, table: MomentTable, ext0, q, rho0, rho, e_max) -> float:
    A = _A_values(table, ext0, e_max)
    lamW = rho * pb.vol_W
    val = sum(poisson_pmf(lamW, e) * A[e] for e in range(1, e_max + 1))
    n_max = pb.mc.n_max
    lam0, lamj = rho0 * pb.U.volume, rho * pb.U.volume
    boundary = -sum(poisson_pmf(lam0, n) * 2 * pb.energy(n, ext0, q) * poisson_tail(lamj, n_max - n + 1)
                    for n in range(1, n_max + 1)) / lam0
    return val + boundary


def delta_rho_repr(field_: ConductanceField, m: int, rho0: float, rho: float, mc: MCConfig, d: int = 1,
                   q=None, cache: Optional[CorrectorCache] = None, problem: Optional[Problem] = None) -> MCEstimate:
    """(1/rho0|U|) E[int grad psi.(a - a^rho) grad psi^rho dmu].

    The added points are a Poisson mixture of labelled particles on W. The
    estimate includes the truncation boundary term, so that it targets the
    same n <= n_max model as delta_rho_def.
    """
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    pb = _problem(field_, m, d, mc, cache, problem)
    q = _unit(q, d)
    if rho == 0:
        return MCEstimate(0.0, 0.0, mc.n_outer, mc.n_max, mc.seed)
    e_max, neglected = label_count_cap(rho * pb.vol_W, mc.label_cap)
    table = _table(pb, q, rho0)
    vals = pb.map_exteriors(pb.exterior_samples(rho0), lambda e: _repr_sample(pb, table, e, q, rho0, rho, e_max))
    mean, se = mean_stderr(vals[:, 0])
    bound = neglected * field_.lam * (q @ q)
    return MCEstimate(float(mean), float(se), mc.n_outer, mc.n_max, mc.seed, -bound, bound,
                      {"samples": vals[:, 0], "label_cap": e_max})


def _ck_from_A(A: np.ndarray, k: int, vol_W: float) -> float:
    """c_k = int over W^k of D_[k] applied to the family E -> |W|^k A_|E|."""
    fam = dc.IndexedFamily(None, {i: None for i in range(1, k + 1)},
                           lambda E: vol_W ** k * A[len(E)])
    return float(dc.difference(fam, range(1, k + 1)))


def _leibniz_terms(k: int) -> list:
    """Pairs (E, F) with E and F covering [1, k], E nonempty."""
    full = frozenset(range(1, k + 1))
    subs = dc.subsets(full)
    return [(E, F) for E in subs for F in subs if E | F == full and E]


def _I_sample(table: MomentTable, ext0, k: int, vol_W: float) -> np.ndarray:
    """I(E, F) = -int E[(1/lam) int grad psi . (D_E a)(D_F grad psi) dmu] over W^k."""
    terms = _leibniz_terms(k)
    triples = set()
    for E, F in terms:
        for G1 in dc.subsets(E):
            for G2 in dc.subsets(F):
                triples.add((len(G1 & G2), len(G1 - G2), len(G2 - G1)))
    B = table.get(ext0, sorted(triples))
    out = []
    for E, F in terms:
        tot = 0.0
        for G1 in dc.subsets(E):
            for G2 in dc.subsets(F):
                sign = (-1) ** (len(E - G1) + len(F - G2))
                tot += sign * B[(len(G1 & G2), len(G1 - G2), len(G2 - G1))]
        out.append(-vol_W ** k * tot)
    return np.array(out)


def c_km(field_: ConductanceField, m: int, rho0: float, k: int, mc: MCConfig, d: int = 1, q=None,
         cache: Optional[CorrectorCache] = None, problem: Optional[Problem] = None,
         with_terms: bool = True, check_quadrature: bool = False) -> MCEstimate:
    """k-th finite-volume coefficient, with its Leibniz split into I(E, F) terms."""
    if not 1 <= k <= 3:
        raise ValueError("k must be 1, 2 or 3")
    pb = _problem(field_, m, d, mc, cache, problem)
    q = _unit(q, d)
    table = _table(pb, q, rho0)

    def sample(ext0):
        A = _A_values(table, ext0, k)
        row = [_ck_from_A(A, k, pb.vol_W)]
        if with_terms:
            row += list(_I_sample(table, ext0, k, pb.vol_W))
        return np.array(row)

    vals = pb.map_exteriors(pb.exterior_samples(rho0), sample)
    mean, se = mean_stderr(vals)
    extra = {"samples": vals[:, 0]}
    if with_terms:
        extra["terms"] = [{"E": sorted(E), "F": sorted(F), "value": float(mean[i + 1]), "stderr": float(se[i + 1])}
                          for i, (E, F) in enumerate(_leibniz_terms(k))]
        extra["terms_sum"] = float(vals[:, 1:].sum(axis=1).mean())
    band = 10 * 2 ** k * field_.lam ** 2 * (q @ q)
    if abs(mean[0]) > band:
        warnings.warn(f"|c_{k}| = {abs(mean[0]):.3g} exceeds sanity band {band:.3g}")
    if check_quadrature:
        fine = MCConfig(**{**mc.__dict__, "h_ext": mc.h_ext / 2})
        other = c_km(field_, m, rho0, k, fine, d, q, cache, None, with_terms=False)
        comb = math.hypot(se[0], other.stderr)
        extra["quadrature_refined"] = other.value
        extra["quadrature_unconverged"] = bool(abs(other.value - mean[0]) > 3 * comb)
    return MCEstimate(float(mean[0]), float(se[0]), mc.n_outer, mc.n_max, mc.seed, extra=extra)


# ---------------------------------------------------------------- expansion
@dataclass
class ExpansionReport:
    m: int
    rho0: float
    rho_grid: list
    k: int
    coefficients: list  # (value, stderr) for c_1..c_k
    delta: list  # (value, stderr) per rho
    remainder: list  # (value, stderr) per rho, R_k
    slope: float
    inconclusive: bool
    remainders_by_order: dict = field(default_factory=dict)


def _slope(rhos, vals) -> float:
    x, y = np.log(np.asarray(rhos)), np.log(np.abs(np.asarray(vals)))
    return float(np.polyfit(x, y, 1)[0])


def expansion_report(field_: ConductanceField, m: int, rho0: float, rho_grid, k: int, mc: MCConfig,
                     d: int = 1, q=None, cache: Optional[CorrectorCache] = None) -> ExpansionReport:
    """Remainders R_j = Delta - sum_{i<=j} c_i rho^i / i! for j <= k, paired per exterior.

    Delta is the direct difference of the two dual values with its truncation
    boundary term removed, which is the increment of the n <= n_max model the
    coefficients describe.
    """
    pb = Problem(field_, m, d, mc, cache)
    q = _unit(q, d)
    rho_grid = [float(r) for r in rho_grid]
    table = _table(pb, q, rho0)
    laws = [pb.added_exterior_law(r) for r in rho_grid]

    def sample(ext0):
        A = _A_values(table, ext0, max(k, 1))
        cs = [_ck_from_A(A, j, pb.vol_W) for j in range(1, k + 1)]
        deltas = []
        for r, law in zip(rho_grid, laws):
            dd, bnd = _delta_def_sample(pb, ext0, q, rho0, r, law)
            deltas.append(dd - bnd)
        return np.array(cs + deltas)

    vals = pb.map_exteriors(pb.exterior_samples(rho0), sample)
    cs = vals[:, :k]
    deltas = vals[:, k:]
    rem = {}
    for j in range(0, k + 1):
        R = deltas.copy()
        for i in range(1, j + 1):
            R -= np.outer(cs[:, i - 1], [r ** i / math.factorial(i) for r in rho_grid])
        rem[j] = mean_stderr(R)
    cmean, cse = mean_stderr(cs)
    dmean, dse = mean_stderr(deltas)
    rmean, rse = rem[k]
    inconclusive = bool(np.any(np.abs(rmean) < 3 * rse))
    slope = _slope(rho_grid, rmean) if np.all(rmean != 0) else float("nan")
    return ExpansionReport(m, rho0, rho_grid, k, list(zip(cmean, cse)), list(zip(dmean, dse)),
                           list(zip(rmean, rse)), slope, inconclusive,
                           {j: [(float(a), float(b)) for a, b in zip(*rem[j])] for j in rem})


def crn_variance_report(field_: ConductanceField, m: int, rho0: float, rho: float, mc: MCConfig, d: int = 1,
                        cache: Optional[CorrectorCache] = None) -> dict:
    pb = Problem(field_, m, d, mc, cache)
    coupled = delta_rho_def(field_, m, rho0, rho, mc, d, problem=pb)
    indep = delta_rho_def(field_, m, rho0, rho, mc, d, problem=pb, coupled=False)
    ratio = indep.stderr / coupled.stderr if coupled.stderr > 0 else float("inf")
    return {"coupled": coupled.stderr, "independent": indep.stderr, "ratio": ratio, "at_least_2x": ratio >= 2}


# ---------------------------------------------------------------- diagnostics
def _relabel(E, F) -> tuple:
    labels = sorted(set(E) | set(F))
    pos = {l: i for i, l in enumerate(labels)}
    mask = lambda S: sum(1 << pos[l] for l in S)
    return len(labels), mask(E), mask(F)


def harmonic_residual(field_: ConductanceField, m: int, E, F, rho: float, mc: MCConfig, d: int = 1,
                      q=None, rho0: float = 1.0, which: int = 1,
                      cache: Optional[CorrectorCache] = None) -> MCEstimate:
    """Left side of the harmonic identities, labels of E and F integrated over W.

    which=1: grad psi^{rho,F} . (a^E grad psi^E - q); which=2: grad psi^F .
    (a^{rho,E} grad psi^{rho,E} - q). The points at intensity rho are a Poisson
    mixture of extra labels averaged over W.
    """
    if len(set(E)) > 2 or len(set(F)) > 2:
        raise ValueError("|E|, |F| <= 2")
    pb = Problem(field_, m, d, mc, cache)
    q = _unit(q, d)
    nl, mE, mF = _relabel(E, F)
    r_max, neglected = label_count_cap(rho * pb.vol_W, min(mc.label_cap, 2)) if rho > 0 else (0, 0.0)

    def sample(ext0):
        total = 0.0
        for r in range(r_max + 1):
            mR = ((1 << r) - 1) << nl
            if which == 1:
                f = lambda b: b.g[mF | mR] * (b.a[mE] * b.g[mE] - q[b.axis])
            else:
                f = lambda b: b.g[mF] * (b.a[mE | mR] * b.g[mE | mR] - q[b.axis])
            used = {mF | mR, mE} if which == 1 else {mF, mE | mR}
            val = pb.label_moments(ext0, q, nl + r, [f], mc.n_max, rho0, normalize=False, masks=used)[0]
            w = poisson_pmf(rho * pb.vol_W, r) if rho > 0 else 1.0
            total += w * pb.vol_W ** nl * val
        return total

    vals = pb.map_exteriors(pb.exterior_samples(rho0), sample)
    mean, se = mean_stderr(vals[:, 0])
    bound = neglected * field_.lam * (q @ q) * pb.vol_W ** nl * rho0 * pb.U.volume
    return MCEstimate(float(mean), float(se), mc.n_outer, mc.n_max, mc.seed, -bound, bound)


def _key_estimate_sample(pb: Problem, ext0, q, rho0, nF: int, mG: int) -> float:
    """(1/lam) E[ sum over bins of W * prod_{F-G} |W| omega * (sum_G-items prod |W| omega D_F g)^2 ]."""
    lam = rho0 * pb.U.volume
    W = pb.vol_W
    L = pb.lat.P + len(pb.cells)
    free = [l for l in range(nF) if not mG >> l & 1]
    total = 0.0
    for n in range(1, pb.mc.n_max + 1):
        ids, vals, bw = [], [], []
        for blk in pb.label_blocks(ext0, n, nF, q, pb.mc.n_max, group=False):
            dF = sum((-1) ** (nF - bin(H).count("1")) * blk.g[H] for H in range(1 << nF))
            inner_w = np.ones_like(blk.weight)
            outer_w = np.ones_like(blk.weight)
            bid = blk.base.astype(np.int64)
            for l in range(nF):
                om = W * np.broadcast_to(blk.omega[l], blk.weight.shape)
                if mG >> l & 1:
                    inner_w = inner_w * om
                else:
                    outer_w = outer_w * om
            for l in free:
                bid = bid * L + blk.loc[l]
            # base edge weight: item weight divided by all label weights
            label_w = np.ones_like(blk.weight)
            for l in range(nF):
                label_w = label_w * np.broadcast_to(blk.omega[l], blk.weight.shape)
            Wb = blk.weight / label_w
            ids.append(bid)
            vals.append(inner_w * dF)
            bw.append(Wb * outer_w)
        if not ids:
            continue
        ids = np.concatenate(ids)
        vals = np.concatenate(vals)
        bw = np.concatenate(bw)
        uniq, inv = np.unique(ids, return_inverse=True)
        inner = np.bincount(inv, vals, len(uniq))
        first = np.zeros(len(uniq))
        first[inv[::-1]] = bw[::-1]
        total += poisson_pmf(lam, n) * float(first @ inner ** 2)
    return total / lam


def key_estimate_probe(field_: ConductanceField, m: int, F, G, mc: MCConfig, d: int = 1, q=None,
                       rho0: float = 1.0, cache: Optional[CorrectorCache] = None) -> MCEstimate:
    """int_{F-G} E[(1/rho0|U|) int |int_G D_F grad psi|^2 dmu]."""
    F, G = sorted(set(F)), sorted(set(G))
    if not set(G) <= set(F) or len(F) > 3:
        raise ValueError("need G subset of F and |F| <= 3")
    pb = Problem(field_, m, d, mc, cache)
    q = _unit(q, d)
    pos = {l: i for i, l in enumerate(F)}
    mG = sum(1 << pos[l] for l in G)
    vals = pb.map_exteriors(pb.exterior_samples(rho0), lambda e: _key_estimate_sample(pb, e, q, rho0, len(F), mG))
    mean, se = mean_stderr(vals[:, 0])
    return MCEstimate(float(mean), float(se), mc.n_outer, mc.n_max, mc.seed)


def continuity_scan(field_: ConductanceField, m: int, rho_grid, mc: MCConfig, d: int = 1,
                    cache: Optional[CorrectorCache] = None) -> list:
    """a_bar and a_bar_* on a density grid with shared seeds."""
    rows = []
    for rho0 in rho_grid:
        res = abar_matrices(field_, m, rho0, mc, d, cache)
        lo = np.linalg.eigvalsh(res.a_bar - res.a_star).min()
        slack = 2 * float(np.abs(res.a_star_stderr).max()) + sum(res.tail_err)
        rows.append({"rho0": float(rho0), "a_bar": res.a_bar, "a_star": res.a_star,
                     "a_star_stderr": res.a_star_stderr, "ordered": bool(lo >= -slack)})
    for i in range(1, len(rows)):
        dr = rows[i]["rho0"] - rows[i - 1]["rho0"]
        rows[i]["modulus_a_bar"] = float(np.abs(rows[i]["a_bar"] - rows[i - 1]["a_bar"]).max() / dr)
        rows[i]["modulus_a_star"] = float(np.abs(rows[i]["a_star"] - rows[i - 1]["a_star"]).max() / dr)
    return rows
