"""Acceptance runner shared by `bulkdiff verify` and tests/test_acceptance.py.

Each check returns a CriterionResult; the runner never raises on a failed
check, so one report always covers all twelve criteria.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diff_calculus as dc
from . import estimator as est
from . import residuals as res
from .cache import CorrectorCache
from .engine import MCConfig, Problem
from .fields import ConstantField, CrowdingField
from .pointproc import Box, PointConfiguration, indicator_identity_residual, mecke_residual
from .solver import GridSpec, dirichlet_energy, dual_value, slice_energy, solve_dual

log = logging.getLogger(__name__)

CROWDING = dict(lam=2.0, r=0.25)
# floor for oracle error estimates that collapse to rounding level
ORACLE_ERROR_FLOOR = 1e-12


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    verdict: str
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:>2} {self.name}: {self.verdict}; {self.detail}"


def _result(number, name, passed, detail, data=None, verdict=None):
    return CriterionResult(number, name, bool(passed), verdict or ("pass" if passed else "fail"), detail,
                           data=data or {})


class Context:
    """Shared cache and memoized suite results."""

    def __init__(self, fixtures: dict, threads: int = 1, quick: bool = False):
        self.fixtures = fixtures
        self.threads = threads
        self.quick = quick
        self.cache = CorrectorCache()
        self._abar: dict = {}

    def mc(self, **kw) -> MCConfig:
        return MCConfig(threads=self.threads, **kw)

    def fixture(self, kind: str, **match) -> dict:
        for e in self.fixtures["entries"]:
            if e["kind"] == kind and all(math.isclose(e.get(k, math.nan), v) for k, v in match.items()):
                return e
        raise KeyError(f"no {kind} fixture matching {match}; run `bulkdiff oracle` first")

    # suite of (field, d, m, rho0) configurations used by criteria 2 and 3
    def suite(self) -> list:
        n_outer = 8 if self.quick else 16
        out = []
        for rho0, nm0, nm1 in ((0.5, 6, 7), (1.0, 8, 9), (2.0, 10, 10)):
            out.append(("crowding", 1, 0, rho0, self.mc(n_outer=n_outer, n_max=nm0, h=1 / 4, seed=11, tail_tol=1.0)))
            out.append(("crowding", 1, 1, rho0, self.mc(n_outer=n_outer, n_max=nm1, h=1 / 4, seed=11, tail_tol=1.0)))
        for rho0 in (0.5, 1.0):
            out.append(("crowding", 1, 0, rho0, self.mc(n_outer=n_outer, n_max=8, h=1 / 8, seed=12, tail_tol=1.0)))
            out.append(("crowding", 2, 0, rho0, self.mc(n_outer=n_outer, n_max=2, h=1 / 8, seed=13, tail_tol=1.0)))
        return out

    def abar(self, d: int, m: int, rho0: float, mc: MCConfig) -> est.AbarResult:
        key = (d, m, rho0, mc)
        if key not in self._abar:
            t = time.time()
            self._abar[key] = est.abar_matrices(CrowdingField(**CROWDING), m, rho0, mc, d, self.cache)
            log.info("abar d=%d m=%d rho0=%g n_max=%d h=%g: %.1fs", d, m, rho0, mc.n_max, mc.h, time.time() - t)
        return self._abar[key]


# ---------------------------------------------------------------- 1
def check_constant_field(ctx: Context) -> CriterionResult:
    rows, ok = [], True
    mc = ctx.mc(n_outer=4, n_max=8, h=1 / 8, seed=1)
    for c in (1.0, 1.5, 2.0):
        f = ConstantField(c)
        ns = est.estimate_nu_star(f, 0, [1.0], 1.0, mc, cache=ctx.cache)
        nu = est.estimate_nu(f, 0, [1.0], 1.0, mc)
        t_star, t_nu = 1 / (2 * c), c / 2
        ok_star = ns.value + ns.tail_lower - 1e-6 <= t_star <= ns.value + ns.tail_upper + 1e-6
        ok_nu = nu.value + nu.tail_lower - 1e-6 <= t_nu <= nu.value + nu.tail_upper + 1e-6
        pb = Problem(f, 0, 1, MCConfig(n_outer=4, n_max=4, h=1 / 8, seed=1, threads=ctx.threads), ctx.cache)
        cks = [est.c_km(f, 0, 1.0, k, pb.mc, problem=pb, with_terms=False) for k in (1, 2)]
        ok_c = all(abs(e.value) <= 3 * e.stderr + 1e-12 and e.stderr <= 1e-4 for e in cks)
        ok &= ok_star and ok_nu and ok_c
        rows.append({"c": c, "nu_star": ns.value, "nu": nu.value, "c1": cks[0].value, "c2": cks[1].value})
    worst = max(max(abs(r["nu_star"] - 1 / (2 * r["c"])), abs(r["nu"] - r["c"] / 2)) for r in rows)
    return _result(1, "constant field", ok, f"max |nu-target| {worst:.2e} (tail-bounded), c_k all 0", {"rows": rows})


# ---------------------------------------------------------------- 2
def check_sandwich(ctx: Context) -> CriterionResult:
    worst, ok, rows = math.inf, True, []
    for _, d, m, rho0, mc in ctx.suite():
        r = ctx.abar(d, m, rho0, mc)
        s = 2 * float(np.abs(r.a_star_stderr).max())
        lam = CROWDING["lam"]
        gaps = [np.linalg.eigvalsh(r.a_star - np.eye(d)).min(),
                np.linalg.eigvalsh(r.a_bar - r.a_star).min(),
                np.linalg.eigvalsh(lam * np.eye(d) - r.a_bar).min()]
        good = min(gaps) >= -s
        ok &= good
        worst = min(worst, min(gaps) + s)
        rows.append({"d": d, "m": m, "rho0": rho0, "n_max": mc.n_max, "h": mc.h, "gaps": gaps, "slack": s,
                     "ok": good})
    return _result(2, "ellipticity sandwich", ok, f"{len(rows)} configurations, min margin {worst:.3g}",
                   {"rows": rows})


# ---------------------------------------------------------------- 3
def check_monotone_in_m(ctx: Context) -> CriterionResult:
    suite = {(d, m, rho0): mc for _, d, m, rho0, mc in ctx.suite() if d == 1 and mc.h == 1 / 4}
    rows, ok = [], True
    for rho0 in (0.5, 1.0, 2.0):
        r0 = ctx.abar(1, 0, rho0, suite[(1, 0, rho0)])
        r1 = ctx.abar(1, 1, rho0, suite[(1, 1, rho0)])
        s_star = math.hypot(float(r0.a_star_stderr[0, 0]), float(r1.a_star_stderr[0, 0]))
        s_bar = math.hypot(float(r0.a_bar_stderr[0, 0]), float(r1.a_bar_stderr[0, 0]))
        star_ok = r0.a_star[0, 0] <= r1.a_star[0, 0] + 2 * s_star
        bar_ok = r1.a_bar[0, 0] <= r0.a_bar[0, 0] + 2 * s_bar
        ok &= star_ok and bar_ok
        rows.append({"rho0": rho0, "a_star": [r0.a_star[0, 0], r1.a_star[0, 0]], "a_star_2sigma": 2 * s_star,
                     "a_bar": [r0.a_bar[0, 0], r1.a_bar[0, 0]], "tail_err_m1": list(r1.tail_err),
                     "star_ok": bool(star_ok), "bar_ok": bool(bar_ok)})
    detail = "; ".join(f"rho0={r['rho0']:g}: a*={r['a_star'][0]:.4f}->{r['a_star'][1]:.4f}, "
                       f"a={r['a_bar'][0]:.4f}->{r['a_bar'][1]:.4f}" for r in rows)
    return _result(3, "monotonicity in m", ok, detail, {"rows": rows})


# ---------------------------------------------------------------- 4
def check_oracle_agreement(ctx: Context) -> CriterionResult:
    f = CrowdingField(**CROWDING)
    U = Box.cube(0, 1)
    rows, ok = [], True
    for rho0 in (0.5, 1.0):
        fx = ctx.fixture("nu_star_series", rho0=rho0)
        mc = ctx.mc(n_outer=32 if ctx.quick else 128, n_max=fx["n_max"], h=1 / 64, seed=4,
                    tail_tol=math.inf, h_ext=fx.get("h_ext", 1 / 16))
        e = est.estimate_nu_star(f, 0, fx.get("q", [1.0]), rho0, mc, cache=ctx.cache)
        tol = max(3 * e.stderr, 2 * fx["error"])
        good = abs(e.value - fx["value"]) <= tol
        ok &= good
        rows.append({"kind": "nu_star", "rho0": rho0, "mc": e.value, "stderr": e.stderr, "oracle": fx["value"],
                     "oracle_error": fx["error"], "ok": bool(good)})
    for fx in [e for e in ctx.fixtures["entries"] if e["kind"] == "dual_energy"]:
        ext = np.asarray(fx["exterior"], dtype=float)
        cor = solve_dual(f, GridSpec(U, fx["n"], 1 / 64), [1.0], ext, 1e-12)
        val = dual_value(cor, 1.0)
        err = max(fx["error"], ORACLE_ERROR_FLOOR)
        good = abs(val - fx["value"]) <= 5 * err
        ok &= good
        rows.append({"kind": "dual_energy", "n": fx["n"], "solver": val, "oracle": fx["value"],
                     "oracle_error": fx["error"], "ok": bool(good)})
    detail = ", ".join(f"{r['kind']}{'@' + format(r['rho0'], 'g') if 'rho0' in r else ' n=' + str(r['n'])}: "
                       f"{r.get('mc', r.get('solver')):.6f} vs {r['oracle']:.6f}" for r in rows)
    return _result(4, "oracle agreement", ok, detail, {"rows": rows})


# ---------------------------------------------------------------- 5
def check_def_vs_repr(ctx: Context) -> CriterionResult:
    f = CrowdingField(**CROWDING)
    rows, ok, worst = [], True, 0.0
    for rho0 in (0.5, 1.0, 2.0):
        mc = ctx.mc(n_outer=8 if ctx.quick else 16, n_max=5, h=1 / 8, seed=5)
        pb = Problem(f, 0, 1, mc, ctx.cache)
        for rho in (0.05, 0.1, 0.2):
            a = est.delta_rho_def(f, 0, rho0, rho, mc, problem=pb)
            b = est.delta_rho_repr(f, 0, rho0, rho, mc, problem=pb)
            comb = math.hypot(a.stderr, b.stderr)
            gap = abs(a.value - b.value)
            good = gap <= 3 * comb + b.tail_upper
            ok &= good
            worst = max(worst, gap / comb if comb else math.inf)
            rows.append({"rho0": rho0, "rho": rho, "def": a.value, "repr": b.value, "combined_stderr": comb,
                         "label_bound": b.tail_upper, "ok": bool(good)})
    return _result(5, "def vs repr", ok, f"9 cases, max |def-repr|/combined stderr {worst:.3g}", {"rows": rows})


# ---------------------------------------------------------------- 6, 7
RHO_GRID = [0.02, 0.04, 0.07, 0.1, 0.14, 0.2]


def _expansion(ctx: Context, k: int) -> est.ExpansionReport:
    key = ("expansion", k)
    if key not in ctx._abar:
        mc = ctx.mc(n_outer=64 if ctx.quick else 256, n_max=2, h=1 / 32, seed=6)
        ctx._abar[key] = est.expansion_report(CrowdingField(**CROWDING), 0, 1.0, RHO_GRID, k, mc,
                                              cache=ctx.cache)
    return ctx._abar[key]


def check_first_order(ctx: Context) -> CriterionResult:
    rep = _expansion(ctx, 2)
    r1 = rep.remainders_by_order[1]
    slope = est._slope(RHO_GRID, [v for v, _ in r1])
    c1, c1_se = rep.coefficients[0]
    fx = ctx.fixture("c1", rho0=1.0)
    tol = max(3 * c1_se, 2 * fx["error"])
    good_c1 = abs(c1 - fx["value"]) <= tol
    ok = slope >= 1.7 and good_c1
    return _result(6, "first-order expansion", ok,
                   f"slope {slope:.3f} (>= 1.7); c1 {c1:.5f} +- {c1_se:.1e} vs oracle {fx['value']:.5f} "
                   f"+- {fx['error']:.1e}", {"slope": slope, "c1": c1, "c1_stderr": c1_se, "oracle": fx["value"],
                                             "remainder": r1})


def check_second_order(ctx: Context) -> CriterionResult:
    rep = _expansion(ctx, 2)
    r2 = rep.remainders_by_order[2]
    slope = est._slope(RHO_GRID, [v for v, _ in r2])
    noisy = any(abs(v) < 3 * s for v, s in r2)
    if slope >= 2.5 and not noisy:
        return _result(7, "second-order remainder", True, f"slope {slope:.3f}", {"slope": slope, "remainder": r2})
    if noisy:
        return _result(7, "second-order remainder", True,
                       f"slope {slope:.3f}; |R_2| below 3 sigma at some rho", {"slope": slope, "remainder": r2},
                       verdict="MC-noise-dominated (conditional pass)")
    return _result(7, "second-order remainder", False, f"slope {slope:.3f} < 2.5 with resolved remainders",
                   {"slope": slope, "remainder": r2})


# ---------------------------------------------------------------- 8
def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(1.0, float(np.abs(a).max(initial=0)), float(np.abs(b).max(initial=0)))
    return float(np.abs(a - b).max(initial=0)) / scale


def algebra_instance(rng: np.random.Generator) -> float:
    """Worst relative error over the identity checks for one random instance."""
    k = int(rng.integers(1, 5))
    shape = [(), (2,), (2, 2)][int(rng.integers(0, 3))]
    idx = list(range(1, k + 1))
    tabs = [{E: rng.normal(size=shape) for E in dc.subsets(idx)} for _ in range(2)]
    f = dc.IndexedFamily(None, {i: i for i in idx}, lambda E, t=tabs[0]: t[E])
    g = dc.IndexedFamily(None, {i: i for i in idx}, lambda E, t=tabs[1]: t[E])
    E = frozenset(j for j in idx if rng.random() < 0.8) or frozenset(idx[:1])
    err = 0.0
    diffs = {F: dc.difference(f, F) for F in dc.subsets(E)}
    err = max(err, _rel(dc.telescope(diffs, E), f(E)))
    lhs, r1, r2 = dc.leibniz_check(f, g, E)
    err = max(err, _rel(lhs, r1), _rel(lhs, r2))
    order = list(E)
    rng.shuffle(order)
    err = max(err, _rel(dc.nested_difference(f, order), dc.nested_difference(f, sorted(E))))
    err = max(err, _rel(dc.nested_difference(f, order), diffs[E]))
    pos = {i: rng.uniform(-1, 1, size=2) for i in idx}
    z = rng.uniform(-0.5, 0.5, size=2)
    A = frozenset(j for j in idx if rng.random() < 0.5)
    B = frozenset(j for j in idx if rng.random() < 0.5)
    up = dc.upsilon(pos, A, z) * dc.upsilon(pos, B, z) - dc.upsilon(pos, A | B, z)
    return max(err, float(abs(up)))


def check_algebra(ctx: Context, n: int = 10_000) -> CriterionResult:
    rng = np.random.default_rng(8)
    errs = np.array([algebra_instance(rng) for _ in range(n)])
    fails = int((errs > 1e-12).sum())
    return _result(8, "algebraic identities", fails == 0, f"{n} instances, max rel error {errs.max():.2e}, "
                   f"{fails} failures", {"max": float(errs.max())})


# ---------------------------------------------------------------- 9
LADDER = [1 / 32, 1 / 64, 1 / 128]


def check_residuals(ctx: Context) -> CriterionResult:
    f = CrowdingField(**CROWDING)
    U = Box.cube(0, 1)
    studies, ok = [], True
    for n in (1, 2):
        studies.append(res.refinement_study(f, U, n, [1.0], LADDER, "first_variation"))
        studies.append(res.refinement_study(f, U, n, [1.0], LADDER, "harmonic", E=(1,), F=()))
    studies.append(res.refinement_study(f, U, 1, [1.0], LADDER, "harmonic", E=(1,), F=(1,)))
    ratio_ok = all(min(s["ratios"]) >= 1.8 for s in studies)
    bounds = []
    ext = np.array([[-9 / 16], [5 / 8]])
    for n in (1, 2):
        for e in (np.zeros((0, 1)), ext):
            cor = solve_dual(f, GridSpec(U, n, 1 / 128), [1.0], e, 1e-12)
            sl = slice_energy(cor) - 1.0
            di = dirichlet_energy(cor, 1.0) - n / U.volume
            bounds.append({"n": n, "ext": len(e), "slice_excess": sl, "dirichlet_excess": di})
    bound_ok = all(b["slice_excess"] <= 0.02 and b["dirichlet_excess"] <= 0.02 * b["n"] for b in bounds)
    ok = ratio_ok and bound_ok
    worst = min(min(s["ratios"]) for s in studies)
    return _result(9, "variational residuals", ok,
                   f"min ratio per halving {worst:.3f} over {len(studies)} studies; energy bounds "
                   f"{'hold' if bound_ok else 'violated'} at h=1/128",
                   {"studies": studies, "bounds": bounds})


# ---------------------------------------------------------------- 10
def check_mecke(ctx: Context) -> CriterionResult:
    n = 20_000 if ctx.quick else 100_000
    U = Box(1.0, (0.0,))
    tests = {
        "one": lambda mu, x: 1.0,
        "count": lambda mu, x: float(len(mu.points)),
        "single": lambda mu, x: float(len(mu.points) == 1),
    }
    rows, ok = [], True
    for name, H in tests.items():
        r = mecke_residual(H, 1.0, U, n, seed=10)
        good = r.residual <= 3 * r.stderr or r.residual <= 1e-12
        ok &= good
        rows.append({"H": name, "residual": r.residual, "stderr": r.stderr, "ok": bool(good)})
    r = indicator_identity_residual(lambda mu: float(len(mu.points)), 1.0, Box(2.0, (0.0,)), U, n, seed=10)
    good = r.residual <= 3 * r.stderr
    ok &= good
    rows.append({"H": "indicator", "residual": r.residual, "stderr": r.stderr, "ok": bool(good)})
    detail = ", ".join(f"{r['H']}: {r['residual']:.1e} (3s {3 * r['stderr']:.1e})" for r in rows)
    return _result(10, "Mecke and indicator identities", ok, detail, {"rows": rows})


# ---------------------------------------------------------------- 11
def check_key_estimate(ctx: Context) -> CriterionResult:
    f = CrowdingField(**CROWDING)
    rows, ok = [], True
    cases = [((), ()), ((1,), ()), ((1,), (1,)), ((1, 2), ()), ((1, 2), (1,)), ((1, 2), (1, 2))]
    for F, G in cases:
        vals = []
        for m in (0, 1):
            mc = ctx.mc(n_outer=8 if ctx.quick else 16, n_max=4, h=1 / 4, seed=11)
            if not F:
                e = est.estimate_nu_star(f, m, [1.0], 0.5, dataclasses.replace(mc, tail_tol=math.inf),
                                         cache=ctx.cache)
                vals.append((2 * e.value, 2 * e.stderr))
            else:
                e = est.key_estimate_probe(f, m, F, G, mc, rho0=0.5, cache=ctx.cache)
                vals.append((e.value, e.stderr))
        finite = all(np.isfinite(v) for v, _ in vals)
        bounded = vals[1][0] <= 2 * vals[0][0] + 3 * math.hypot(vals[0][1], vals[1][1])
        ok &= finite and bounded
        rows.append({"F": list(F), "G": list(G), "m0": vals[0], "m1": vals[1], "ok": bool(finite and bounded)})
    detail = ", ".join(f"F={r['F']} G={r['G']}: {r['m0'][0]:.3g}->{r['m1'][0]:.3g}" for r in rows)
    return _result(11, "key-estimate probes", ok, detail, {"rows": rows})


# ---------------------------------------------------------------- 12
def check_determinism(ctx: Context) -> CriterionResult:
    from .cli import run_quantities
    from .config import validate
    raw = {"field": {"name": "crowding", **CROWDING}, "rho0": [1.0], "rho": [0.1],
           "quantities": ["nu_star", "delta", "c_km"], "k": 2,
           "mc": {"n_outer": 8, "n_max": 5, "h": 0.125, "seed": 12, "tail_tol": 1.0}}
    texts = []
    for threads in (1, 4, 2):
        cfg = validate(raw)
        cfg.mc = dataclasses.replace(cfg.mc, threads=threads)
        texts.append(run_quantities(cfg, CorrectorCache()).csv_text().encode())
    same = len(set(texts)) == 1
    return _result(12, "determinism", same, f"CSV bytes identical across 1/4/2 threads: {same} "
                   f"({len(texts[0])} bytes)")


CHECKS: list = [check_constant_field, check_sandwich, check_monotone_in_m, check_oracle_agreement,
                check_def_vs_repr, check_first_order, check_second_order, check_algebra, check_residuals,
                check_mecke, check_key_estimate, check_determinism]


def run_one(ctx: Context, check: Callable) -> CriterionResult:
    t = time.time()
    number = CHECKS.index(check) + 1
    try:
        r = check(ctx)
    except Exception as exc:  # a crash is reported as a failure of that criterion
        log.exception("criterion %d crashed", number)
        r = _result(number, check.__name__.removeprefix("check_").replace("_", " "), False,
                    f"{type(exc).__name__}: {exc}", verdict="error")
    r.seconds = time.time() - t
    log.info("criterion %d %s: %.1fs", number, r.verdict, r.seconds)
    return r


def run_acceptance(fixtures: dict, threads: int = 1, quick: bool = False, only=None) -> list:
    ctx = Context(fixtures, threads, quick)
    return [run_one(ctx, c) for i, c in enumerate(CHECKS, 1) if only is None or i in only]
