"""Command-line front end.

    bulkdiff estimate --config run.yaml --out results/
    bulkdiff oracle --config tiny.yaml --out fixtures.json
    bulkdiff verify --out report/ [fixtures.json]
    bulkdiff cache-stats --cache-dir cache/

Logs go to stderr; stdout carries only machine-readable output.
Exit codes: 0 success, 1 usage or config error, 2 invariant violation,
3 unconverged solve or truncation above threshold, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import estimator as est
from .cache import CorrectorCache
from .config import ConfigError, RunConfig, load
from .engine import MCConfig, Problem, TruncationError
from .fields import InvariantViolation
from .oracle import oracle_c1, oracle_dual_energy, oracle_nu_star_series
from .pointproc import Box
from .solver import UnconvergedError

log = logging.getLogger("bulkdiff")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_UNCONVERGED, EXIT_FAILED = 0, 1, 2, 3, 4
CSV_COLUMNS = ["field_id", "m", "rho0", "quantity", "value", "stderr", "n_outer", "n_max", "h",
               "rho", "seed", "params"]


def _fmt(x) -> str:
    return repr(float(x))


class Report:
    """Accumulates CSV rows, provenance records and gnuplot series."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.rows: list = []
        self.records: list = []
        self.series: dict = {}

    def add(self, m, rho0, quantity, value, stderr, rho=0.0, params=None, record=None):
        mc = self.cfg.mc
        self.rows.append([self.cfg.field.field_id, str(m), _fmt(rho0), quantity, _fmt(value), _fmt(stderr),
                          str(mc.n_outer), str(mc.n_max), _fmt(mc.h), _fmt(rho), str(mc.seed),
                          json.dumps(params or {}, sort_keys=True, separators=(",", ":"))])
        if record is not None:
            self.records.append({"quantity": quantity, "m": m, "rho0": rho0, "rho": rho, **record})

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(self.rows)
        return buf.getvalue()


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _estimate_record(e: est.MCEstimate) -> dict:
    extra = {k: v for k, v in e.extra.items() if k != "samples"}
    return {"value": e.value, "stderr": e.stderr, "tail": [e.tail_lower, e.tail_upper], "extra": extra}


def run_quantities(cfg: RunConfig, cache: CorrectorCache) -> Report:
    rep = Report(cfg)
    raw, fld, mc, d = cfg.raw, cfg.field, cfg.mc, cfg.d
    q = np.asarray(raw["q"] if raw["q"] is not None else np.eye(d)[0])
    p = np.asarray(raw["p"] if raw["p"] is not None else np.eye(d)[0])
    qp = {"q": q.tolist()}
    for m in raw["m"]:
        for rho0 in raw["rho0"]:
            log.info("m=%d rho0=%g", m, rho0)
            pb = Problem(fld, m, d, mc, cache)
            for quantity in raw["quantities"]:
                if quantity == "nu_star":
                    e = est.estimate_nu_star(fld, m, q, rho0, mc, d, problem=pb)
                    rep.add(m, rho0, "nu_star", e.value, e.stderr, params=qp, record=_estimate_record(e))
                elif quantity == "nu":
                    e = est.estimate_nu(fld, m, p, rho0, mc, d)
                    rep.add(m, rho0, "nu", e.value, e.stderr, params={"p": p.tolist()}, record=_estimate_record(e))
                elif quantity == "abar":
                    r = est.abar_matrices(fld, m, rho0, mc, d, cache)
                    est.check_sandwich(r, fld.lam)
                    for i in range(d):
                        for j in range(d):
                            ij = {"i": i, "j": j}
                            rep.add(m, rho0, "a_bar", r.a_bar[i, j], r.a_bar_stderr[i, j], params=ij)
                            rep.add(m, rho0, "a_star", r.a_star[i, j], r.a_star_stderr[i, j], params=ij)
                    rep.records.append({"quantity": "abar", "m": m, "rho0": rho0,
                                        **_clean(dataclasses.asdict(r))})
                elif quantity == "delta":
                    for rho in raw["rho"]:
                        a = est.delta_rho_def(fld, m, rho0, rho, mc, d, q, problem=pb)
                        rep.add(m, rho0, "delta_def", a.value, a.stderr, rho, qp, _estimate_record(a))
                        if rho > 0:
                            b = est.delta_rho_repr(fld, m, rho0, rho, mc, d, q, problem=pb)
                            rep.add(m, rho0, "delta_repr", b.value, b.stderr, rho, qp, _estimate_record(b))
                elif quantity == "c_km":
                    for k in range(1, raw["k"] + 1):
                        e = est.c_km(fld, m, rho0, k, mc, d, q, problem=pb)
                        rep.add(m, rho0, f"c_{k}", e.value, e.stderr, params={**qp, "k": k},
                                record=_estimate_record(e))
                elif quantity == "expansion":
                    rho_grid = [r for r in raw["rho"] if r > 0]
                    r = est.expansion_report(fld, m, rho0, rho_grid, raw["k"], mc, d, q, cache)
                    for (v, s), rho in zip(r.remainder, rho_grid):
                        rep.add(m, rho0, f"remainder_{r.k}", v, s, rho, {**qp, "k": r.k})
                    rep.add(m, rho0, f"remainder_{r.k}_slope", r.slope, 0.0, params={**qp, "k": r.k,
                                                                                   "inconclusive": r.inconclusive})
                    rep.records.append({"quantity": "expansion", "m": m, "rho0": rho0,
                                        **_clean(dataclasses.asdict(r))})
                    for j, rows in r.remainders_by_order.items():
                        rep.series[f"remainder_m{m}_rho0_{rho0:g}_k{j}.dat"] = [
                            (rho, abs(v), s) for rho, (v, s) in zip(rho_grid, rows)]
                elif quantity == "harmonic":
                    h = raw["harmonic"]
                    e = est.harmonic_residual(fld, m, h["E"], h["F"], h["rho"], mc, d, q, rho0, h["which"], cache)
                    rep.add(m, rho0, "harmonic_residual", e.value, e.stderr, h["rho"], {**qp, **h},
                            _estimate_record(e))
                elif quantity == "key_probe":
                    kp = raw["key_probe"]
                    e = est.key_estimate_probe(fld, m, kp["F"], kp["G"], mc, d, q, rho0, cache)
                    rep.add(m, rho0, "key_probe", e.value, e.stderr, params={**qp, **kp})
                elif quantity == "continuity":
                    # the density grid is the rho0 list; run once per m
                    if rho0 != raw["rho0"][0]:
                        continue
                    rows = est.continuity_scan(fld, m, raw["rho0"], mc, d, cache)
                    for row in rows:
                        rep.add(m, row["rho0"], "continuity_ordered", float(row["ordered"]), 0.0)
                    rep.records.append({"quantity": "continuity", "m": m, "rows": _clean(rows)})
    return rep


def provenance(cfg: RunConfig, extra=None) -> dict:
    return {"version": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "field": cfg.field.describe(), "field_id": cfg.field.field_id,
            "config": _clean(cfg.raw), "mc": dataclasses.asdict(cfg.mc), **(extra or {})}


def write_outputs(cfg: RunConfig, rep: Report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    outs = cfg.raw["outputs"]
    (out / outs["csv"]).write_text(rep.csv_text())
    doc = provenance(cfg, {"results": _clean(rep.records)})
    (out / outs["json"]).write_text(json.dumps(doc, indent=1, sort_keys=True))
    if rep.series:
        dat = out / outs["dat_dir"]
        dat.mkdir(exist_ok=True)
        for name, rows in rep.series.items():
            lines = ["# rho |remainder| stderr"] + [f"{a!r} {b!r} {c!r}" for a, b, c in rows]
            (dat / name).write_text("\n".join(lines) + "\n")


def cmd_estimate(cfg: RunConfig, out: Path, cache: CorrectorCache) -> int:
    rep = run_quantities(cfg, cache)
    write_outputs(cfg, rep, out)
    sys.stdout.write(rep.csv_text())
    return EXIT_OK


def build_fixtures(cfg: RunConfig) -> dict:
    """Oracle reference values for the configured field and first density."""
    raw, fld = cfg.raw, cfg.field
    if cfg.d != 1:
        raise ConfigError("oracle fixtures are one-dimensional")
    orc = raw["oracle"]
    U = Box.cube(0, 1)
    q = np.asarray(raw["q"] if raw["q"] is not None else [1.0])
    ladder = [float(h) for h in orc["h_ladder"]]
    out = {"field": fld.describe(), "field_id": fld.field_id, "q": q.tolist(), "entries": []}
    for rho0 in raw["rho0"]:
        log.info("oracle nu* series rho0=%g", rho0)
        s = oracle_nu_star_series(fld, U, q, rho0, orc["n_max"], ladder, orc["h_ext"], orc["k_ext"])
        out["entries"].append({"kind": "nu_star_series", "rho0": rho0, "n_max": orc["n_max"],
                               **_clean(s.as_dict())})
        log.info("oracle c1 rho0=%g", rho0)
        c = oracle_c1(fld, U, q, rho0, orc["n_max"], ladder, orc["h_ext"], orc["k_ext"])
        out["entries"].append({"kind": "c1", "rho0": rho0, "n_max": orc["n_max"], **_clean(c.as_dict())})
    ext = np.array([[-9 / 16], [5 / 8]])  # conductance jumps land on grid nodes
    for n in range(1, orc["n_max"] + 1):
        e = oracle_dual_energy(fld, U, n, q, ext, 1.0, ladder)
        out["entries"].append({"kind": "dual_energy", "n": n, "exterior": ext.tolist(), **_clean(e.as_dict())})
    return out


def cmd_oracle(cfg: RunConfig, out: Path) -> int:
    doc = build_fixtures(cfg)
    doc["provenance"] = provenance(cfg)
    target = out if out.suffix == ".json" else out / "fixtures.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(str(target))
    return EXIT_OK


def cmd_verify(fixtures: Path, out: Path, threads: int, quick: bool) -> int:
    from .verify import run_acceptance
    if not fixtures.exists():
        log.error("fixtures %s not found; run `bulkdiff oracle` first", fixtures)
        return EXIT_USAGE
    results = run_acceptance(json.loads(fixtures.read_text()), threads=threads, quick=quick)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.number:>2}  {r.name:<{width}}  {r.verdict:<14} {r.detail}  [{r.seconds:.0f}s]")
    out.mkdir(parents=True, exist_ok=True)
    (out / "acceptance.json").write_text(json.dumps(_clean([dataclasses.asdict(r) for r in results]),
                                                    indent=1, sort_keys=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_cache_stats(cache: CorrectorCache) -> int:
    print(json.dumps(cache.stats(), sort_keys=True))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override mc.seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads (results do not depend on this)")
    common.add_argument("--cache-dir", help="persistent corrector cache directory")
    common.add_argument("--out", default=".", help="output directory (or .json file for oracle)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. mc.n_outer=32")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="bulkdiff", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("estimate", parents=[common], help="run the configured estimates")
    sub.add_parser("oracle", parents=[common], help="write oracle fixtures")
    v = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    v.add_argument("fixtures", nargs="?", default="tests/fixtures/oracle.json")
    v.add_argument("--quick", action="store_true", help="reduced sample sizes")
    sub.add_parser("cache-stats", parents=[common], help="print cache counters")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"mc.seed={args.seed}")
        cache_dir = args.cache_dir
        if args.command == "verify":
            return cmd_verify(Path(args.fixtures), out, args.threads, args.quick)
        cfg = load(args.config, overrides)
        cfg.mc = dataclasses.replace(cfg.mc, threads=max(1, args.threads))
        cache_dir = cache_dir or cfg.raw["outputs"]["cache_dir"]
        cache = CorrectorCache(cache_dir)
        if args.command == "estimate":
            return cmd_estimate(cfg, out, cache)
        if args.command == "oracle":
            return cmd_oracle(cfg, out)
        return cmd_cache_stats(cache)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (UnconvergedError, TruncationError) as exc:
        print(f"unconverged: {exc}", file=sys.stderr)
        return EXIT_UNCONVERGED


if __name__ == "__main__":
    sys.exit(main())
