import json

import numpy as np
import pytest

from bulkdiff import cli
from bulkdiff import estimator as est
from bulkdiff.config import ConfigError, load, parse_text, validate

SMALL = """\
field: {name: crowding, lam: 2.0, r: 0.25}
rho0: [1.0]
rho: [0.1]
quantities: [nu_star, abar, delta]
mc: {n_outer: 4, n_max: 4, h: 0.125, tail_tol: 1.0}
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(SMALL)
    return p


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="mc.n_outr"):
        validate({"mc": {"n_outr": 3}})


def test_parse_error_reports_position():
    with pytest.raises(ConfigError, match="line 2, column 10"):
        parse_text("a: 1\nb: [1, 2]]\nc: 3\n")


@pytest.mark.parametrize("bad", [{"d": 3}, {"m": [5]}, {"rho0": [-1]}, {"field": {"name": "constant", "c": 0.5}},
                                 {"oracle": {"n_max": 3}}, {"quantities": ["nothing"]}])
def test_out_of_range_values_are_rejected(bad):
    with pytest.raises(ConfigError):
        validate(bad)


def test_overrides_apply(config):
    cfg = load(str(config), ["mc.seed=9", "rho0=[0.5, 2]"])
    assert cfg.mc.seed == 9 and cfg["rho0"] == [0.5, 2.0]


def test_estimate_writes_outputs_and_is_deterministic(config, tmp_path):
    runs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert cli.main(["estimate", "--config", str(config), "--threads", str(threads), "--out", str(out)]) == 0
        runs.append((out / "results.csv").read_bytes())
    assert runs[0] == runs[1]
    header = runs[0].decode().splitlines()[0].split(",")
    assert header == list(cli.CSV_COLUMNS)
    prov = json.loads((tmp_path / "t1" / "provenance.json").read_text())
    assert prov["config"]["mc"]["seed"] == 0


def test_expansion_writes_dat_series(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(SMALL.replace("[nu_star, abar, delta]", "[expansion]").replace("[0.1]", "[0.05, 0.1, 0.2]"))
    assert cli.main(["estimate", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    dats = list((tmp_path / "o").rglob("*.dat"))
    assert dats and all(np.loadtxt(f, ndmin=2).shape[0] == 3 for f in dats)


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["estimate", "--threads", "many"])
    assert exc.value.code == cli.EXIT_USAGE
    p = tmp_path / "bad.yaml"
    p.write_text("mc: {n_outr: 3}\n")
    assert cli.main(["estimate", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_invariant_violation_exits_2(config, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        return est.AbarResult(np.array([[1.1]]), np.zeros((1, 1)), np.array([[1.6]]), np.array([[0.01]]),
                              (0.0, 0.0))
    monkeypatch.setattr(est, "abar_matrices", broken)
    assert cli.main(["estimate", "--config", str(config), "--out", str(tmp_path)]) == cli.EXIT_INVARIANT


def test_truncation_exits_3(config, tmp_path):
    args = ["estimate", "--config", str(config), "--out", str(tmp_path), "--set", "mc.n_max=1",
            "--set", "mc.tail_tol=1e-6"]
    assert cli.main(args) == cli.EXIT_UNCONVERGED


def test_cache_stats_reports_entries(config, tmp_path, capsys):
    cache = tmp_path / "cache"
    assert cli.main(["estimate", "--config", str(config), "--cache-dir", str(cache), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["cache-stats", "--cache-dir", str(cache)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["entries"] > 0 and stats["bytes"] > 0


def test_verify_without_fixtures_exits_1(tmp_path):
    assert cli.main(["verify", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == cli.EXIT_USAGE
