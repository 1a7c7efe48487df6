"""Acceptance gate: one pass/fail line per criterion.

Runs the full criteria suite once against the frozen oracle fixtures. Also
runnable directly with `python3 tests/test_acceptance.py`.
"""
import json
import sys
from pathlib import Path

import pytest

from bulkdiff.verify import CHECKS, run_acceptance

FIXTURES = Path(__file__).parent / "fixtures" / "oracle.json"


@pytest.fixture(scope="module")
def results():
    return {r.number: r for r in run_acceptance(json.loads(FIXTURES.read_text()), threads=1)}


@pytest.mark.parametrize("number", range(1, len(CHECKS) + 1))
def test_criterion(results, number, capsys):
    r = results[number]
    with capsys.disabled():
        print("\n" + r.line())
    assert r.passed, r.detail


if __name__ == "__main__":
    out = run_acceptance(json.loads(FIXTURES.read_text()), threads=1)
    for r in out:
        print(r.line())
    sys.exit(0 if all(r.passed for r in out) else 1)
