import json
from pathlib import Path

import numpy as np
import pytest

from bulkdiff.fields import ConstantField, CrowdingField
from bulkdiff.oracle import oracle_dual_energy, richardson
from bulkdiff.pointproc import Box
from bulkdiff.residuals import (collar_quadrature, first_variation_residual_continuum, refinement_ratios,
                                refinement_study)
from bulkdiff.solver import GridSpec, solve_dual

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "oracle.json").read_text())


def test_richardson_recovers_first_order_limit():
    ladder = [1 / 16, 1 / 32, 1 / 64]
    value, err, *_ = richardson([2.0 + 0.5 * h + 0.1 * h * h for h in ladder], ladder)
    assert value == pytest.approx(2.0, abs=1e-3) and err < 1e-2


def test_oracle_constant_field_single_particle():
    r = oracle_dual_energy(ConstantField(2.0), Box(1.0, (0.0,)), 1, [1.0])
    assert r.value == pytest.approx(0.25, abs=1e-10)


def test_frozen_single_particle_energy_matches_oracle():
    # one particle, one node-aligned exterior point: the fixture value is exact
    rec = next(r for r in FIXTURES["entries"] if r["kind"] == "dual_energy" and r["n"] == 1)
    f = CrowdingField(2.0, 0.25)
    cor = solve_dual(f, GridSpec(Box(1.0, (0.0,)), 1, 1 / 64), [1.0], np.array(rec["exterior"]))
    assert cor.energy() == pytest.approx(rec["value"], abs=5 * max(rec["error"], 1e-12))


def test_continuum_residual_zero_for_constant_field():
    f = ConstantField(1.5, lam=2.0)
    cor = solve_dual(f, GridSpec(Box(1.0, (0.0,)), 2, 1 / 8), [1.0], tol=1e-12)
    rng = np.random.default_rng(2)
    assert abs(first_variation_residual_continuum(f, cor, rng.normal(size=cor.values.shape))) < 1e-9


def test_collar_quadrature_integrates_length():
    U = Box(1.0, (0.0,))
    assert sum(w for _, w in collar_quadrature(U, 0.25, 16)) == pytest.approx(0.25)


def test_refinement_ratios_first_order():
    assert refinement_ratios([4.0, 2.0, 1.0]) == [2.0, 2.0]


@pytest.mark.parametrize("kind", ["first_variation", "harmonic"])
def test_residuals_shrink_under_refinement(kind):
    study = refinement_study(CrowdingField(2.0, 0.25), Box(1.0, (0.0,)), 1, [1.0], [1 / 16, 1 / 32, 1 / 64],
                             kind=kind, points=32)
    assert all(r >= 1.5 for r in study["ratios"])
