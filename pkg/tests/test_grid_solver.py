import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bulkdiff.fields import ConstantField, CrowdingField
from bulkdiff.grid import Lattice, multiplicity, multiset_count, multisets, rank, sector
from bulkdiff.pointproc import Box
from bulkdiff.solver import (DiscreteCorrector, GridSpec, first_variation_residual, slice_energy, solve_dual,
                             solve_primal)


@given(st.integers(1, 7), st.integers(0, 4))
def test_colex_rank_enumerates_in_order(P, n):
    rows = multisets(P, n)
    assert len(rows) == multiset_count(P, n)
    assert np.array_equal(rank(rows, P), np.arange(len(rows)))


@given(st.integers(1, 5), st.integers(1, 4))
def test_multiplicities_count_all_tuples(P, n):
    assert multiplicity(multisets(P, n)).sum() == P ** n


def test_lattice_weights_sum_to_one():
    lat = Lattice(Box(3.0, (0.0, 0.0)), 0.25)
    assert lat.weight.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Lattice(Box(1.0, (0.0,)), 0.3)


@pytest.mark.parametrize("c", [1.0, 1.5, 2.0])
@pytest.mark.parametrize("n", [1, 2, 3])
def test_constant_field_dual_closed_form(c, n):
    # constant conductance: the gradient is q/c on every edge
    cor = solve_dual(ConstantField(c, lam=2.0), GridSpec(Box(1.0, (0.0,)), n, 1 / 8), [1.0], tol=1e-12)
    assert np.allclose(cor.grad, 1 / c, atol=1e-9)
    assert slice_energy(cor) == pytest.approx(1 / c ** 2, rel=1e-9)


def test_dual_is_symmetric_and_mean_zero(crowding):
    cor = solve_dual(crowding, GridSpec(Box(1.0, (0.0,)), 3, 1 / 8), [1.0], np.array([[0.6], [-0.55]]))
    t = cor.to_tensor()
    assert np.allclose(t, t.transpose(1, 0, 2)) and np.allclose(t, t.transpose(2, 1, 0))
    assert abs(cor.mean) < 1e-12 or abs(cor.sector.mass @ cor.values) < 1e-9


def test_first_variation_vanishes_and_matches_energy(crowding):
    cor = solve_dual(crowding, GridSpec(Box(1.0, (0.0,)), 2, 1 / 8), [1.0], np.array([[0.55]]), tol=1e-12)
    rng = np.random.default_rng(0)
    assert abs(first_variation_residual(cor, rng.normal(size=cor.values.shape))) < 1e-8
    # at the maximizer sum W a g^2 = sum W q g
    assert cor.flux_energy() == pytest.approx(np.sum(cor.edge_weight * cor.edge_q() * cor.grad), rel=1e-8)


def test_dual_maximizes_over_perturbations(crowding):
    cor = solve_dual(crowding, GridSpec(Box(1.0, (0.0,)), 2, 1 / 4), [1.0], tol=1e-12)
    sec = cor.sector
    e = sec.edges
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = cor.values + 0.1 * rng.normal(size=cor.values.shape)
        g = (u[sec.hi[e]] - u[sec.lo[e]]) / cor.grid.h
        val = np.sum(cor.edge_weight * (-0.5 * cor.cond * g ** 2 + cor.edge_q() * g))
        assert val <= cor.energy() + 1e-12


@settings(deadline=None, max_examples=15)
@given(st.integers(1, 3), st.lists(st.floats(0.51, 0.74), max_size=3))
def test_slice_energy_bounded_by_q(n, ext):
    f = CrowdingField(2.0, 0.25)
    cor = solve_dual(f, GridSpec(Box(1.0, (0.0,)), n, 1 / 8), [1.0], np.array(ext).reshape(-1, 1))
    assert slice_energy(cor) <= 1.0 + 1e-9


def test_corrector_bytes_round_trip(crowding):
    cor = solve_dual(crowding, GridSpec(Box(1.0, (0.0,)), 2, 1 / 8), [1.0], np.array([[0.6]]))
    back = DiscreteCorrector.from_bytes(cor.to_bytes(), crowding)
    assert np.array_equal(back.values, cor.values) and back.energy() == pytest.approx(cor.energy())


@pytest.mark.parametrize("c", [1.0, 1.5, 2.0])
def test_constant_field_primal(c):
    sol = solve_primal(ConstantField(c, lam=2.0), Box(1.0, (0.0,)), [1.0], 1.0, 8, 1 / 4)
    # only the Poisson tail beyond n_max is missing from c|p|^2/2
    assert sol.value == pytest.approx(c / 2, abs=c * 1e-5)
