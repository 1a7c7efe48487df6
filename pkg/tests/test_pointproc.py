import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bulkdiff.pointproc import (Box, PointConfiguration, add_point, collar_cells, mecke_residual,
                                restrict, sample_poisson, superpose, translate)

# dyadic coordinates keep translations exact
coords = st.integers(-40, 40).map(lambda k: k / 8)


def configs(dim=2, max_size=8):
    return st.lists(st.tuples(*[coords] * dim), max_size=max_size).map(
        lambda pts: PointConfiguration(np.array(pts, dtype=float).reshape(-1, dim), dim))


def test_same_seed_same_sample():
    U = Box(3.0, (0.0, 0.0))
    a, b = sample_poisson(2.0, U, 17), sample_poisson(2.0, U, 17)
    assert a == b and a.digest() == b.digest()
    assert sample_poisson(2.0, U, 18) != a


def test_zero_intensity_is_empty():
    assert len(sample_poisson(0.0, Box(1.0, (0.0,)), 1)) == 0
    with pytest.raises(ValueError):
        sample_poisson(-1.0, Box(1.0, (0.0,)), 1)


def test_points_stay_in_region():
    U = Box(2.0, (1.0, -1.0))
    mu = sample_poisson(5.0, U, 3)
    assert U.contains(mu.points).all()


@given(configs(), configs())
def test_superpose_is_commutative_multiset(mu, nu):
    assert superpose(mu, nu) == superpose(nu, mu)
    assert len(superpose(mu, nu)) == len(mu) + len(nu)


@given(configs(), st.tuples(coords, coords))
def test_translate_round_trip(mu, x):
    back = translate(translate(mu, x), -np.asarray(x))
    assert np.allclose(back.sorted_points(), mu.sorted_points(), atol=1e-9)


@given(configs())
def test_restrict_is_idempotent(mu):
    U = Box(4.0, (0.0, 0.0))
    once = restrict(mu, U)
    assert restrict(once, U) == once


@given(configs(max_size=5))
def test_text_round_trip(mu):
    assert PointConfiguration.from_text(mu.to_text()) == mu


def test_duplicate_points_count_twice():
    mu = add_point(add_point(PointConfiguration.empty(1), [0.3]), [0.3])
    assert len(mu) == 2


def test_collar_cells_outside_and_within_reach():
    U = Box(1.0, (0.0,))
    cells = collar_cells(U, 0.25, 1 / 16)
    assert len(cells) == 8
    assert not U.contains(cells).any()
    assert (U.distance(cells) < 0.25).all()


@settings(deadline=None, max_examples=1)
@given(st.just(None))
def test_mecke_identity_for_count(_):
    U = Box(1.0, (0.0,))
    r = mecke_residual(lambda mu, x: float(len(mu)), 2.0, U, 4000, seed=5)
    assert r.residual < 4 * r.stderr
