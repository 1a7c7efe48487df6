import numpy as np
from hypothesis import given, settings, strategies as st

from bulkdiff import diff_calculus as dc
from bulkdiff.verify import algebra_instance


def _family(rng, k, shape=()):
    idx = list(range(1, k + 1))
    tab = {E: rng.normal(size=shape) for E in dc.subsets(idx)}
    return dc.IndexedFamily(None, {i: i for i in idx}, lambda E: tab[E])


@given(st.integers(0, 2 ** 32 - 1))
def test_random_instances_satisfy_all_identities(seed):
    assert algebra_instance(np.random.default_rng(seed)) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_differences_commute(seed, k):
    f = _family(np.random.default_rng(seed), k)
    order = list(range(1, k + 1))
    assert np.isclose(dc.nested_difference(f, order), dc.nested_difference(f, order[::-1]), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_frozen_difference_with_all_moving_is_plain_difference(seed):
    rng = np.random.default_rng(seed)
    f, g = _family(rng, 3), _family(rng, 3)
    E = {1, 2, 3}
    assert np.isclose(dc.frozen_difference([f, g], E, [True, True]), dc.difference(f.times(g), E), atol=1e-12)
    # a frozen factor pulls out of the difference
    assert np.isclose(dc.frozen_difference([f, g], E, [False, True]), f(()) * dc.difference(g, E), atol=1e-12)


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=4, max_size=4),
       st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)),
       st.sets(st.integers(1, 4)), st.sets(st.integers(1, 4)))
def test_upsilon_product_rule(pts, z, A, B):
    pos = dict(enumerate(pts, 1))
    assert dc.upsilon(pos, A, z) * dc.upsilon(pos, B, z) == dc.upsilon(pos, A | B, z)


def test_subsets_are_colex():
    assert dc.subsets({2, 5}) == [frozenset(), {2}, {5}, {2, 5}]
