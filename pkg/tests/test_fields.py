import numpy as np
import pytest

from bulkdiff.fields import (ConstantField, CrowdingField, InvariantViolation, SmoothPairField, evaluate,
                             locality_probe, make_field)
from bulkdiff.pointproc import Box, PointConfiguration, sample_poisson


@pytest.mark.parametrize("fld", [ConstantField(1.0), ConstantField(2.0), CrowdingField(2.0, 0.25),
                                 SmoothPairField()])
def test_values_within_ellipticity_bounds(fld):
    mu = sample_poisson(3.0, Box(2.0, (0.0, 0.0)), 4)
    for x in mu.points[:10]:
        a = evaluate(fld, mu, x)
        eig = np.linalg.eigvalsh(a)
        assert eig.min() >= 1 - 1e-12 and eig.max() <= fld.lam + 1e-12


@pytest.mark.parametrize("fld", [CrowdingField(2.0, 0.25), SmoothPairField()])
def test_local_fields_pass_probe(fld):
    mu = sample_poisson(4.0, Box(2.0, (0.0,)), 9)
    assert locality_probe(fld, mu, n_trials=50, seed=2)


def test_crowding_switches_on_neighbour():
    f = CrowdingField(lam=2.0, r=0.25)
    alone = PointConfiguration(np.array([[0.0]]), 1)
    pair = PointConfiguration(np.array([[0.0], [0.2]]), 1)
    far = PointConfiguration(np.array([[0.0], [0.3]]), 1)
    assert evaluate(f, alone, [0.0])[0, 0] == 1.0
    assert evaluate(f, pair, [0.0])[0, 0] == 2.0
    assert evaluate(f, far, [0.0])[0, 0] == 1.0


class _Leaky(ConstantField):
    def scalar_batch(self, disp):
        return np.full(disp.shape[0], 0.5)


def test_out_of_range_values_are_caught():
    with pytest.raises(ValueError):
        ConstantField(0.5)
    mu = PointConfiguration(np.array([[0.0]]), 1)
    with pytest.raises(InvariantViolation):
        evaluate(_Leaky(1.0), mu, [0.0])


def test_crowding_exterior_average_matches_generic_sampler():
    f = CrowdingField(lam=2.0, r=0.25)
    disp_in = np.zeros((5, 0, 1))
    disp_cells = np.array([[-0.3], [-0.1], [0.05], [0.2], [0.4]])[None].repeat(5, axis=0)
    disp_cells = disp_cells + np.linspace(-0.1, 0.1, 5)[:, None, None]
    closed = f.exterior_average(disp_in, disp_cells, 0.4)
    generic = CrowdingField.__mro__[1].exterior_average(f, disp_in, disp_cells, 0.4, samples=20000)
    assert np.allclose(closed, generic, atol=0.02)


def test_make_field_round_trip():
    f = make_field({"name": "crowding", "lam": 3.0, "r": 0.2})
    assert isinstance(f, CrowdingField) and f.lam == 3.0
