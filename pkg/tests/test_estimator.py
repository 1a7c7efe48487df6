import numpy as np
import pytest

from bulkdiff import estimator as est
from bulkdiff.engine import MCConfig, TruncationError
from bulkdiff.fields import ConstantField, InvariantViolation

MC = MCConfig(n_outer=4, n_max=4, h=1 / 8, seed=3, tail_tol=1.0)


def test_constant_field_nu_star_and_c_k():
    f = ConstantField(1.5, lam=2.0)
    e = est.estimate_nu_star(f, 0, [1.0], 1.0, MC)
    target = 1 / (2 * 1.5)
    assert e.value + e.tail_lower <= target + 1e-9 <= e.value + e.tail_upper + 1e-9
    for k in (1, 2):
        c = est.c_km(f, 0, 1.0, k, MC)
        assert abs(c.value) <= 1e-12 and c.stderr <= 1e-4


def test_truncation_is_reported():
    with pytest.raises(TruncationError):
        est.estimate_nu_star(ConstantField(1.0, lam=2.0), 0, [1.0], 3.0, MCConfig(n_outer=2, n_max=1, h=1 / 4))


def test_same_seed_same_estimate(crowding):
    a = est.estimate_nu_star(crowding, 0, [1.0], 1.0, MC)
    b = est.estimate_nu_star(crowding, 0, [1.0], 1.0, MC)
    assert a.value == b.value and a.stderr == b.stderr


def test_def_and_repr_agree_per_sample(crowding):
    a = est.delta_rho_def(crowding, 0, 1.0, 0.1, MC)
    b = est.delta_rho_repr(crowding, 0, 1.0, 0.1, MC)
    assert abs(a.value - b.value) <= 3 * np.hypot(a.stderr, b.stderr) + 1e-9


def test_I_terms_sum_to_c_k(crowding):
    e = est.c_km(crowding, 0, 1.0, 2, MC)
    assert sum(t["value"] for t in e.extra["terms"]) == pytest.approx(e.value, abs=1e-10)


def test_harmonic_identity_without_added_points(crowding):
    r = est.harmonic_residual(crowding, 0, [1], [], 0.0, MC)
    assert abs(r.value) < 1e-8


def test_key_probe_vanishes_for_constant_field():
    r = est.key_estimate_probe(ConstantField(1.0), 0, [1], [1], MC)
    assert abs(r.value) < 1e-12


def test_sandwich_check_flags_inverted_order():
    bad = est.AbarResult(np.array([[1.2]]), np.zeros((1, 1)), np.array([[1.5]]), np.array([[0.01]]), (0.0, 0.0))
    assert est.sandwich_margin(bad, 2.0) < 0
    with pytest.raises(InvariantViolation):
        est.check_sandwich(bad, 2.0)
