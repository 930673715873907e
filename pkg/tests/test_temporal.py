import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre as npleg

from parabolic_eqflux.temporal import (
    TimePartition,
    derivative_matrix,
    derivative_pairing,
    gauss_points,
    legendre_eval,
    legendre_mass,
    legendre_table,
)


def test_legendre_matches_numpy():
    s = np.linspace(-1, 1, 41)
    val, der = legendre_table(s, 8)
    for k in range(9):
        c = np.zeros(k + 1)
        c[k] = 1.0
        np.testing.assert_allclose(val[:, k], npleg.legval(s, c), atol=1e-13)
        np.testing.assert_allclose(der[:, k], npleg.legval(s, npleg.legder(c)), atol=1e-11)


def test_endpoint_values():
    val, _ = legendre_table(np.array([-1.0, 1.0]), 6)
    np.testing.assert_allclose(val[1], 1.0)
    np.testing.assert_allclose(val[0], (-1.0) ** np.arange(7))


def test_mapped_orthogonality():
    part = TimePartition.uniform(2.0, 4, 3)
    t, w = gauss_points(part.interval(2), 6)
    val, _ = legendre_table(part.to_reference(2, t), 3)
    gram = (val * w[:, None]).T @ val
    expected = np.diag([legendre_mass(part, 2, k) for k in range(4)])
    np.testing.assert_allclose(gram, expected, atol=1e-14)


def test_legendre_eval_rejects_outside():
    part = TimePartition.uniform(1.0, 2)
    with pytest.raises(ValueError):
        legendre_eval(part, 1, 1, 0.75)
    assert legendre_eval(part, 1, 1, 0.5) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.floats(0.01, 3.0))
def test_derivative_pairing_by_quadrature(q, tau):
    t, w = gauss_points((0.0, tau), q + 2)
    s = 2 * t / tau - 1
    val, der = legendre_table(s, q)
    D = (val * w[:, None]).T @ (der * 2 / tau)
    np.testing.assert_allclose(D, derivative_pairing(q), atol=1e-12)


def test_derivative_matrix_expands_derivative():
    s = np.linspace(-1, 1, 9)
    val, der = legendre_table(s, 5)
    np.testing.assert_allclose(val @ derivative_matrix(5), der, atol=1e-12)


def test_partition_validation():
    with pytest.raises(ValueError):
        TimePartition((0.0, 0.5, 0.5), (0, 0))
    with pytest.raises(ValueError):
        TimePartition((0.1, 0.5), (0,))
    with pytest.raises(ValueError):
        TimePartition((0.0, 1.0), (0, 1))
    with pytest.raises(IndexError):
        TimePartition.uniform(1.0, 3).interval(4)


def test_geometric_partition():
    part = TimePartition.geometric(1.0, 5, 2.0, q=1)
    taus = [part.tau(n) for n in range(1, 6)]
    np.testing.assert_allclose(np.array(taus[1:]) / taus[:-1], 2.0)
    assert part.T == 1.0
    assert part.degrees == (1,) * 5


def test_gauss_exactness():
    t, w = gauss_points((1.0, 3.0), 4)
    assert np.isclose(np.sum(w * t**7), (3.0**8 - 1.0) / 8)
