from math import factorial

import numpy as np
import pytest

from parabolic_eqflux.quadrature import edge_rule, triangle_rule


@pytest.mark.parametrize("degree", range(0, 13))
def test_triangle_rule_exact_on_monomials(degree):
    lam, w = triangle_rule(degree)
    x, y = lam[:, 1], lam[:, 2]
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            assert np.isclose(np.sum(w * x**a * y**b), exact, rtol=1e-13, atol=1e-16)


def test_triangle_points_inside():
    lam, w = triangle_rule(10)
    assert lam.min() > 0
    np.testing.assert_allclose(lam.sum(axis=1), 1.0)
    assert np.isclose(w.sum(), 0.5)


def test_edge_rule():
    s, w = edge_rule(3)
    assert np.isclose(np.sum(w * s**5), 1 / 6)
