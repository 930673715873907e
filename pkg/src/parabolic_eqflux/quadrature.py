"""Collapsed Gauss rules on the reference triangle (0,0), (1,0), (0,1)."""
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

__all__ = ["triangle_rule", "edge_rule"]


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Points (barycentric, shape (nq, 3)) and weights summing to 1/2.

    Exact for polynomials of total degree ``degree``.
    """
    n = max(1, (degree + 2) // 2)
    su, wu = np.polynomial.legendre.leggauss(n)
    sv, wv = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (su + 1.0)
    v = 0.5 * (sv + 1.0)
    wu = 0.5 * wu
    wv = 0.25 * wv
    U, V = np.meshgrid(u, v, indexing="ij")
    x = (U * (1.0 - V)).ravel()
    y = V.ravel()
    w = np.outer(wu, wv).ravel()
    lam = np.stack([1.0 - x - y, x, y], axis=1)
    lam.setflags(write=False)
    w.setflags(write=False)
    return lam, w


@lru_cache(maxsize=None)
def edge_rule(m):
    """Gauss points on [0, 1] and weights summing to 1."""
    s, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (s + 1.0), 0.5 * w
