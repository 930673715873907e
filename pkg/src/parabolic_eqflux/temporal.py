"""Time partitions, mapped Legendre polynomials and Gauss rules."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "TimePartition",
    "legendre_table",
    "legendre_eval",
    "legendre_mass",
    "gauss_points",
    "derivative_pairing",
    "derivative_matrix",
]


def legendre_table(s, n):
    """Values and derivatives of P_0..P_n at reference points ``s`` in [-1, 1].

    Three-term recurrence; returns two arrays of shape ``s.shape + (n + 1,)``.
    """
    s = np.asarray(s, dtype=float)
    val = np.empty(s.shape + (n + 1,))
    der = np.empty_like(val)
    val[..., 0] = 1.0
    der[..., 0] = 0.0
    if n >= 1:
        val[..., 1] = s
        der[..., 1] = 1.0
    for k in range(1, n):
        val[..., k + 1] = ((2 * k + 1) * s * val[..., k] - k * val[..., k - 1]) / (k + 1)
        der[..., k + 1] = der[..., k - 1] + (2 * k + 1) * val[..., k]
    return val, der


@dataclass(frozen=True)
class TimePartition:
    """Nodes ``0 = t_0 < ... < t_N = T`` with a temporal degree per step."""

    nodes: tuple
    degrees: tuple

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("need at least two time nodes")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must start at 0 and increase strictly")
        if len(self.degrees) != len(t) - 1:
            raise ValueError("one temporal degree per step required")
        if min(self.degrees) < 0:
            raise ValueError("temporal degrees must be nonnegative")
        object.__setattr__(self, "nodes", tuple(float(x) for x in t))
        object.__setattr__(self, "degrees", tuple(int(q) for q in self.degrees))

    @classmethod
    def uniform(cls, T, N, q=0):
        return cls(tuple(np.linspace(0.0, T, N + 1)), _degrees(q, N))

    @classmethod
    def geometric(cls, T, N, ratio, q=0):
        """Steps growing by ``ratio`` from one to the next."""
        steps = ratio ** np.arange(N)
        t = np.concatenate([[0.0], np.cumsum(steps)]) * (T / np.sum(steps))
        t[-1] = T
        return cls(tuple(t), _degrees(q, N))

    @property
    def num_steps(self):
        return len(self.nodes) - 1

    @property
    def T(self):
        return self.nodes[-1]

    def interval(self, n):
        """Closed interval of step ``n`` (1-based)."""
        if not 1 <= n <= self.num_steps:
            raise IndexError(f"step {n} out of range")
        return self.nodes[n - 1], self.nodes[n]

    def tau(self, n):
        a, b = self.interval(n)
        return b - a

    def q(self, n):
        return self.degrees[n - 1]

    def to_reference(self, n, t):
        a, b = self.interval(n)
        return (2.0 * np.asarray(t, dtype=float) - a - b) / (b - a)


def _degrees(q, N):
    if np.isscalar(q):
        return (int(q),) * N
    return tuple(int(x) for x in q)


def legendre_eval(partition: TimePartition, n, q, t, tol=1e-12):
    """Value of the Legendre polynomial of degree ``q`` mapped onto step ``n``."""
    a, b = partition.interval(n)
    t = np.asarray(t, dtype=float)
    if np.any(t < a - tol * (b - a)) or np.any(t > b + tol * (b - a)):
        raise ValueError(f"t outside [{a}, {b}]")
    val, _ = legendre_table(partition.to_reference(n, t), q)
    return val[..., q]


def legendre_mass(partition: TimePartition, n, q):
    """Squared L2 norm of the mapped Legendre polynomial: tau_n / (2q + 1)."""
    if q < 0:
        raise ValueError("degree must be nonnegative")
    return partition.tau(n) / (2 * q + 1)


@lru_cache(maxsize=None)
def _gauss_ref(m):
    return np.polynomial.legendre.leggauss(m)


def gauss_points(interval, m):
    """Gauss-Legendre points and weights on ``interval`` with ``m`` points."""
    if m < 1:
        raise ValueError("need at least one point")
    a, b = interval
    s, w = _gauss_ref(m)
    return 0.5 * (a + b) + 0.5 * (b - a) * s, 0.5 * (b - a) * w


@lru_cache(maxsize=None)
def derivative_pairing(q):
    """Matrix ``D[k, j] = int L_j' L_k dt`` on any interval (scale free).

    Equals 2 when ``k < j`` and ``j + k`` is odd, else 0.
    """
    k = np.arange(q + 1)
    D = np.where((k[:, None] < k[None, :]) & ((k[:, None] + k[None, :]) % 2 == 1), 2.0, 0.0)
    D.setflags(write=False)
    return D


@lru_cache(maxsize=None)
def derivative_matrix(q):
    """Modal derivative on the reference interval: ``P_j' = sum_k G[k, j] P_k``.

    Scale by ``2 / tau`` for a physical step.
    """
    G = derivative_pairing(q) * (2 * np.arange(q + 1)[:, None] + 1) / 2.0
    G.setflags(write=False)
    return G
