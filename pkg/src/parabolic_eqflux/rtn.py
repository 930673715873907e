"""Raviart-Thomas-Nedelec elements ``RTN_p = P_p^2 + x P_p`` on triangles.

Degrees of freedom of a cell:

* per edge, normal moments ``int_e v.n P_k(s) ds`` for k = 0..p, with the
  edge running from its lower to its higher vertex index and ``n`` its
  clockwise-rotated tangent (so neighbouring cells agree on every moment);
* interior moments ``int_K v . e_d m`` for orthogonal polynomials ``m`` of
  degree at most p - 1.

The nodal basis is obtained by inverting the generalized Vandermonde matrix
of a spanning set built from orthogonal (Dubiner) polynomials on each cell,
which keeps the inversion well conditioned up to high degree.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi

from .quadrature import edge_rule, triangle_rule
from .temporal import legendre_table

__all__ = [
    "rt_dim",
    "monomials",
    "RTTables",
    "rt_tables",
    "rt_evaluate",
    "scalar_basis",
    "scalar_table",
]

_EDGES = ((1, 2), (2, 0), (0, 1))


def rt_dim(p):
    return (p + 1) * (p + 3)


@lru_cache(maxsize=None)
def monomials(p):
    """Exponent pairs (a, b) with a + b <= p, graded."""
    return tuple((t - b, b) for t in range(p + 1) for b in range(t + 1))


def _affine(cell_points, x):
    """Barycentric coordinates (E, Q, 3) and their gradients (E, 3, 2)."""
    p0 = cell_points[:, 0]
    jac = np.stack([cell_points[:, 1] - p0, cell_points[:, 2] - p0], axis=2)
    inv = np.linalg.inv(jac)
    dl = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
    l12 = np.einsum("eqk,ejk->eqj", x - p0[:, None, :], inv)
    lam = np.concatenate([1.0 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)
    return lam, dl


def _dubiner(lam, dl, p):
    """Orthogonal basis of P_p on each triangle, graded by total degree.

    Values (E, Q, n) and physical gradients (E, Q, n, 2).
    """
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    x, t = l1 - l0, l0 + l1
    gx = (dl[:, 1] - dl[:, 0])[:, None, :]
    gt = (dl[:, 0] + dl[:, 1])[:, None, :]
    # scaled Legendre polynomials t^i P_i(x / t) and their gradients
    L, dL = [np.ones_like(x)], [np.zeros(x.shape + (2,))]
    if p >= 1:
        L.append(x)
        dL.append(np.broadcast_to(gx, x.shape + (2,)))
    for n in range(1, p):
        L.append(((2 * n + 1) * x * L[n] - n * t * t * L[n - 1]) / (n + 1))
        dL.append(
            (
                (2 * n + 1) * (gx * L[n][..., None] + x[..., None] * dL[n])
                - n * (2 * (t * L[n - 1])[..., None] * gt + (t * t)[..., None] * dL[n - 1])
            )
            / (n + 1)
        )
    y = 2.0 * l2 - 1.0
    gy = 2.0 * dl[:, 2][:, None, :]
    vals, grads = [], []
    for i, j in monomials(p):
        J = eval_jacobi(j, 2 * i + 1, 0, y)
        dJ = 0.5 * (j + 2 * i + 2) * eval_jacobi(j - 1, 2 * i + 2, 1, y) if j else np.zeros_like(y)
        c = np.sqrt((2 * i + 1) * (i + j + 1))
        vals.append(c * L[i] * J)
        grads.append(c * (dL[i] * J[..., None] + (L[i] * dJ)[..., None] * gy))
    return np.stack(vals, -1), np.stack(grads, -2)


def _prime(p, cell_points, x):
    """Spanning set of RTN_p: ``P_p^2`` plus ``xi P_p`` for the top-degree part.

    ``xi = (x - centre) / h``.  Returns values (E, Q, n, 2) and physical
    divergences (E, Q, n).
    """
    lam, dl = _affine(cell_points, x)
    centre, h = _cell_frames(cell_points)
    v, g = _dubiner(lam, dl, p)
    zero = np.zeros_like(v)
    top = slice(p * (p + 1) // 2, None)
    xi = (x - centre[:, None, :]) / h[:, None, None]
    vt, gt = v[..., top], g[..., top, :]
    vals = np.concatenate(
        [
            np.stack([v, zero], -1),
            np.stack([zero, v], -1),
            xi[..., None, :] * vt[..., None],
        ],
        axis=-2,
    )
    div_top = 2.0 * vt / h[:, None, None] + np.einsum("eqd,eqnd->eqn", xi, gt)
    divs = np.concatenate([g[..., 0], g[..., 1], div_top], axis=-1)
    return vals, divs


def _cell_frames(cell_points):
    centre = cell_points.mean(axis=1)
    d = [np.linalg.norm(cell_points[:, i] - cell_points[:, j], axis=1) for i, j in _EDGES]
    return centre, np.max(d, axis=0)


def _nodal_coefficients(p, cell_points, cell_vertex_index):
    """Inverse Vandermonde matrices, shape (E, n, n)."""
    E = len(cell_points)
    n = rt_dim(p)
    V = np.zeros((E, n, n))
    s, w = edge_rule(p + 2)
    P, _ = legendre_table(2 * s - 1, p)  # (g, p+1)
    row = 0
    for a, b in _EDGES:
        ia, ib = cell_vertex_index[:, a], cell_vertex_index[:, b]
        flip = ia > ib
        start = np.where(flip[:, None], cell_points[:, b], cell_points[:, a])
        end = np.where(flip[:, None], cell_points[:, a], cell_points[:, b])
        t = end - start
        length = np.linalg.norm(t, axis=1)
        normal = np.stack([t[:, 1], -t[:, 0]], -1) / length[:, None]
        x = start[:, None, :] + s[None, :, None] * t[:, None, :]
        pv, _ = _prime(p, cell_points, x)  # (E, g, n, 2)
        vn = np.einsum("egjd,ed->egj", pv, normal)
        V[:, row : row + p + 1, :] = np.einsum("g,gk,egj,e->ekj", w, P, vn, length)
        row += p + 1
    if p >= 1:
        lam, wq = triangle_rule(2 * p)
        x = np.einsum("qj,ejd->eqd", lam, cell_points)
        pv, _ = _prime(p, cell_points, x)
        lam_e, dl = _affine(cell_points, x)
        mq, _ = _dubiner(lam_e, dl, p - 1)
        area = 0.5 * np.abs(np.linalg.det(np.stack([cell_points[:, 1] - cell_points[:, 0],
                                                     cell_points[:, 2] - cell_points[:, 0]], axis=1)))
        wphys = 2.0 * area[:, None] * wq[None, :]
        for d in range(2):
            V[:, row : row + mq.shape[-1], :] = np.einsum("eq,eqk,eqj->ekj", wphys, mq, pv[..., d])
            row += mq.shape[-1]
    return np.linalg.inv(V)


class RTTables:
    """Nodal RTN_p basis of a set of cells at quadrature points."""

    def __init__(self, p, vals, div, coeffs):
        self.p = p
        self.vals = vals  # (E, Q, n, 2)
        self.div = div  # (E, Q, n)
        self.coeffs = coeffs

    @property
    def ndof(self):
        return rt_dim(self.p)


def _evaluate(p, C, cell_points, x):
    pv, pd = _prime(p, cell_points, x)
    vals = np.einsum("eqjd,ejk->eqkd", pv, C)
    div = np.einsum("eqj,ejk->eqk", pd, C)
    return vals, div


def rt_tables(mesh, p, degree):
    """Basis on every cell of ``mesh`` at the ``degree`` triangle rule (cached)."""
    cache = mesh.__dict__.setdefault("_rt_cache", {})
    key = (p, degree)
    if key not in cache:
        C = _coefficients(mesh, p)
        lam, _ = triangle_rule(degree)
        x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
        vals, div = _evaluate(p, C, mesh.cell_points, x)
        cache[key] = RTTables(p, vals, div, C)
    return cache[key]


def _coefficients(mesh, p):
    cache = mesh.__dict__.setdefault("_rt_cache", {})
    key = ("coeffs", p)
    if key not in cache:
        cache[key] = _nodal_coefficients(p, mesh.cell_points, mesh.cells)
    return cache[key]


def rt_evaluate(mesh, cells, p, x):
    """Basis values and divergences at physical points ``x`` (E, Q, 2) of ``cells``."""
    cells = np.asarray(cells, dtype=int)
    return _evaluate(p, _coefficients(mesh, p)[cells], mesh.cell_points[cells], x)


def scalar_basis(mesh, cells, p, x):
    """Orthogonal basis of ``P_p`` on ``cells`` at points ``x`` (E, Q, 2)."""
    cells = np.asarray(cells, dtype=int)
    cp = mesh.cell_points[cells]
    lam, dl = _affine(cp, x)
    return _dubiner(lam, dl, p)[0]


def scalar_table(mesh, p, degree):
    """:func:`scalar_basis` at the ``degree`` triangle rule of every cell (cached)."""
    cache = mesh.__dict__.setdefault("_rt_cache", {})
    key = ("scalar", p, degree)
    if key not in cache:
        lam, _ = triangle_rule(degree)
        x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
        cache[key] = scalar_basis(mesh, np.arange(mesh.num_cells), p, x)
    return cache[key]
