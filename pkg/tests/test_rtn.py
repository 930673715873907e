import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolic_eqflux.mesh import bisect, unit_square
from parabolic_eqflux.quadrature import edge_rule, triangle_rule
from parabolic_eqflux.rtn import rt_dim, rt_evaluate, rt_tables, scalar_basis
from parabolic_eqflux.temporal import legendre_table

_EDGES = ((1, 2), (2, 0), (0, 1))


def _oriented_edge(mesh, cell, i):
    """Start point, tangent and unit normal of local edge ``i``, lower vertex first."""
    a, b = _EDGES[i]
    va, vb = mesh.cells[cell, a], mesh.cells[cell, b]
    if va > vb:
        va, vb = vb, va
    pa, pb = mesh.points[va], mesh.points[vb]
    t = pb - pa
    return pa, t, np.array([t[1], -t[0]]) / np.linalg.norm(t)


def _dof_functionals(mesh, cell, p):
    """Matrix of all dofs applied to all basis functions of ``cell``."""
    s, w = edge_rule(p + 3)
    P, _ = legendre_table(2 * s - 1, p)
    rows = []
    for i in range(3):
        pa, t, n = _oriented_edge(mesh, cell, i)
        x = pa + s[:, None] * t
        vals, _ = rt_evaluate(mesh, [cell], p, x[None])
        vn = vals[0] @ n  # (g, nd)
        rows.append(np.linalg.norm(t) * (P * w[:, None]).T @ vn)
    if p >= 1:
        lam, wq = triangle_rule(2 * p + 2)
        x = (lam @ mesh.cell_points[cell])[None]
        vals, _ = rt_evaluate(mesh, [cell], p, x)
        m = scalar_basis(mesh, [cell], p - 1, x)[0]
        wphys = 2 * mesh.areas[cell] * wq
        for d in range(2):
            rows.append((m * wphys[:, None]).T @ vals[0, :, :, d])
    return np.concatenate(rows)


@pytest.mark.parametrize("p", [0, 1, 2, 3, 4, 5])
def test_nodal_basis_is_dual_to_dofs(p):
    """Interpolate-then-evaluate identity: dofs of the basis form the identity."""
    mesh = bisect(unit_square(1), [0, 3])
    for cell in (0, mesh.num_cells - 1):
        D = _dof_functionals(mesh, cell, p)
        assert D.shape == (rt_dim(p), rt_dim(p))
        np.testing.assert_allclose(D, np.eye(rt_dim(p)), atol=1e-10)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_divergence_matches_finite_differences(p):
    mesh = unit_square(1)
    cell = 2
    rng = np.random.default_rng(p)
    c = rng.standard_normal(rt_dim(p))
    x0 = mesh.cell_points[cell].mean(axis=0)
    h = 1e-5
    pts = np.array([x0, x0 + [h, 0], x0 - [h, 0], x0 + [0, h], x0 - [0, h]])
    vals, div = rt_evaluate(mesh, [cell], p, pts[None])
    v = np.einsum("qkd,k->qd", vals[0], c)
    fd = (v[1, 0] - v[2, 0] + v[3, 1] - v[4, 1]) / (2 * h)
    assert div[0, 0] @ c == pytest.approx(fd, rel=1e-6, abs=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_shared_edge_basis_has_matching_normal_trace(seed, p):
    """The basis functions of a shared edge agree in normal trace from both cells."""
    rng = np.random.default_rng(seed)
    mesh = bisect(unit_square(1), rng.random(8) < 0.5)
    e = int(rng.choice(np.nonzero(mesh.edge_cells[:, 1] >= 0)[0]))
    s = np.linspace(0.1, 0.9, 5)
    traces = []
    for k in mesh.edge_cells[e]:
        i = list(mesh.cell_edges[k]).index(e)
        pa, t, n = _oriented_edge(mesh, k, i)
        x = pa + s[:, None] * t
        vals, _ = rt_evaluate(mesh, [k], p, x[None])
        traces.append(vals[0, :, i * (p + 1) : (i + 1) * (p + 1)] @ n)
        # the other two edges carry no normal flux of these functions
        for j in range(3):
            if j != i:
                pj, tj, nj = _oriented_edge(mesh, k, j)
                vj, _ = rt_evaluate(mesh, [k], p, (pj + s[:, None] * tj)[None])
                assert np.abs(vj[0, :, i * (p + 1) : (i + 1) * (p + 1)] @ nj).max() < 1e-10
    np.testing.assert_allclose(traces[0], traces[1], atol=1e-10)


def test_tables_are_cached_and_consistent():
    mesh = unit_square(1)
    t1 = rt_tables(mesh, 2, 6)
    assert rt_tables(mesh, 2, 6) is t1
    lam, _ = triangle_rule(6)
    x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
    vals, div = rt_evaluate(mesh, np.arange(mesh.num_cells), 2, x)
    np.testing.assert_allclose(vals, t1.vals, atol=1e-14)
    np.testing.assert_allclose(div, t1.div, atol=1e-12)


def test_scalar_basis_orthogonal():
    mesh = unit_square(0)
    lam, w = triangle_rule(10)
    x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
    m = scalar_basis(mesh, [0], 4, x[:1])[0]
    gram = (m * (w * 2 * mesh.areas[0])[:, None]).T @ m
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-12
    np.testing.assert_allclose(np.diag(gram), mesh.areas[0], rtol=1e-12)
