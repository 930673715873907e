import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parabolic_eqflux.mesh import (
    BisectionForest,
    MeshHierarchy,
    bisect,
    build_patch,
    coarsen,
    common_refinement,
    conformity_defects,
    criss_cross_square,
    hat_value,
    read_mesh,
    refine_uniform,
    unit_square,
    write_mesh,
)


def test_unit_square_counts():
    for level in range(4):
        m = unit_square(level)
        assert m.num_cells == 2 * 4**level
        assert m.num_vertices == (2**level + 1) ** 2
        assert np.isclose(m.areas.sum(), 1.0, atol=1e-14)
        assert np.allclose(m.diameters.max(), np.sqrt(2) / 2**level)


def test_boundary_detection():
    m = unit_square(2)
    pts = m.points
    on_bd = np.isclose(pts, 0).any(axis=1) | np.isclose(pts, 1).any(axis=1)
    np.testing.assert_array_equal(m.boundary_vertices, on_bd)
    assert m.boundary_edges.sum() == 16


def test_bisect_accepts_mask_or_indices():
    m = unit_square(1)
    mask = np.zeros(m.num_cells, dtype=bool)
    mask[[0, 3]] = True
    a = bisect(m, mask)
    b = bisect(m, [0, 3])
    assert a == b
    assert a.num_cells > m.num_cells
    assert conformity_defects(a) == 0


def test_bisect_nothing_marked_is_identity():
    m = unit_square(2)
    assert bisect(m, np.zeros(m.num_cells, dtype=bool)) == m


def test_coarsen_undoes_uniform_refinement():
    m = unit_square(2)
    fine = refine_uniform(m, 1)
    back = coarsen(fine, np.ones(fine.num_cells, dtype=bool))
    # one coarsening pass removes one bisection level: two passes for h/2
    back = coarsen(back, np.ones(back.num_cells, dtype=bool))
    assert back == m


def test_coarsen_never_below_root():
    m = unit_square(0)
    assert coarsen(m, np.ones(m.num_cells, dtype=bool)) == m


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_random_refine_coarsen_stays_conforming(seed, rounds):
    rng = np.random.default_rng(seed)
    m = unit_square(1)
    for _ in range(rounds):
        m = bisect(m, rng.random(m.num_cells) < 0.4)
        assert conformity_defects(m) == 0
        m = coarsen(m, rng.random(m.num_cells) < 0.5)
        assert conformity_defects(m) == 0
        assert np.isclose(m.areas.sum(), 1.0, atol=1e-13)
        assert m.shape_ratios.max() < 10.0


def test_common_refinement_nests_both():
    rng = np.random.default_rng(3)
    m = unit_square(1)
    a = bisect(m, rng.random(m.num_cells) < 0.5)
    b = bisect(m, rng.random(m.num_cells) < 0.5)
    c, pa, pb = common_refinement(a, b)
    assert c.num_cells >= max(a.num_cells, b.num_cells)
    # every overlay cell lies inside its parent in each mesh
    cent = c.cell_points.mean(axis=1)
    for mesh, par in ((a, pa), (b, pb)):
        lam = mesh.barycentric(par, cent[:, None, :])[:, 0]
        assert lam.min() > -1e-12
    np.testing.assert_allclose(np.bincount(pa, c.areas, a.num_cells), a.areas, atol=1e-15)


def test_common_refinement_of_different_forests_rejected():
    with pytest.raises(ValueError):
        common_refinement(unit_square(1), unit_square(1))


def test_hierarchy_requires_one_forest():
    with pytest.raises(ValueError):
        MeshHierarchy([unit_square(1), unit_square(1)])


def test_mesh_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    m = bisect(unit_square(2), rng.random(32) < 0.3)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    r = read_mesh(path)
    np.testing.assert_array_equal(r.points, m.points)
    np.testing.assert_array_equal(r.cells, m.cells)
    np.testing.assert_array_equal(r.boundary_edges[r.cell_edges], m.boundary_edges[m.cell_edges])
    path2 = tmp_path / "again.txt"
    write_mesh(r, path2)
    assert path.read_text() == path2.read_text()


def test_read_mesh_rejects_3d(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("dim=3 nv=0 nt=0\n")
    with pytest.raises(ValueError):
        read_mesh(p)


def test_degenerate_root_rejected():
    with pytest.raises(ValueError):
        BisectionForest([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])


def test_patch_of_criss_cross_centre():
    m = criss_cross_square()
    centre = int(np.argmin(np.linalg.norm(m.points - 0.5, axis=1)))
    pa = build_patch(m, m, centre)
    assert pa.interior
    assert pa.num_cells == 4
    assert np.isclose(pa.diameter, np.sqrt(2))
    assert pa.degree == 2


def test_hat_partition_of_unity(rng):
    m = bisect(unit_square(1), rng.random(8) < 0.5)
    for x in rng.random((20, 2)):
        total = sum(hat_value(m, a, x) for a in range(m.num_vertices))
        assert np.isclose(total, 1.0, atol=1e-13)
    a = int(np.argmin(np.linalg.norm(m.points - 0.5, axis=1)))
    assert hat_value(m, a, m.points[a]) == pytest.approx(1.0)
