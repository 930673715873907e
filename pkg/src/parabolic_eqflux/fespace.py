"""Conforming hp finite element spaces with homogeneous Dirichlet conditions.

The basis is hierarchical: vertex hats, edge modes
``l_a l_b P_{k-2}(l_b - l_a)`` oriented by ascending vertex index, and
interior bubbles ``l_0 l_1 l_2 l_1^i l_2^j``.  Edge degrees follow the
minimum rule, so mixed element degrees stay conforming.

Coefficient vectors always use the full numbering (Dirichlet entries are
zero); ``space.free`` selects the unknowns.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SimplicialMesh
from .quadrature import triangle_rule
from .temporal import legendre_table

__all__ = [
    "FESpace",
    "Tabulation",
    "local_dof_count",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_load",
    "cross_mass",
    "project_L2",
    "restrict",
]

_EDGES = ((1, 2), (2, 0), (0, 1))


def local_dof_count(p, edge_degrees):
    return 3 + sum(max(pe - 1, 0) for pe in edge_degrees) + (p - 1) * (p - 2) // 2


def _basis(p, pe, lam, dlam, orient):
    """Hierarchical basis on a group of cells sharing one degree signature.

    lam: (E, Q, 3) barycentrics; dlam: (E, 3, 2); orient: (E, 3) bool.
    Returns values (E, Q, n) and gradients (E, Q, n, 2).
    """
    vals = [lam[..., i] for i in range(3)]
    grads = [np.broadcast_to(dlam[:, None, i, :], lam.shape[:2] + (2,)) for i in range(3)]
    for i, (a, b) in enumerate(_EDGES):
        if pe[i] < 2:
            continue
        sgn = np.where(orient[:, i], 1.0, -1.0)
        s = sgn[:, None] * (lam[..., b] - lam[..., a])
        ds = (sgn[:, None] * (dlam[:, b] - dlam[:, a]))[:, None, :]
        P, dP = legendre_table(s, pe[i] - 2)
        prod = lam[..., a] * lam[..., b]
        dprod = lam[..., b, None] * dlam[:, None, a] + lam[..., a, None] * dlam[:, None, b]
        for k in range(pe[i] - 1):
            vals.append(prod * P[..., k])
            grads.append(dprod * P[..., k, None] + (prod * dP[..., k])[..., None] * ds)
    if p >= 3:
        l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
        g0, g1, g2 = (dlam[:, None, i] for i in range(3))
        bub = l0 * l1 * l2
        dbub = (l1 * l2)[..., None] * g0 + (l0 * l2)[..., None] * g1 + (l0 * l1)[..., None] * g2
        for tot in range(p - 2):
            for i in range(tot, -1, -1):
                j = tot - i
                m = l1**i * l2**j
                dm = np.zeros_like(dbub)
                if i:
                    dm = dm + (i * l1 ** (i - 1) * l2**j)[..., None] * g1
                if j:
                    dm = dm + (j * l1**i * l2 ** (j - 1))[..., None] * g2
                vals.append(bub * m)
                grads.append(dbub * m[..., None] + bub[..., None] * dm)
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


@dataclass
class Tabulation:
    """Basis data of a space at quadrature points of (possibly finer) cells."""

    dofs: np.ndarray  # (E, nmax); padding points at index ndof
    vals: np.ndarray  # (E, Q, nmax)
    grads: np.ndarray  # (E, Q, nmax, 2)
    weights: np.ndarray  # (E, Q) physical quadrature weights
    points: np.ndarray  # (E, Q, 2)

    def evaluate(self, coeffs):
        """Values and gradients of a function (or stack of functions)."""
        c = np.asarray(coeffs)
        ext = np.concatenate([c, np.zeros(c.shape[:-1] + (1,))], axis=-1)
        loc = ext[..., self.dofs, None]  # (..., E, nmax, 1)
        v = np.matmul(self.vals, loc)[..., 0]
        g = np.matmul(self._grads_t, loc[..., None, :, :])[..., 0]
        return v, np.swapaxes(g, -1, -2)

    @cached_property
    def _grads_t(self):
        # (E, 2, Q, nmax): components first so batched matmul applies
        return np.ascontiguousarray(np.moveaxis(self.grads, 3, 1))


class FESpace:
    """``V_h(T, p)``: continuous piecewise polynomials with zero trace on the
    boundary, or only on the edges flagged in ``dirichlet``."""

    def __init__(self, mesh: SimplicialMesh, degree=1, dirichlet=None, degree_limit=4):
        self.mesh = mesh
        deg = np.broadcast_to(np.asarray(degree, dtype=int), (mesh.num_cells,)).copy()
        if deg.min() < 1 or deg.max() > degree_limit:
            raise ValueError(f"element degrees must lie in 1..{degree_limit}")
        self.degrees = deg
        ec = mesh.edge_cells
        edeg = deg[ec[:, 0]].copy()
        both = ec[:, 1] >= 0
        edeg[both] = np.minimum(edeg[both], deg[ec[both, 1]])
        self.edge_degrees = edeg

        nv = mesh.num_vertices
        n_edge = np.maximum(edeg - 1, 0)
        edge_off = nv + np.concatenate([[0], np.cumsum(n_edge)])
        n_int = (deg - 1) * (deg - 2) // 2
        cell_off = edge_off[-1] + np.concatenate([[0], np.cumsum(n_int)])
        self.ndof = int(cell_off[-1])

        cells = mesh.cells
        cedges = mesh.cell_edges
        sigs = [
            (int(deg[k]),) + tuple(int(edeg[e]) for e in cedges[k]) for k in range(mesh.num_cells)
        ]
        self.nmax = max(local_dof_count(s[0], s[1:]) for s in sigs)
        dofs = np.full((mesh.num_cells, self.nmax), self.ndof, dtype=int)
        for k, s in enumerate(sigs):
            loc = list(cells[k])
            for i, e in enumerate(cedges[k]):
                loc.extend(range(edge_off[e], edge_off[e] + n_edge[e]))
            loc.extend(range(cell_off[k], cell_off[k + 1]))
            dofs[k, : len(loc)] = loc
        self.cell_dofs = dofs
        self._signatures = sorted(set(sigs))
        lookup = {s: g for g, s in enumerate(self._signatures)}
        self._group_of_cell = np.array([lookup[s] for s in sigs], dtype=int)
        self.orient = np.stack([cells[:, a] < cells[:, b] for a, b in _EDGES], axis=1)

        # zero trace on the boundary, or only on the given edges
        if dirichlet is None:
            dirichlet = mesh.boundary_edges
        dirichlet = np.asarray(dirichlet, dtype=bool)
        fixed = np.zeros(self.ndof, dtype=bool)
        fixed[mesh.edges[dirichlet].ravel()] = True
        for e in np.nonzero(dirichlet)[0]:
            fixed[edge_off[e] : edge_off[e] + n_edge[e]] = True
        self.free = ~fixed
        self.free_index = np.nonzero(self.free)[0]
        self._cache = {}

    def __repr__(self):
        return f"FESpace(ndof={self.ndof}, free={len(self.free_index)}, p={sorted(set(self.degrees))})"

    @property
    def dim(self):
        return len(self.free_index)

    @property
    def max_degree(self):
        return int(self.degrees.max())

    def tabulate(self, cells, lam):
        """Basis values/gradients at barycentric points ``lam`` (E, Q, 3) of ``cells``."""
        cells = np.asarray(cells, dtype=int)
        E, Q = lam.shape[:2]
        vals = np.zeros((E, Q, self.nmax))
        grads = np.zeros((E, Q, self.nmax, 2))
        dlam = self.mesh.bary_gradients[cells]
        gid = self._group_of_cell[cells]
        for g, s in enumerate(self._signatures):
            sel = np.nonzero(gid == g)[0]
            if not len(sel):
                continue
            c = cells[sel]
            v, dv = _basis(s[0], s[1:], lam[sel], dlam[sel], self.orient[c])
            n = v.shape[-1]
            vals[sel, :, :n] = v
            grads[sel, :, :n, :] = dv
        return self.cell_dofs[cells], vals, grads

    def tabulate_on(self, refined: SimplicialMesh | None = None, parent=None, degree=None):
        """:class:`Tabulation` at a ``degree`` rule on every cell of ``refined``.

        ``parent[i]`` is the cell of this space's mesh containing refined cell
        ``i``.  Results are cached per (refined mesh, degree).
        """
        if refined is None:
            refined = self.mesh
        if degree is None:
            degree = 2 * self.max_degree
        key = ("tab", refined.forest.uid, refined.key, degree)
        tab = self._cache.get(key)
        if tab is not None:
            return tab
        if parent is None:
            parent = (
                np.arange(self.mesh.num_cells) if refined == self.mesh else refined.parent_map(self.mesh)
            )
        lam_ref, w_ref = triangle_rule(degree)
        x = np.einsum("qj,ejd->eqd", lam_ref, refined.cell_points)
        weights = 2.0 * refined.areas[:, None] * w_ref[None, :]
        lam = self.mesh.barycentric(parent, x)
        dofs, vals, grads = self.tabulate(parent, lam)
        tab = Tabulation(dofs, vals, grads, weights, x)
        tabs = [k for k in self._cache if k[0] == "tab"]
        if len(tabs) >= 16:
            del self._cache[tabs[0]]
        self._cache[key] = tab
        return tab

    def evaluate(self, coeffs, x):
        """Point values of a function at physical points ``x`` (n, 2)."""
        x = np.atleast_2d(x)
        out = np.empty(len(x))
        for i, xi in enumerate(x):
            k = self.mesh.locate(xi)
            if k < 0:
                raise ValueError(f"point {xi} outside the mesh")
            lam = self.mesh.barycentric(np.array([k]), xi[None, None, :])
            dofs, v, _ = self.tabulate(np.array([k]), lam)
            ext = np.append(coeffs, 0.0)
            out[i] = v[0, 0] @ ext[dofs[0]]
        return out


# ---------------------------------------------------------------------------
# assembly


def _assemble(dofs_r, dofs_c, local, nr, nc):
    E, a, b = local.shape
    rows = np.broadcast_to(dofs_r[:, :, None], (E, a, b)).ravel()
    cols = np.broadcast_to(dofs_c[:, None, :], (E, a, b)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nr + 1, nc + 1)).tocsr()
    return mat[:nr, :nc]


def assemble_mass(space: FESpace):
    """Full mass matrix (Dirichlet rows kept), CSR."""
    tab = space.tabulate_on(degree=2 * space.max_degree)
    loc = np.einsum("eq,eqk,eql->ekl", tab.weights, tab.vals, tab.vals)
    loc = 0.5 * (loc + loc.transpose(0, 2, 1))
    return _assemble(tab.dofs, tab.dofs, loc, space.ndof, space.ndof)


def assemble_stiffness(space: FESpace):
    """Full stiffness matrix ``(grad u, grad v)``, CSR."""
    tab = space.tabulate_on(degree=2 * space.max_degree)
    loc = np.einsum("eq,eqkd,eqld->ekl", tab.weights, tab.grads, tab.grads)
    loc = 0.5 * (loc + loc.transpose(0, 2, 1))
    return _assemble(tab.dofs, tab.dofs, loc, space.ndof, space.ndof)


def cross_mass(test: FESpace, trial: FESpace, refined, parent_test, parent_trial):
    """``(phi_j^trial, phi_i^test)`` integrated on a common refinement."""
    deg = test.max_degree + trial.max_degree
    a = test.tabulate_on(refined, parent_test, deg)
    b = trial.tabulate_on(refined, parent_trial, deg)
    loc = np.einsum("eq,eqk,eql->ekl", a.weights, a.vals, b.vals)
    return _assemble(a.dofs, b.dofs, loc, test.ndof, trial.ndof)


def assemble_load(space: FESpace, values, tab: Tabulation | None = None):
    """``(f, phi_i)`` from samples ``values`` (E, Q) at the points of ``tab``."""
    if tab is None:
        tab = space.tabulate_on(degree=2 * space.max_degree + 2)
    loc = np.einsum("eq,eq,eqk->ek", tab.weights, values, tab.vals)
    out = np.zeros(space.ndof + 1)
    np.add.at(out, tab.dofs.ravel(), loc.ravel())
    return out[:-1]


def restrict(matrix, space_r: FESpace, space_c: FESpace | None = None):
    space_c = space_c or space_r
    return matrix[space_r.free_index][:, space_c.free_index]


def project_L2(space: FESpace, f, degree=None):
    """L2-orthogonal projection of ``f(x)`` (x of shape (..., 2)) onto ``space``."""
    if degree is None:
        degree = 2 * space.max_degree + 2
    tab = space.tabulate_on(degree=degree)
    b = assemble_load(space, f(tab.points), tab)
    M = restrict(assemble_mass(space), space)
    c = np.zeros(space.ndof)
    if space.dim:
        c[space.free_index] = spla.splu(M.tocsc()).solve(b[space.free_index])
    return c
