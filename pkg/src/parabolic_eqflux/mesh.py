"""Triangle meshes drawn from a shared newest-vertex-bisection forest.

Every mesh is a set of leaves of a :class:`BisectionForest`.  Because the
forest is shared, two meshes of the same run always have a computable
common refinement (their overlay), and coarsening is done by rebuilding
from the root with fewer targets.

Each forest node stores its vertices as ``(v0, v1, v2)`` in counter-clockwise
order with refinement edge ``v0 v1``; ``v2`` is the newest vertex.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "BisectionForest",
    "SimplicialMesh",
    "VertexPatch",
    "unit_square",
    "criss_cross_square",
    "bisect",
    "refine_uniform",
    "coarsen",
    "mesh_from_targets",
    "common_refinement",
    "build_patch",
    "hat_value",
    "conformity_defects",
    "read_mesh",
    "write_mesh",
    "MeshHierarchy",
]

_forest_ids = itertools.count()


class BisectionForest:
    """Append-only binary forest of triangles created by bisection.

    Nodes are never removed; bisecting a node twice returns the same
    children, so every mesh built on the forest reuses node identifiers.
    """

    def __init__(self, points, triangles, labeling="longest"):
        points = np.asarray(points, dtype=float)
        triangles = np.asarray(triangles, dtype=int)
        self.uid = next(_forest_ids)
        self._points = [tuple(p) for p in points]
        self._midpoint = {}
        self.vertices: list[tuple[int, int, int]] = []
        self.parent: list[int] = []
        self.children: list[tuple[int, int] | None] = []
        self.level: list[int] = []
        for tri in triangles:
            self._add_node(self._root_order(tri, labeling), -1, 0)
        self.roots = tuple(range(len(triangles)))

    # -- construction ---------------------------------------------------
    def _root_order(self, tri, labeling):
        a, b, c = (int(v) for v in tri)
        p = np.array([self._points[v] for v in (a, b, c)])
        area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (
            p[2, 0] - p[0, 0]
        )
        if area2 == 0.0:
            raise ValueError(f"degenerate root triangle {tri}")
        if area2 < 0:
            a, b = b, a
        if labeling == "given":
            return (a, b, c)
        cyc = [(a, b, c), (b, c, a), (c, a, b)]
        # longest edge first; ties broken by the lowest vertex index on it
        def key(t):
            pa, pb = np.array(self._points[t[0]]), np.array(self._points[t[1]])
            return (-round(float(np.sum((pa - pb) ** 2)), 12), min(t[0], t[1]), max(t[0], t[1]))

        return min(cyc, key=key)

    def _add_node(self, verts, parent, level):
        self.vertices.append(tuple(verts))
        self.parent.append(parent)
        self.children.append(None)
        self.level.append(level)
        return len(self.vertices) - 1

    def _midpoint_of(self, a, b):
        key = (a, b) if a < b else (b, a)
        vid = self._midpoint.get(key)
        if vid is None:
            pa, pb = self._points[a], self._points[b]
            self._points.append((0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])))
            vid = len(self._points) - 1
            self._midpoint[key] = vid
        return vid

    def split(self, node):
        """Return the two children of ``node``, creating them on first use."""
        ch = self.children[node]
        if ch is None:
            v0, v1, v2 = self.vertices[node]
            m = self._midpoint_of(v0, v1)
            lev = self.level[node] + 1
            c0 = self._add_node((v2, v0, m), node, lev)
            c1 = self._add_node((v1, v2, m), node, lev)
            ch = self.children[node] = (c0, c1)
        return ch

    # -- queries ----------------------------------------------------------
    @property
    def points(self):
        return np.array(self._points)

    def point(self, vid):
        return self._points[vid]

    def refinement_edge(self, node):
        v0, v1, _ = self.vertices[node]
        return (v0, v1) if v0 < v1 else (v1, v0)

    def ancestors(self, node):
        out = []
        p = self.parent[node]
        while p >= 0:
            out.append(p)
            p = self.parent[p]
        return out

    def root_mesh(self):
        return SimplicialMesh(self, self.roots)


def _edge(a, b):
    return (a, b) if a < b else (b, a)


class SimplicialMesh:
    """Conforming triangle mesh given by a set of forest leaves.

    Local vertex numbering follows ascending forest vertex id, cells follow
    ascending forest node id.  Instances are immutable.
    """

    def __init__(self, forest: BisectionForest, nodes):
        self.forest = forest
        self.nodes = np.array(sorted(set(int(k) for k in nodes)), dtype=int)
        fv = np.array([forest.vertices[k] for k in self.nodes], dtype=int).reshape(-1, 3)
        self.vertex_ids, inverse = np.unique(fv, return_inverse=True)
        self.cells = inverse.reshape(-1, 3)
        self.points = forest.points[self.vertex_ids]
        self._node_index = {int(k): i for i, k in enumerate(self.nodes)}

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        return (
            isinstance(other, SimplicialMesh)
            and other.forest is self.forest
            and np.array_equal(other.nodes, self.nodes)
        )

    def __hash__(self):
        return hash((self.forest.uid, self.key))

    @cached_property
    def key(self):
        return self.nodes.tobytes()

    def __repr__(self):
        return f"SimplicialMesh(nv={self.num_vertices}, nt={self.num_cells})"

    @property
    def num_vertices(self):
        return len(self.vertex_ids)

    @property
    def num_cells(self):
        return len(self.nodes)

    def cell_of_node(self, node):
        return self._node_index.get(int(node), -1)

    # -- geometry ----------------------------------------------------------
    @cached_property
    def cell_points(self):
        """Vertex coordinates, shape (nt, 3, 2)."""
        return self.points[self.cells]

    @cached_property
    def areas(self):
        p = self.cell_points
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diameters(self):
        p = self.cell_points
        lens = [np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((1, 2), (2, 0), (0, 1))]
        return np.max(lens, axis=0)

    @cached_property
    def shape_ratios(self):
        """Circumradius over inradius for every cell."""
        p = self.cell_points
        a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        area = self.areas
        s = 0.5 * (a + b + c)
        return (a * b * c / (4 * area)) / (area / s)

    @cached_property
    def bary_gradients(self):
        """Gradients of the three barycentric coordinates, shape (nt, 3, 2)."""
        p = self.cell_points
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        inv = np.linalg.inv(jac)  # rows are grad(l1), grad(l2)
        g1, g2 = inv[:, 0, :], inv[:, 1, :]
        return np.stack([-g1 - g2, g1, g2], axis=1)

    def barycentric(self, cells, x):
        """Barycentric coordinates of points in ``cells``.

        ``x`` has shape (E, 2) or (E, Q, 2) for ``cells`` of shape (E,).
        """
        cells = np.asarray(cells)
        x = np.asarray(x, dtype=float)
        p0 = self.points[self.cells[cells, 0]]
        g = self.bary_gradients[cells][:, 1:]
        if x.ndim == 3:
            lam = np.einsum("eqk,ejk->eqj", x - p0[:, None, :], g)
        else:
            lam = np.einsum("ek,ejk->ej", x - p0, g)
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def locate(self, x, tol=1e-12):
        """Index of a cell containing point ``x`` (or -1)."""
        lam = self.barycentric(np.arange(self.num_cells), np.broadcast_to(x, (self.num_cells, 2)))
        ok = np.nonzero(np.all(lam >= -tol, axis=1))[0]
        return int(ok[0]) if len(ok) else -1

    # -- topology ----------------------------------------------------------
    @cached_property
    def _edge_data(self):
        c = self.cells
        local = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)  # (nt,3,2)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        edges, inv, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
        return edges, inv.reshape(-1, 3), counts

    @property
    def edges(self):
        """Edges as sorted local vertex pairs, shape (ne, 2)."""
        return self._edge_data[0]

    @property
    def cell_edges(self):
        """Edge index of the edge opposite each local vertex, shape (nt, 3)."""
        return self._edge_data[1]

    @cached_property
    def edge_cells(self):
        """Incident cells of each edge, second entry -1 on the boundary."""
        ne = len(self.edges)
        out = -np.ones((ne, 2), dtype=int)
        for k, e in enumerate(self.cell_edges.ravel()):
            slot = 0 if out[e, 0] < 0 else 1
            out[e, slot] = k // 3
        return out

    @cached_property
    def boundary_edges(self):
        return self._edge_data[2] == 1

    @cached_property
    def boundary_vertices(self):
        flag = np.zeros(self.num_vertices, dtype=bool)
        flag[self.edges[self.boundary_edges].ravel()] = True
        return flag

    @cached_property
    def vertex_cells(self):
        """Cells incident to each vertex, ascending."""
        out = [[] for _ in range(self.num_vertices)]
        for k, tri in enumerate(self.cells):
            for v in tri:
                out[v].append(k)
        return [np.array(x, dtype=int) for x in out]

    def vertex_index(self, vertex_id):
        i = np.searchsorted(self.vertex_ids, vertex_id)
        if i >= len(self.vertex_ids) or self.vertex_ids[i] != vertex_id:
            return -1
        return int(i)

    def contains_node(self, node):
        return int(node) in self._node_index

    def parent_map(self, coarse: "SimplicialMesh"):
        """For each cell of ``self``, the cell of ``coarse`` containing it."""
        if coarse.forest is not self.forest:
            raise ValueError("meshes belong to different forests")
        out = np.empty(self.num_cells, dtype=int)
        for i, k in enumerate(self.nodes):
            node = int(k)
            while node >= 0 and not coarse.contains_node(node):
                node = self.forest.parent[node]
            if node < 0:
                raise ValueError("mesh is not a refinement of the coarse mesh")
            out[i] = coarse.cell_of_node(node)
        return out


# ---------------------------------------------------------------------------
# constructors


def unit_square(levels=0):
    """Unit square split along a diagonal, with mesh size halved ``levels`` times."""
    forest = BisectionForest([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
    return refine_uniform(forest.root_mesh(), levels)


def criss_cross_square():
    """Unit square cut into four triangles meeting at the centre."""
    pts = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]
    tris = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]
    return BisectionForest(pts, tris).root_mesh()


# ---------------------------------------------------------------------------
# refinement


def _refine(forest, leaves, marked):
    leaves = set(leaves)
    edge_map = {}
    for k in leaves:
        v = forest.vertices[k]
        for a, b in ((v[0], v[1]), (v[1], v[2]), (v[2], v[0])):
            edge_map.setdefault(_edge(a, b), set()).add(k)

    def do_split(k):
        leaves.discard(k)
        v = forest.vertices[k]
        for a, b in ((v[0], v[1]), (v[1], v[2]), (v[2], v[0])):
            edge_map[_edge(a, b)].discard(k)
        for c in forest.split(k):
            leaves.add(c)
            w = forest.vertices[c]
            for a, b in ((w[0], w[1]), (w[1], w[2]), (w[2], w[0])):
                edge_map.setdefault(_edge(a, b), set()).add(c)

    stack = sorted(set(int(k) for k in marked), reverse=True)
    while stack:
        k = stack[-1]
        if k not in leaves:
            stack.pop()
            continue
        e = forest.refinement_edge(k)
        nbrs = [j for j in edge_map.get(e, ()) if j != k]
        if not nbrs:
            do_split(k)
            stack.pop()
            continue
        j = nbrs[0]
        if forest.refinement_edge(j) == e:
            do_split(k)
            do_split(j)
            stack.pop()
        else:
            stack.append(j)
    return leaves


def _marked_indices(mesh, marked):
    marked = np.asarray(list(marked))
    if marked.dtype == bool:
        if marked.shape != (mesh.num_cells,):
            raise ValueError("boolean marker must have one entry per cell")
        return np.nonzero(marked)[0]
    return marked.astype(int)


def bisect(mesh: SimplicialMesh, marked) -> SimplicialMesh:
    """Bisect the marked cells (indices or boolean mask) once, with conforming closure."""
    marked = _marked_indices(mesh, marked)
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.num_cells):
        raise IndexError("marked cell outside mesh")
    if marked.size == 0:
        return SimplicialMesh(mesh.forest, mesh.nodes)
    leaves = _refine(mesh.forest, mesh.nodes, mesh.nodes[marked])
    return SimplicialMesh(mesh.forest, leaves)


def refine_uniform(mesh: SimplicialMesh, levels=1) -> SimplicialMesh:
    """Halve the mesh size ``levels`` times (two bisection sweeps per level)."""
    for _ in range(2 * levels):
        mesh = bisect(mesh, np.arange(mesh.num_cells))
    return mesh


def mesh_from_targets(forest: BisectionForest, targets) -> SimplicialMesh:
    """Coarsest conforming forest mesh in which no target is split further
    than itself, i.e. every target is a cell or covered by one of its
    descendants."""
    needed = set()
    for t in targets:
        needed.update(forest.ancestors(int(t)))
    leaves = set(forest.roots)
    while True:
        marked = sorted(k for k in leaves if k in needed)
        if not marked:
            break
        leaves = _refine(forest, leaves, marked)
    return SimplicialMesh(forest, leaves)


def coarsen(mesh: SimplicialMesh, marked) -> SimplicialMesh:
    """Undo one bisection for sibling pairs that are both marked.

    The result is the coarsest conforming mesh keeping every unmarked cell,
    so some requested merges may be refused by the closure.  Cells are
    never coarsened below the root.
    """
    forest = mesh.forest
    marked_nodes = {int(mesh.nodes[i]) for i in _marked_indices(mesh, marked)}
    targets = set()
    for k in mesh.nodes:
        k = int(k)
        p = forest.parent[k]
        if k in marked_nodes and p >= 0:
            c0, c1 = forest.children[p]
            if c0 in marked_nodes and c1 in marked_nodes:
                targets.add(p)
                continue
        targets.add(k)
    return mesh_from_targets(forest, targets)


def common_refinement(a: SimplicialMesh, b: SimplicialMesh):
    """Overlay of two meshes of one forest.

    Returns ``(mesh, parent_a, parent_b)`` where ``parent_a[i]`` is the cell
    of ``a`` containing cell ``i`` of the overlay.
    """
    if a.forest is not b.forest:
        raise ValueError("meshes belong to different bisection forests")
    forest = a.forest
    union = set(int(k) for k in a.nodes) | set(int(k) for k in b.nodes)
    inner = set()
    for k in union:
        inner.update(forest.ancestors(k))
    out = SimplicialMesh(forest, union - inner)
    return out, out.parent_map(a), out.parent_map(b)


def conformity_defects(mesh: SimplicialMesh):
    """Number of hanging-node defects: vertices lying inside another cell's
    edge, plus interior edges not shared by exactly two cells."""
    counts = mesh._edge_data[2]
    bad = int(np.sum(counts > 2))
    pts = mesh.points
    edges = mesh.edges[counts == 1]
    # boundary-flagged edges must lie on the outer boundary: check midpoints
    # of single-incidence edges are not interior vertices' positions
    vert_set = {tuple(np.round(p, 14)) for p in pts}
    for e in edges:
        mid = tuple(np.round(0.5 * (pts[e[0]] + pts[e[1]]), 14))
        if mid in vert_set:
            bad += 1
    return bad


# ---------------------------------------------------------------------------
# vertex patches


@dataclass(frozen=True)
class VertexPatch:
    """Support of the hat function of one vertex, tiled by refined cells."""

    vertex: int  # local index in the coarse mesh
    vertex_id: int  # forest vertex id
    interior: bool
    coarse_cells: np.ndarray
    cells: np.ndarray  # indices into the refined mesh
    diameter: float
    degree: int

    @property
    def num_cells(self):
        return len(self.cells)


def build_patch(mesh, refined, vertex, refined_parent=None, refined_degrees=None):
    """Vertex patch of ``vertex`` (local index in ``mesh``) tiled by ``refined``.

    ``refined_parent`` maps refined cells to ``mesh`` cells (computed if not
    given); the patch degree is ``max(p + 1)`` over ``refined_degrees``
    (default all 1).
    """
    if not 0 <= vertex < mesh.num_vertices:
        raise IndexError(f"vertex {vertex} not in mesh")
    if refined_parent is None:
        refined_parent = refined.parent_map(mesh)
    coarse = mesh.vertex_cells[vertex]
    cells = np.nonzero(np.isin(refined_parent, coarse))[0]
    vids = np.unique(mesh.cells[coarse])
    pts = mesh.points[vids]
    diam = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=2)))
    if refined_degrees is None:
        deg = 2
    else:
        deg = int(np.max(np.asarray(refined_degrees)[cells])) + 1
    return VertexPatch(
        vertex=int(vertex),
        vertex_id=int(mesh.vertex_ids[vertex]),
        interior=not bool(mesh.boundary_vertices[vertex]),
        coarse_cells=coarse,
        cells=cells,
        diameter=diam,
        degree=deg,
    )


def hat_value(mesh, vertex, x, tol=1e-13):
    """Value of the piecewise-affine hat of ``vertex`` at point ``x``.

    Points outside the patch give 0.
    """
    x = np.asarray(x, dtype=float)
    for k in mesh.vertex_cells[vertex]:
        lam = mesh.barycentric(np.array([k]), x[None, :])[0]
        if np.all(lam >= -tol):
            j = int(np.nonzero(mesh.cells[k] == vertex)[0][0])
            return float(max(lam[j], 0.0))
    return 0.0


# ---------------------------------------------------------------------------
# text I/O


def write_mesh(mesh, path):
    """Write ``dim=2 nv= nt=`` header, vertices, then ``v0 v1 v2 marker``.

    The marker is a bitmask of boundary edges (bit i = edge opposite local
    vertex i).
    """
    bnd = mesh.boundary_edges[mesh.cell_edges]
    with open(path, "w") as fh:
        fh.write(f"dim=2 nv={mesh.num_vertices} nt={mesh.num_cells}\n")
        for x, y in mesh.points:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for tri, flags in zip(mesh.cells, bnd):
            marker = int(flags[0]) | (int(flags[1]) << 1) | (int(flags[2]) << 2)
            fh.write(f"{tri[0]} {tri[1]} {tri[2]} {marker}\n")


def read_mesh(path) -> SimplicialMesh:
    """Read a mesh written by :func:`write_mesh` as the root of a new forest."""
    with open(path) as fh:
        header = fh.readline().split()
        fields = dict(tok.split("=") for tok in header)
        if fields.get("dim") != "2":
            raise ValueError("only dim=2 meshes are supported")
        nv, nt = int(fields["nv"]), int(fields["nt"])
        pts = [tuple(float(s) for s in fh.readline().split()) for _ in range(nv)]
        tris = [[int(s) for s in fh.readline().split()[:3]] for _ in range(nt)]
    forest = BisectionForest(pts, tris, labeling="given")
    return forest.root_mesh()


class MeshHierarchy:
    """Meshes ``T^0..T^N`` of one forest and their consecutive overlays.

    ``common(n)`` returns ``(mesh, parent_prev, parent_cur)`` for the overlay
    of ``T^{n-1}`` and ``T^n`` (``1 <= n <= N``).
    """

    def __init__(self, meshes):
        meshes = list(meshes)
        if not meshes:
            raise ValueError("empty hierarchy")
        forest = meshes[0].forest
        if any(m.forest is not forest for m in meshes):
            raise ValueError("all meshes must share one bisection forest")
        self.meshes = meshes
        self._common = {}

    @classmethod
    def constant(cls, mesh, num_steps):
        return cls([mesh] * (num_steps + 1))

    @property
    def root(self):
        return self.meshes[0].forest.root_mesh()

    @property
    def num_steps(self):
        return len(self.meshes) - 1

    def __getitem__(self, n):
        return self.meshes[n]

    def common(self, n):
        if not 1 <= n <= self.num_steps:
            raise IndexError(f"no common refinement for step {n}")
        out = self._common.get(n)
        if out is None:
            a, b = self.meshes[n - 1], self.meshes[n]
            if a == b:
                ident = np.arange(b.num_cells)
                out = (b, ident, ident)
            else:
                out = common_refinement(a, b)
            self._common[n] = out
        return out
