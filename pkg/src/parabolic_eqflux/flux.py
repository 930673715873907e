"""Equilibrated flux by patchwise constrained minimization.

For every vertex ``a`` of ``T^n`` and every Legendre mode ``j`` the patch
problem reads

    minimize ||v + tau_j||_{omega_a}  subject to  div v = g_j,

over ``RTN_{p_a}`` on the patch cells of the common refinement, with zero
normal trace on the patch boundary (interior vertices) or on the part of it
inside the domain (boundary vertices).  Here ``tau = psi_a grad u`` and
``g = psi_a (Pi_a f - d_t I u) - grad psi_a . grad u``.  The sum of the
zero-extended patch fluxes satisfies ``d_t I u + div sigma = f_htau``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .mesh import VertexPatch, build_patch
from .rtn import rt_dim, rt_evaluate, rt_tables, scalar_table
from .quadrature import edge_rule, triangle_rule
from .spacetime import Step, load_samples
from .temporal import legendre_table

__all__ = [
    "PatchProjection",
    "PatchData",
    "PatchFlux",
    "StepFields",
    "EquilibratedFlux",
    "IncompatibleDataError",
    "step_patches",
    "project_data",
    "build_patch_data",
    "patch_system",
    "solve_patch",
    "assemble_flux",
    "equilibrate_step",
    "equilibrate",
    "verify_equilibration",
    "normal_jump_audit",
    "write_kkt_residuals",
]

COMPAT_TOL = 1e-11


class IncompatibleDataError(ValueError):
    """Divergence target of an interior patch does not have zero mean."""


# ---------------------------------------------------------------------------
# per-step fields at the quadrature points of the common refinement


class StepFields:
    """``u``, ``d_t I u`` and ``f`` as Legendre modes at the step rule points.

    All arrays have a leading mode axis of length ``q + 1`` followed by the
    (cell, point) axes of ``step.tab_cur``.
    """

    def __init__(self, step: Step, u, Iu, f):
        self.step = step
        q = step.q
        tc, tp = step.tab_cur, step.tab_prev
        self.weights = tc.weights
        self.points = tc.points
        _, self.grad_u = tc.evaluate(u.block(step.n))
        rs = Iu[step.n]
        dcur, dcorr = rs.derivative()
        vc, _ = tc.evaluate(dcur)
        vp, _ = tp.evaluate(rs.prev)
        self.dt_Iu = vc + dcorr[:, None, None] * vp[None]
        if f is None:
            self.f_modes = np.zeros_like(self.dt_Iu)
        else:
            t, w, L = step.time_rule
            fv = load_samples(step, f, t)
            scale = (2 * np.arange(q + 1) + 1.0) / step.tau
            self.f_modes = scale[:, None, None] * np.einsum("m,mk,meq->keq", w, L[:, : q + 1], fv)

    @cached_property
    def hats(self):
        """Barycentric coordinates of the rule points in their ``T^n`` cells."""
        s = self.step
        return s.coarse.barycentric(s.parent_cur, self.points)


def step_patches(step: Step):
    """Vertex patches of ``T^n`` tiled by ``T~^n`` (cached on the refinement)."""
    cache = step.mesh.__dict__.setdefault("_patches", {})
    key = (step.coarse.key, step.degrees.tobytes())
    if key not in cache:
        cache[key] = [
            build_patch(step.coarse, step.mesh, a, step.parent_cur, step.degrees)
            for a in range(step.coarse.num_vertices)
        ]
    return cache[key]


def hat_on_patch(step: Step, fields: StepFields, patch: VertexPatch):
    """``psi_a`` and its gradient at the rule points of the patch cells."""
    cells = patch.cells
    parents = step.parent_cur[cells]
    local = np.argmax(step.coarse.cells[parents] == patch.vertex, axis=1)
    psi = fields.hats[cells, :, :][np.arange(len(cells)), :, local]
    dpsi = step.coarse.bary_gradients[parents, local]
    return psi, np.broadcast_to(dpsi[:, None, :], psi.shape + (2,))


# ---------------------------------------------------------------------------
# data projection


@dataclass
class PatchProjection:
    """``Pi_a f``: psi-weighted L2 projection onto broken ``P_{p_a - 1}``.

    ``coeffs`` (q+1, cells, nb) refer to scaled monomials on each cell,
    ``values`` are the modes at the rule points of the patch cells.
    """

    patch: VertexPatch
    psi: np.ndarray
    dpsi: np.ndarray
    coeffs: np.ndarray
    values: np.ndarray
    degree: int


def project_data(step: Step, fields: StepFields, patch: VertexPatch) -> PatchProjection:
    """Project the source modes of ``fields`` on the patch of ``patch.vertex``."""
    cells = patch.cells
    psi, dpsi = hat_on_patch(step, fields, patch)
    deg = patch.degree - 1
    m = scalar_table(step.mesh, deg, step.rule_degree)[cells]  # (c, Q, nb)
    wpsi = fields.weights[cells] * psi
    mt = np.swapaxes(m, 1, 2)
    mass = np.matmul(mt * wpsi[:, None, :], m)
    rhs = np.matmul(mt, (wpsi[None] * fields.f_modes[:, cells]).transpose(1, 2, 0))  # (c, nb, k)
    sol = np.linalg.solve(mass, rhs)
    coeffs = sol.transpose(2, 0, 1)
    values = np.matmul(m, sol).transpose(2, 0, 1)
    return PatchProjection(patch, psi, dpsi, coeffs, values, deg)


def f_htau(step: Step, fields: StepFields, projections):
    """``sum_a psi_a Pi_a f`` at the rule points, shape (q+1, E, Q)."""
    out = np.zeros_like(fields.f_modes)
    for pr in projections:
        out[:, pr.patch.cells] += pr.psi[None] * pr.values
    return out


# ---------------------------------------------------------------------------
# patch data and mixed system


@dataclass
class PatchData:
    """Divergence target ``g`` and flux target ``tau`` (modes at rule points)."""

    patch: VertexPatch
    g: np.ndarray  # (q+1, c, Q)
    tau: np.ndarray  # (q+1, c, Q, 2)
    weights: np.ndarray  # (c, Q)

    def means(self):
        """``(g_j, 1)_{omega_a}`` per mode and the scale used to judge it."""
        ints = np.einsum("cq,kcq->k", self.weights, self.g)
        scale = np.einsum("cq,kcq->k", self.weights, np.abs(self.g))
        return ints, scale

    def compatibility_residual(self):
        """Max relative patch mean of ``g``; ``None`` for boundary vertices."""
        if not self.patch.interior:
            return None
        ints, scale = self.means()
        s = scale.max()
        return float(np.abs(ints).max() / s) if s > 0 else 0.0


def build_patch_data(step: Step, fields: StepFields, proj: PatchProjection) -> PatchData:
    cells = proj.patch.cells
    if proj.degree + 1 < int(step.degrees[cells].max()) + 1:
        raise ValueError("patch degree too small for the local space degrees")
    gu = fields.grad_u[:, cells]
    g = proj.psi[None] * (proj.values - fields.dt_Iu[:, cells]) - np.einsum("cqd,kcqd->kcq", proj.dpsi, gu)
    tau = proj.psi[None, ..., None] * gu
    return PatchData(proj.patch, g, tau, fields.weights[cells])


def _element_matrices(mesh, p, degree):
    """RT mass, divergence-vs-monomial and monomial integrals on all cells."""
    cache = mesh.__dict__.setdefault("_rt_cache", {})
    key = ("elem", p, degree)
    if key not in cache:
        t = rt_tables(mesh, p, degree)
        lam, w = triangle_rule(degree)
        x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
        wq = 2.0 * mesh.areas[:, None] * w[None, :]
        m = scalar_table(mesh, p, degree)
        A = np.einsum("eq,eqid,eqjd->eij", wq, t.vals, t.vals)
        B = np.einsum("eq,eqi,eqj->eij", wq, m, t.div)
        s = np.einsum("eq,eqi->ei", wq, m)
        cache[key] = (A, B, s, m)
    return cache[key]


@dataclass
class PatchSystem:
    """Saddle system of one patch: unknown numbering and dense factor."""

    patch: VertexPatch
    p: int
    local: np.ndarray  # (c, nd) patch index of each local dof, -1 if constrained
    nv: int
    nm: int
    A: np.ndarray
    B: np.ndarray
    s: np.ndarray
    factor: tuple = field(repr=False, default=None)

    @property
    def size(self):
        return self.nv + self.nm + (1 if self.patch.interior else 0)

    @cached_property
    def abs_blocks(self):
        return np.abs(self.A), np.abs(self.B)

    def matrix(self):
        n = self.size
        K = np.zeros((n, n))
        K[: self.nv, : self.nv] = self.A
        K[self.nv : self.nv + self.nm, : self.nv] = self.B
        K[: self.nv, self.nv : self.nv + self.nm] = self.B.T
        if self.patch.interior:
            K[self.nv : self.nv + self.nm, -1] = self.s
            K[-1, self.nv : self.nv + self.nm] = self.s
        return K


def patch_system(step: Step, patch: VertexPatch) -> PatchSystem:
    """Assemble (and factor, cached per mesh) the mixed system of a patch."""
    mesh = step.mesh
    p = patch.degree
    cache = mesh.__dict__.setdefault("_patch_systems", {})
    key = (tuple(mesh.nodes[patch.cells]), p, patch.interior)
    sysm = cache.get(key)
    if sysm is not None and sysm.patch.vertex_id == patch.vertex_id:
        return sysm
    cells = patch.cells
    ce = mesh.cell_edges[cells]
    edges, counts = np.unique(ce, return_counts=True)
    free = counts == 2
    if not patch.interior:
        free |= (counts == 1) & mesh.boundary_edges[edges]
    free_edges = edges[free]
    edge_pos = -np.ones(len(mesh.edges), dtype=int)
    edge_pos[free_edges] = np.arange(len(free_edges))
    nd = rt_dim(p)
    ne = p + 1
    nint = nd - 3 * ne
    c = len(cells)
    local = -np.ones((c, nd), dtype=int)
    for i in range(3):
        pos = edge_pos[ce[:, i]]
        block = pos[:, None] * ne + np.arange(ne)[None, :]
        local[:, i * ne : (i + 1) * ne] = np.where(pos[:, None] >= 0, block, -1)
    base = len(free_edges) * ne
    local[:, 3 * ne :] = base + np.arange(c)[:, None] * nint + np.arange(nint)[None, :]
    nv = base + c * nint

    Ael, Bel, sel, _ = _element_matrices(mesh, p, step.rule_degree)
    nm_loc = Bel.shape[1]
    nm = c * nm_loc
    A = np.zeros((nv, nv))
    B = np.zeros((nm, nv))
    for k, cell in enumerate(cells):
        ok = local[k] >= 0
        idx = local[k, ok]
        A[np.ix_(idx, idx)] += Ael[cell][np.ix_(ok, ok)]
        B[k * nm_loc : (k + 1) * nm_loc, idx] += Bel[cell][:, ok]
    s = sel[cells].ravel()
    sysm = PatchSystem(patch, p, local, nv, nm, A, B, s)
    sysm.factor = sla.lu_factor(sysm.matrix())
    if len(cache) > 20000:
        cache.clear()
    cache[key] = sysm
    return sysm


@dataclass
class PatchFlux:
    """Solution of a patch problem for all modes.

    ``coeffs`` (q+1, c, nd) are local RT coefficients on the patch cells.
    """

    patch: VertexPatch
    p: int
    x: np.ndarray  # (q+1, nv)
    multiplier: np.ndarray  # (q+1, nm)
    coeffs: np.ndarray
    constraint_res: np.ndarray  # (q+1,)
    optimality_res: np.ndarray  # (q+1,)
    objective: np.ndarray  # (q+1,) ||v + tau_j||^2


def patch_rhs(step: Step, sysm: PatchSystem, data: PatchData):
    """Right-hand sides ``-(tau_j, phi)`` and ``(g_j, m)`` for all modes."""
    mesh = step.mesh
    t = rt_tables(mesh, sysm.p, step.rule_degree)
    _, _, _, m = _element_matrices(mesh, sysm.p, step.rule_degree)
    cells = sysm.patch.cells
    w = data.weights
    q1, c, nq = data.g.shape
    wt = (w[None, :, :, None] * data.tau).transpose(1, 0, 2, 3).reshape(c, q1, 2 * nq)
    ft = np.matmul(wt, t.vals[cells].transpose(0, 1, 3, 2).reshape(c, 2 * nq, -1)).transpose(1, 0, 2)
    fg = np.matmul((w[None] * data.g).transpose(1, 0, 2), m[cells]).transpose(1, 0, 2)
    bv = np.zeros((q1, sysm.nv + 1))
    loc = np.where(sysm.local >= 0, sysm.local, sysm.nv)
    for k in range(q1):
        np.add.at(bv[k], loc.ravel(), -ft[k].ravel())
    return bv[:, :-1], fg.reshape(q1, -1)


def _relative(res, scale):
    # modes with vanishing data are measured against the largest mode
    top = np.maximum(scale.max(axis=1), scale.max())
    safe = np.where(top > 0, top, 1.0)
    return np.where(top > 0, res.max(axis=1) / safe, res.max(axis=1))


def solve_patch(step: Step, data: PatchData, sysm: PatchSystem | None = None, check=True) -> PatchFlux:
    """Solve the constrained minimization of one patch for every mode."""
    patch = data.patch
    if check and patch.interior:
        res = data.compatibility_residual()
        if res > 1e3 * COMPAT_TOL:
            raise IncompatibleDataError(
                f"vertex {patch.vertex_id}: patch mean of g is {res:.3e} (relative)"
            )
    if sysm is None:
        sysm = patch_system(step, patch)
    bv, bg = patch_rhs(step, sysm, data)
    q1 = bv.shape[0]
    rhs = np.zeros((sysm.size, q1))
    rhs[: sysm.nv] = bv.T
    rhs[sysm.nv : sysm.nv + sysm.nm] = bg.T
    sol = sla.lu_solve(sysm.factor, rhs)
    x = sol[: sysm.nv].T
    lam = sol[sysm.nv : sysm.nv + sysm.nm].T
    # componentwise backward errors of the two KKT blocks
    absA, absB = sysm.abs_blocks
    r_c = np.abs(x @ sysm.B.T - bg)
    s_c = np.maximum(np.abs(x) @ absB.T, np.abs(bg))
    r_o = np.abs(x @ sysm.A + lam @ sysm.B - bv)
    s_o = np.maximum(np.abs(x) @ absA + np.abs(lam) @ absB, np.abs(bv))
    cres = _relative(r_c, s_c)
    ores = _relative(r_o, s_o)
    ext = np.concatenate([x, np.zeros((q1, 1))], axis=1)
    coeffs = ext[:, np.where(sysm.local >= 0, sysm.local, sysm.nv)]
    # ||v + tau||^2 = x.A.x - 2 x.bv + ||tau||^2
    tt = np.sum(data.weights[None, :, :, None] * data.tau**2, axis=(1, 2, 3))
    obj = np.sum((x @ sysm.A) * x, axis=1) - 2 * np.sum(x * bv, axis=1) + tt
    return PatchFlux(patch, sysm.p, x, lam, coeffs, cres, ores, obj)


# ---------------------------------------------------------------------------
# global flux


class EquilibratedFlux:
    """Sum of the zero-extended patch fluxes of one step.

    Coefficients are kept per RT degree: ``coeffs[p]`` has shape
    (q+1, E, rt_dim(p)) on the cells of ``T~^n``.
    """

    def __init__(self, step: Step, patch_fluxes, q):
        self.step = step
        self.q = q
        self.patch_fluxes = list(patch_fluxes)
        E = step.mesh.num_cells
        self.coeffs = {}
        for pf in sorted(self.patch_fluxes, key=lambda r: r.patch.vertex_id):
            c = self.coeffs.setdefault(pf.p, np.zeros((q + 1, E, rt_dim(pf.p))))
            c[:, pf.patch.cells] += pf.coeffs

    def at_rule_points(self):
        """Values (q+1, E, Q, 2) and divergences (q+1, E, Q)."""
        s = self.step
        val, div = None, None
        for p, c in self.coeffs.items():
            t = rt_tables(s.mesh, p, s.rule_degree)
            v = np.einsum("eqid,kei->keqd", t.vals, c)
            d = np.einsum("eqi,kei->keq", t.div, c)
            val = v if val is None else val + v
            div = d if div is None else div + d
        if val is None:
            E, Q = s.tab_cur.weights.shape
            return np.zeros((self.q + 1, E, Q, 2)), np.zeros((self.q + 1, E, Q))
        return val, div

    def evaluate(self, cells, x):
        """Values and divergences at points ``x`` (E, Q, 2) of ``cells``."""
        cells = np.asarray(cells, dtype=int)
        val = np.zeros((self.q + 1,) + x.shape)
        div = np.zeros((self.q + 1,) + x.shape[:-1])
        for p, c in self.coeffs.items():
            bv, bd = rt_evaluate(self.step.mesh, cells, p, x)
            val += np.einsum("eqid,kei->keqd", bv, c[:, cells])
            div += np.einsum("eqi,kei->keq", bd, c[:, cells])
        return val, div


def assemble_flux(step: Step, patch_fluxes, q=None) -> EquilibratedFlux:
    if q is None:
        q = step.q
    return EquilibratedFlux(step, patch_fluxes, q)


def _edge_points(mesh, edges, m):
    s, _ = edge_rule(m)
    a = mesh.points[mesh.edges[edges, 0]]
    b = mesh.points[mesh.edges[edges, 1]]
    x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    t = b - a
    n = np.stack([t[:, 1], -t[:, 0]], -1) / np.linalg.norm(t, axis=1)[:, None]
    return x, n


def normal_jump_audit(flux: EquilibratedFlux, m=None):
    """Largest normal jump over interior edges of ``T~^n`` per mode, relative to the flux size."""
    mesh = flux.step.mesh
    ec = mesh.edge_cells
    inner = np.nonzero(ec[:, 1] >= 0)[0]
    if m is None:
        m = max(flux.coeffs, default=1) + 2
    out = np.zeros(flux.q + 1)
    if not len(inner):
        return out
    x, n = _edge_points(mesh, inner, m)
    v1, _ = flux.evaluate(ec[inner, 0], x)
    v2, _ = flux.evaluate(ec[inner, 1], x)
    n1 = np.einsum("keqd,ed->keq", v1, n)
    n2 = np.einsum("keqd,ed->keq", v2, n)
    # judged against the size of the whole field: normal traces may vanish by symmetry
    val, _ = flux.at_rule_points()
    scale = np.maximum(np.abs(val).max(axis=(1, 2, 3)), np.abs(np.concatenate([v1, v2], axis=1)).max(axis=(1, 2, 3)))
    jump = np.abs(n1 - n2).max(axis=(1, 2))
    return np.where(scale > 0, jump / np.where(scale > 0, scale, 1.0), jump)


@dataclass
class StepEquilibration:
    """Everything produced by equilibrating one step."""

    step: Step
    fields: StepFields
    projections: list
    data: list
    patch_fluxes: list
    flux: EquilibratedFlux
    f_htau: np.ndarray  # (q+1, E, Q)

    def compatibility(self):
        """Worst relative patch mean of ``g`` over interior vertices."""
        vals = [d.compatibility_residual() for d in self.data if d.patch.interior]
        return max(vals, default=0.0)

    def kkt_residuals(self):
        c = max((pf.constraint_res.max() for pf in self.patch_fluxes), default=0.0)
        o = max((pf.optimality_res.max() for pf in self.patch_fluxes), default=0.0)
        return float(c), float(o)

    def projection_for(self, vertex):
        return self.projections[vertex]


def equilibrate_step(step: Step, u, Iu, f, skip=()) -> StepEquilibration:
    """Project data, solve all patches and assemble the flux of one step.

    ``skip`` lists coarse vertices whose patch is left out (for ablations).
    """
    fields = StepFields(step, u, Iu, f)
    patches = step_patches(step)
    projections = [project_data(step, fields, pa) for pa in patches]
    data, fluxes = [], []
    for pr in projections:
        d = build_patch_data(step, fields, pr)
        data.append(d)
        if pr.patch.vertex in skip:
            continue
        fluxes.append(solve_patch(step, d))
    flux = assemble_flux(step, fluxes)
    return StepEquilibration(step, fields, projections, data, fluxes, flux, f_htau(step, fields, projections))


def equilibrate(u, Iu, f):
    """Equilibrated flux on every step of a solved problem."""
    return [equilibrate_step(step, u, Iu, f) for step in u.disc.steps()]


def verify_equilibration(eq: StepEquilibration, times=None):
    """Max relative residual of ``d_t I u + div sigma - f_htau``.

    The residual is sampled at the spatial rule points of ``T~^n`` and at
    ``q + 3`` Gauss times unless ``times`` are given.
    """
    step = eq.step
    _, div = eq.flux.at_rule_points()
    if times is None:
        times = step.time_rule[0]
    L, _ = legendre_table(step.partition.to_reference(step.n, np.asarray(times)), step.q)
    res = np.einsum("mk,keq->meq", L, eq.fields.dt_Iu + div - eq.f_htau)
    ref = np.abs(np.einsum("mk,keq->meq", L, eq.f_htau)).max()
    worst = float(np.abs(res).max())
    return worst / ref if ref > 0 else worst


def write_kkt_residuals(path, equilibrations):
    """CSV with ``patch_id, step, mode, constraint_res, optimality_res``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "step", "mode", "constraint_res", "optimality_res"])
        for eq in equilibrations:
            for pf in eq.patch_fluxes:
                for j in range(len(pf.constraint_res)):
                    w.writerow(
                        [
                            pf.patch.vertex_id,
                            eq.step.n,
                            j,
                            f"{pf.constraint_res[j]:.6e}",
                            f"{pf.optimality_res[j]:.6e}",
                        ]
                    )
