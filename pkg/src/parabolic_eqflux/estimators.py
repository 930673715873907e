"""A posteriori estimators, exact errors and efficiency bookkeeping.

Per step ``n`` and cell ``K`` of ``T^n``:

* ``eta_F^2 = int ||sigma + grad u||_K^2 dt``,
* ``eta_J^2 = int ||grad(u - I u)||_K^2 dt``, which also equals
  ``tau (q+1) / ((2q+1)(2q+3)) ||grad [[u]]||_K^2``,
* ``eta_osc^2 = c_osc int sum_K~ (tau/pi + h^2/pi^2) ||f - f_htau||^2 dt``
  with ``c_osc = (1 + sqrt 2) / 2``,

and ``eta_X^2 = sum_n (sqrt(sum_K eta_F^2 + eta_J^2) + eta_osc)^2 + eta_init^2``
bounds ``||u - u_htau||_X``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fespace import FESpace, assemble_stiffness, restrict
from .flux import StepEquilibration, step_patches
from .mesh import BisectionForest, refine_uniform
from .quadrature import triangle_rule
from .rtn import scalar_basis, scalar_table
from .temporal import gauss_points, legendre_table

__all__ = [
    "OSC_CONSTANT",
    "FHtau",
    "assemble_f_htau",
    "eta_F",
    "eta_F_global",
    "eta_J",
    "eta_osc",
    "eta_init",
    "eta_total",
    "error_X",
    "error_measure_EX",
    "local_oscillation",
    "local_oscillations",
    "patch_gamma",
    "StepReport",
    "EstimatorReport",
    "estimate",
]

OSC_CONSTANT = (1.0 + math.sqrt(2.0)) / 2.0
GAMMA_SLACK = 1e-12  # relative slack in h^2 <= gamma tau, absorbs rounding of h^2 / tau


def _to_coarse(step, per_fine):
    """Sum values on cells of ``T~^n`` into their cells of ``T^n``."""
    return np.bincount(step.parent_cur, weights=per_fine, minlength=step.coarse.num_cells)


# ---------------------------------------------------------------------------
# data approximation


class FHtau:
    """``f_htau = sum_a psi_a Pi_a f`` as Legendre modes of polynomials on ``T~^n``.

    ``coeffs`` (q+1, E, nb) refer to scaled monomials of degree ``degree``.
    """

    def __init__(self, step, coeffs, degree):
        self.step = step
        self.coeffs = coeffs
        self.degree = degree

    def evaluate(self, cells, x):
        m = scalar_basis(self.step.mesh, cells, self.degree, x)
        return np.einsum("cqi,kci->kcq", m, self.coeffs[:, cells])


def _coarse_hats(step, x):
    """Barycentric coordinates in the parent ``T^n`` cells of points (E, Q, 2)."""
    return step.coarse.barycentric(step.parent_cur, x)


def _sum_patch_projections(eq: StepEquilibration, degree):
    """Direct evaluation of ``sum_a psi_a Pi_a f`` at the ``degree`` rule of every cell."""
    step = eq.step
    lam_ref, _ = triangle_rule(degree)
    x = np.einsum("qj,ejd->eqd", lam_ref, step.mesh.cell_points)
    lam = _coarse_hats(step, x)
    out = np.zeros((step.q + 1,) + x.shape[:2])
    for pr in eq.projections:
        cells = pr.patch.cells
        parents = step.parent_cur[cells]
        local = np.argmax(step.coarse.cells[parents] == pr.patch.vertex, axis=1)
        psi = lam[cells, :, :][np.arange(len(cells)), :, local]
        m = scalar_table(step.mesh, pr.degree, degree)[cells]
        out[:, cells] += psi[None] * np.einsum("cqi,kci->kcq", m, pr.coeffs)
    return out


def assemble_f_htau(eq: StepEquilibration) -> FHtau:
    """Collect the overlapping patch contributions into one polynomial per cell."""
    step = eq.step
    degree = max(pr.degree for pr in eq.projections) + 1
    lam, w = triangle_rule(2 * degree)
    x = np.einsum("qj,ejd->eqd", lam, step.mesh.cell_points)
    vals = _sum_patch_projections(eq, 2 * degree)
    m = scalar_table(step.mesh, degree, 2 * degree)
    mass = np.einsum("q,eqi,eqj->eij", w, m, m)
    rhs = np.einsum("q,keq,eqi->kei", w, vals, m)
    coeffs = np.linalg.solve(mass[None], rhs[..., None])[..., 0]
    return FHtau(step, coeffs, degree)


# ---------------------------------------------------------------------------
# flux and jump estimators


def _flux_defect(eq: StepEquilibration):
    """Weighted squared modes of ``sigma + grad u`` per cell of ``T~^n``."""
    step = eq.step
    val, _ = eq.flux.at_rule_points()
    d = val + eq.fields.grad_u
    tmass = step.tau / (2 * np.arange(step.q + 1) + 1.0)
    return np.einsum("k,eq,keqd,keqd->e", tmass, eq.fields.weights, d, d)


def eta_F(eq: StepEquilibration):
    """``eta_F,K`` for every cell ``K`` of ``T^n``."""
    return np.sqrt(_to_coarse(eq.step, _flux_defect(eq)))


def eta_F_global(eq: StepEquilibration, times=None):
    """``sum_K eta_F,K^2`` by one space-time quadrature pass (no modal shortcut)."""
    step = eq.step
    if times is None:
        t, w = gauss_points(step.interval, step.q + 2)
    else:
        t, w = times
    L, _ = legendre_table(step.partition.to_reference(step.n, t), step.q)
    val, _ = eq.flux.at_rule_points()
    d = np.einsum("mk,keqd->meqd", L, val + eq.fields.grad_u)
    return float(np.einsum("m,eq,meqd,meqd->", w, eq.fields.weights, d, d))


def _jump_prefactor(q, tau):
    return math.sqrt(tau * (q + 1) / ((2 * q + 1) * (2 * q + 3)))


def eta_J(step, u, Iu):
    """``eta_J,K`` on ``T^n`` by the time integral and by the closed form.

    The integral form applies a ``q + 3`` point Gauss rule to
    ``||grad(u - I u)(t)||_K^2`` with ``u - I u = c(t) (u(t_{n-1}^+) - u(t_{n-1}))``
    evaluated from the two traces; the closed form uses the analytic time
    factor and the jump ``[[u]]_{n-1}`` transferred to ``T~^n``.  Traces are
    subtracted coefficientwise when both steps share one space, which keeps
    small jumps free of cancellation.
    """
    n, q = step.n, step.q
    rs = Iu[n]
    t, w = gauss_points(step.interval, q + 3)
    L, _ = legendre_table(step.partition.to_reference(n, t), q + 1)
    c = L @ rs.corr
    left, right = u.trace(n - 1, "left"), u.trace(n - 1, "right")
    tc = step.tab_cur
    if step.space_prev is step.space_cur:
        _, gd = tc.evaluate(right - left)
    else:
        _, gr = tc.evaluate(right)
        _, gl = step.tab_prev.evaluate(left)
        gd = gr - gl
    sq = np.einsum("eq,eqd,eqd->e", tc.weights, gd, gd)
    integral = float(np.sum(w * c * c)) * sq

    space, jump = u.jump(n - 1)
    tj = space.tabulate_on(step.mesh, degree=step.rule_degree)
    _, gj = tj.evaluate(jump)
    closed = _jump_prefactor(q, step.tau) ** 2 * np.einsum("eq,eqd,eqd->e", tj.weights, gj, gj)
    return np.sqrt(_to_coarse(step, integral)), np.sqrt(_to_coarse(step, closed))


# ---------------------------------------------------------------------------
# oscillation terms


def eta_osc(eq: StepEquilibration, f, fh: FHtau | None = None, extra=2):
    """Data oscillation of one step with an enriched space-time rule."""
    step = eq.step
    if fh is None:
        fh = assemble_f_htau(eq)
    mesh = step.mesh
    lam, wq = triangle_rule(step.rule_degree + 2 * extra)
    x = np.einsum("qj,ejd->eqd", lam, mesh.cell_points)
    wx = 2.0 * mesh.areas[:, None] * wq[None, :]
    t, w = gauss_points(step.interval, 2 * (step.q + 2) + extra)
    L, _ = legendre_table(step.partition.to_reference(step.n, t), step.q)
    modes = fh.evaluate(np.arange(mesh.num_cells), x)
    h2 = mesh.diameters**2
    weight = step.tau / math.pi + h2 / math.pi**2
    total = 0.0
    for tm, wm, Lm in zip(t, w, L):
        r = np.broadcast_to(f(x, tm), x.shape[:2]) - np.einsum("k,keq->eq", Lm, modes)
        total += wm * np.sum(weight * np.einsum("eq,eq->e", wx, r * r))
    return math.sqrt(OSC_CONSTANT * total)


def eta_init(space: FESpace, u0, initial, extra=4):
    """``||u_0 - Pi_h u_0||`` with the initial coefficients ``initial``."""
    if u0 is None:
        return 0.0
    tab = space.tabulate_on(degree=2 * space.max_degree + 2 * extra)
    v, _ = tab.evaluate(initial)
    r = np.broadcast_to(u0(tab.points), v.shape) - v
    return float(math.sqrt(np.sum(tab.weights * r * r)))


def eta_total(flux_jump_sq, osc, init=0.0):
    """Nested aggregation from per-step ``sum_K (eta_F^2 + eta_J^2)`` and ``eta_osc``."""
    fj = np.asarray(flux_jump_sq, dtype=float)
    osc = np.asarray(osc, dtype=float)
    return math.sqrt(float(np.sum((np.sqrt(fj) + osc) ** 2)) + init**2)


def error_measure_EX(err_u, err_Iu):
    return max(err_u, err_Iu)


# ---------------------------------------------------------------------------
# exact errors


def _error_u_step(step, u, grad, level):
    """Per-cell ``int ||grad(u_exact - u_h)||_K^2`` on ``T^n``."""
    space = step.space_cur
    deg = 2 * space.max_degree + 4 + 2 * level
    tab = space.tabulate_on(degree=deg)
    t, w = gauss_points(step.interval, 2 * (step.q + 2) + 2 * level)
    L, _ = legendre_table(step.partition.to_reference(step.n, t), step.q)
    _, gh = tab.evaluate(L @ u.block(step.n))
    out = np.zeros(step.coarse.num_cells)
    for m, tm in enumerate(t):
        d = grad(tab.points, tm) - gh[m]
        out += w[m] * np.einsum("eq,eqd,eqd->e", tab.weights, d, d)
    return out


def _error_Iu_step(step, Iu, grad, level):
    """Per-cell ``int ||grad(u_exact - I u)||^2`` on ``T~^n`` summed into ``T^n``."""
    deg = 2 * int(step.degrees.max()) + 4 + 2 * level
    tc = step.space_cur.tabulate_on(step.mesh, step.parent_cur, deg)
    tp = step.space_prev.tabulate_on(step.mesh, step.parent_prev, deg)
    rs = Iu[step.n]
    t, w = gauss_points(step.interval, 2 * (step.q + 2) + 2 * level)
    L, _ = legendre_table(step.partition.to_reference(step.n, t), step.q + 1)
    _, gc = tc.evaluate(L @ rs.cur)
    _, gp = tp.evaluate(rs.prev)
    c = L @ rs.corr
    out = np.zeros(step.mesh.num_cells)
    for m, tm in enumerate(t):
        d = grad(tc.points, tm) - gc[m] - c[m] * gp
        out += w[m] * np.einsum("eq,eqd,eqd->e", tc.weights, d, d)
    return _to_coarse(step, out)


def error_X(grad, u, Iu=None):
    """``||u_exact - v||_X`` for ``v = u`` (default) or ``v = I u``.

    Returns ``(value, delta)`` where ``delta`` is the change of the value
    when every quadrature rule is raised by one level.
    """
    vals = []
    for level in (0, 1):
        total = 0.0
        for step in u.disc.steps():
            if Iu is None:
                total += _error_u_step(step, u, grad, level).sum()
            else:
                total += _error_Iu_step(step, Iu, grad, level).sum()
        vals.append(math.sqrt(total))
    return vals[0], abs(vals[1] - vals[0])


# ---------------------------------------------------------------------------
# local oscillation (discrete dual norm) and patch geometry


def _segment_hits(points, segs, tol):
    """Whether each point lies on one of the segments (a, b)."""
    hit = np.zeros(len(points), dtype=bool)
    for a, b in segs:
        d = b - a
        s = np.clip(((points - a) @ d) / (d @ d), 0.0, 1.0)
        dist = np.linalg.norm(points - (a + s[:, None] * d), axis=1)
        hit |= dist <= tol
    return hit


def _dual_space(step, patch, levels):
    """Refined local mesh, its space and the stiffness factor (cached)."""
    mesh = step.mesh
    cache = mesh.__dict__.setdefault("_dual_spaces", {})
    key = (tuple(mesh.nodes[patch.cells]), patch.degree, patch.interior, levels)
    hit = cache.get(key)
    if hit is not None:
        return hit
    cells = patch.cells
    vids, local_tris = np.unique(mesh.cells[cells], return_inverse=True)
    forest = BisectionForest(mesh.points[vids], local_tris.reshape(-1, 3))
    root = forest.root_mesh()
    fine = refine_uniform(root, levels)
    parent = fine.parent_map(root)  # index into patch cells
    if patch.interior:
        dirichlet = fine.boundary_edges.copy()
    else:
        # zero trace only on the part of the patch boundary on the domain boundary
        ce = mesh.cell_edges[cells]
        segs = [mesh.points[mesh.edges[e]] for e in np.unique(ce) if mesh.boundary_edges[e]]
        mids = fine.points[fine.edges].mean(axis=1)
        tol = 1e-12 * max(patch.diameter, 1.0)
        dirichlet = fine.boundary_edges & _segment_hits(mids, segs, tol)
    space = FESpace(fine, patch.degree + 1, dirichlet=dirichlet)
    A = restrict(assemble_stiffness(space), space).toarray()
    chol = sla.cho_factor(A) if space.dim else None
    tab = space.tabulate_on(degree=2 * (patch.degree + 1) + 2)
    # dense load operator: b = load @ r.ravel() for samples r at tab points
    E, Q, nk = tab.vals.shape
    load = np.zeros((space.ndof + 1, E * Q))
    cols = np.broadcast_to(np.arange(E * Q).reshape(E, Q, 1), (E, Q, nk))
    rows = np.broadcast_to(tab.dofs[:, None, :], (E, Q, nk))
    np.add.at(load, (rows.ravel(), cols.ravel()), (tab.weights[..., None] * tab.vals).ravel())
    load = load[space.free_index]
    m = scalar_basis(mesh, cells[parent], patch.degree - 1, tab.points)
    hit = cache[key] = _DualSpace(fine, parent, space, chol, tab.points, load, m)
    return hit


@dataclass
class _DualSpace:
    fine: object
    parent: np.ndarray
    space: FESpace
    chol: tuple | None
    points: np.ndarray  # (E, Q, 2)
    load: np.ndarray  # (ndof_free, E * Q)
    basis: np.ndarray  # (E, Q, nb) projection basis at the points


def local_oscillations(eq: StepEquilibration, f, vertices=None, levels=1, extra=2):
    """Approximate ``int ||f - Pi_a f||_{H^-1(omega_a)}^2 dt`` (squared) per vertex.

    The dual norm is taken over ``V_h`` of degree ``p_a + 1`` on the patch
    refined ``levels`` times, with zero trace on the patch boundary (interior
    vertex) or on its part on the domain boundary.
    """
    step = eq.step
    if vertices is None:
        vertices = range(step.coarse.num_vertices)
    vertices = list(vertices)
    duals = [_dual_space(step, eq.projections[a].patch, levels) for a in vertices]
    sizes = [d.points.shape[0] * d.points.shape[1] for d in duals]
    x = np.concatenate([d.points.reshape(-1, 2) for d in duals])
    t, w = gauss_points(step.interval, 2 * (step.q + 2) + extra)
    L, _ = legendre_table(step.partition.to_reference(step.n, t), step.q)
    F = np.stack([np.broadcast_to(f(x, tm), x.shape[:1]) for tm in t])  # (m, P)
    out = np.zeros(len(vertices))
    start = 0
    for i, (a, d) in enumerate(zip(vertices, duals)):
        Fa = F[:, start : start + sizes[i]]
        start += sizes[i]
        if d.chol is None:
            continue
        proj = eq.projections[a]
        pif = np.matmul(d.basis, proj.coeffs[:, d.parent].transpose(1, 2, 0))  # (E, Q, k)
        r = Fa - (pif.reshape(-1, pif.shape[-1]) @ L.T).T
        b = d.load @ r.T  # (ndof, m)
        out[i] = float(np.sum(w * np.sum(b * sla.cho_solve(d.chol, b), axis=0)))
    return out


def local_oscillation(eq: StepEquilibration, f, vertex, levels=1, extra=2):
    """:func:`local_oscillations` of a single vertex."""
    return float(local_oscillations(eq, f, [vertex], levels, extra)[0])


def patch_gamma(step, patches):
    """``max_a h_{omega_a}^2 / tau_n`` and the per-vertex values."""
    g = np.array([pa.diameter**2 / step.tau for pa in patches])
    return float(g.max()), g


# ---------------------------------------------------------------------------
# reports


@dataclass
class StepReport:
    n: int
    tau: float
    eta_F: np.ndarray
    eta_J: np.ndarray
    eta_J_closed: np.ndarray
    eta_osc: float
    gamma: float
    patch_gamma: np.ndarray
    err_u: np.ndarray | None = None  # per-cell squared X-error of u_h
    osc_local: np.ndarray | None = None  # per-vertex squared local oscillation
    coarse_cells: np.ndarray | None = field(default=None, repr=False)

    @property
    def flux_jump_sq(self):
        return float(np.sum(self.eta_F**2) + np.sum(self.eta_J**2))


@dataclass
class EstimatorReport:
    """All estimator pieces, errors and derived ratios of one run."""

    steps: list
    eta_init: float
    eta_X: float
    error_u: float | None = None
    error_Iu: float | None = None
    error_jump: float = 0.0  # ||u_h - I u_h||_X
    delta_quad: float = 0.0
    local_efficiency: list = field(default_factory=list)
    gamma_condition: float | None = None
    meta: dict = field(
        default_factory=lambda: {"osc_constant": OSC_CONSTANT, "local_oscillation": "APPROXIMATE"}
    )

    def recompute_eta_X(self):
        return eta_total([s.flux_jump_sq for s in self.steps], [s.eta_osc for s in self.steps], self.eta_init)

    @property
    def E_X(self):
        if self.error_u is None or self.error_Iu is None:
            return None
        return error_measure_EX(self.error_u, self.error_Iu)

    @property
    def effectivity(self):
        if not self.error_u:
            return None
        return self.eta_X / self.error_u

    @property
    def gamma_max(self):
        return max(s.gamma for s in self.steps)

    @property
    def eta_F_sq(self):
        return float(sum(np.sum(s.eta_F**2) for s in self.steps))

    @property
    def osc_local_sq(self):
        if any(s.osc_local is None for s in self.steps):
            return None
        return float(sum(np.sum(s.osc_local) for s in self.steps))

    @property
    def global_efficiency_ratio(self):
        """``sum eta_F^2 / (||u - u_h||_X^2 + ||u_h - I u_h||_X^2 + sum osc_a^2)``."""
        if self.error_u is None:
            return None
        osc = self.osc_local_sq or 0.0
        denom = self.error_u**2 + self.error_jump**2 + osc
        if denom <= 0.0:
            return None
        return self.eta_F_sq / denom

    def summary(self):
        return {
            "eta_X": self.eta_X,
            "error_X": self.error_u,
            "effectivity": self.effectivity,
            "delta_quad": self.delta_quad,
            "gamma_max": self.gamma_max,
            "global_efficiency_ratio": self.global_efficiency_ratio,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "element", "eta_F", "eta_J"])
            for s in self.steps:
                for k in range(len(s.eta_F)):
                    w.writerow([s.n, k, repr(float(s.eta_F[k])), repr(float(s.eta_J[k]))])

    def write_json(self, path, extra=None):
        data = self.summary()
        data["meta"] = dict(self.meta)
        if extra:
            data.update(extra)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def _local_efficiency(report_step, coarse, gamma_bound):
    """Per-cell ratio ``eta_F,K^2 / sum_{a in V_K} (...)`` and condition flags."""
    nv = coarse.num_vertices
    err = report_step.err_u
    jump = report_step.eta_J**2
    osc = report_step.osc_local if report_step.osc_local is not None else np.zeros(nv)
    patch_sum = np.zeros(nv)
    for a in range(nv):
        cells = coarse.vertex_cells[a]
        patch_sum[a] = err[cells].sum() + jump[cells].sum() + osc[a]
    denom = patch_sum[coarse.cells].sum(axis=1)
    ok = np.all(report_step.patch_gamma[coarse.cells] <= gamma_bound * (1 + GAMMA_SLACK), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0, report_step.eta_F**2 / np.where(denom > 0, denom, 1.0), np.nan)
    return ratio, ok


def estimate(u, Iu, equilibrations, f, u0=None, grad=None, local_osc=False, gamma_bound=None):
    """Evaluate every estimator; with ``grad`` also the exact errors.

    ``local_osc`` switches on the patchwise dual-norm oscillation needed by
    the efficiency ratios.  ``gamma_bound`` selects the cells entering the
    local efficiency statistics (``h_omega^2 <= gamma_bound tau``).
    """
    disc = u.disc
    steps = []
    err_jump_sq = 0.0
    for eq in equilibrations:
        step = eq.step
        eF = eta_F(eq)
        eJ, eJc = eta_J(step, u, Iu)
        err_jump_sq += float(np.sum(eJ**2))
        osc = eta_osc(eq, f) if f is not None else 0.0
        gmax, gv = patch_gamma(step, step_patches(step))
        rs = StepReport(step.n, step.tau, eF, eJ, eJc, osc, gmax, gv)
        if grad is not None:
            rs.err_u = _error_u_step(step, u, grad, 0)
        if local_osc and f is not None:
            rs.osc_local = local_oscillations(eq, f)
        steps.append(rs)
    init = eta_init(disc.spaces[0], u0, u.initial)
    eta = eta_total([s.flux_jump_sq for s in steps], [s.eta_osc for s in steps], init)
    report = EstimatorReport(steps, init, eta, error_jump=math.sqrt(err_jump_sq))
    if grad is not None:
        report.error_u, d1 = error_X(grad, u)
        report.error_Iu, d2 = error_X(grad, u, Iu)
        report.delta_quad = max(d1, d2)
        if gamma_bound is not None:
            report.gamma_condition = gamma_bound
            for eq, rs in zip(equilibrations, steps):
                report.local_efficiency.append(_local_efficiency(rs, eq.step.coarse, gamma_bound))
    return report
