"""dG(q) time stepping and the time-continuous reconstruction ``I u``.

On step ``I_n`` the solution is ``u = sum_j U_j L_j(t)`` with mapped Legendre
polynomials ``L_j``.  Testing with ``phi_i L_k`` gives the block system

    sum_j [(D_kj + (-1)^(j+k)) M + delta_kj tau/(2k+1) A] U_j
        = (-1)^k (u(t_{n-1}), phi_i) + int_{I_n} (f, phi_i) L_k dt

with ``D_kj = int L_j' L_k dt``.  For q = 0 this is backward Euler with the
time-averaged load.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import assemble_mass, assemble_stiffness, cross_mass, project_L2, restrict
from .spacetime import Discretization, SpaceTimeFunction, Step, load_samples
from .temporal import derivative_matrix, derivative_pairing, legendre_table

__all__ = [
    "solve",
    "step_load",
    "step_matrices",
    "reconstruct",
    "ReconstructedSolution",
    "verify_equivalent_form",
    "pointwise_identity_check",
    "pointwise_identity_residuals",
]


def _space_matrices(space):
    cache = space._cache
    if "M" not in cache:
        cache["M"] = restrict(assemble_mass(space), space).tocsc()
        cache["A"] = restrict(assemble_stiffness(space), space).tocsc()
    return cache["M"], cache["A"]


def step_matrices(step: Step):
    """Free-dof mass, stiffness and transfer matrices of a step."""
    M, A = _space_matrices(step.space_cur)
    key = ("X", step.mesh.forest.uid, step.mesh.key, id(step.space_prev))
    X = step.space_cur._cache.get(key)
    if X is None:
        full = cross_mass(step.space_cur, step.space_prev, step.mesh, step.parent_cur, step.parent_prev)
        X = step.space_cur._cache[key] = restrict(full, step.space_cur, step.space_prev).tocsr()
    return M, A, X


def temporal_coupling(q, tau):
    """(mass-coupling, stiffness-coupling) matrices of the modal dG(q) system."""
    k = np.arange(q + 1)
    C = derivative_pairing(q) + (-1.0) ** (k[:, None] + k[None, :])
    S = np.diag(tau / (2 * k + 1.0))
    return C, S


def step_load(step: Step, f):
    """``F[k] = int_{I_n} (f, phi_i) L_k dt`` in full numbering, shape (q+1, ndof)."""
    t, w, L = step.time_rule
    tab = step.tab_cur
    fv = load_samples(step, f, t)
    loc = np.einsum("m,mk,meq,eq,eqi->kei", w, L[:, : step.q + 1], fv, tab.weights, tab.vals)
    out = np.zeros((step.q + 1, step.space_cur.ndof + 1))
    for k in range(step.q + 1):
        np.add.at(out[k], tab.dofs.ravel(), loc[k].ravel())
    return out[:, :-1]


def _factor(step: Step):
    space = step.space_cur
    key = ("K", step.q, step.tau)
    lu = space._cache.get(key)
    if lu is None:
        M, A, _ = step_matrices(step)
        C, S = temporal_coupling(step.q, step.tau)
        K = sp.kron(sp.csr_matrix(C), M) + sp.kron(sp.csr_matrix(S), A)
        lu = space._cache[key] = spla.splu(K.tocsc())
    return lu


def solve_step(step: Step, u_prev, load):
    """Mode block of ``u`` on ``I_n`` given ``u(t_{n-1})`` and the load."""
    if step.tau <= 0:
        raise ValueError("time step must be positive")
    space = step.space_cur
    nf = space.dim
    q = step.q
    out = np.zeros((q + 1, space.ndof))
    if nf == 0:
        return out
    _, _, X = step_matrices(step)
    up = X @ u_prev[step.space_prev.free_index]
    rhs = np.concatenate([(-1.0) ** k * up + load[k, space.free_index] for k in range(q + 1)])
    sol = _factor(step).solve(rhs)
    out[:, space.free_index] = sol.reshape(q + 1, nf)
    return out


def solve(disc: Discretization, f, u0=None, initial=None) -> SpaceTimeFunction:
    """Run dG(q) time stepping.

    ``f(x, t)`` is the source, ``u0(x)`` the initial datum (projected in L2
    onto ``V^0``) unless explicit ``initial`` coefficients are given.
    """
    if initial is None:
        initial = np.zeros(disc.spaces[0].ndof) if u0 is None else project_L2(disc.spaces[0], u0)
    modes = []
    u_prev = initial
    for step in disc.steps():
        block = solve_step(step, u_prev, step_load(step, f))
        modes.append(block)
        u_prev = block.sum(axis=0)
    return SpaceTimeFunction(disc, initial, modes)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructedStep:
    """``I u = sum_j a_j L_j`` on ``V^n`` plus ``c(t) u(t_{n-1})`` on ``V^{n-1}``.

    ``cur`` has shape (q+2, ndof_n), ``prev`` is the coefficient vector of
    ``u(t_{n-1})`` and ``corr`` the Legendre modes of ``c``.
    """

    cur: np.ndarray
    prev: np.ndarray
    corr: np.ndarray
    tau: float

    def derivative(self):
        """Modes (q+1) of ``d/dt I u``: (cur part, scalar factors for prev)."""
        G = derivative_matrix(len(self.corr) - 1) * (2.0 / self.tau)
        return (G @ self.cur)[:-1], (G @ self.corr)[:-1]


class ReconstructedSolution:
    """``I u``: continuous in time, degree ``q_n + 1`` on each step."""

    def __init__(self, u: SpaceTimeFunction, steps):
        self.u = u
        self.steps = steps

    def __getitem__(self, n) -> ReconstructedStep:
        return self.steps[n - 1]

    @property
    def initial(self):
        return self.u.initial

    def values_at(self, n, t, tab_cur, tab_prev):
        """Values and gradients of ``I u(t)`` on a common-refinement tabulation."""
        rs = self.steps[n - 1]
        L, _ = legendre_table(self.u.partition.to_reference(n, t), len(rs.corr) - 1)
        vc, gc = tab_cur.evaluate(L @ rs.cur)
        vp, gp = tab_prev.evaluate(rs.prev)
        c = L @ rs.corr
        return vc + c * vp, gc + c * gp

    def node_value(self, n, side, tab_cur, tab_prev):
        """``I u(t_{n-1}^+)`` (side='start') or ``I u(t_n)`` (side='end')."""
        a, b = self.u.partition.interval(n)
        return self.values_at(n, a if side == "start" else b, tab_cur, tab_prev)[0]


def reconstruct(u: SpaceTimeFunction) -> ReconstructedSolution:
    """Apply ``I v = v + ((-1)^q / 2)(L_q - L_{q+1}) [[v]]_{n-1}`` step by step."""
    steps = []
    for n in range(1, u.disc.num_steps + 1):
        q = u.partition.q(n)
        corr = np.zeros(q + 2)
        corr[q] = 0.5 * (-1.0) ** q
        corr[q + 1] = -0.5 * (-1.0) ** q
        block = u.block(n)
        cur = np.zeros((q + 2, block.shape[1]))
        cur[: q + 1] = block
        cur -= np.outer(corr, u.trace(n - 1, "right"))
        steps.append(ReconstructedStep(cur, u.trace(n - 1, "left").copy(), corr, u.partition.tau(n)))
    return ReconstructedSolution(u, steps)


def verify_equivalent_form(step: Step, u: SpaceTimeFunction, Iu: ReconstructedSolution, load):
    """Relative residual of ``int (d_t I u, v) + (grad u, grad v) = int (f, v)``
    over all test functions ``phi_i L_k`` of the step."""
    n, q, space = step.n, step.q, step.space_cur
    if space.dim == 0:
        return 0.0
    M, A, X = step_matrices(step)
    rs = Iu[n]
    dcur, dcorr = rs.derivative()
    # int L_j L_k = tau/(2k+1) delta_jk turns modes into moments
    mass_t = step.tau / (2 * np.arange(q + 1) + 1.0)
    fi = space.free_index
    up = X @ rs.prev[step.space_prev.free_index]
    res = np.empty((q + 1, len(fi)))
    terms = []
    for k in range(q + 1):
        cur_part = mass_t[k] * (M @ dcur[k, fi])
        prev_part = mass_t[k] * dcorr[k] * up
        a_part = mass_t[k] * (A @ u.block(n)[k, fi])
        res[k] = cur_part + prev_part + a_part - load[k, fi]
        terms.append(max(np.abs(cur_part).max(), np.abs(prev_part).max(), np.abs(a_part).max()))
    # relative to the largest single term: for tiny tau the two time parts
    # are large and cancel, while the load is O(tau)
    scale = max(np.abs(load[:, fi]).max(), max(terms))
    if scale == 0.0:
        return float(np.abs(res).max())
    return float(np.abs(res).max() / scale)


def pointwise_identity_residuals(step, u, Iu, projections, vertices=None, times=None):
    """Relative residuals of the pointwise identity for many interior vertices.

    For each vertex ``a`` this is the max over Gauss times of
    ``|(d_t I u, psi_a) + (grad u, grad psi_a) - (Pi_a f, psi_a)|`` divided by
    the largest of the three terms.  ``projections`` is indexed by vertex and
    holds :class:`~parabolic_eqflux.flux.PatchProjection` objects.
    """
    coarse = step.coarse
    if vertices is None:
        vertices = np.nonzero(~coarse.boundary_vertices)[0]
    vertices = np.asarray(vertices, dtype=int)
    if coarse.boundary_vertices[vertices].any():
        raise ValueError("pointwise identity holds only for interior vertices")
    n = step.n
    tc, tp = step.tab_cur, step.tab_prev
    rs = Iu[n]
    dcur, dcorr = rs.derivative()
    vc, _ = tc.evaluate(dcur)
    vp, _ = tp.evaluate(rs.prev)
    dIu = vc + dcorr[:, None, None] * vp[None]
    _, gu = tc.evaluate(u.block(n))
    if times is None:
        times = step.time_rule[0]
    L, _ = legendre_table(step.partition.to_reference(n, np.asarray(times)), step.q)
    out = np.empty(len(vertices))
    for i, a in enumerate(vertices):
        pr = projections[a]
        cells = pr.patch.cells
        w = tc.weights[cells]
        t1 = L @ np.einsum("cq,kcq,cq->k", w, dIu[:, cells], pr.psi)
        t2 = L @ np.einsum("cq,kcqd,cqd->k", w, gu[:, cells], pr.dpsi)
        t3 = L @ np.einsum("cq,kcq,cq->k", w, pr.values, pr.psi)
        worst = np.abs(t1 + t2 - t3).max()
        scale = max(np.abs(t1).max(), np.abs(t2).max(), np.abs(t3).max())
        out[i] = worst / scale if scale > 0 else worst
    return out


def pointwise_identity_check(step, vertex, u, Iu, projection, times=None):
    """:func:`pointwise_identity_residuals` of a single interior vertex."""
    return float(pointwise_identity_residuals(step, u, Iu, {vertex: projection}, [vertex], times)[0])
