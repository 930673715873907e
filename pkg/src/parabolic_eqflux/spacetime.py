"""Space-time discrete spaces ``V_htau`` and their time-step bookkeeping."""
from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse.linalg as spla

from .fespace import FESpace, assemble_load, assemble_mass, restrict
from .mesh import MeshHierarchy
from .temporal import TimePartition, gauss_points, legendre_table

__all__ = ["Discretization", "Step", "SpaceTimeFunction", "load_samples"]


class Step:
    """Everything attached to one time interval ``I_n``.

    The common refinement ``mesh`` hosts the jump and all patch problems;
    ``rule_degree`` and ``time_rule`` are the quadrature shared by the load
    vector and the data projection, which keeps the two consistent.
    """

    def __init__(self, disc: "Discretization", n):
        self.n = n
        self.partition = disc.partition
        self.interval = disc.partition.interval(n)
        self.tau = disc.partition.tau(n)
        self.q = disc.partition.q(n)
        self.mesh, self.parent_prev, self.parent_cur = disc.hierarchy.common(n)
        self.coarse = disc.hierarchy[n]
        self.space_prev = disc.spaces[n - 1]
        self.space_cur = disc.spaces[n]
        self.degrees = np.maximum(
            self.space_prev.degrees[self.parent_prev], self.space_cur.degrees[self.parent_cur]
        )
        self.rule_degree = 2 * (int(self.degrees.max()) + 1) + 2

    @cached_property
    def time_rule(self):
        """Gauss times, weights and Legendre values ``L_k(t_m)`` (m, q+2)."""
        t, w = gauss_points(self.interval, self.q + 3)
        L, _ = legendre_table(self.partition.to_reference(self.n, t), self.q + 1)
        return t, w, L

    def time_rule_enriched(self, extra=0):
        t, w = gauss_points(self.interval, 2 * (self.q + 2) + extra)
        L, _ = legendre_table(self.partition.to_reference(self.n, t), self.q + 1)
        return t, w, L

    @property
    def tab_cur(self):
        return self.space_cur.tabulate_on(self.mesh, self.parent_cur, self.rule_degree)

    @property
    def tab_prev(self):
        return self.space_prev.tabulate_on(self.mesh, self.parent_prev, self.rule_degree)

    @cached_property
    def tilde_space(self):
        """``V_h`` on the common refinement with degrees covering both steps."""
        return FESpace(self.mesh, self.degrees)


class Discretization:
    """Meshes, degrees and spaces ``V^0..V^N`` over a time partition."""

    def __init__(self, hierarchy: MeshHierarchy, partition: TimePartition, degree=1, spaces=None):
        if hierarchy.num_steps != partition.num_steps:
            raise ValueError("hierarchy and partition disagree on the number of steps")
        self.hierarchy = hierarchy
        self.partition = partition
        if spaces is not None:
            if len(spaces) != len(hierarchy.meshes) or any(
                sp.mesh != m for sp, m in zip(spaces, hierarchy.meshes)
            ):
                raise ValueError("one space per mesh of the hierarchy required")
            self.spaces = list(spaces)
            self._steps = {}
            return
        if callable(degree):
            degs = [degree(m) for m in hierarchy.meshes]
        elif np.isscalar(degree):
            degs = [degree] * len(hierarchy.meshes)
        else:
            degs = list(degree)
        spaces = []
        for m, d in zip(hierarchy.meshes, degs):
            if spaces and m == spaces[-1].mesh and np.array_equal(
                np.broadcast_to(d, (m.num_cells,)), spaces[-1].degrees
            ):
                spaces.append(spaces[-1])
            else:
                spaces.append(FESpace(m, d))
        self.spaces = spaces
        self._steps = {}

    @property
    def num_steps(self):
        return self.partition.num_steps

    def step(self, n) -> Step:
        s = self._steps.get(n)
        if s is None:
            s = self._steps[n] = Step(self, n)
        return s

    def steps(self):
        for n in range(1, self.num_steps + 1):
            yield self.step(n)


def load_samples(step: Step, f, times):
    """Samples of ``f(x, t)`` at the step rule points, shape (m, E, Q)."""
    x = step.tab_cur.points
    return np.stack([np.broadcast_to(f(x, t), x.shape[:2]) for t in times])


class SpaceTimeFunction:
    """Element of ``V_htau``: Legendre modes per step plus an initial value.

    ``modes[n - 1]`` has shape (q_n + 1, ndof(V^n)) in full numbering.
    Values are left-continuous at the nodes.
    """

    def __init__(self, disc: Discretization, initial, modes):
        self.disc = disc
        self.initial = np.asarray(initial, dtype=float)
        self.modes = [np.asarray(m, dtype=float) for m in modes]
        if len(self.modes) != disc.num_steps:
            raise ValueError("one mode block per step required")
        for n, m in enumerate(self.modes, start=1):
            q = disc.partition.q(n)
            if m.shape != (q + 1, disc.spaces[n].ndof):
                raise ValueError(f"step {n}: expected modes of shape {(q + 1, disc.spaces[n].ndof)}")

    @property
    def partition(self):
        return self.disc.partition

    def block(self, n):
        return self.modes[n - 1]

    def trace(self, n, side="left"):
        """Coefficients of ``v(t_n)`` (left) or ``v(t_n^+)`` (right)."""
        N = self.disc.num_steps
        if side == "left":
            if not 0 <= n <= N:
                raise IndexError(f"left trace index {n} out of range")
            return self.initial if n == 0 else self.modes[n - 1].sum(axis=0)
        if side == "right":
            if not 0 <= n <= N - 1:
                raise IndexError(f"right trace index {n} out of range")
            m = self.modes[n]
            sign = (-1.0) ** np.arange(m.shape[0])
            return sign @ m
        raise ValueError("side must be 'left' or 'right'")

    def space(self, n):
        return self.disc.spaces[n]

    def jump(self, n):
        """``[[v]]_n = v(t_n) - v(t_n^+)`` as coefficients on ``V~^{n+1}``.

        Both traces are transferred exactly by an L2 solve on the common
        refinement (the two spaces are nested in it); when both steps share
        one space the coefficients are subtracted directly.
        """
        step = self.disc.step(n + 1)
        left, right = self.trace(n, "left"), self.trace(n, "right")
        if step.space_prev is step.space_cur:
            return step.space_cur, left - right
        target = step.tilde_space
        deg = 2 * target.max_degree
        tt = target.tabulate_on(degree=deg)
        tp = step.space_prev.tabulate_on(step.mesh, step.parent_prev, deg)
        tc = step.space_cur.tabulate_on(step.mesh, step.parent_cur, deg)
        vals = tp.evaluate(left)[0] - tc.evaluate(right)[0]
        b = assemble_load(target, vals, tt)
        M = restrict(assemble_mass(target), target)
        c = np.zeros(target.ndof)
        if target.dim:
            c[target.free_index] = spla.splu(M.tocsc()).solve(b[target.free_index])
        return target, c

    def values_at(self, n, t, tab):
        """Values and gradients at time ``t`` in step ``n`` on a tabulation of V^n."""
        ref = self.partition.to_reference(n, t)
        L, _ = legendre_table(ref, self.modes[n - 1].shape[0] - 1)
        return tab.evaluate(L @ self.modes[n - 1])
