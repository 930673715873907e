"""Runs on the manufactured suite: single solves, convergence studies,
(h, tau) regime scans and adaptive refinement with coarsening."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import GAMMA_SLACK, EstimatorReport, estimate, eta_F, eta_J
from .fespace import FESpace, project_L2
from .flux import (
    equilibrate,
    equilibrate_step,
    normal_jump_audit,
    verify_equilibration,
)
from .mesh import MeshHierarchy, bisect, coarsen, conformity_defects, unit_square
from .problems import ManufacturedProblem, get_problem, s4_centre
from .solver import (
    pointwise_identity_residuals,
    reconstruct,
    solve,
    solve_step,
    step_load,
    verify_equivalent_form,
)
from .spacetime import Discretization, SpaceTimeFunction
from .temporal import TimePartition

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "RunResult",
    "Check",
    "TOLERANCES",
    "uniform_discretization",
    "run_problem",
    "verify_run",
    "run_convergence",
    "observed_orders",
    "loglog_slope",
    "run_regime_scan",
    "dorfler_mark",
    "run_adaptive",
    "write_rows",
]

TOLERANCES = {
    "conformity": 0,
    "equivalent_form": 1e-11,
    "pointwise_identity": 1e-11,
    "compatibility": 1e-11,
    "kkt_constraint": 1e-11,
    "kkt_optimality": 1e-11,
    "normal_jump": 1e-11,
    "equilibration": 1e-10,
    "jump_identity": 1e-12,
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Flat key-value run description; see :func:`parse_config`."""

    problem: str = "S1"
    mode: str = "solve"  # solve, convergence, scan, adaptive
    level: int = 2  # uniform refinement level of the unit square
    p: int = 1
    q: int = 0
    T: float = 0.5
    steps: int = 4
    levels: int = 4  # convergence: number of levels
    start_level: int = 1
    coupling: str = "tau~h"
    tau_factor: float = 0.5
    theta: float = 0.5
    max_depth: int = 6  # adaptive: extra bisections allowed beyond the base mesh
    coarsen_fraction: float = 0.1
    local_osc: bool = False
    gamma: float = 4.0
    output: str = ""
    kkt_csv: str = ""
    seed: int = 0

    def validate(self):
        get_problem(self.problem)
        if self.mode not in {"solve", "convergence", "scan", "adaptive"}:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.coupling not in {"tau~h", "tau~h2"}:
            raise ValueError("coupling must be 'tau~h' or 'tau~h2'")
        if not 1 <= self.p <= 4 or not 0 <= self.q <= 3:
            raise ValueError("degrees out of range")
        if self.mode == "adaptive" and not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.mode == "convergence" and self.levels < 3:
            raise ValueError("a convergence study needs at least 3 levels")
        return self

    def digest(self):
        items = sorted(dataclasses.asdict(self).items())
        text = "\n".join(f"{k}={v}" for k, v in items if k not in {"output", "kkt_csv"})
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(kind, text):
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config(source) -> ExperimentConfig:
    """Read ``key = value`` lines (``#`` starts a comment) into a config.

    ``source`` is a path or an iterable of lines.  Unknown keys are errors.
    """
    if isinstance(source, str):
        with open(source) as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for num, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {num}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {num}: unknown key {key!r}")
        values[key] = _coerce(types[key], val)
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------------------
# single runs and the invariant battery


@dataclass
class RunResult:
    problem: ManufacturedProblem
    disc: Discretization
    u: SpaceTimeFunction
    Iu: object
    equilibrations: list
    report: EstimatorReport
    wall: float
    stats: dict = field(default_factory=dict)

    @property
    def h(self):
        return max(m.diameters.max() for m in self.disc.hierarchy.meshes)

    @property
    def tau(self):
        return max(self.disc.partition.tau(n) for n in range(1, self.disc.num_steps + 1))

    def row(self):
        r = self.report
        return {
            "h": float(self.h),
            "tau": self.tau,
            "steps": self.disc.num_steps,
            "cells": max(m.num_cells for m in self.disc.hierarchy.meshes),
            "error_X": r.error_u,
            "error_IX": r.error_Iu,
            "E_X": r.E_X,
            "eta_X": r.eta_X,
            "effectivity": r.effectivity,
            "delta_quad": r.delta_quad,
            "gamma_max": r.gamma_max,
            "global_efficiency_ratio": r.global_efficiency_ratio,
        }


def uniform_discretization(level, p, q, T, steps):
    mesh = unit_square(level)
    return Discretization(MeshHierarchy.constant(mesh, steps), TimePartition.uniform(T, steps, q), p)


def run_problem(problem, disc, local_osc=False, gamma=None) -> RunResult:
    """Solve, reconstruct, equilibrate and estimate on a prepared discretization."""
    if isinstance(problem, str):
        problem = get_problem(problem)
    t0 = time.perf_counter()
    u = solve(disc, problem.f, problem.u0)
    Iu = reconstruct(u)
    eqs = equilibrate(u, Iu, problem.f)
    report = estimate(
        u, Iu, eqs, problem.f, problem.u0, problem.grad, local_osc=local_osc, gamma_bound=gamma
    )
    wall = time.perf_counter() - t0
    stats = {
        "dofs": [int(s.dim) for s in disc.spaces],
        "patches": int(sum(len(eq.patch_fluxes) for eq in eqs)),
    }
    return RunResult(problem, disc, u, Iu, eqs, report, wall, stats)


@dataclass
class Check:
    name: str
    value: float
    tol: float
    ok: bool

    def line(self):
        mark = "PASS" if self.ok else "FAIL"
        return f"{mark} {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def _jump_identity(result):
    worst = 0.0
    for step, s in zip(result.disc.steps(), result.report.steps):
        scale = max(s.eta_J.max(), s.eta_J_closed.max())
        if scale > 0:
            worst = max(worst, float(np.abs(s.eta_J - s.eta_J_closed).max() / scale))
    return worst


def verify_run(result: RunResult, tolerances=None):
    """Full invariant battery; returns a list of :class:`Check`."""
    tol = dict(TOLERANCES)
    tol.update(tolerances or {})
    disc, u, Iu, f = result.disc, result.u, result.Iu, result.problem.f
    vals = {k: 0.0 for k in tol}
    vals["conformity"] = float(sum(conformity_defects(m) for m in set(disc.hierarchy.meshes)))
    for step, eq in zip(disc.steps(), result.equilibrations):
        load = step_load(step, f)
        vals["equivalent_form"] = max(vals["equivalent_form"], verify_equivalent_form(step, u, Iu, load))
        if (~step.coarse.boundary_vertices).any():
            r = pointwise_identity_residuals(step, u, Iu, eq.projections).max()
            vals["pointwise_identity"] = max(vals["pointwise_identity"], float(r))
        vals["compatibility"] = max(vals["compatibility"], eq.compatibility())
        c, o = eq.kkt_residuals()
        vals["kkt_constraint"] = max(vals["kkt_constraint"], c)
        vals["kkt_optimality"] = max(vals["kkt_optimality"], o)
        vals["normal_jump"] = max(vals["normal_jump"], float(normal_jump_audit(eq.flux).max()))
        vals["equilibration"] = max(vals["equilibration"], verify_equilibration(eq))
    vals["jump_identity"] = _jump_identity(result)
    checks = [Check(k, vals[k], tol[k], vals[k] <= tol[k]) for k in tol]

    r = result.report
    agg = r.recompute_eta_X()
    checks.append(Check("aggregation", abs(agg - r.eta_X), 0.0, agg == r.eta_X))
    if r.error_u:
        d = r.delta_quad
        eff_floor = 1.0 - d / r.error_u
        checks.append(Check("upper_bound", max(0.0, eff_floor - r.effectivity), 0.0, r.effectivity >= eff_floor))
        ex = r.E_X - (2 * r.eta_X + d)
        checks.append(Check("corollary_bound", max(0.0, ex), 0.0, ex <= 0.0))
    return checks


# ---------------------------------------------------------------------------
# convergence and regime scans


def _steps_for(level, start_level, base_steps, coupling):
    k = level - start_level
    return base_steps * (2**k if coupling == "tau~h" else 4**k)


def _base_steps(T, h0, coupling, factor):
    tau0 = factor * (h0 if coupling == "tau~h" else h0 * h0)
    return max(1, int(round(T / tau0)))


def observed_orders(hs, errors):
    """Successive ``log(e_k / e_{k+1}) / log(h_k / h_{k+1})``."""
    hs, errors = np.asarray(hs, float), np.asarray(errors, float)
    return list(np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:]))


def loglog_slope(hs, values):
    """Least-squares slope of ``log(values)`` against ``log(hs)``."""
    return float(np.polyfit(np.log(hs), np.log(values), 1)[0])


def run_convergence(problem="S1", levels=4, p=1, q=0, coupling="tau~h", T=0.5, start_level=1,
                    tau_factor=0.5, local_osc=False, gamma=None, verify=False):
    """One run per level with ``tau`` tied to ``h``; returns (rows, results)."""
    if levels < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    if coupling not in {"tau~h", "tau~h2"}:
        raise ValueError("coupling must be 'tau~h' or 'tau~h2'")
    prob = get_problem(problem)
    h0 = unit_square(start_level).diameters.max()
    n0 = _base_steps(T, h0, coupling, tau_factor)
    rows, results = [], []
    for lev in range(start_level, start_level + levels):
        N = _steps_for(lev, start_level, n0, coupling)
        disc = uniform_discretization(lev, p, q, T, N)
        res = run_problem(prob, disc, local_osc=local_osc, gamma=gamma)
        row = {"level": lev, **res.row()}
        if verify:
            row["verified"] = all(c.ok for c in verify_run(res))
        rows.append(row)
        results.append(res)
    orders = observed_orders([r["h"] for r in rows], [r["error_X"] for r in rows])
    for r, o in zip(rows[1:], orders):
        r["order"] = o
    rows[0]["order"] = float("nan")
    return rows, results


def run_regime_scan(problem="S1", levels=(1, 2, 3, 4), steps=(2, 4, 8, 16), p=1, q=0, T=0.5,
                    gamma=4.0, local_osc=True, keep=False):
    """Every (level, steps) combination; flags cells with ``gamma_max <= gamma``.

    Returns the rows, or ``(rows, results)`` when ``keep`` is set.
    """
    prob = get_problem(problem)
    rows, results = [], []
    for lev in levels:
        for N in steps:
            res = run_problem(prob, uniform_discretization(lev, p, q, T, N), local_osc=local_osc, gamma=gamma)
            row = {"level": lev, **res.row()}
            row["condition"] = bool(res.report.gamma_max <= gamma * (1 + GAMMA_SLACK))
            rows.append(row)
            if keep:
                results.append(res)
    return (rows, results) if keep else rows


# ---------------------------------------------------------------------------
# adaptivity


def dorfler_mark(indicators, theta):
    """Smallest set with ``sum >= theta * total``; ties broken by element id."""
    ind = np.asarray(indicators, dtype=float)
    mark = np.zeros(len(ind), dtype=bool)
    if theta >= 1.0:
        mark[:] = True
        return mark
    total = ind.sum()
    if total <= 0.0:
        return mark
    order = np.lexsort((np.arange(len(ind)), -ind))
    cum = np.cumsum(ind[order])
    k = int(np.searchsorted(cum, theta * total, side="left")) + 1
    mark[order[: min(k, len(ind))]] = True
    return mark


def _local_indicators(prev_mesh, mesh, spaces, nodes, q, n, u_prev, f):
    """Solve step ``n`` on the pair (prev_mesh, mesh) and return the indicators."""
    t0 = nodes[n - 1]

    def g(x, t):
        return f(x, t + t0)

    hier = MeshHierarchy([prev_mesh, mesh])
    part = TimePartition((0.0, nodes[n] - t0), (q,))
    disc = Discretization(hier, part, spaces=[spaces(prev_mesh), spaces(mesh)])
    step = disc.step(1)
    block = solve_step(step, u_prev, step_load(step, g))
    u = SpaceTimeFunction(disc, u_prev, [block])
    Iu = reconstruct(u)
    eq = equilibrate_step(step, u, Iu, g)
    eJ, _ = eta_J(step, u, Iu)
    return eta_F(eq) ** 2 + eJ**2, block.sum(axis=0)


def run_adaptive(problem="S4", theta=0.5, steps=8, p=1, q=0, T=1.0, base_level=2, max_depth=6,
                 coarsen_fraction=0.1, local_osc=False, gamma=None):
    """Adapt the mesh of every step once, then solve and estimate on the result.

    For each step the solution on the previous mesh drives Dorfler marking
    of ``eta_F^2 + eta_J^2``; marked cells are bisected and cells whose
    indicator is below ``coarsen_fraction`` times the mean are coarsened.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    prob = get_problem(problem)
    root = unit_square(base_level)
    forest = root.forest
    base_depth = int(max(forest.level[k] for k in root.nodes))
    cache = {}

    def spaces(mesh):
        key = mesh.key
        if key not in cache:
            cache[key] = FESpace(mesh, p)
        return cache[key]

    nodes = [float(t) for t in np.linspace(0.0, T, steps + 1)]
    meshes = [root]
    u_prev = project_L2(spaces(root), prob.u0)
    history = []
    for n in range(1, steps + 1):
        cand = meshes[-1]
        ind, _ = _local_indicators(meshes[-1], cand, spaces, nodes, q, n, u_prev, prob.f)
        depth = np.array([forest.level[k] for k in cand.nodes])
        mark = dorfler_mark(ind, theta) & (depth < base_depth + max_depth)
        refined = bisect(cand, mark)
        parent = refined.parent_map(cand)
        low = (ind < coarsen_fraction * ind.mean()) & ~mark
        new = coarsen(refined, low[parent])
        meshes.append(new)
        _, u_prev = _local_indicators(meshes[-2], new, spaces, nodes, q, n, u_prev, prob.f)
        merged = refined.num_cells - new.num_cells
        history.append(_adapt_record(new, base_depth, n, nodes[n], prob, mark.sum(), merged))
    disc = Discretization(MeshHierarchy(meshes), TimePartition(tuple(nodes), (q,) * steps),
                          spaces=[spaces(m) for m in meshes])
    res = run_problem(prob, disc, local_osc=local_osc, gamma=gamma)
    res.stats["adaptive"] = history
    return res


def _adapt_record(mesh, base_depth, n, t, prob, marked, merged):
    depth = np.array([mesh.forest.level[k] for k in mesh.nodes])
    fine = depth > base_depth
    rec = {"step": n, "t": float(t), "cells": mesh.num_cells, "marked": int(marked),
           "merged": int(merged), "max_depth": int(depth.max() - base_depth)}
    if fine.any():
        w = mesh.areas[fine]
        centroid = (mesh.cell_points[fine].mean(axis=1) * w[:, None]).sum(axis=0) / w.sum()
        rec["refined_centroid"] = centroid.tolist()
        if prob.name == "S4":
            rec["source_centre"] = s4_centre(t).tolist()
            rec["distance"] = float(np.linalg.norm(centroid - s4_centre(t)))
    return rec


def write_rows(path, rows):
    """CSV with the union of the row keys as columns (first-seen order)."""
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def config_runs(cfg: ExperimentConfig):
    """Dispatch a config to the matching study; returns (rows, results)."""
    if cfg.mode == "solve":
        res = run_problem(cfg.problem, uniform_discretization(cfg.level, cfg.p, cfg.q, cfg.T, cfg.steps),
                          local_osc=cfg.local_osc, gamma=cfg.gamma)
        return [{"level": cfg.level, **res.row()}], [res]
    if cfg.mode == "convergence":
        return run_convergence(cfg.problem, cfg.levels, cfg.p, cfg.q, cfg.coupling, cfg.T,
                               cfg.start_level, cfg.tau_factor, cfg.local_osc, cfg.gamma)
    if cfg.mode == "adaptive":
        res = run_adaptive(cfg.problem, cfg.theta, cfg.steps, cfg.p, cfg.q, cfg.T, cfg.level,
                           cfg.max_depth, cfg.coarsen_fraction, cfg.local_osc, cfg.gamma)
        return [{"level": cfg.level, **res.row()}], [res]
    raise ValueError("scan runs take their grid from the command line")

