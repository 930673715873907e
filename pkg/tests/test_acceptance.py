"""End-to-end acceptance criteria.

Every test prints one ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -s`` or in the captured output of a failure) before asserting.
"""
import numpy as np
import pytest

from parabolic_eqflux import experiments as ex
from parabolic_eqflux.estimators import eta_J
from parabolic_eqflux.flux import verify_equilibration
from parabolic_eqflux.mesh import conformity_defects
from parabolic_eqflux.problems import S4_WIDTH, get_problem
from parabolic_eqflux.solver import pointwise_identity_residuals, reconstruct, solve
from parabolic_eqflux.spacetime import Discretization
from parabolic_eqflux.temporal import TimePartition

from conftest import changing_hierarchy
from test_flux import competitor_probe, kkt_cases, kkt_oracle_gap
from test_solver import backward_euler_gap

# tolerances pinned by the acceptance criteria
EQUILIBRATION_TOL = 1e-10
DELTA_QUAD_REL = 1e-6
JUMP_TOL = 1e-12
POINTWISE_TOL = 1e-11
COMPAT_TOL = 1e-11
BE_TOL = 1e-12
KKT_TOL = 1e-11
ORDER_TOL = 0.2
EFFECTIVITY_SLOPE_TOL = 0.1
EFFICIENCY_SLOPE_TOL = 0.2
GAMMA = 4.0


def report(number, ok, detail):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def convergence():
    """S1 with tau ~ h on levels 2..5 for (p, q) = (1, 0) and (2, 1)."""
    out = {}
    for p, q in [(1, 0), (2, 1)]:
        out[p, q] = ex.run_convergence(
            "S1", levels=4, p=p, q=q, coupling="tau~h", T=0.5, start_level=2,
            local_osc=(p, q) == (1, 0), gamma=GAMMA,
        )
    return out


@pytest.fixture(scope="module")
def extra_suite():
    """The remaining suite problems on uniform meshes."""
    runs = {
        "S2 p2 q2": ex.run_problem("S2", ex.uniform_discretization(3, 2, 2, 0.5, 4)),
        "S2 p3 q3": ex.run_problem("S2", ex.uniform_discretization(2, 3, 3, 0.5, 3)),
        "S3 p4 q1": ex.run_problem("S3", ex.uniform_discretization(2, 4, 1, 0.5, 2)),
        "S4 p1 q0": ex.run_problem("S4", ex.uniform_discretization(4, 1, 0, 1.0, 8)),
    }
    return runs


@pytest.fixture(scope="module")
def adaptive():
    return ex.run_adaptive("S4", theta=0.5, steps=12, p=1, q=0, T=1.0, base_level=3, max_depth=4)


@pytest.fixture(scope="module")
def suite(convergence, extra_suite):
    runs = dict(extra_suite)
    for (p, q), (_, results) in convergence.items():
        for res in results:
            runs[f"S1 p{p} q{q} N{res.disc.num_steps}"] = res
    return runs


def _max_over_steps(res, fn):
    return max(fn(step, eq) for step, eq in zip(res.disc.steps(), res.equilibrations))


def _pointwise(res):
    def one(step, eq):
        return float(pointwise_identity_residuals(step, res.u, res.Iu, eq.projections).max())
    return _max_over_steps(res, one)


def _jump_identity(res):
    def one(step, eq):
        s = res.report.steps[step.n - 1]
        scale = max(s.eta_J.max(), s.eta_J_closed.max())
        return float(np.abs(s.eta_J - s.eta_J_closed).max() / scale) if scale > 0 else 0.0
    return _max_over_steps(res, one)


def _battery(res):
    """Values entering criteria 1-5 for one run."""
    r = res.report
    return {
        "equilibration": _max_over_steps(res, lambda s, eq: verify_equilibration(eq)),
        "upper": r.effectivity is None or r.effectivity >= 1.0 - r.delta_quad / r.error_u,
        "corollary": r.E_X is None or r.E_X <= 2 * r.eta_X + r.delta_quad,
        "jump": _jump_identity(res),
        "pointwise": _pointwise(res),
        "compat": _max_over_steps(res, lambda s, eq: eq.compatibility()),
    }


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_equilibration(suite, adaptive):
    runs = dict(suite, adaptive=adaptive)
    worst = {name: _max_over_steps(res, lambda s, eq: verify_equilibration(eq)) for name, res in runs.items()}
    name = max(worst, key=worst.get)
    report(1, worst[name] <= EQUILIBRATION_TOL,
           f"max relative residual {worst[name]:.2e} ({name}) over {len(runs)} runs, tol {EQUILIBRATION_TOL:.0e}")


def test_criterion_2_upper_bound(suite, adaptive):
    runs = dict(suite, adaptive=adaptive)
    bad, worst_eff, worst_delta = [], np.inf, 0.0
    for name, res in runs.items():
        r = res.report
        if not r.error_u:
            continue
        floor = 1.0 - r.delta_quad / r.error_u
        if r.effectivity < floor or r.E_X > 2 * r.eta_X + r.delta_quad:
            bad.append(name)
        worst_eff = min(worst_eff, r.effectivity)
        if name.startswith(("S1", "S2")):
            worst_delta = max(worst_delta, r.delta_quad / r.error_u)
    ok = not bad and worst_delta <= DELTA_QUAD_REL
    report(2, ok, f"min effectivity {worst_eff:.4f}, max smooth delta_quad/error {worst_delta:.1e} "
                  f"(tol {DELTA_QUAD_REL:.0e}), violations {bad}")


@pytest.mark.parametrize("q", [0, 1, 2, 3])
def test_criterion_3_jump_identity(q):
    hier = changing_hierarchy(level=2, steps=4, seed=10 + q)
    disc = Discretization(hier, TimePartition.uniform(0.4, 4, q), 2)
    u = solve(disc, get_problem("S2").f, get_problem("S2").u0)
    Iu = reconstruct(u)
    worst = 0.0
    for step in disc.steps():
        integral, closed = eta_J(step, u, Iu)
        worst = max(worst, float(np.abs(integral - closed).max() / closed.max()))
    report(3, worst <= JUMP_TOL, f"q={q}: max relative gap {worst:.2e}, tol {JUMP_TOL:.0e}")


def test_criterion_3_jump_identity_on_suite(suite):
    worst = max(_jump_identity(res) for res in suite.values())
    qs = sorted({res.disc.partition.q(1) for res in suite.values()})
    report(3, worst <= JUMP_TOL and qs == [0, 1, 2, 3],
           f"suite q={qs}: max relative gap {worst:.2e}, tol {JUMP_TOL:.0e}")


def test_criterion_4_pointwise_identity(suite):
    worst = {name: _pointwise(res) for name, res in suite.items()}
    name = max(worst, key=worst.get)
    problems = sorted({n.split()[0] for n in suite})
    report(4, worst[name] <= POINTWISE_TOL,
           f"max relative residual {worst[name]:.2e} ({name}), problems {problems}, tol {POINTWISE_TOL:.0e}")


def test_criterion_5_compatibility(suite, adaptive):
    runs = dict(suite, adaptive=adaptive)
    worst = max(_max_over_steps(res, lambda s, eq: eq.compatibility()) for res in runs.values())
    report(5, worst <= COMPAT_TOL, f"max relative patch mean {worst:.2e}, tol {COMPAT_TOL:.0e}")


def test_criterion_6_oracles():
    be = max(backward_euler_gap(p) for p in (1, 2))
    gaps = [kkt_oracle_gap(*case.values) for case in kkt_cases()]
    kkt = max(max(g) for g in gaps)
    best, reported, others, div_gap, _ = competitor_probe(100)
    beaten = int(np.sum(others >= best * (1 - 1e-13)))
    ok = be <= BE_TOL and kkt <= KKT_TOL and len(gaps) == 20 and beaten == 100
    report(6, ok, f"backward Euler gap {be:.1e}; KKT oracle gap {kkt:.1e} on {len(gaps)} patches; "
                  f"minimizer beats {beaten}/100 competitors (best {best:.6e}, "
                  f"closest {others.min():.6e})")


@pytest.mark.parametrize("p,q", [(1, 0), (2, 1)])
def test_criterion_7_convergence(convergence, p, q):
    rows, _ = convergence[p, q]
    hs = [r["h"] for r in rows]
    orders = ex.observed_orders(hs, [r["error_X"] for r in rows])
    fit = ex.loglog_slope(hs, [r["error_X"] for r in rows])
    eff_slope = ex.loglog_slope(hs, [r["effectivity"] for r in rows])
    ok = abs(orders[-1] - p) <= ORDER_TOL and abs(fit - p) <= ORDER_TOL and abs(eff_slope) <= EFFECTIVITY_SLOPE_TOL
    report(7, ok, f"(p,q)=({p},{q}): orders {np.round(orders, 3).tolist()}, fit {fit:.3f}; "
                  f"effectivities {[round(r['effectivity'], 4) for r in rows]}, slope {eff_slope:+.3f}")


def test_criterion_8_efficiency(convergence):
    rows, results = convergence[1, 0]
    cells = [(r["h"], r["global_efficiency_ratio"]) for r, res in zip(rows, results)
             if r["gamma_max"] <= GAMMA * (1 + 1e-12)]
    hs, ratios = zip(*cells)
    slope = ex.loglog_slope(hs, ratios)
    ok = len(cells) >= 4 and abs(slope) <= EFFICIENCY_SLOPE_TOL
    report(8, ok, f"{len(cells)} condition cells (gamma <= {GAMMA}); ratios {np.round(ratios, 4).tolist()}, "
                  f"log-slope {slope:+.3f}, tol {EFFICIENCY_SLOPE_TOL}")


def test_criterion_9_adaptive_robustness(adaptive):
    res = adaptive
    hist = res.stats["adaptive"]
    meshes = res.disc.hierarchy.meshes
    refined = sum(h["marked"] > 0 for h in hist)
    coarsened = sum(h["merged"] > 0 for h in hist)
    vals = _battery(res)
    conform = sum(conformity_defects(m) for m in meshes)
    radius = 3 * S4_WIDTH
    tracked = max(h["distance"] for h in hist)
    ok = (
        vals["equilibration"] <= EQUILIBRATION_TOL
        and vals["upper"] and vals["corollary"]
        and vals["jump"] <= JUMP_TOL
        and vals["pointwise"] <= POINTWISE_TOL
        and vals["compat"] <= COMPAT_TOL
        and conform == 0
        and refined == len(hist) and coarsened >= len(hist) // 2
        and tracked <= radius
    )
    report(9, ok, f"{len(hist)} steps ({refined} with refinement, {coarsened} with coarsening); "
                  f"equilibration {vals['equilibration']:.1e}, jump {vals['jump']:.1e}, "
                  f"pointwise {vals['pointwise']:.1e}, compatibility {vals['compat']:.1e}, "
                  f"upper bound {vals['upper']}, corollary {vals['corollary']}; "
                  f"refined centroid within {tracked:.3f} of the source (radius {radius:.2f})")
