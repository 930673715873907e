"""Convergence of error and estimator with tau tied to h.

For P1/dG(0) and P2/dG(1) the X-norm error should drop like h^p while the
effectivity index stays bounded and close to one.
"""
from parabolic_eqflux.experiments import loglog_slope, run_convergence


def table(p, q, levels=4):
    rows, _ = run_convergence("S1", levels=levels, p=p, q=q, coupling="tau~h", T=0.5, start_level=2)
    print(f"\np = {p}, q = {q}")
    print(f"{'h':>8} {'tau':>8} {'error_X':>10} {'eta_X':>10} {'eff':>7} {'order':>6}")
    for r in rows:
        print(f"{r['h']:8.4f} {r['tau']:8.4f} {r['error_X']:10.3e} {r['eta_X']:10.3e} "
              f"{r['effectivity']:7.4f} {r['order']:6.3f}")
    hs = [r["h"] for r in rows]
    print(f"fitted order {loglog_slope(hs, [r['error_X'] for r in rows]):.3f}, "
          f"effectivity slope {loglog_slope(hs, [r['effectivity'] for r in rows]):+.3f}")


if __name__ == "__main__":
    table(1, 0)
    table(2, 1, levels=3)
