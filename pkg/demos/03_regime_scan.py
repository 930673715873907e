"""Effectivity and flux-estimator efficiency across the (h, tau) plane.

The upper bound holds in every cell.  The lower bound for the flux estimator
needs ``h_omega^2 <= gamma tau``; cells meeting it are marked with ``*``.
"""
import numpy as np

from parabolic_eqflux.experiments import run_regime_scan

LEVELS = (1, 2, 3, 4)
STEPS = (2, 4, 8, 16)


def main(gamma=4.0):
    rows = run_regime_scan("S1", levels=LEVELS, steps=STEPS, T=0.5, gamma=gamma)
    eff = np.array([r["effectivity"] for r in rows]).reshape(len(LEVELS), len(STEPS))
    ratio = np.array([r["global_efficiency_ratio"] for r in rows]).reshape(eff.shape)
    flag = np.array([r["condition"] for r in rows]).reshape(eff.shape)
    h = [rows[i * len(STEPS)]["h"] for i in range(len(LEVELS))]
    tau = [rows[j]["tau"] for j in range(len(STEPS))]

    print("effectivity (rows: h, columns: tau)")
    print(" " * 8 + "".join(f"{t:>10.4f}" for t in tau))
    for i in range(len(LEVELS)):
        print(f"{h[i]:8.4f}" + "".join(f"{eff[i, j]:10.4f}" for j in range(len(STEPS))))
    print(f"\nefficiency ratio sum eta_F^2 / (...), '*' where h_omega^2 <= {gamma} tau")
    for i in range(len(LEVELS)):
        cells = "".join(f"{ratio[i, j]:9.4f}{'*' if flag[i, j] else ' '}" for j in range(len(STEPS)))
        print(f"{h[i]:8.4f}" + cells)


if __name__ == "__main__":
    main()
