"""Command-line entry point: ``solve``, ``convergence``, ``scan`` and ``adaptive``.

Every subcommand writes a CSV table and a JSON summary into ``--out``
(default: current directory).  With ``--verify`` the invariant battery is
run on every solve and the exit status is 1 if any check fails.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import experiments as ex
from .flux import write_kkt_residuals

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2


def _common(p):
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--verify", action="store_true", help="run the invariant battery")
    p.add_argument("--kkt-csv", default="", help="write per-patch KKT residuals here")
    p.add_argument("--quiet", action="store_true")


def _degrees(p):
    p.add_argument("--p", type=int, default=1, help="spatial degree")
    p.add_argument("--q", type=int, default=0, help="temporal degree")
    p.add_argument("--T", type=float, default=0.5, help="final time")


def build_parser():
    ap = argparse.ArgumentParser(prog="parabolic-eqflux", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="single run described by a key = value config file")
    s.add_argument("--config", required=True)
    _common(s)

    c = sub.add_parser("convergence", help="uniform refinement study with tau tied to h")
    c.add_argument("--problem", default="S1")
    c.add_argument("--levels", type=int, default=4)
    c.add_argument("--start-level", type=int, default=2)
    c.add_argument("--coupling", default="tau~h", choices=["tau~h", "tau~h2"])
    c.add_argument("--tau-factor", type=float, default=0.5)
    c.add_argument("--local-osc", action="store_true", help="also compute local oscillations")
    _degrees(c)
    _common(c)

    g = sub.add_parser("scan", help="grid of mesh sizes and time steps")
    g.add_argument("--problem", default="S1")
    g.add_argument("--hmin", type=float, required=True)
    g.add_argument("--hmax", type=float, required=True)
    g.add_argument("--taumin", type=float, required=True)
    g.add_argument("--taumax", type=float, required=True)
    g.add_argument("--gamma", type=float, default=4.0, help="bound in h_omega^2 <= gamma tau")
    _degrees(g)
    _common(g)

    a = sub.add_parser("adaptive", help="adaptive run with refinement and coarsening")
    a.add_argument("--problem", default="S4")
    a.add_argument("--theta", type=float, default=0.5)
    a.add_argument("--steps", type=int, default=8)
    a.add_argument("--level", type=int, default=2, help="uniform level of the initial mesh")
    a.add_argument("--max-depth", type=int, default=6)
    _degrees(a)
    a.set_defaults(T=1.0)
    _common(a)
    return ap


def scan_grid(hmin, hmax, taumin, taumax, T):
    """Uniform levels with ``hmin <= h <= hmax`` and step counts with
    ``taumin <= tau <= taumax`` (steps doubling)."""
    if not (0 < hmin <= hmax and 0 < taumin <= taumax):
        raise ValueError("need 0 < hmin <= hmax and 0 < taumin <= taumax")
    # unit_square(level) has diameter sqrt(2) / 2^level
    levels = [L for L in range(0, 8) if hmin * (1 - 1e-12) <= math.sqrt(2) / 2**L <= hmax * (1 + 1e-12)]
    steps = [N for N in (2**k for k in range(0, 12)) if taumin * (1 - 1e-12) <= T / N <= taumax * (1 + 1e-12)]
    if not levels or not steps:
        raise ValueError("the requested ranges contain no mesh level or no step count")
    return levels, steps


def _clean(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _rows(rows):
    return [{k: _clean(v) for k, v in r.items()} for r in rows]


def _verify(results, log):
    ok = True
    for i, res in enumerate(results):
        for chk in ex.verify_run(res):
            ok &= chk.ok
            if not chk.ok or log:
                print(f"[run {i}] {chk.line()}", file=sys.stderr if not chk.ok else sys.stdout)
    return ok


def _write(out, name, rows, summary):
    os.makedirs(out, exist_ok=True)
    ex.write_rows(os.path.join(out, f"{name}.csv"), _rows(rows))
    with open(os.path.join(out, f"{name}.json"), "w") as fh:
        json.dump(_rows([summary])[0], fh, indent=2, sort_keys=True, default=str)


def _summary(results, extra=None):
    rep = results[-1].report
    data = rep.summary()
    data["meta"] = dict(rep.meta)
    data.update(extra or {})
    return data


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        rows, results, extra, name = _dispatch(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        for r in _rows(rows):
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    _write(args.out, name, rows, _summary(results, extra))
    if name in ("solve", "adaptive"):
        results[-1].report.write_csv(os.path.join(args.out, f"{name}_estimators.csv"))
    if args.kkt_csv:
        write_kkt_residuals(args.kkt_csv, [eq for res in results for eq in res.equilibrations])
    if args.verify and not _verify(results, not args.quiet):
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def _dispatch(args):
    if args.command == "solve":
        cfg = ex.parse_config(args.config)
        if cfg.mode == "scan":
            raise ValueError("use the scan subcommand for regime scans")
        rows, results = ex.config_runs(cfg)
        return rows, results, {"config_hash": cfg.digest(), "mode": cfg.mode}, "solve"
    if args.command == "convergence":
        rows, results = ex.run_convergence(
            args.problem, args.levels, args.p, args.q, args.coupling, args.T,
            args.start_level, args.tau_factor, args.local_osc,
        )
        hs = [r["h"] for r in rows]
        extra = {
            "order_fit": ex.loglog_slope(hs, [r["error_X"] for r in rows]),
            "effectivity_slope": ex.loglog_slope(hs, [r["effectivity"] for r in rows]),
        }
        return rows, results, extra, "convergence"
    if args.command == "scan":
        levels, steps = scan_grid(args.hmin, args.hmax, args.taumin, args.taumax, args.T)
        rows, results = ex.run_regime_scan(args.problem, levels, steps, args.p, args.q, args.T,
                                           args.gamma, keep=True)
        return rows, results, {"levels": levels, "steps": steps}, "scan"
    if args.command == "adaptive":
        res = ex.run_adaptive(args.problem, args.theta, args.steps, args.p, args.q, args.T,
                              args.level, args.max_depth)
        hist = res.stats.get("adaptive", [])
        os.makedirs(args.out, exist_ok=True)
        flat = [{k: v for k, v in h.items() if not isinstance(v, list)} for h in hist]
        ex.write_rows(os.path.join(args.out, "adaptive_history.csv"), flat)
        return [res.row()], [res], {"history": hist}, "adaptive"
    raise ValueError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
