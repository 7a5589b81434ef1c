"""Command-line entry point.

Every subcommand reads an optional YAML experiment file, applies the
command-line overrides and writes ``<out>.csv`` and ``<out>.json``.

Exit codes: 0 success, 2 infeasible scenario, 1 any other error.
"""
from __future__ import annotations

import argparse
import logging
import sys as _sys


from .experiments import (SCHEMES, ExperimentConfig, ResultTable, emit, load_config, run_convergence,
                          run_sweep, summary_table)
from .kernels import InfeasibleError, IterationLimitError
from .multi import solve_multi_bd
from .region import trace_boundary
from .single import solve_single_bd
from .system import bd_rates, energies, lu_throughput

log = logging.getLogger("fabcn")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fabcn", description="Resource allocation experiments for "
                                "full-duplex ambient backscatter OFDM networks.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file (defaults to the built-in two-device setup)")
    common.add_argument("--seed", type=int, help="channel seed")
    common.add_argument("--out", help="output prefix; writes <out>.csv and <out>.json")
    common.add_argument("--scheme", action="append", choices=SCHEMES,
                        help="scheme to run (repeatable; sweep and bench only)")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--realizations", type=int, dest="n_realizations", help="channel realizations")
    common.add_argument("--realization", type=int, default=0,
                        help="realization index for single-instance commands")
    common.add_argument("--snr-db", type=float, dest="snr_db", help="target receive SNR (dB)")
    common.add_argument("--bandwidth", type=float, dest="bandwidth_hz",
                        help="bandwidth in Hz; adds bit/s columns to sweep summaries")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, text in [("single-bd", "optimal power allocation for one device"),
                       ("multi-bd", "max-min allocation for all devices"),
                       ("region", "throughput region boundary (two devices)"),
                       ("bench", "compare schemes over channel realizations"),
                       ("sweep", "scheme comparison along a swept parameter"),
                       ("converge", "average objective per outer iteration")]:
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "region":
            sp.add_argument("--points", type=int, dest="n_points", help="number of boundary points")
    return p


def _config(args) -> ExperimentConfig:
    over = {k: getattr(args, k, None) for k in ("seed", "out", "workers", "n_realizations", "snr_db",
                                                "bandwidth_hz", "n_points")}
    if args.scheme:
        over["schemes"] = list(dict.fromkeys(args.scheme))
    if args.config:
        return load_config(args.config, over)
    base = ExperimentConfig().to_dict()
    base.update({k: v for k, v in over.items() if v is not None})
    return ExperimentConfig.from_dict(base)


def _single(cfg: ExperimentConfig, r: int) -> ResultTable:
    sys, ch = cfg.instance(cfg.points()[0], r)
    sol = solve_single_bd(ch, sys)
    rows = [{"k": k, "bs_gain": float(ch.bs_gain[0, k]), "power": float(sol.p[k])} for k in range(sys.N)]
    meta = {"config": cfg.to_dict(), "realization": r, "solution": sol.to_dict()}
    return ResultTable("single_bd", ["k", "bs_gain", "power"], rows, meta)


def _multi(cfg: ExperimentConfig, r: int) -> ResultTable:
    sys, ch = cfg.instance(cfg.points()[0], r)
    st = solve_multi_bd(ch, sys)
    a = st.alloc
    R, E = bd_rates(a, ch, sys), energies(a, ch, sys)
    rows = [{"device": m + 1, "tau": float(a.tau[m]), "alpha": float(a.alpha[m]), "rate": float(R[m]),
             "energy_uJ": float(E[m]) * 1e6} for m in range(sys.M)]
    meta = {"config": cfg.to_dict(), "realization": r, "Q": st.Q, "iterations": st.iter,
            "status": st.status, "trace": st.trace, "lu_rate": lu_throughput(a, ch, sys),
            "alloc": a.to_dict()}
    return ResultTable("multi_bd", ["device", "tau", "alpha", "rate", "energy_uJ"], rows, meta)


def _region(cfg: ExperimentConfig, r: int) -> ResultTable:
    sys, ch = cfg.instance(cfg.points()[0], r)
    b = trace_boundary(cfg.n_points, ch, sys)
    if not b.ok_points():
        raise InfeasibleError("no boundary point is feasible")
    M = sys.M
    cols = ["psi_1"] + [f"R_{m + 1}" for m in range(M)] + ["R_sum", "status"]
    rows = []
    for p in b.points:
        row = {"psi_1": p.psi[0], "R_sum": p.R_sum, "status": p.status, "psi": list(p.psi),
               "alloc": p.alloc.to_dict() if p.alloc is not None else None}
        row.update({f"R_{m + 1}": p.rates[m] for m in range(M)})
        rows.append(row)
    return ResultTable("region", cols, rows, {"config": cfg.to_dict(), "realization": r})


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        cmd = args.command
        if cmd == "single-bd":
            tables = [("", _single(cfg, args.realization))]
        elif cmd == "multi-bd":
            tables = [("", _multi(cfg, args.realization))]
        elif cmd == "region":
            tables = [("", _region(cfg, args.realization))]
        elif cmd in ("bench", "sweep"):
            if cmd == "bench":
                cfg.sweep_variable, cfg.sweep_values = None, []
            t = run_sweep(cfg)
            if all(r["status"] == "infeasible" for r in t.rows):
                raise InfeasibleError("every cell of the sweep is infeasible")
            tables = [("", t), ("_summary", summary_table(t, cfg.bandwidth_hz))]
        else:
            t = run_convergence(cfg)
            if not t.rows:
                raise InfeasibleError("no realization produced a feasible trace")
            tables = [("", t)]
        for suffix, t in tables:
            for path in emit(t, cfg.out + suffix):
                log.info("wrote %s", path)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=_sys.stderr)
        return 2
    except (ValueError, OSError, IterationLimitError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    _sys.exit(main())
