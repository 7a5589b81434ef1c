"""Configuration-driven experiments: scheme sweeps, convergence traces and
single-instance runs, written out as CSV plus canonical JSON.

Channel realization ``r`` of an experiment with seed ``s`` is always drawn
from ``ChannelGenConfig(seed=s, realization=r)``, so a sweep over D, E_min,
the peak power or the SNR reuses the same channel draws at every point.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from .benchmarks import (HalfDuplexAllocation, hd_energies, hd_lu_throughput, hd_rates,
                         hd_violations, solve_equal_allocation, solve_habcn)
from .channel import ChannelGenConfig, generate_channels, noise_for_snr
from .kernels import InfeasibleError, IterationLimitError, SolverOptions
from .multi import run_bcd, solve_multi_bd
from .system import (Allocation, SystemConfig, bd_rates, energies, lu_throughput, max_violation,
                     violations)

SCHEMA_VERSION = 1
SCHEMES = ("fabcn_opt", "fabcn_equal", "habcn_opt")
SWEEP_VARIABLES = ("D", "E_min", "p_peak", "p_peak_factor", "snr_db", "eta")
# True where a larger value shrinks the feasible set
HARDER_WHEN_LARGER = {"D": True, "E_min": True, "p_peak": False, "p_peak_factor": False,
                      "snr_db": False, "eta": False}
REVALIDATE_TOL = 1e-6


@dataclass
class ExperimentConfig:
    """One experiment.

    ``snr_db`` (if set) overrides ``system.sigma2`` through the receive-SNR
    calibration.  ``p_peak_factor`` (if set) overrides ``system.p_peak`` as a
    multiple of ``1/(MN)``.  ``sweep_variable`` is one of
    :data:`SWEEP_VARIABLES` or None for a single point.

    With ``continuation`` the optimal scheme is also started from the
    solution at the next harder sweep point (feasible at the easier one) and
    keeps the better of the two results, which makes the per-realization
    sweep curves monotone.
    """

    scenario: str = "experiment"
    system: SystemConfig = field(default_factory=SystemConfig)
    channel: ChannelGenConfig = field(default_factory=ChannelGenConfig)
    snr_db: float | None = 20.0
    p_peak_factor: float | None = None
    sweep_variable: str | None = None
    sweep_values: list = field(default_factory=list)
    n_realizations: int = 1
    seed: int = 0
    out: str = "results"
    schemes: list = field(default_factory=lambda: list(SCHEMES))
    workers: int = 1
    n_points: int = 11
    bandwidth_hz: float | None = None
    continuation: bool = True

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")
        if self.sweep_variable is not None:
            if self.sweep_variable not in SWEEP_VARIABLES:
                raise ValueError(f"unknown sweep variable {self.sweep_variable!r}; "
                                 f"choose from {SWEEP_VARIABLES}")
            if not self.sweep_values:
                raise ValueError("a sweep variable needs at least one value")
        vals = [float(v) for v in self.sweep_values]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("sweep values must be finite")
        self.sweep_values = vals
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}; choose from {SCHEMES}")
        if self.channel.M != self.system.M:
            raise ValueError(f"channel geometry lists {self.channel.M} devices, system has M={self.system.M}")
        self.workers = max(1, int(self.workers))

    def points(self) -> list:
        """Sweep values, or ``[None]`` when there is no sweep."""
        return list(self.sweep_values) if self.sweep_variable else [None]

    def instance(self, value, realization: int):
        """System and channels of one cell."""
        sys_d = self.system.to_dict()
        snr, factor = self.snr_db, self.p_peak_factor
        var = self.sweep_variable
        if var == "snr_db":
            snr = value
        elif var == "p_peak_factor":
            factor = value
        elif var == "p_peak":
            factor = None
            sys_d["p_peak"] = value
        elif var is not None:
            sys_d[var] = value
        ch_cfg = dataclasses.replace(self.channel, seed=self.seed, realization=realization)
        if snr is not None:
            sys_d["sigma2"] = noise_for_snr(ch_cfg, sys_d["p_total"], snr)
        if factor is not None:
            sys_d["p_peak"] = factor / (sys_d["M"] * sys_d["N"])
        sys = SystemConfig.from_dict(sys_d)
        return sys, generate_channels(ch_cfg, sys)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "system": self.system.to_dict(),
                "channel": self.channel.to_dict(), "snr_db": self.snr_db,
                "p_peak_factor": self.p_peak_factor,
                "sweep": {"variable": self.sweep_variable, "values": list(self.sweep_values)},
                "n_realizations": self.n_realizations, "seed": self.seed, "out": self.out,
                "schemes": list(self.schemes), "workers": self.workers, "n_points": self.n_points,
                "bandwidth_hz": self.bandwidth_hz, "continuation": self.continuation}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)} | {"sweep"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        system = SystemConfig.from_dict(d.pop("system", {}) or {})
        ch = d.pop("channel", {}) or {}
        if "d_fap_bd" not in ch and system.M != 2:
            raise ValueError("channel.d_fap_bd and channel.d_bd_lu are required when M != 2")
        channel = ChannelGenConfig.from_dict(ch)
        sweep = d.pop("sweep", None) or {}
        if sweep:
            d.setdefault("sweep_variable", sweep.get("variable"))
            d.setdefault("sweep_values", sweep.get("values", []))
        return cls(system=system, channel=channel, **d)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML experiment file; ``overrides`` replaces top-level keys."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return ExperimentConfig.from_dict(data)


# ----------------------------------------------------------------------------
# result tables

@dataclass
class ResultTable:
    """Rows of flat records plus metadata.

    ``columns`` fixes the CSV column order; rows may carry extra keys (such
    as allocations) that only go to JSON.
    """

    kind: str
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "kind": self.kind, "columns": self.columns,
               "meta": self.meta, "rows": self.rows}
        return json.dumps(_plain(doc), sort_keys=True, indent=1, allow_nan=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {doc.get('schema_version')!r}")
        return cls(doc["kind"], doc["columns"], doc["rows"], doc["meta"])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit(table: ResultTable, out_prefix) -> tuple:
    """Write ``<out_prefix>.csv`` and ``<out_prefix>.json``.

    Raises
    ------
    ValueError
        If the table has no rows; nothing is written.
    OSError
        With the offending path in the message.
    """
    if not table.rows:
        raise ValueError("refusing to write an empty result table")
    out_prefix = str(out_prefix)
    paths = (out_prefix + ".csv", out_prefix + ".json")
    for path, text in zip(paths, (table.to_csv(), table.to_json())):
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    return paths


def load_results(path, validate: bool = True) -> ResultTable:
    """Read a JSON result file and re-check every stored allocation.

    Raises
    ------
    ValueError
        If an allocation violates its constraints by more than 1e-6.
    """
    with open(path) as fh:
        table = ResultTable.from_json(fh.read())
    if validate:
        validate_table(table)
    return table


def validate_table(table: ResultTable, tol: float = REVALIDATE_TOL) -> None:
    cfg_d = table.meta.get("config")
    if cfg_d is None:
        return
    cfg = ExperimentConfig.from_dict(cfg_d)
    for i, row in enumerate(table.rows):
        alloc = row.get("alloc")
        if not alloc:
            continue
        sys, ch = cfg.instance(row.get("value"), row["realization"])
        if row.get("scheme") == "habcn_opt":
            viol = hd_violations(HalfDuplexAllocation.from_dict(alloc), ch, sys)
        else:
            viol = violations(Allocation.from_dict(alloc), ch, sys)
        worst = max(viol.values())
        if worst > tol:
            raise ValueError(f"row {i}: stored allocation violates constraints by {worst:.3g}")


# ----------------------------------------------------------------------------
# sweeps

def _sweep_columns(M: int) -> list:
    return (["scenario", "variable", "value", "realization", "scheme", "status", "Q"]
            + [f"R_{m + 1}" for m in range(M)] + ["lu_rate"]
            + [f"energy_uJ_{m + 1}" for m in range(M)] + ["iterations"])


def solve_cell(cfg: ExperimentConfig, value, realization: int, scheme: str,
               opts: SolverOptions | None = None, start: Allocation | None = None) -> dict:
    """Solve one (sweep value, realization, scheme) cell; failures become a status.

    ``start`` (optimal scheme only) is an extra starting allocation; it is
    used when feasible for this cell and the better of the two runs is kept.
    """
    sys, ch = cfg.instance(value, realization)
    row = {"scenario": cfg.scenario, "variable": cfg.sweep_variable or "", "value": value,
           "realization": realization, "scheme": scheme, "status": "optimal", "Q": math.nan,
           "lu_rate": math.nan, "iterations": 0, "alloc": None}
    for m in range(sys.M):
        row[f"R_{m + 1}"] = math.nan
        row[f"energy_uJ_{m + 1}"] = math.nan
    t0 = time.perf_counter()
    try:
        if scheme == "fabcn_opt":
            st = _best_bcd(ch, sys, opts, start)
            alloc, row["iterations"], row["status"] = st.alloc, st.iter, st.status
            rates, lu, E = bd_rates(alloc, ch, sys), lu_throughput(alloc, ch, sys), energies(alloc, ch, sys)
        elif scheme == "fabcn_equal":
            _, alloc = solve_equal_allocation(ch, sys)
            rates, lu, E = bd_rates(alloc, ch, sys), lu_throughput(alloc, ch, sys), energies(alloc, ch, sys)
        else:
            _, alloc, st = solve_habcn(ch, sys, opts)
            row["iterations"], row["status"] = st.iter, st.status
            rates = hd_rates(alloc, ch, sys)
            lu, E = hd_lu_throughput(alloc, ch, sys), hd_energies(alloc, ch, sys)
    except InfeasibleError:
        row["status"] = "infeasible"
    except IterationLimitError:
        row["status"] = "iter_limit"
    else:
        row["Q"] = float(np.min(rates))
        row["lu_rate"] = float(lu)
        for m in range(sys.M):
            row[f"R_{m + 1}"] = float(rates[m])
            row[f"energy_uJ_{m + 1}"] = float(E[m]) * 1e6
        row["alloc"] = alloc.to_dict()
    row["wall_time"] = time.perf_counter() - t0
    return row


def _best_bcd(ch, sys, opts, start):
    try:
        st = solve_multi_bd(ch, sys, opts)
    except InfeasibleError:
        st = None
    if start is not None and max_violation(start, ch, sys) <= 1e-9:
        warm = run_bcd(start, ch, sys, None, opts)
        if st is None or warm.Q > st.Q:
            st = warm
    if st is None:
        raise InfeasibleError("no feasible starting allocation")
    return st


def _cell_job(args):
    cfg_d, value, r, scheme = args
    return solve_cell(ExperimentConfig.from_dict(cfg_d), value, r, scheme)


def _chain_job(args):
    # one realization of the optimal scheme, hardest sweep point first
    cfg_d, values, r = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    rows, start = [], None
    for v in values:
        row = solve_cell(cfg, v, r, "fabcn_opt", start=start)
        start = Allocation.from_dict(row["alloc"]) if row["alloc"] else None
        rows.append(row)
    return rows


def _run_cells(cfg: ExperimentConfig, jobs: list) -> list:
    cfg_d = cfg.to_dict()
    chained = (cfg.continuation and cfg.sweep_variable is not None
               and len(cfg.sweep_values) > 1)
    order = sorted(set(cfg.sweep_values), reverse=HARDER_WHEN_LARGER.get(cfg.sweep_variable, False))
    singles = [j for j in jobs if not (chained and j[2] == "fabcn_opt")]
    chains = sorted({j[1] for j in jobs if chained and j[2] == "fabcn_opt"})
    payload = [(cfg_d,) + tuple(j) for j in singles]
    chain_payload = [(cfg_d, order, r) for r in chains]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            # map returns results in submission order
            single_rows = list(pool.map(_cell_job, payload))
            chain_rows = list(pool.map(_chain_job, chain_payload))
    else:
        single_rows = [_cell_job(p) for p in payload]
        chain_rows = [_chain_job(p) for p in chain_payload]
    done = {(j[0], j[1], j[2]): row for j, row in zip(singles, single_rows)}
    for r, rows in zip(chains, chain_rows):
        for v, row in zip(order, rows):
            done[(v, r, "fabcn_opt")] = dict(row)
    return [dict(done[tuple(j)]) for j in jobs]


def run_sweep(cfg: ExperimentConfig, schemes=None) -> ResultTable:
    """Every sweep value x realization x scheme.

    The returned table's metadata carries per-(value, scheme) aggregates;
    ``mean_Q_common`` averages only over realizations where every scheme
    succeeded at that value.  Wall times stay in memory only (``wall_time``
    key, not part of the files).
    """
    schemes = list(schemes or cfg.schemes)
    jobs = [(v, r, s) for v in cfg.points() for r in range(cfg.n_realizations) for s in schemes]
    rows = _run_cells(cfg, jobs)
    wall = [row.pop("wall_time") for row in rows]
    table = ResultTable("sweep", _sweep_columns(cfg.system.M), rows,
                        {"config": cfg.to_dict(), "summary": summarize(rows, schemes)})
    table.wall_times = wall
    return table


def summarize(rows: list, schemes) -> list:
    out = []
    values = []
    for row in rows:
        if row["value"] not in values:
            values.append(row["value"])
    for v in values:
        at_v = [r for r in rows if r["value"] == v]
        good = {}
        for r in at_v:
            if r["status"] == "optimal":
                good.setdefault(r["realization"], {})[r["scheme"]] = r["Q"]
        common = [k for k, d in good.items() if all(s in d for s in schemes)]
        for s in schemes:
            qs = [r["Q"] for r in at_v if r["scheme"] == s and r["status"] == "optimal"]
            qc = [good[k][s] for k in common]
            out.append({"value": v, "scheme": s, "n_ok": len(qs),
                        "n_total": sum(1 for r in at_v if r["scheme"] == s),
                        "mean_Q": float(np.mean(qs)) if qs else math.nan,
                        "median_Q": float(np.median(qs)) if qs else math.nan,
                        "n_common": len(common),
                        "mean_Q_common": float(np.mean(qc)) if qc else math.nan})
    return out


def summary_table(sweep: ResultTable, bandwidth_hz: float | None = None) -> ResultTable:
    cols = ["value", "scheme", "n_ok", "n_total", "mean_Q", "median_Q", "n_common", "mean_Q_common"]
    rows = [dict(r) for r in sweep.meta["summary"]]
    if bandwidth_hz:
        cols.append("mean_Q_common_bps")
        for r in rows:
            r["mean_Q_common_bps"] = r["mean_Q_common"] * bandwidth_hz
    return ResultTable("summary", cols, rows, {"config": sweep.meta["config"]})


# ----------------------------------------------------------------------------
# convergence

def _trace_job(args):
    cfg_d, r = args
    cfg = ExperimentConfig.from_dict(cfg_d)
    value = cfg.points()[0]
    sys, ch = cfg.instance(value, r)
    try:
        st = solve_multi_bd(ch, sys)
    except (InfeasibleError, IterationLimitError) as exc:
        return {"realization": r, "status": type(exc).__name__, "trace": []}
    return {"realization": r, "status": st.status, "trace": [float(q) for q in st.trace],
            "iterations": st.iter}


def run_convergence(cfg: ExperimentConfig) -> ResultTable:
    """Objective per outer iteration, averaged over realizations.

    Traces that stop early are extended with their final value.  Rows are
    ``iteration, mean_Q, min_Q, max_Q, n``; the individual traces go to the
    metadata.
    """
    payload = [(cfg.to_dict(), r) for r in range(cfg.n_realizations)]
    if cfg.workers > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            traces = list(pool.map(_trace_job, payload))
    else:
        traces = [_trace_job(p) for p in payload]
    ok = [t["trace"] for t in traces if t["trace"]]
    rows = []
    if ok:
        L = max(len(t) for t in ok)
        padded = np.array([t + [t[-1]] * (L - len(t)) for t in ok])
        for j in range(L):
            col = padded[:, j]
            rows.append({"iteration": j, "mean_Q": float(col.mean()), "min_Q": float(col.min()),
                         "max_Q": float(col.max()), "n": len(ok)})
    return ResultTable("convergence", ["iteration", "mean_Q", "min_Q", "max_Q", "n"], rows,
                       {"config": cfg.to_dict(), "traces": traces})
