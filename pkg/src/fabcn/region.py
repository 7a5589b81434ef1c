"""Throughput region boundary between backscatter devices.

A throughput profile ``psi`` (nonnegative, summing to one) fixes the direction
of a boundary point: the sum throughput ``R`` is maximized subject to
``R_m >= psi_m R``.  This is the max-min problem with ``Q = R`` and weights
``psi``, so the multi-device solver is reused as is.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .kernels import InfeasibleError, IterationLimitError, SolverOptions
from .multi import solve_multi_bd
from .system import Allocation, SystemConfig, bd_rates, max_violation

RESTART_ALPHAS = (0.5, 1.0, 0.25)


@dataclass(frozen=True)
class ThroughputProfile:
    psi: tuple

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).reshape(-1)
        if psi.size == 0 or np.any(psi < 0) or abs(psi.sum() - 1.0) > 1e-12:
            raise ValueError(f"profile must be nonnegative and sum to 1, got {psi.tolist()}")
        object.__setattr__(self, "psi", tuple(float(v) for v in psi))

    @classmethod
    def normalized(cls, weights) -> "ThroughputProfile":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with a positive sum")
        w = w / w.sum()
        w[-1] = max(0.0, 1.0 - w[:-1].sum())
        return cls(tuple(w))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.psi)


@dataclass
class BoundaryPoint:
    psi: tuple
    R: float
    rates: tuple
    status: str
    alloc: Allocation | None = None

    @property
    def R_sum(self) -> float:
        return float(sum(self.rates))


@dataclass
class RegionBoundary:
    """Boundary samples sorted by the first profile weight.

    Failed points keep ``status`` and carry NaN rates.
    """

    points: list = field(default_factory=list)

    def ok_points(self) -> list:
        return [p for p in self.points if p.status == "optimal"]

    def rate_matrix(self) -> np.ndarray:
        return np.array([p.rates for p in self.ok_points()])

    def to_csv(self, path=None) -> str:
        """CSV with columns psi_1, R_1, ..., R_M, R_sum, status."""
        M = len(self.points[0].psi) if self.points else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["psi_1"] + [f"R_{m + 1}" for m in range(M)] + ["R_sum", "status"])
        for p in self.points:
            w.writerow([f"{p.psi[0]:.12g}"] + [f"{r:.12g}" for r in p.rates]
                       + [f"{p.R_sum:.12g}", p.status])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def solve_profile(psi, ch: ChannelSet, sys: SystemConfig, opts: SolverOptions | None = None,
                  restarts=RESTART_ALPHAS):
    """Largest sum throughput along profile ``psi``.

    Runs the block coordinate descent from each initial reflection
    coefficient in ``restarts`` and keeps the best.

    Returns
    -------
    (R, Allocation)

    Raises
    ------
    InfeasibleError
        If no start is feasible.
    """
    prof = psi if isinstance(psi, ThroughputProfile) else ThroughputProfile(tuple(psi))
    if len(prof.psi) != sys.M:
        raise ValueError("profile length must equal the number of devices")
    best = None
    for a0 in restarts:
        try:
            st = solve_multi_bd(ch, sys, opts, psi=prof.array, alpha0=a0)
        except InfeasibleError:
            continue
        if best is None or st.Q > best.Q:
            best = st
    if best is None:
        raise InfeasibleError("no feasible allocation for this profile")
    return best.Q, best.alloc


def trace_boundary(n_points: int, ch: ChannelSet, sys: SystemConfig,
                   opts: SolverOptions | None = None, profiles=None,
                   restarts=RESTART_ALPHAS) -> RegionBoundary:
    """Sample the region boundary.

    For two devices ``psi_1`` sweeps ``linspace(0, 1, n_points)``; other
    device counts need an explicit ``profiles`` list.  Failures are kept as
    points with a non-optimal status.
    """
    if profiles is None:
        if sys.M != 2:
            raise ValueError("automatic profile sweep needs M=2; pass profiles explicitly")
        if n_points < 2:
            raise ValueError("need at least two boundary points")
        profiles = [ThroughputProfile.normalized([t, 1.0 - t]) for t in np.linspace(0.0, 1.0, n_points)]
    else:
        profiles = [p if isinstance(p, ThroughputProfile) else ThroughputProfile(tuple(p)) for p in profiles]
    pts = []
    for prof in profiles:
        try:
            R, alloc = solve_profile(prof, ch, sys, opts, restarts)
            rates = bd_rates(alloc, ch, sys)
            status = "optimal" if max_violation(alloc, ch, sys) <= 1e-6 else "violated"
            pts.append(BoundaryPoint(prof.psi, R, tuple(float(r) for r in rates), status, alloc))
        except InfeasibleError:
            pts.append(BoundaryPoint(prof.psi, float("nan"), (float("nan"),) * sys.M, "infeasible"))
        except IterationLimitError:
            pts.append(BoundaryPoint(prof.psi, float("nan"), (float("nan"),) * sys.M, "iter_limit"))
    pts.sort(key=lambda p: p.psi[0])
    return RegionBoundary(pts)


def dominated_pairs(boundary: RegionBoundary, tol: float = 1e-4) -> list:
    """Index pairs (i, j) where point j beats point i by more than ``tol`` in every rate."""
    R = boundary.rate_matrix()
    out = []
    for i in range(len(R)):
        for j in range(len(R)):
            if i != j and np.all(R[j] > R[i] + tol):
                out.append((i, j))
    return out
