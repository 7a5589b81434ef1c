"""Comparison schemes: equal allocation and a half-duplex network.

Equal allocation keeps ``tau_m = 1/M`` and ``P_{m,k} = 1/(MN)`` and tunes a
single reflection coefficient shared by all devices.

In the half-duplex network the access point first serves the legacy user
alone for a fraction ``tau0`` of the frame (powers ``P0``), during which every
device harvests; device m then backscatters in its own slot ``tau_m`` with
powers ``P_m``.  The legacy user is only served in the first phase and so sees
no backscatter interference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .kernels import (INFEASIBLE, ITER_LIMIT, OPTIMAL, InfeasibleError, LinearProgram,
                      SolverOptions, barrier_maximize, bisect_maximin, solve_lp)
from .multi import _psi, max_slack_powers, profile_objective, slot_rates
from .system import Allocation, SystemConfig, bd_rates, energy_matrix, violations

LN2 = math.log(2.0)
_MARGIN = 1e-10


# ----------------------------------------------------------------------------
# equal allocation

def solve_equal_allocation(ch: ChannelSet, sys: SystemConfig):
    """Best common reflection coefficient with equal times and powers.

    Every device rate grows with the common alpha while the harvested
    energies and the legacy rate shrink, so the best alpha is the largest one
    meeting the energy requirements (closed form) and the legacy requirement
    (bisection).

    Returns
    -------
    (Q, Allocation)

    Raises
    ------
    InfeasibleError
        If the requirements fail even at alpha = 0.
    """
    M = sys.M
    alloc = Allocation.initial(sys, alpha=0.0)
    if max(violations(alloc, ch, sys).values()) > 1e-12:
        raise InfeasibleError("equal allocation violates the requirements even without reflection")
    Emat0 = energy_matrix(np.zeros(M), alloc.P, ch, sys)
    own = np.diag(Emat0) * alloc.tau
    other = Emat0 @ alloc.tau - own
    a_hi = 1.0
    for m in range(M):
        if sys.E_min[m] > 0 and own[m] > 0:
            a_hi = min(a_hi, 1.0 - (sys.E_min[m] - other[m]) / own[m])
    a_hi = max(0.0, a_hi)

    def ok(a):
        cand = Allocation(alloc.tau, np.full(M, a), alloc.P)
        return max(violations(cand, ch, sys).values()) <= 0.0

    a = a_hi if ok(a_hi) else bisect_maximin(ok, 0.0, a_hi, tol=1e-12)
    best = Allocation(alloc.tau, np.full(M, a), alloc.P)
    return float(np.min(bd_rates(best, ch, sys))), best


# ----------------------------------------------------------------------------
# half-duplex network

@dataclass
class HalfDuplexAllocation:
    """Downlink phase ``tau0``/``P0`` (N,) and backscatter slots ``tau``/``P`` (M, N)."""

    tau0: float
    tau: np.ndarray
    alpha: np.ndarray
    P0: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.tau0 = float(self.tau0)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.P0 = np.asarray(self.P0, dtype=float).reshape(-1)
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if not (self.tau.shape == self.alpha.shape == (self.P.shape[0],)):
            raise ValueError("tau, alpha and P rows must agree on M")
        if self.P0.shape != (self.P.shape[1],):
            raise ValueError("P0 needs one entry per subcarrier")

    def copy(self) -> "HalfDuplexAllocation":
        return HalfDuplexAllocation(self.tau0, self.tau.copy(), self.alpha.copy(),
                                    self.P0.copy(), self.P.copy())

    def to_dict(self) -> dict:
        return {"tau0": self.tau0, "tau": self.tau.tolist(), "alpha": self.alpha.tolist(),
                "P0": self.P0.tolist(), "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HalfDuplexAllocation":
        return cls(d["tau0"], d["tau"], d["alpha"], d["P0"], d["P"])

    @classmethod
    def initial(cls, sys: SystemConfig, alpha: float = 0.5) -> "HalfDuplexAllocation":
        """tau0 = tau_m = 1/(M+1), P = 1/((M+1)N)."""
        M, N = sys.M, sys.N
        p = 1.0 / ((M + 1) * N)
        return cls(1.0 / (M + 1), np.full(M, 1.0 / (M + 1)), np.full(M, alpha),
                   np.full(N, p), np.full((M, N), p))


def hd_rates(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    return a.tau * slot_rates(a.alpha, a.P, ch, sys)


def hd_lu_throughput(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig) -> float:
    return a.tau0 * float(np.sum(np.log2(1.0 + ch.lu_gain * a.P0 / sys.sigma2))) / sys.N


def hd_phase0_energy(P0, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Energy per unit time harvested by each device during the downlink phase."""
    return sys.eta * (ch.fwd_gain @ np.asarray(P0))


def hd_energies(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    return a.tau0 * hd_phase0_energy(a.P0, ch, sys) + energy_matrix(a.alpha, a.P, ch, sys) @ a.tau


def hd_violations(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig) -> dict:
    """Constraint violations, normalized as in :func:`fabcn.system.violations`."""
    E = hd_energies(a, ch, sys)
    emin = np.maximum(sys.E_min, 1e-300)
    spent = a.tau0 * a.P0.sum() + float(a.tau @ a.P.sum(axis=1))
    taus = np.concatenate([[a.tau0], a.tau])
    powers = np.concatenate([a.P0, a.P.ravel()])
    return {
        "lu_rate": max(0.0, sys.D - hd_lu_throughput(a, ch, sys)),
        "energy": float(np.max(np.where(sys.E_min > 0, (sys.E_min - E) / emin, 0.0), initial=0.0)),
        "budget": max(0.0, (spent - sys.p_total) / sys.p_total),
        "time": max(0.0, float(taus.sum()) - 1.0, float(-taus.min())),
        "peak": max(0.0, float((powers.max() - sys.p_peak) / sys.p_peak), float(-powers.min())),
        "alpha": max(0.0, float(a.alpha.max()) - 1.0, float(-a.alpha.min())),
    }


def _hd_ok(a, ch, sys) -> bool:
    return max(hd_violations(a, ch, sys).values()) <= 1e-9


def hd_optimize_time(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig, psi=None,
                     tie_break: bool = True):
    """Best (tau0, tau) for fixed alpha and powers (an LP in (Q, tau0, tau))."""
    M = sys.M
    psi = _psi(psi, M)
    rho = slot_rates(a.alpha, a.P, ch, sys)
    ell0 = float(np.sum(np.log2(1.0 + ch.lu_gain * a.P0 / sys.sigma2))) / sys.N
    e0 = hd_phase0_energy(a.P0, ch, sys)
    Emat = energy_matrix(a.alpha, a.P, ch, sys)
    A, b = [], []
    for m in range(M):
        if psi[m] > 0:
            row = np.zeros(M + 2)
            row[0], row[2 + m] = psi[m], -rho[m]
            A.append(row)
            b.append(0.0)
    if sys.D > 0:
        row = np.zeros(M + 2)
        row[1] = -ell0
        A.append(row)
        b.append(-sys.D * (1 + _MARGIN))
    for m in range(M):
        if sys.E_min[m] > 0:
            A.append(np.concatenate([[0.0, -e0[m]], -Emat[m]]) / sys.E_min[m])
            b.append(-(1 + _MARGIN))
    A.append(np.concatenate([[0.0, a.P0.sum()], a.P.sum(axis=1)]) / sys.p_total)
    b.append(1 - _MARGIN)
    A.append(np.concatenate([[0.0], np.ones(M + 1)]))
    b.append(1 - _MARGIN)
    A, b = np.array(A), np.array(b)
    lo = np.zeros(M + 2)
    hi = np.concatenate([[np.inf], np.ones(M + 1)])
    c = np.zeros(M + 2)
    c[0] = 1.0
    x, rep = solve_lp(LinearProgram(c, A, b, lo, hi))
    if x is None:
        raise InfeasibleError(f"half-duplex time LP is {rep.status}")
    best = x
    if tie_break:
        q_star = profile_objective(rho * np.clip(x[2:], 0, 1), psi)
        lo2 = lo.copy()
        lo2[0] = q_star * (1 - 1e-12)
        x2, _ = solve_lp(LinearProgram(np.concatenate([[0.0, 0.0], rho]), A, b, lo2, hi))
        if x2 is not None and profile_objective(rho * np.clip(x2[2:], 0, 1), psi) >= q_star:
            best = x2
    return float(np.clip(best[1], 0, 1)), np.clip(best[2:], 0.0, 1.0)


def hd_optimize_alpha(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Largest alpha allowed by the energy requirements.

    The legacy rate does not depend on alpha here, and every device rate
    increases with its own alpha, so this is optimal for any profile.
    """
    M = sys.M
    own = sys.eta * a.tau * np.einsum("mk,mk->m", ch.fwd_gain, a.P)
    total = hd_energies(HalfDuplexAllocation(a.tau0, a.tau, np.zeros(M), a.P0, a.P), ch, sys)
    other = total - own
    alpha = np.ones(M)
    for m in range(M):
        if sys.E_min[m] > 0 and own[m] > 0:
            alpha[m] = 1.0 - (sys.E_min[m] * (1 + _MARGIN) - other[m]) / own[m]
    return np.clip(alpha, 0.0, 1.0)


def hd_optimize_power(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig, psi=None,
                      opts: SolverOptions | None = None):
    """Optimal (P0, P) for fixed times and alpha; a convex problem solved exactly.

    Returns the current powers if the solution does not improve the objective.
    """
    opts = opts or SolverOptions()
    M, N = sys.M, sys.N
    psi = _psi(psi, M)
    s2 = sys.sigma2
    rows = [m for m in range(M) if a.tau[m] > 0]
    use0 = a.tau0 > 0
    blocks = ([("P0", None)] if use0 else []) + [("P", m) for m in rows]
    nv = 1 + len(blocks) * N

    def sl(j):
        return slice(1 + j * N, 1 + (j + 1) * N)

    pos = {key: j for j, key in enumerate(blocks)}
    nonlinear = []
    for m in rows:
        if psi[m] <= 0:
            continue
        w = a.alpha[m] / s2 * ch.bs_gain[m]
        coef = a.tau[m] / (N * LN2)
        j = pos[("P", m)]

        def rate_con(x, order=2, j=j, m=m, w=w, coef=coef):
            z = 1.0 + w @ x[sl(j)]
            if order == 0:
                return coef * math.log(z) - psi[m] * x[0], None, None
            g = np.zeros(nv)
            g[0] = -psi[m]
            g[sl(j)] = coef * w / z
            H = np.zeros((nv, nv))
            H[sl(j), sl(j)] = -coef * np.outer(w, w) / z ** 2
            return coef * math.log(z) - psi[m] * x[0], g, H
        nonlinear.append(rate_con)

    if sys.D > 0 and use0:
        h = ch.lu_gain / s2
        scale = max(sys.D, 1e-3)
        c0 = a.tau0 / (N * LN2 * scale)
        j0 = pos[("P0", None)]

        def lu_con(x, order=2):
            u = 1.0 + h * x[sl(j0)]
            val = c0 * float(np.sum(np.log(u))) - sys.D / scale
            if order == 0:
                return val, None, None
            g = np.zeros(nv)
            g[sl(j0)] = c0 * h / u
            hd = np.zeros(nv)
            hd[sl(j0)] = -c0 * h ** 2 / u ** 2
            return val, g, hd
        nonlinear.append(lu_con)

    A, b = [], []
    for m in range(M):
        if sys.E_min[m] <= 0:
            continue
        row = np.zeros(nv)
        const = 0.0
        f = sys.eta[m] * ch.fwd_gain[m]
        if use0:
            row[sl(pos[("P0", None)])] = a.tau0 * f
        for r in range(M):
            coefs = f * a.tau[r] * ((1.0 - a.alpha[m]) if r == m else 1.0)
            if ("P", r) in pos:
                row[sl(pos[("P", r)])] = coefs
            else:
                const += float(coefs @ a.P[r])
        A.append(-row / sys.E_min[m])
        b.append(-(1.0 - const / sys.E_min[m]) - _MARGIN)
    row = np.zeros(nv)
    if use0:
        row[sl(pos[("P0", None)])] = a.tau0 / sys.p_total
    for m in rows:
        row[sl(pos[("P", m)])] = a.tau[m] / sys.p_total
    A.append(row)
    b.append(1.0 - _MARGIN)

    q0 = profile_objective(hd_rates(a, ch, sys), psi)
    x0 = [q0 - max(1e-3 * abs(q0), 1e-9)]
    for kind, m in blocks:
        x0.extend(a.P0 if kind == "P0" else a.P[m])
    lo = np.concatenate([[-1.0], np.zeros(nv - 1)])
    hi = np.concatenate([[np.inf], np.full(nv - 1, sys.p_peak)])
    x, rep = barrier_maximize(np.eye(nv)[0], np.array(x0), lo, hi, np.array(A), np.array(b),
                              nonlinear, gap_tol=opts.barrier_gap)
    if rep.status == INFEASIBLE:
        return a.P0.copy(), a.P.copy()
    P0, P = a.P0.copy(), a.P.copy()
    for kind, m in blocks:
        vals = np.clip(x[sl(pos[(kind, m)])], 0.0, sys.p_peak)
        if kind == "P0":
            P0 = vals
        else:
            P[m] = vals
    return P0, P


def hd_optimize_time_power(a: HalfDuplexAllocation, ch: ChannelSet, sys: SystemConfig, psi=None,
                           opts: SolverOptions | None = None):
    """Optimal times and powers for fixed alpha.

    With ``X = tau * P`` the device rates and the legacy rate are
    perspectives of concave functions and the other constraints are linear,
    so the joint problem is convex and is solved exactly.  Returns
    ``(tau0, tau, P0, P)``, or the current values if nothing improves.
    """
    opts = opts or SolverOptions()
    M, N = sys.M, sys.N
    psi = _psi(psi, M)
    s2 = sys.sigma2
    nt = M + 1                                   # tau0, tau_1..tau_M
    nv = 1 + nt + nt * N

    def xs(j):                                   # j = 0 for the downlink phase
        return slice(1 + nt + j * N, 1 + nt + (j + 1) * N)

    nonlinear = []

    def persp_con(j, w, weight, shift):
        """``weight * tau_j * log(1 + w @ X_j / tau_j) - shift(x)``."""
        def con(x, order=2):
            t, X = x[1 + j], x[xs(j)]
            u = float(w @ X)
            z = 1.0 + u / t
            sh, sh_grad = shift(x)
            val = weight * t * math.log(z) - sh
            if order == 0:
                return val, None, None
            g = -sh_grad.copy()
            g[1 + j] += weight * (math.log(z) - (z - 1.0) / z)
            g[xs(j)] += weight * w / z
            v = np.zeros(nv)
            v[xs(j)] = w
            v[1 + j] = -u / t
            return val, g, -weight / (t * z ** 2) * np.outer(v, v)
        return con

    for m in range(M):
        if psi[m] <= 0:
            continue
        gq = np.zeros(nv)
        gq[0] = psi[m]
        nonlinear.append(persp_con(1 + m, a.alpha[m] / s2 * ch.bs_gain[m], 1.0 / (N * LN2),
                                   lambda x, m=m, gq=gq: (psi[m] * x[0], gq)))

    if sys.D > 0:
        e = ch.lu_gain / s2
        scale = max(sys.D, 1e-3)
        c0 = 1.0 / (N * LN2 * scale)

        def lu_con(x, order=2):
            t, X = x[1], x[xs(0)]
            z = 1.0 + e * X / t
            val = c0 * t * float(np.sum(np.log(z))) - sys.D / scale
            if order == 0:
                return val, None, None
            g = np.zeros(nv)
            g[1] = c0 * float(np.sum(np.log(z) - (z - 1.0) / z))
            g[xs(0)] = c0 * e / z
            H = np.zeros((nv, nv))
            cw = -c0 * e ** 2 / (t * z ** 2)
            r = X / t
            sl = xs(0)
            H[sl, sl] = np.diag(cw)
            H[1, sl] = H[sl, 1] = -cw * r
            H[1, 1] = float(np.sum(cw * r ** 2))
            return val, g, H
        nonlinear.append(lu_con)

    A, b = [], []
    for m in range(M):
        if sys.E_min[m] <= 0:
            continue
        row = np.zeros(nv)
        f = sys.eta[m] * ch.fwd_gain[m]
        row[xs(0)] = f
        for r in range(M):
            row[xs(1 + r)] = f * ((1.0 - a.alpha[m]) if r == m else 1.0)
        A.append(-row / sys.E_min[m])
        b.append(-1.0 - _MARGIN)
    row = np.zeros(nv)
    row[1 + nt:] = 1.0 / sys.p_total
    A.append(row)
    b.append(1.0 - _MARGIN)
    row = np.zeros(nv)
    row[1:1 + nt] = 1.0
    A.append(row)
    b.append(1.0 - _MARGIN)
    for j in range(nt):
        for k in range(N):
            row = np.zeros(nv)
            row[1 + nt + j * N + k] = 1.0 / sys.p_peak
            row[1 + j] = -1.0
            A.append(row)
            b.append(0.0)

    q0 = profile_objective(hd_rates(a, ch, sys), psi)
    taus = np.maximum(np.concatenate([[a.tau0], a.tau]), 1e-6)
    powers = np.vstack([a.P0, a.P])
    x0 = np.concatenate([[q0 - max(1e-3 * abs(q0), 1e-9)], taus, (taus[:, None] * powers).ravel()])
    lo = np.concatenate([[-1.0], np.zeros(nt + nt * N)])
    hi = np.concatenate([[np.inf], np.ones(nt), np.full(nt * N, sys.p_peak)])
    x, rep = barrier_maximize(np.eye(nv)[0], x0, lo, hi, np.array(A), np.array(b), nonlinear,
                              gap_tol=opts.barrier_gap)
    if rep.status == INFEASIBLE:
        return a.tau0, a.tau.copy(), a.P0.copy(), a.P.copy()
    t_new = x[1:1 + nt].copy()
    X = x[1 + nt:].reshape(nt, N)
    new_p = powers.copy()
    live = t_new > 1e-12
    new_p[live] = np.clip(X[live] / t_new[live, None], 0.0, sys.p_peak)
    t_new[~live] = 0.0
    return float(t_new[0]), t_new[1:], new_p[0], new_p[1:]


@dataclass
class HalfDuplexState:
    alloc: HalfDuplexAllocation
    Q: float
    iter: int = 0
    trace: list = field(default_factory=list)
    substeps: list = field(default_factory=list)
    status: str = ITER_LIMIT


def hd_feasible_start(ch: ChannelSet, sys: SystemConfig, psi=None) -> HalfDuplexAllocation:
    """Uniform start, else the best times for it, else a common max-slack power vector."""
    M = sys.M
    a = HalfDuplexAllocation.initial(sys)
    if _hd_ok(a, ch, sys):
        return a
    candidates = [a]
    p, slack = max_slack_powers(ch, sys)
    if np.isfinite(slack):
        candidates.append(HalfDuplexAllocation(a.tau0, a.tau, np.zeros(M), p, np.tile(p, (M, 1))))
    for cand in candidates:
        try:
            tau0, tau = hd_optimize_time(cand, ch, sys, psi, tie_break=False)
        except InfeasibleError:
            continue
        c2 = HalfDuplexAllocation(tau0, tau, cand.alpha, cand.P0, cand.P)
        if _hd_ok(c2, ch, sys):
            if not np.any(c2.alpha):
                c3 = HalfDuplexAllocation(tau0, tau, hd_optimize_alpha(c2, ch, sys), c2.P0, c2.P)
                if _hd_ok(c3, ch, sys):
                    return c3
            return c2
    raise InfeasibleError("no feasible half-duplex starting allocation found")


def solve_habcn(ch: ChannelSet, sys: SystemConfig, opts: SolverOptions | None = None, psi=None):
    """Max-min throughput of the half-duplex network by block coordinate descent.

    Returns
    -------
    (Q, HalfDuplexAllocation, HalfDuplexState)
    """
    opts = opts or SolverOptions()
    psi = _psi(psi, sys.M)
    a = hd_feasible_start(ch, sys, psi)
    Q = profile_objective(hd_rates(a, ch, sys), psi)
    st = HalfDuplexState(a.copy(), Q, 0, [Q])
    for it in range(1, opts.max_bcd_iter + 1):
        q_start = st.Q

        def accept(cand, name):
            q = profile_objective(hd_rates(cand, ch, sys), psi)
            if q >= st.Q and _hd_ok(cand, ch, sys):
                st.alloc, st.Q = cand, q
            st.substeps.append((it, name, st.Q))

        cur = st.alloc
        try:
            tau0, tau = hd_optimize_time(cur, ch, sys, psi)
            accept(HalfDuplexAllocation(tau0, tau, cur.alpha, cur.P0, cur.P), "time")
        except InfeasibleError:
            st.substeps.append((it, "time", st.Q))
        cur = st.alloc
        accept(HalfDuplexAllocation(cur.tau0, cur.tau, hd_optimize_alpha(cur, ch, sys), cur.P0, cur.P),
               "alpha")
        cur = st.alloc
        P0, P = hd_optimize_power(cur, ch, sys, psi, opts)
        accept(HalfDuplexAllocation(cur.tau0, cur.tau, cur.alpha, P0, P), "power")
        if opts.joint_block:
            cur = st.alloc
            tau0, tau, P0, P = hd_optimize_time_power(cur, ch, sys, psi, opts)
            accept(HalfDuplexAllocation(tau0, tau, cur.alpha, P0, P), "time_power")
        st.iter = it
        st.trace.append(st.Q)
        if st.Q - q_start < opts.epsilon:
            st.status = OPTIMAL
            break
    return st.Q, st.alloc, st
