"""Multi-device allocation by block coordinate descent.

The three blocks are optimized in turn with the other two held fixed:

* backscatter times ``tau`` -- a linear program in (Q, tau);
* reflection coefficients ``alpha`` -- bisection on Q with closed-form
  per-device bounds on alpha;
* subcarrier powers ``P`` -- a convex program in which the legacy-user rate
  is replaced by a concave lower bound that is tight at the previous powers;
* optionally (``SolverOptions.joint_block``) times and powers together, in
  the variables ``tau`` and ``tau * P`` where the same construction is again
  convex.  The three single blocks alone can stall at points where only a
  simultaneous change of time and power helps.

Every block update is accepted only if it does not decrease the objective, so
the objective trace is nondecreasing by construction.

All functions take an optional throughput profile ``psi`` (default all ones):
the objective is then ``min_{m: psi_m > 0} R_m / psi_m`` and devices with
``psi_m = 0`` carry no rate requirement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .kernels import (INFEASIBLE, ITER_LIMIT, OPTIMAL, InfeasibleError, LinearProgram,
                      SolveReport, SolverOptions, barrier_maximize, bisect_maximin, solve_lp)
from .system import (Allocation, SystemConfig, bd_rates, energies, energy_matrix,
                     lu_slot_rates, lu_throughput, violations)

LN2 = math.log(2.0)
# relative margin by which LP right-hand sides are tightened, so that
# solutions satisfy the constraints exactly despite solver tolerances
_LP_MARGIN = 1e-10


def _psi(psi, M: int) -> np.ndarray:
    psi = np.ones(M) if psi is None else np.asarray(psi, dtype=float).reshape(-1)
    if psi.shape != (M,) or np.any(psi < 0) or not np.any(psi > 0):
        raise ValueError("psi needs M nonnegative entries, at least one positive")
    return psi


def profile_objective(rates, psi=None) -> float:
    """``min_{psi_m > 0} rates_m / psi_m``."""
    rates = np.asarray(rates, dtype=float)
    psi = _psi(psi, rates.size)
    on = psi > 0
    return float(np.min(rates[on] / psi[on]))


def objective(alloc: Allocation, ch: ChannelSet, sys: SystemConfig, psi=None) -> float:
    return profile_objective(bd_rates(alloc, ch, sys), psi)


def slot_rates(alpha, P, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Per-unit-time device rates ``(1/N) log2(1 + alpha/sigma2 * b @ P)``, shape (M,)."""
    c = np.einsum("mk,mk->m", ch.bs_gain, np.atleast_2d(P))
    return np.log2(1.0 + np.asarray(alpha) * c / sys.sigma2) / sys.N


# ----------------------------------------------------------------------------
# time block

def _time_lp_rows(alpha, P, ch, sys, psi):
    """Constraint rows over x = (Q, tau_1..tau_M) for the time subproblem."""
    M = sys.M
    rho = slot_rates(alpha, P, ch, sys)
    A, b = [], []
    for m in range(M):
        if psi[m] > 0:
            row = np.zeros(M + 1)
            row[0], row[1 + m] = psi[m], -rho[m]
            A.append(row)
            b.append(0.0)
    if sys.D > 0:
        A.append(np.concatenate([[0.0], -lu_slot_rates(alpha, P, ch, sys)]))
        b.append(-sys.D * (1 + _LP_MARGIN))
    Emat = energy_matrix(alpha, P, ch, sys)
    for m in range(M):
        if sys.E_min[m] > 0:
            A.append(np.concatenate([[0.0], -Emat[m] / sys.E_min[m]]))
            b.append(-(1 + _LP_MARGIN))
    A.append(np.concatenate([[0.0], np.atleast_2d(P).sum(axis=1) / sys.p_total]))
    b.append(1 - _LP_MARGIN)
    A.append(np.concatenate([[0.0], np.ones(M)]))
    b.append(1 - _LP_MARGIN)
    return np.array(A), np.array(b), rho


def optimize_time(alpha, P, ch: ChannelSet, sys: SystemConfig, psi=None,
                  tie_break: bool = True) -> np.ndarray:
    """Optimal backscatter times for fixed reflection coefficients and powers.

    Solves ``max Q`` over (Q, tau) subject to the per-device rate, legacy rate,
    energy, budget and time constraints, all linear in tau.  Among optimal
    tau, a second LP picks one maximizing the sum of device rates.

    Raises
    ------
    InfeasibleError
        If no tau satisfies the legacy-rate, energy and budget constraints.
    """
    M = sys.M
    psi = _psi(psi, M)
    A, b, rho = _time_lp_rows(alpha, P, ch, sys, psi)
    lo = np.zeros(M + 1)
    hi = np.concatenate([[np.inf], np.ones(M)])
    c = np.zeros(M + 1)
    c[0] = 1.0
    x, rep = solve_lp(LinearProgram(c, A, b, lo, hi))
    if x is None:
        raise InfeasibleError(f"time allocation LP is {rep.status}")
    tau = np.clip(x[1:], 0.0, 1.0)
    if not tie_break:
        return tau
    q_star = profile_objective(rho * tau, psi)
    c2 = np.concatenate([[0.0], rho])
    lo2 = lo.copy()
    lo2[0] = q_star * (1 - 1e-12)
    x2, rep2 = solve_lp(LinearProgram(c2, A, b, lo2, hi))
    if x2 is not None:
        tau2 = np.clip(x2[1:], 0.0, 1.0)
        if profile_objective(rho * tau2, psi) >= q_star and _time_feasible(tau2, alpha, P, ch, sys):
            return tau2
    return tau


def _time_feasible(tau, alpha, P, ch, sys) -> bool:
    return max(violations(Allocation(tau, alpha, P), ch, sys).values()) <= 1e-9


# ----------------------------------------------------------------------------
# alpha block

def _alpha_bounds(tau, P, ch, sys, psi, Q):
    """Per-device interval [amin, amax] for level Q (amin > amax means infeasible)."""
    M, N = sys.M, sys.N
    c = np.einsum("mk,mk->m", ch.bs_gain, P)
    amin = np.zeros(M)
    for m in range(M):
        need = psi[m] * Q
        if need <= 0:
            continue
        if tau[m] <= 0 or c[m] <= 0:
            amin[m] = np.inf
            continue
        amin[m] = np.expm1(N * need / tau[m] * LN2) * sys.sigma2 / c[m]
    own = sys.eta * tau * np.einsum("mk,mk->m", ch.fwd_gain, P)
    total = energy_matrix(np.zeros(M), P, ch, sys) @ tau
    other = total - own
    amax = np.ones(M)
    for m in range(M):
        if sys.E_min[m] <= 0:
            continue
        if own[m] > 0:
            amax[m] = min(1.0, 1.0 - (sys.E_min[m] - other[m]) / own[m])
        elif other[m] < sys.E_min[m]:
            amax[m] = -np.inf
    return amin, amax


def _alpha_level_feasible(tau, P, ch, sys, psi, Q) -> bool:
    amin, amax = _alpha_bounds(tau, P, ch, sys, psi, Q)
    if np.any(amin > amax) or np.any(amin > 1.0) or np.any(amax < 0.0):
        return False
    return float(tau @ lu_slot_rates(amin, P, ch, sys)) >= sys.D


def optimize_alpha(tau, P, ch: ChannelSet, sys: SystemConfig, psi=None,
                   opts: SolverOptions | None = None) -> np.ndarray:
    """Optimal reflection coefficients for fixed times and powers.

    At a level Q the rate constraints give lower bounds on each alpha_m and
    the energy constraints give upper bounds; the legacy rate decreases in
    every alpha_m, so it only needs checking at the lower bounds.  The best Q
    is found by bisection.  Among the optimal alpha the returned point moves
    from the lower bounds towards the upper bounds as far as the legacy rate
    allows, which raises the rates of devices that are not binding.  Energy
    limited upper bounds are only approached halfway, so those constraints
    keep some slack for the next power update.

    Raises
    ------
    InfeasibleError
        If no alpha satisfies the constraints even at Q = 0.
    """
    opts = opts or SolverOptions()
    M = sys.M
    psi = _psi(psi, M)
    tau = np.asarray(tau, dtype=float)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    hi = profile_objective(tau * slot_rates(np.ones(M), P, ch, sys), psi)

    def feas(q):
        return _alpha_level_feasible(tau, P, ch, sys, psi, q)

    if hi <= 0:
        if not feas(0.0):
            raise InfeasibleError("no reflection coefficients satisfy the constraints")
        q_star = 0.0
    else:
        q_star = bisect_maximin(feas, 0.0, hi, tol=opts.bisect_tol * max(hi, 1e-300))
    amin, amax = _alpha_bounds(tau, P, ch, sys, psi, q_star)
    amin = np.clip(amin, 0.0, 1.0)
    amax = np.clip(amax, amin, 1.0)
    # stop halfway to an energy-limited bound: a tight energy constraint can
    # leave the power block without a strictly feasible point
    amax = np.where(amax >= 1.0, 1.0, 0.5 * (amin + amax))

    def lu_ok(t):
        return float(tau @ lu_slot_rates(amin + t * (amax - amin), P, ch, sys)) >= sys.D

    if lu_ok(1.0):
        t = 1.0
    else:
        t = bisect_maximin(lu_ok, 0.0, 1.0, tol=1e-12)
    return amin + t * (amax - amin)


# ----------------------------------------------------------------------------
# power block

def sco_lower_bound(P, P_anchor, tau, alpha, ch: ChannelSet, sys: SystemConfig) -> float:
    """Concave lower bound on the legacy-user rate, tight at ``P_anchor``.

    Each term ``log2(1 + h P / (a P + sigma2))`` is written as
    ``log2((a + h) P + sigma2) - log2(a P + sigma2)`` and the second (concave)
    logarithm is replaced by its first-order expansion at the anchor, which
    upper-bounds it.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Pa = np.atleast_2d(np.asarray(P_anchor, dtype=float))
    a = np.asarray(alpha, dtype=float)[:, None] * ch.intf_gain
    h = ch.lu_gain[None, :]
    s2 = sys.sigma2
    base = a * Pa + s2
    terms = (np.log2((a + h) * P + s2) - np.log2(base) - a * (P - Pa) / (base * LN2))
    return float(np.asarray(tau) @ terms.sum(axis=1)) / sys.N


@dataclass
class PowerStep:
    P: np.ndarray
    Q_lb: float
    accepted: bool
    report: SolveReport


def solve_power_surrogate(tau, alpha, P_anchor, ch: ChannelSet, sys: SystemConfig, psi=None,
                          opts: SolverOptions | None = None) -> PowerStep:
    """Solve the convex power subproblem built around ``P_anchor``.

    Returns the surrogate optimum without comparing it to the anchor; see
    :func:`optimize_power` for the guarded update.
    """
    opts = opts or SolverOptions()
    M, N = sys.M, sys.N
    psi = _psi(psi, M)
    tau = np.asarray(tau, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    Pa = np.atleast_2d(np.asarray(P_anchor, dtype=float))
    rows = np.flatnonzero(tau > 0)
    R = rows.size
    if R == 0:
        return PowerStep(Pa.copy(), 0.0, False, SolveReport(OPTIMAL))
    nv = 1 + R * N
    s2 = sys.sigma2

    def block(j):
        return slice(1 + j * N, 1 + (j + 1) * N)

    nonlinear = []
    for j, m in enumerate(rows):
        if psi[m] <= 0:
            continue
        w = alpha[m] / s2 * ch.bs_gain[m]
        coef = tau[m] / (N * LN2)

        def rate_con(x, order=2, j=j, m=m, w=w, coef=coef):
            z = 1.0 + w @ x[block(j)]
            if order == 0:
                return coef * math.log(z) - psi[m] * x[0], None, None
            g = np.zeros(nv)
            g[0] = -psi[m]
            g[block(j)] = coef * w / z
            H = np.zeros((nv, nv))
            H[block(j), block(j)] = -coef * np.outer(w, w) / z ** 2
            return coef * math.log(z) - psi[m] * x[0], g, H
        nonlinear.append(rate_con)

    if sys.D > 0:
        a = alpha[rows, None] * ch.intf_gain[rows]
        ah = a + ch.lu_gain[None, :]
        base = a * Pa[rows] + s2
        wt = (tau[rows] / N)[:, None]
        fixed = sum(float(tau[m]) * float(np.sum(np.log2(1.0 + ch.lu_gain * Pa[m]
                                                         / (alpha[m] * ch.intf_gain[m] * Pa[m] + s2))))
                    for m in range(M) if m not in rows) / N
        scale = max(sys.D, 1e-3)

        def lu_con(x, order=2):
            Pr = x[1:].reshape(R, N)
            u = ah * Pr + s2
            val = (np.sum(wt * (np.log2(u) - np.log2(base) - a * (Pr - Pa[rows]) / (base * LN2)))
                   + fixed - sys.D) / scale
            if order == 0:
                return val, None, None
            g = np.zeros(nv)
            g[1:] = (wt * (ah / (u * LN2) - a / (base * LN2))).ravel() / scale
            hd = np.zeros(nv)
            hd[1:] = (-wt * ah ** 2 / (u ** 2 * LN2)).ravel() / scale
            return val, g, hd
        nonlinear.append(lu_con)

    # linear rows: energy (>=) and budget (<=)
    A, b = [], []
    fixed_rows = [m for m in range(M) if m not in rows]
    for m in range(M):
        if sys.E_min[m] <= 0:
            continue
        row = np.zeros(nv)
        const = 0.0
        for r in range(M):
            coefs = sys.eta[m] * ch.fwd_gain[m] * tau[r] * ((1.0 - alpha[m]) if r == m else 1.0)
            if r in fixed_rows:
                const += float(coefs @ Pa[r])
            else:
                row[block(int(np.flatnonzero(rows == r)[0]))] = coefs
        A.append(-row / sys.E_min[m])
        b.append(-(1.0 - const / sys.E_min[m]) - _LP_MARGIN)
    row = np.zeros(nv)
    for j, m in enumerate(rows):
        row[block(j)] = tau[m] / sys.p_total
    A.append(row)
    b.append(1.0 - _LP_MARGIN)

    lo = np.concatenate([[-1.0], np.zeros(R * N)])  # any finite floor keeps centering bounded
    hi = np.concatenate([[np.inf], np.full(R * N, sys.p_peak)])
    q0 = profile_objective(tau * slot_rates(alpha, Pa, ch, sys), psi)
    x0 = np.concatenate([[q0 - max(1e-3 * abs(q0), 1e-9)], Pa[rows].ravel()])
    x, rep = barrier_maximize(np.eye(nv)[0], x0, lo, hi, np.array(A), np.array(b), nonlinear,
                              gap_tol=opts.barrier_gap)
    P_new = Pa.copy()
    P_new[rows] = np.clip(x[1:].reshape(R, N), 0.0, sys.p_peak)
    return PowerStep(P_new, float(x[0]), rep.status == OPTIMAL, rep)


def optimize_power(tau, alpha, P_anchor, ch: ChannelSet, sys: SystemConfig, psi=None,
                   opts: SolverOptions | None = None) -> np.ndarray:
    """Powers from the convex surrogate problem anchored at ``P_anchor``.

    The surrogate's feasible set lies inside the true one, so its solution
    satisfies the true legacy-rate constraint.  The anchor is returned
    unchanged if the new powers do not improve the true objective or fail a
    true constraint.
    """
    step = solve_power_surrogate(tau, alpha, P_anchor, ch, sys, psi, opts)
    Pa = np.atleast_2d(np.asarray(P_anchor, dtype=float))
    if step.report.status == INFEASIBLE:
        return Pa.copy()
    psi_v = _psi(psi, sys.M)
    q_old = profile_objective(np.asarray(tau) * slot_rates(alpha, Pa, ch, sys), psi_v)
    q_new = profile_objective(np.asarray(tau) * slot_rates(alpha, step.P, ch, sys), psi_v)
    ok = max(violations(Allocation(tau, alpha, step.P), ch, sys).values()) <= 1e-9
    return step.P if (ok and q_new >= q_old) else Pa.copy()


def _perspective(e, tau, x):
    """``tau * log(1 + e * x / tau)`` elementwise with its partial derivatives."""
    z = 1.0 + e * x / tau
    val = tau * np.log(z)
    d_x = e / z
    d_tau = np.log(z) - (z - 1.0) / z
    return val, d_x, d_tau, z


def optimize_time_power(tau, alpha, P_anchor, ch: ChannelSet, sys: SystemConfig, psi=None,
                        opts: SolverOptions | None = None):
    """Joint update of times and powers for fixed reflection coefficients.

    In the variables ``tau`` and ``X = tau * P`` every device rate is the
    perspective of a concave function and hence jointly concave, and the
    energy, budget, time and peak constraints are linear.  The legacy rate is
    a difference of two such perspectives; the subtracted one is replaced by
    its tangent at the anchor (exact there and an upper bound elsewhere,
    since the perspective is concave and positively homogeneous).  The
    resulting convex program is solved exactly.

    Returns ``(tau, P)``; the anchor itself if the step does not improve
    the true objective or violates a true constraint.
    """
    opts = opts or SolverOptions()
    M, N = sys.M, sys.N
    psi = _psi(psi, M)
    tau_a = np.asarray(tau, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    Pa = np.atleast_2d(np.asarray(P_anchor, dtype=float))
    s2 = sys.sigma2
    nv = 1 + M + M * N
    it = slice(1, 1 + M)

    def xs(m):
        return slice(1 + M + m * N, 1 + M + (m + 1) * N)

    nonlinear = []
    for m in range(M):
        if psi[m] <= 0:
            continue
        w = alpha[m] / s2 * ch.bs_gain[m]
        coef = 1.0 / (N * LN2)

        def rate_con(x, order=2, m=m, w=w):
            t, X = x[1 + m], x[xs(m)]
            u = float(w @ X)
            z = 1.0 + u / t
            val = coef * t * math.log(z) - psi[m] * x[0]
            if order == 0:
                return val, None, None
            g = np.zeros(nv)
            g[0] = -psi[m]
            g[1 + m] = coef * (math.log(z) - (z - 1.0) / z)
            g[xs(m)] = coef * w / z
            v = np.zeros(nv)
            v[xs(m)] = w
            v[1 + m] = -u / t
            return val, g, -coef / (t * z ** 2) * np.outer(v, v)
        nonlinear.append(rate_con)

    if sys.D > 0:
        a = alpha[:, None] * ch.intf_gain / s2          # interference-only SNR per unit power
        ah = a + ch.lu_gain[None, :] / s2               # signal plus interference
        # tangent of the subtracted perspective, taken at direction (1, P_anchor)
        _, lin_x, lin_tau, _ = _perspective(a, np.ones((M, 1)), Pa)
        lin_tau = lin_tau.sum(axis=1)
        scale = max(sys.D, 1e-3)
        c0 = 1.0 / (N * LN2 * scale)

        def lu_con(x, order=2):
            t = x[it][:, None]
            X = x[1 + M:].reshape(M, N)
            val_p, dx_p, dt_p, z = _perspective(ah, t, X)
            val = c0 * (val_p.sum() - np.sum(lin_x * X) - lin_tau @ x[it]) - sys.D / scale
            if order == 0:
                return val, None, None
            g = np.zeros(nv)
            g[it] = c0 * (dt_p.sum(axis=1) - lin_tau)
            g[1 + M:] = c0 * (dx_p - lin_x).ravel()
            H = np.zeros((nv, nv))
            # each (tau_m, X_mk) pair contributes -e^2/(tau z^2) [1, -x/tau][1, -x/tau]^T
            cw = -c0 * ah ** 2 / (t * z ** 2)
            r = X / t
            for m in range(M):
                sl = xs(m)
                H[sl, sl] += np.diag(cw[m])
                H[1 + m, sl] += -cw[m] * r[m]
                H[sl, 1 + m] += -cw[m] * r[m]
                H[1 + m, 1 + m] += float(np.sum(cw[m] * r[m] ** 2))
            return val, g, H
        nonlinear.append(lu_con)

    A, b = [], []
    for m in range(M):
        if sys.E_min[m] <= 0:
            continue
        row = np.zeros(nv)
        f = sys.eta[m] * ch.fwd_gain[m]
        for r in range(M):
            row[xs(r)] = f * ((1.0 - alpha[m]) if r == m else 1.0)
        A.append(-row / sys.E_min[m])
        b.append(-1.0 - _LP_MARGIN)
    row = np.zeros(nv)
    row[1 + M:] = 1.0 / sys.p_total
    A.append(row)
    b.append(1.0 - _LP_MARGIN)
    row = np.zeros(nv)
    row[it] = 1.0
    A.append(row)
    b.append(1.0 - _LP_MARGIN)
    for m in range(M):
        for k in range(N):
            row = np.zeros(nv)
            row[1 + M + m * N + k] = 1.0 / sys.p_peak
            row[1 + m] = -1.0
            A.append(row)
            b.append(0.0)

    q0 = profile_objective(tau_a * slot_rates(alpha, Pa, ch, sys), psi)
    t0 = np.maximum(tau_a, 1e-6)
    x0 = np.concatenate([[q0 - max(1e-3 * abs(q0), 1e-9)], t0, (t0[:, None] * Pa).ravel()])
    lo = np.concatenate([[-1.0], np.zeros(M + M * N)])
    hi = np.concatenate([[np.inf], np.ones(M), np.full(M * N, sys.p_peak)])
    x, rep = barrier_maximize(np.eye(nv)[0], x0, lo, hi, np.array(A), np.array(b), nonlinear,
                              gap_tol=opts.barrier_gap)
    if rep.status == INFEASIBLE:
        return tau_a.copy(), Pa.copy()
    t_new = x[it].copy()
    X = x[1 + M:].reshape(M, N)
    P_new = Pa.copy()
    live = t_new > 1e-12
    P_new[live] = np.clip(X[live] / t_new[live, None], 0.0, sys.p_peak)
    t_new[~live] = 0.0
    cand = Allocation(t_new, alpha, P_new)
    q_new = objective(cand, ch, sys, psi)
    ok = max(violations(cand, ch, sys).values()) <= 1e-9
    if ok and q_new >= q0:
        return t_new, P_new
    return tau_a.copy(), Pa.copy()


# ----------------------------------------------------------------------------
# outer loop

@dataclass
class BcdState:
    """State and history of the block coordinate descent.

    ``trace[j]`` is the objective after outer iteration j (``trace[0]`` at the
    start); ``substeps`` lists ``(iteration, block, objective)`` after every
    block update.
    """

    alloc: Allocation
    Q: float
    iter: int = 0
    trace: list = field(default_factory=list)
    substeps: list = field(default_factory=list)
    records: list = field(default_factory=list)
    status: str = ITER_LIMIT

    def to_dict(self) -> dict:
        return {"Q": self.Q, "iter": self.iter, "status": self.status, "trace": list(self.trace),
                "alloc": self.alloc.to_dict(), "records": self.records}


def _record(it, alloc, ch, sys, psi):
    rates = bd_rates(alloc, ch, sys)
    return {"iter": it, "Q": profile_objective(rates, psi), "rates": rates.tolist(),
            "lu_rate": lu_throughput(alloc, ch, sys),
            "energy_uJ": (energies(alloc, ch, sys) * 1e6).tolist()}


def max_slack_powers(ch: ChannelSet, sys: SystemConfig, extra_energy=None):
    """Common power vector maximizing the smallest normalized constraint slack.

    With every alpha at zero and every slot using the same powers ``p``, the
    legacy rate and the harvested energies are as large as they can be for a
    given time-averaged power profile, so the network constraints can be met
    at all if and only if the returned slack is nonnegative.

    ``extra_energy`` (shape (M,)) is subtracted from the energy requirements.

    Returns
    -------
    (p, slack)
        ``slack`` is the smallest of the legacy-rate margin over ``max(D, 1e-3)``
        and the relative energy margins, capped at 1.
    """
    M, N = sys.M, sys.N
    E_req = sys.E_min - (0.0 if extra_energy is None else np.asarray(extra_energy))
    nv = 1 + N
    s2 = sys.sigma2
    h = ch.lu_gain
    scale = max(sys.D, 1e-3)
    nonlinear = []
    if sys.D > 0:
        def lu_con(x, order=2):
            u = 1.0 + h * x[1:] / s2
            val = (float(np.sum(np.log2(u))) / N - sys.D) / scale - x[0]
            if order == 0:
                return val, None, None
            g = np.concatenate([[-1.0], h / (s2 * u * LN2 * N * scale)])
            hd = np.concatenate([[0.0], -(h / s2) ** 2 / (u ** 2 * LN2 * N * scale)])
            return val, g, hd
        nonlinear.append(lu_con)
    A, b = [], []
    for mm in range(M):
        if E_req[mm] > 0:
            A.append(np.concatenate([[1.0], -sys.eta[mm] * ch.fwd_gain[mm] / E_req[mm]]))
            b.append(-1.0)
    A.append(np.concatenate([[0.0], np.full(N, 1.0 / sys.p_total)]))
    b.append(1.0)
    lo = np.concatenate([[-1.0], np.zeros(N)])
    hi = np.concatenate([[1.0], np.full(N, sys.p_peak)])
    x0 = np.concatenate([[-0.5], np.full(N, 0.5 * min(sys.p_peak, sys.p_total / N))])
    x, rep = barrier_maximize(np.eye(nv)[0], x0, lo, hi, np.array(A), np.array(b), nonlinear,
                              gap_tol=1e-9)
    if rep.status == INFEASIBLE:
        return x[1:], -math.inf
    return np.clip(x[1:], 0.0, sys.p_peak), float(x[0])


START_ALPHAS = (0.5, 1.0)


def feasible_start(ch: ChannelSet, sys: SystemConfig, psi=None, alpha0: float = 0.5) -> Allocation:
    """A feasible allocation to start the block coordinate descent from.

    Tries tau = 1/M, alpha = alpha0, P = 1/(MN) first, then the best tau for
    those alpha and P, and finally tau = 1/M with the common power vector of
    :func:`max_slack_powers` in every slot and the best alpha for it.

    Raises
    ------
    InfeasibleError
        If the network constraints cannot be met by any allocation.
    """
    M = sys.M
    alloc = Allocation.initial(sys, alpha=alpha0)
    if max(violations(alloc, ch, sys).values()) <= 1e-9:
        return alloc
    try:
        tau = optimize_time(alloc.alpha, alloc.P, ch, sys, psi, tie_break=False)
        cand = Allocation(tau, alloc.alpha, alloc.P)
        if max(violations(cand, ch, sys).values()) <= 1e-9:
            return cand
    except InfeasibleError:
        pass
    p, slack = max_slack_powers(ch, sys)
    if slack < 0:
        raise InfeasibleError("legacy-rate and energy requirements cannot be met together")
    cand = Allocation(np.full(M, 1.0 / M), np.zeros(M), np.tile(p, (M, 1)))
    if max(violations(cand, ch, sys).values()) > 1e-9:
        raise InfeasibleError("could not construct a feasible starting allocation")
    # alpha = 0 gives no device any rate; raise it as far as the constraints allow
    raised = Allocation(cand.tau, optimize_alpha(cand.tau, cand.P, ch, sys, psi), cand.P)
    if max(violations(raised, ch, sys).values()) <= 1e-9:
        return raised
    return cand


def run_bcd(alloc: Allocation, ch: ChannelSet, sys: SystemConfig, psi=None,
            opts: SolverOptions | None = None) -> BcdState:
    """Block coordinate descent from a feasible allocation."""
    opts = opts or SolverOptions()
    psi = _psi(psi, sys.M)
    eps = opts.epsilon
    Q = objective(alloc, ch, sys, psi)
    state = BcdState(alloc.copy(), Q, 0, [Q], [], [_record(0, alloc, ch, sys, psi)])
    extra_used = False
    for it in range(1, opts.max_bcd_iter + 1):
        cur = state.alloc
        q_start = state.Q

        def accept(cand: Allocation, name: str):
            q = objective(cand, ch, sys, psi)
            if q >= state.Q and max(violations(cand, ch, sys).values()) <= 1e-9:
                state.alloc, state.Q = cand, q
            state.substeps.append((it, name, state.Q))

        try:
            tau = optimize_time(cur.alpha, cur.P, ch, sys, psi)
            accept(Allocation(tau, cur.alpha, cur.P), "time")
        except InfeasibleError:
            state.substeps.append((it, "time", state.Q))
        cur = state.alloc
        try:
            alpha = optimize_alpha(cur.tau, cur.P, ch, sys, psi, opts)
            accept(Allocation(cur.tau, alpha, cur.P), "alpha")
        except InfeasibleError:
            state.substeps.append((it, "alpha", state.Q))
        cur = state.alloc
        P = optimize_power(cur.tau, cur.alpha, cur.P, ch, sys, psi, opts)
        accept(Allocation(cur.tau, cur.alpha, P), "power")
        if opts.joint_block:
            cur = state.alloc
            tau, P = optimize_time_power(cur.tau, cur.alpha, cur.P, ch, sys, psi, opts)
            accept(Allocation(tau, cur.alpha, P), "time_power")

        state.iter = it
        state.trace.append(state.Q)
        state.records.append(_record(it, state.alloc, ch, sys, psi))
        if state.Q - q_start < eps:
            slack = lu_throughput(state.alloc, ch, sys) - sys.D
            if opts.stall_check and not extra_used and slack > 10 * eps:
                extra_used = True
                cur = state.alloc
                P = optimize_power(cur.tau, cur.alpha, cur.P, ch, sys, psi, opts)
                before = state.Q
                accept(Allocation(cur.tau, cur.alpha, P), "power")
                if state.Q - before >= eps:
                    state.trace[-1] = state.Q
                    state.records[-1] = _record(it, state.alloc, ch, sys, psi)
                    continue
            state.status = OPTIMAL
            break
    return state


def solve_multi_bd(ch: ChannelSet, sys: SystemConfig, opts: SolverOptions | None = None,
                   psi=None, alpha0=START_ALPHAS) -> BcdState:
    """Max-min throughput allocation for all devices.

    Starts from tau = 1/M, alpha = alpha0, P = 1/(MN) (repaired if
    infeasible) and alternates the time, reflection and power updates until
    an outer iteration gains less than ``opts.epsilon``.

    ``alpha0`` may be a sequence of starting reflection coefficients, in
    which case each start is run and the best final state is returned (the
    earliest on ties).  The default pairs alpha = 0.5 with full reflection:
    the problem is not jointly concave and the alpha = 1 start usually ends
    at the better stationary point.

    Raises
    ------
    InfeasibleError
        If no feasible starting allocation exists.
    """
    opts = opts or SolverOptions()
    best = None
    for a0 in np.atleast_1d(alpha0):
        st = run_bcd(feasible_start(ch, sys, psi, float(a0)), ch, sys, psi, opts)
        if best is None or st.Q > best.Q:
            best = st
    return best
