"""Single-device allocation: Lagrange dual ascent plus a search over alpha.

With one device, ``tau = 1`` and for a fixed reflection coefficient the power
problem is convex once interference at the legacy user is neglected:

    maximize    sum_k b_k P_k                      b_k = |F_k G_k|^2
    subject to  (1/N) sum_k log2(1 + P_k / n_k) >= D      n_k = sigma2 / |H_k|^2
                sum_k e_k P_k >= E_min               e_k = eta (1 - alpha) |F_k|^2
                sum_k P_k <= P_bar,  0 <= P_k <= P_peak

The dual is minimized over (lambda, theta) by the ellipsoid method or by
projected subgradient steps; the budget multiplier mu is solved exactly at every iterate so the budget is
always tight.  The device throughput is (1/N) log2(1 + alpha/sigma2 * b @ P).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .kernels import (ITER_LIMIT, OPTIMAL, InfeasibleError, LinearProgram, SolveReport,
                      SolverOptions, solve_lp)
from .system import SystemConfig

LN2 = math.log(2.0)


@dataclass
class DualVars:
    """Multipliers of the LU-rate (``lam``), energy (``theta``) and budget
    (``mu``) constraints, in the units of the raw Lagrangian."""

    lam: float = 0.0
    theta: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.theta < 0:
            raise ValueError("lam and theta must be nonnegative")

    def to_dict(self) -> dict:
        return {"lam": self.lam, "theta": self.theta, "mu": self.mu}


@dataclass
class SingleBdSolution:
    alpha: float
    p: np.ndarray
    Q: float
    dual: DualVars
    report: SolveReport
    lu_rate: float = math.nan
    lu_rate_full: float = math.nan
    energy: float = math.nan
    alpha_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "p": self.p.tolist(), "Q": self.Q,
                "dual": self.dual.to_dict(), "status": self.report.status,
                "iterations": self.report.iterations, "lu_rate": self.lu_rate,
                "lu_rate_full": self.lu_rate_full, "energy": self.energy}


# ----------------------------------------------------------------------------
# per-subcarrier maximizer

def _powers(lin, lam, noise, mu, p_peak, N):
    """argmax over [0, p_peak] of (lin_k - mu) P + (lam/N) log2(1 + P/noise_k)."""
    lin = np.asarray(lin, dtype=float)
    denom = mu - lin
    with np.errstate(divide="ignore", over="ignore"):
        level = lam / (N * LN2 * np.maximum(denom, 1e-300)) - noise
    return np.where(denom <= 0, p_peak, np.clip(level, 0.0, p_peak))


def theorem1_power(k, dual: DualVars, alpha: float, ch: ChannelSet, sys: SystemConfig, m: int = 0):
    """Closed-form maximizer of the per-subcarrier Lagrangian.

    ``P_k = min(P_peak, (lam / (N ln2 (mu - |F_k G_k|^2 - theta e_k)) - sigma2/|H_k|^2)^+)``
    with ``e_k = eta (1 - alpha) |F_k|^2``; ``P_peak`` when the denominator is
    not positive, where the Lagrangian is nondecreasing in ``P_k``.
    ``k`` may be an index or an index array.
    """
    k = np.asarray(k)
    b = ch.bs_gain[m, k]
    e = sys.eta[m] * (1.0 - alpha) * ch.fwd_gain[m, k]
    with np.errstate(divide="ignore"):
        noise = sys.sigma2 / ch.lu_gain[k]
    P = _powers(b + dual.theta * e, dual.lam, noise, dual.mu, sys.p_peak, sys.N)
    return float(P) if P.ndim == 0 else P


def subcarrier_lagrangian(P, k, dual: DualVars, alpha: float, ch: ChannelSet, sys: SystemConfig,
                          m: int = 0):
    """Per-subcarrier term of the Lagrangian as a function of ``P`` (vectorized in P)."""
    b = ch.bs_gain[m, k]
    e = sys.eta[m] * (1.0 - alpha) * ch.fwd_gain[m, k]
    P = np.asarray(P, dtype=float)
    return ((b + dual.theta * e - dual.mu) * P
            + dual.lam / sys.N * np.log2(1.0 + ch.lu_gain[k] * P / sys.sigma2))


def _budget_powers(lin, lam, noise, p_peak, budget, N):
    """Per-subcarrier maximizer with mu >= 0 chosen so the budget holds (tight if binding)."""
    lin = np.asarray(lin, dtype=float)
    if N * p_peak <= budget:
        return np.full(lin.size, p_peak), 0.0
    if lam <= 0:
        # linear Lagrangian: fill the largest coefficients first
        P = np.zeros(lin.size)
        left = budget
        order = np.argsort(-lin, kind="stable")
        mu = 0.0
        for k in order:
            if lin[k] <= 0 or left <= 0:
                break
            P[k] = min(p_peak, left)
            left -= P[k]
            mu = lin[k] if left <= 0 else 0.0
        return P, max(mu, 0.0)
    if _powers(lin, lam, noise, 0.0, p_peak, N).sum() <= budget:
        return _powers(lin, lam, noise, 0.0, p_peak, N), 0.0
    lo = 0.0
    hi = max(float(lin.max()), 0.0) + lam / (LN2 * budget)
    if _powers(lin, lam, noise, hi, p_peak, N).sum() > budget:
        # lam is below the float resolution of lin, so the log term is
        # negligible and tied coefficients would all sit at peak power
        return _budget_powers(lin, 0.0, noise, p_peak, budget, N)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _powers(lin, lam, noise, mid, p_peak, N).sum() > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    P = _powers(lin, lam, noise, hi, p_peak, N)
    # close the last rounding gap on the subcarriers not at a bound
    free = (P > 0) & (P < p_peak)
    gap = budget - P.sum()
    if free.any() and gap > 0:
        P[free] = np.minimum(p_peak, P[free] + gap / free.sum())
    return P, hi


# ----------------------------------------------------------------------------
# problem data for one device and alpha

class _Instance:
    def __init__(self, alpha, ch: ChannelSet, sys: SystemConfig, m: int):
        self.alpha = float(alpha)
        self.N = sys.N
        self.sys = sys
        self.b = ch.bs_gain[m]
        self.f = ch.fwd_gain[m]
        self.e = sys.eta[m] * (1.0 - self.alpha) * self.f
        with np.errstate(divide="ignore"):
            self.noise = sys.sigma2 / ch.lu_gain
        self.D = float(sys.D)
        self.E = float(sys.E_min[m])
        self.s_b = max(float(self.b.max()), 1e-300) * sys.p_total
        self.c_r = max(self.D, 1e-3)
        self.c_e = self.E if self.E > 0 else 1.0

    def rate(self, P):
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log2(1.0 + P / self.noise))) / self.N

    def energy(self, P):
        return float(self.e @ P)

    def feasible(self, P, tol=0.0):
        return self.rate(P) >= self.D - tol and self.energy(P) >= self.E * (1 - tol)


def lu_max_power(ch: ChannelSet, sys: SystemConfig, m: int = 0) -> np.ndarray:
    """Water-filling powers maximizing the interference-free legacy rate."""
    with np.errstate(divide="ignore"):
        noise = sys.sigma2 / ch.lu_gain
    return _budget_powers(np.zeros(sys.N), 1.0, noise, sys.p_peak, sys.p_total, sys.N)[0]


def max_forward_power(ch: ChannelSet, sys: SystemConfig, m: int = 0, D: float | None = None):
    """Powers maximizing ``sum_k |F_k|^2 P_k`` subject to the legacy rate ``>= D``.

    Returns ``None`` if the legacy requirement cannot be met at all.
    """
    D = sys.D if D is None else D
    with np.errstate(divide="ignore"):
        noise = sys.sigma2 / ch.lu_gain
    f = ch.fwd_gain[m] / max(float(ch.fwd_gain[m].max()), 1e-300)
    N = sys.N

    def rate(P):
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log2(1.0 + P / noise))) / N

    P0 = _budget_powers(f, 0.0, noise, sys.p_peak, sys.p_total, N)[0]
    if rate(P0) >= D:
        return P0
    if rate(lu_max_power(ch, sys, m)) < D:
        return None
    lo, hi = 0.0, 1.0
    while rate(_budget_powers(f, hi, noise, sys.p_peak, sys.p_total, N)[0]) < D:
        hi *= 2.0
        if hi > 1e300:
            return lu_max_power(ch, sys, m)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(_budget_powers(f, mid, noise, sys.p_peak, sys.p_total, N)[0]) >= D:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-13 * hi:
            break
    return _budget_powers(f, hi, noise, sys.p_peak, sys.p_total, N)[0]


def max_energy_under_lu(ch: ChannelSet, sys: SystemConfig, m: int = 0) -> float:
    """Largest ``sum_k |F_k|^2 P_k`` compatible with the legacy requirement (-inf if none)."""
    P = max_forward_power(ch, sys, m)
    return -math.inf if P is None else float(ch.fwd_gain[m] @ P)


def _interior_anchor(inst: _Instance, ch, sys, m):
    """A budget-feasible point meeting both constraints, with slack when possible."""
    P_en = max_forward_power(ch, sys, m)
    if P_en is None or not inst.energy(P_en) >= inst.E * (1 - 1e-12):
        return None
    P_lu = lu_max_power(ch, sys, m)
    E_en, E_lu = inst.energy(P_en), inst.energy(P_lu)
    # along P_en -> P_lu the rate stays >= D (concave) and energy falls linearly
    if E_lu >= 0.5 * (E_en + inst.E) or E_en <= E_lu:
        s = 0.5
    else:
        s = min(0.5, (E_en - 0.5 * (E_en + inst.E)) / (E_en - E_lu))
    return (1.0 - s) * P_en + s * P_lu


def _repair(P, anchor, inst: _Instance):
    """Move ``P`` toward a feasible anchor just far enough to be feasible."""
    if inst.feasible(P):
        return P
    lo, hi = 0.0, 1.0  # weight on the anchor; feasible set in t is [t*, 1]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if inst.feasible((1 - mid) * P + mid * anchor):
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return (1 - hi) * P + hi * anchor


def _throughput(inst: _Instance, P) -> float:
    return math.log2(1.0 + inst.alpha / inst.sys.sigma2 * float(inst.b @ P)) / inst.N


def dual_ascent(alpha: float, ch: ChannelSet, sys: SystemConfig, opts: SolverOptions | None = None,
                dual0: DualVars | None = None, m: int = 0) -> SingleBdSolution:
    """Solve the interference-free power problem at a fixed ``alpha`` by dual ascent.

    Subgradient steps on the normalized (lambda, theta) use either Polyak steps
    towards the best primal value found so far (``opts.step_rule="polyak"``)
    or diminishing steps ``xi / sqrt(i)`` (``"diminishing"``); the default
    ``"ellipsoid"`` runs the ellipsoid method instead.  Every primal iterate
    is repaired to exact feasibility, and mixtures of the iterates are tried
    periodically; the loop stops once the best dual value and the best
    feasible primal value are within ``opts.epsilon`` (relative).

    Raises
    ------
    InfeasibleError
        If no power vector meets the legacy-rate and energy requirements.
    """
    opts = opts or SolverOptions()
    inst = _Instance(alpha, ch, sys, m)
    N, pk, Pb = sys.N, sys.p_peak, sys.p_total
    anchor = _interior_anchor(inst, ch, sys, m)
    if anchor is None:
        raise InfeasibleError(f"legacy-rate and energy requirements cannot both hold at alpha={alpha:g}")
    b_n = inst.b / inst.s_b
    e_n = inst.e / inst.c_e
    use_r = inst.D > 0
    use_e = inst.E > 0

    # easy cases: full peak power everywhere, or no active constraint
    if N * pk <= Pb:
        P = np.full(N, pk)
        return _finish(inst, P, DualVars(), SolveReport(OPTIMAL, iterations=0), ch, sys, m)
    P_free, mu_free = _budget_powers(b_n, 0.0, inst.noise, pk, Pb, N)
    if inst.feasible(P_free):
        dual = DualVars(0.0, 0.0, mu_free * inst.s_b)
        return _finish(inst, P_free, dual, SolveReport(OPTIMAL, float(b_n @ P_free), 0), ch, sys, m)

    active = [i for i, on in enumerate((use_r, use_e)) if on]
    best = {"G": math.inf, "dual": (0.0, 0.0, 0.0), "f": float(b_n @ anchor), "P": anchor.copy()}
    trace = []
    pool = [anchor]

    def recover():
        """Best mixture of the Lagrangian maximizers seen so far.

        Near a dual optimum the maximizer jumps between vertices when the
        Lagrangian is (close to) linear in P; a mixture recovers the primal
        optimum.  The rate row uses the mixture of per-point rates, a lower
        bound on the rate of the mixture since the rate is concave.
        """
        pts = np.array(pool)
        rows = np.array([[-(inst.rate(q) - inst.D) / inst.c_r for q in pts],
                         -(pts @ inst.e - inst.E) / inst.c_e])
        lp = LinearProgram(pts @ b_n, A_ub=rows[active], b_ub=np.zeros(len(active)), lo=0.0,
                           A_eq=np.ones((1, len(pts))), b_eq=[1.0])
        w, _ = solve_lp(lp)
        if w is None:
            return
        w = np.maximum(w, 0.0)
        P = _repair(np.minimum((w / w.sum()) @ pts, pk), anchor, inst)
        if float(b_n @ P) > best["f"]:
            best["f"], best["P"] = float(b_n @ P), P

    def query(z):
        """Dual value and subgradient at z = (lam, theta); updates the best bounds."""
        lam, th = z
        P, mu = _budget_powers(b_n + th * e_n, lam / inst.c_r, inst.noise, pk, Pb, N)
        r = (inst.rate(P) - inst.D) / inst.c_r
        e = (inst.energy(P) - inst.E) / inst.c_e
        G = float(b_n @ P) + lam * r + th * e + mu * (Pb - P.sum())
        if G < best["G"]:
            best["G"], best["dual"] = G, (lam, th, mu)
        Pr = _repair(P, anchor, inst)
        fr = float(b_n @ Pr)
        if fr > best["f"]:
            best["f"], best["P"] = fr, Pr
        pool.append(P)
        gap = (best["G"] - best["f"]) / max(abs(best["G"]), 1e-300)
        if gap > opts.epsilon and len(pool) % 16 == 0:
            recover()
            gap = (best["G"] - best["f"]) / max(abs(best["G"]), 1e-300)
        trace.append(gap)
        grad = np.array([r if use_r else 0.0, e if use_e else 0.0])
        return G, grad, gap

    # radius of a ball holding every optimal dual point, from the anchor's slack
    G0 = query((0.0, 0.0))[0]
    slack = [(inst.rate(anchor) - inst.D) / inst.c_r, (inst.energy(anchor) - inst.E) / inst.c_e]
    s_min = min(slack[i] for i in active)
    radius = (G0 - float(b_n @ anchor)) / s_min * 1.01 if s_min > 1e-12 else 1e6
    radius = max(radius, 1e-12)

    z = np.zeros(2)
    if dual0 is not None:
        z = np.array([dual0.lam * inst.c_r / inst.s_b, dual0.theta * inst.c_e / inst.s_b])
        z = np.where([use_r, use_e], np.minimum(z, radius), 0.0)
    status = ITER_LIMIT
    it = 0
    if opts.step_rule == "ellipsoid":
        status, it = _ellipsoid(query, z, radius, active, opts)
    else:
        xi0 = None
        for it in range(1, opts.max_dual_iter + 1):
            G, grad, gap = query(tuple(z))
            if gap <= opts.epsilon:
                status = OPTIMAL
                break
            norm2 = float(grad @ grad)
            if norm2 == 0.0:
                status = OPTIMAL
                break
            if opts.step_rule == "polyak":
                step = opts.step_scale * max(G - best["f"], 0.0) / norm2
            else:
                if xi0 is None:
                    xi0 = opts.step_scale * max(G - best["f"], 1e-12) / norm2
                step = xi0 / math.sqrt(it)
            z = np.maximum(0.0, z - step * grad)

    P_best, f_best = best["P"], best["f"]
    lam_b, th_b, mu_b = best["dual"]
    dual = DualVars(lam_b * inst.s_b / inst.c_r, th_b * inst.s_b / inst.c_e, mu_b * inst.s_b)
    report = SolveReport(status, f_best, it, 0.0, trace)
    return _finish(inst, P_best, dual, report, ch, sys, m)


def _ellipsoid(query, z0, radius, active, opts):
    """Ellipsoid method on the nonnegative (lam, theta) quadrant, restricted to
    the ``active`` coordinates.  Returns ``(status, iterations)``."""
    n = len(active)
    idx = np.array(active)
    c = z0[idx].astype(float)
    if n == 1:
        lo, hi = 0.0, radius + float(c[0])
        for it in range(1, opts.max_dual_iter + 1):
            mid = 0.5 * (lo + hi)
            z = np.zeros(2)
            z[idx] = mid
            _, grad, gap = query(tuple(z))
            if gap <= opts.epsilon:
                return OPTIMAL, it
            if grad[idx[0]] > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-15 * max(hi, 1e-300):
                return ITER_LIMIT, it
        return ITER_LIMIT, opts.max_dual_iter
    A = np.eye(n) * (radius + float(np.abs(c).max())) ** 2 * n
    for it in range(1, opts.max_dual_iter + 1):
        if np.any(c < 0):
            g = np.zeros(n)
            g[int(np.argmin(c))] = -1.0  # cut away the infeasible side
        else:
            z = np.zeros(2)
            z[idx] = c
            _, grad, gap = query(tuple(z))
            if gap <= opts.epsilon:
                return OPTIMAL, it
            g = grad[idx]
            if not np.any(g):
                return OPTIMAL, it
        Ag = A @ g
        gAg = float(g @ Ag)
        if gAg <= 0 or np.sqrt(max(np.linalg.det(A), 0.0)) < 1e-300:
            return ITER_LIMIT, it
        gt = Ag / math.sqrt(gAg)
        c = c - gt / (n + 1)
        A = n * n / (n * n - 1.0) * (A - 2.0 / (n + 1) * np.outer(gt, gt))
        A = 0.5 * (A + A.T)
    return ITER_LIMIT, opts.max_dual_iter


def _finish(inst, P, dual, report, ch, sys, m):
    from .system import lu_slot_rates
    Q = _throughput(inst, P)
    report.objective = Q
    full = float(lu_slot_rates(np.array([inst.alpha]), P[None, :], ch.device(m), sys)[0])
    viol = max(0.0, inst.D - inst.rate(P), (inst.E - inst.energy(P)) / inst.c_e,
               (P.sum() - sys.p_total) / sys.p_total)
    report.max_violation = viol
    return SingleBdSolution(inst.alpha, P, Q, dual, report, inst.rate(P), full, inst.energy(P))


def alpha_upper_bound(ch: ChannelSet, sys: SystemConfig, m: int = 0) -> float:
    """Largest alpha for which the energy requirement can still be met (nan if never)."""
    E_fwd = max_energy_under_lu(ch, sys, m)
    if not np.isfinite(E_fwd):
        return math.nan
    E = float(sys.E_min[m])
    if E <= 0:
        return 1.0
    denom = sys.eta[m] * E_fwd
    if denom <= 0:
        return math.nan
    a = 1.0 - E / denom
    if a < -1e-12:
        return math.nan
    return min(1.0, max(0.0, a))


def solve_single_bd(ch: ChannelSet, sys: SystemConfig, opts: SolverOptions | None = None,
                    m: int = 0) -> SingleBdSolution:
    """Optimize alpha and the subcarrier powers of a single device.

    For fixed alpha the best achievable ``b @ P`` is nonincreasing and concave
    in alpha, so ``alpha * (b @ P)`` is unimodal on the feasible interval
    ``[0, alpha_max]``.  A coarse grid brackets the maximum and golden-section
    search refines it to ``opts.alpha_tol``; duals are warm-started between
    neighbouring candidates.
    """
    opts = opts or SolverOptions()
    a_max = alpha_upper_bound(ch, sys, m)
    if not np.isfinite(a_max):
        raise InfeasibleError("no reflection coefficient satisfies the legacy and energy requirements")
    cache: dict[float, SingleBdSolution] = {}
    warm = [None]

    def evaluate(a: float) -> float:
        a = float(min(max(a, 0.0), a_max))
        if a not in cache:
            try:
                sol = dual_ascent(a, ch, sys, opts, dual0=warm[0], m=m)
            except InfeasibleError:
                cache[a] = None
                return -math.inf
            cache[a] = sol
            warm[0] = sol.dual
        sol = cache[a]
        return -math.inf if sol is None else sol.Q

    if a_max == 0.0:
        evaluate(0.0)
    else:
        grid = np.linspace(0.0, a_max, max(3, opts.alpha_grid))
        vals = [evaluate(a) for a in grid]
        j = int(np.argmax(vals))
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
        g = (math.sqrt(5.0) - 1.0) / 2.0
        x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
        f1, f2 = evaluate(x1), evaluate(x2)
        while hi - lo > opts.alpha_tol:
            if f1 >= f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - g * (hi - lo)
                f1 = evaluate(x1)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + g * (hi - lo)
                f2 = evaluate(x2)
    feasible = [(s.Q, a) for a, s in cache.items() if s is not None]
    if not feasible:
        raise InfeasibleError("dual ascent failed at every candidate alpha")
    best_a = max(feasible)[1]
    best = cache[best_a]
    best.alpha_trace = sorted((a, s.Q) for a, s in cache.items() if s is not None)
    return best
