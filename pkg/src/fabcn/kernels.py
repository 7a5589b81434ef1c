"""Small dense solvers shared by the allocation algorithms.

* :func:`solve_lp` -- LP front end (HiGHS dual simplex through SciPy).
* :func:`bisect_maximin` -- largest feasible level of a monotone feasibility test.
* :func:`projected_gradient_max` -- projected gradient ascent with backtracking.
* :func:`barrier_maximize` -- log-barrier interior point method for a linear
  objective under smooth concave constraints, with a phase-I start.
* :func:`grid_oracle` -- exhaustive grid search used to validate the above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITER_LIMIT = "iter_limit"
UNBOUNDED = "unbounded"


class InfeasibleError(RuntimeError):
    """No point satisfies the constraints."""


class IterationLimitError(RuntimeError):
    """A solver hit its iteration cap before meeting its stopping rule."""


@dataclass
class SolverOptions:
    """Tolerances and caps used across the package.

    ``epsilon`` is the outer stopping threshold of the dual ascent and of the
    block coordinate loop; inner solvers run to ``inner_tol`` so that their
    error never dominates.
    """

    epsilon: float = 1e-4
    inner_tol: float = 1e-8
    feas_tol: float = 1e-8
    bisect_tol: float = 1e-12
    barrier_gap: float = 1e-10
    max_bcd_iter: int = 200
    max_dual_iter: int = 3000
    step_rule: str = "ellipsoid"
    step_scale: float = 1.0
    alpha_grid: int = 21
    alpha_tol: float = 1e-5
    stall_check: bool = True
    joint_block: bool = True


@dataclass
class SolveReport:
    status: str
    objective: float = math.nan
    iterations: int = 0
    max_violation: float = 0.0
    trace: list = field(default_factory=list)
    duals: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class LinearProgram:
    """``maximize c @ x`` s.t. ``A_ub @ x <= b_ub``, ``A_eq @ x == b_eq``,
    ``lo <= x <= hi`` (use ``np.inf`` for a missing bound)."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        if self.A_ub is None:
            self.A_ub, self.b_ub = np.zeros((0, n)), np.zeros(0)
        self.A_ub = np.atleast_2d(np.asarray(self.A_ub, dtype=float)).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).reshape(-1)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float)).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        self.lo = np.full(n, -np.inf) if self.lo is None else np.broadcast_to(
            np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.broadcast_to(
            np.asarray(self.hi, dtype=float), (n,)).copy()
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("constraint matrix and right-hand side sizes differ")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound above upper bound")
        if not all(np.all(np.isfinite(a)) for a in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq)):
            raise ValueError("LP data must be finite")

    def violation(self, x: np.ndarray) -> float:
        parts = [0.0]
        if self.b_ub.size:
            parts.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.b_eq.size:
            parts.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        parts.append(float(np.max(self.lo - x)))
        parts.append(float(np.max(x - self.hi)))
        return max(parts)


def solve_lp(lp: LinearProgram, max_iter: int = 10_000, tol: float = 1e-10):
    """Solve a small dense LP.

    Returns ``(x, report)``; ``x`` is ``None`` unless a solution was found.
    ``report.duals`` holds nonnegative multipliers ``ineq``, ``upper`` and
    ``lower`` and free ``eq`` multipliers satisfying
    ``c = A_ub.T @ ineq + A_eq.T @ eq + upper - lower``.
    """
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(h) else h)
              for l, h in zip(lp.lo, lp.hi)]
    res = linprog(
        -lp.c,
        A_ub=lp.A_ub if lp.b_ub.size else None, b_ub=lp.b_ub if lp.b_ub.size else None,
        A_eq=lp.A_eq if lp.b_eq.size else None, b_eq=lp.b_eq if lp.b_eq.size else None,
        bounds=bounds, method="highs-ds",
        options={"maxiter": max_iter, "primal_feasibility_tolerance": tol,
                 "dual_feasibility_tolerance": tol},
    )
    status = {0: OPTIMAL, 1: ITER_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, INFEASIBLE)
    if res.x is None or status != OPTIMAL:
        return None, SolveReport(status, iterations=int(getattr(res, "nit", 0) or 0))
    x = np.asarray(res.x, dtype=float)
    duals = {
        "ineq": -np.asarray(res.ineqlin.marginals) if lp.b_ub.size else np.zeros(0),
        "eq": -np.asarray(res.eqlin.marginals) if lp.b_eq.size else np.zeros(0),
        "upper": -np.asarray(res.upper.marginals),
        "lower": np.asarray(res.lower.marginals),
    }
    return x, SolveReport(OPTIMAL, float(lp.c @ x), int(res.nit), lp.violation(x), duals=duals)


def bisect_maximin(feas: Callable[[float], bool], lo: float, hi: float, tol: float = 1e-9,
                   history: list | None = None) -> float:
    """Largest level ``q`` in ``[lo, hi]`` with ``feas(q)`` true, to within ``tol``.

    ``feas`` must be monotone: true at ``lo`` and false above some threshold.
    The returned value is always a feasible level.  If ``history`` is given,
    the bracket ``(lo, hi)`` is appended after every halving.
    """
    if not hi > lo:
        raise ValueError("need hi > lo")
    if not feas(lo):
        raise InfeasibleError(f"feasibility test fails at the lower end {lo!r}")
    if feas(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:  # floating-point resolution reached
            break
        if feas(mid):
            lo = mid
        else:
            hi = mid
        if history is not None:
            history.append((lo, hi))
    return lo


# ----------------------------------------------------------------------------
# projections

def project_box(y, lo, hi) -> np.ndarray:
    return np.clip(y, lo, hi)


def project_box_budget(y, lo, hi, budget: float, weights=None, equality: bool = False) -> np.ndarray:
    """Euclidean projection onto ``{lo <= x <= hi, w @ x <= budget}``.

    With ``equality=True`` the budget must hold with equality (a scaled and
    boxed simplex).  Solved by bisection on the budget multiplier.
    """
    y = np.asarray(y, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), y.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), y.shape)
    w = np.ones_like(y) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), y.shape)
    x = np.clip(y, lo, hi)
    s = float(w @ x)
    if s <= budget and not equality:
        return x
    if equality and not (float(w @ lo) <= budget <= float(w @ hi)):
        raise InfeasibleError("budget is outside the range reachable inside the box")
    # x(nu) = clip(y - nu*w) is nonincreasing in w @ x(nu)
    a, b = -1.0, 1.0
    while float(w @ np.clip(y - a * w, lo, hi)) < budget:
        a *= 2.0
    while float(w @ np.clip(y - b * w, lo, hi)) > budget:
        b *= 2.0
    for _ in range(200):
        nu = 0.5 * (a + b)
        if float(w @ np.clip(y - nu * w, lo, hi)) > budget:
            a = nu
        else:
            b = nu
        if b - a <= 1e-15 * max(1.0, abs(nu)):
            break
    return np.clip(y - b * w, lo, hi)


def projected_gradient_max(f: Callable, grad_f: Callable, project: Callable, x0,
                           max_iter: int = 20_000, gtol: float = 1e-6, ftol: float = 1e-10,
                           step0: float = 1.0):
    """Maximize a concave ``f`` over a convex set given by its projection.

    Backtracking on the projection arc keeps every accepted step an ascent
    step, so ``report.trace`` (objective per iterate) is nondecreasing.
    Stops when the projected gradient ``x - project(x + grad)`` has norm at
    most ``gtol`` or the objective changes by at most ``ftol`` (relative).
    """
    x = project(np.asarray(x0, dtype=float))
    fx = f(x)
    step = step0
    trace = [fx]
    status = ITER_LIMIT
    it = 0
    for it in range(1, max_iter + 1):
        g = grad_f(x)
        if np.linalg.norm(x - project(x + g)) <= gtol:
            status = OPTIMAL
            break
        while True:
            x_new = project(x + step * g)
            d = x_new - x
            f_new = f(x_new)
            if f_new >= fx + g @ d - (d @ d) / (2.0 * step):
                break
            step *= 0.5
            if step < 1e-30:
                break
        if f_new < fx:  # no ascent possible at machine precision
            status = OPTIMAL
            break
        change = f_new - fx
        x, fx = x_new, f_new
        trace.append(fx)
        if change <= ftol * max(abs(fx), 1e-300):
            status = OPTIMAL
            break
        step *= 2.0
    return x, SolveReport(status, float(fx), it, 0.0, trace)


# ----------------------------------------------------------------------------
# log-barrier interior point

ConstraintFn = Callable[[np.ndarray], tuple]


_INTERIOR_MARGIN = 1e-13


def _barrier_eval(x, t, c, lo, hi, A, b, nonlinear, order=2):
    """Value, gradient and Hessian of t*c@x + sum(log slacks); None if infeasible."""
    n = x.size
    lo_f, hi_f = np.isfinite(lo), np.isfinite(hi)
    dl = x[lo_f] - lo[lo_f]
    dh = hi[hi_f] - x[hi_f]
    if np.any(dl <= 0) or np.any(dh <= 0):
        return None
    s = b - A @ x if b.size else np.zeros(0)
    if np.any(s <= 0):
        return None
    parts = []
    for fn in nonlinear:
        val, grad, hess = fn(x, order)
        if not val > 0:
            return None
        parts.append((val, grad, hess))
    phi = t * (c @ x) + np.sum(np.log(dl)) + np.sum(np.log(dh)) + np.sum(np.log(s))
    phi += sum(math.log(v) for v, _, _ in parts)
    if order == 0:
        return phi, None, None
    g = t * c
    g = g.copy()
    g[lo_f] += 1.0 / dl
    g[hi_f] -= 1.0 / dh
    if b.size:
        g -= A.T @ (1.0 / s)
    for val, grad, _ in parts:
        g += grad / val
    # K = -Hessian (positive definite)
    K = np.zeros((n, n))
    diag = np.zeros(n)
    diag[lo_f] += 1.0 / dl ** 2
    diag[hi_f] += 1.0 / dh ** 2
    if b.size:
        As = A / s[:, None]
        K += As.T @ As
    for val, grad, hess in parts:
        K += np.outer(grad, grad) / val ** 2
        if hess is None:
            continue
        if hess.ndim == 1:
            diag -= hess / val
        else:
            K -= hess / val
    K[np.diag_indices(n)] += diag
    return phi, g, K


def _newton_direction(g, K):
    d = np.sqrt(np.maximum(np.diag(K), 1e-300))
    Ks = K / d[:, None] / d[None, :]
    rhs = g / d
    try:
        cf = sla.cho_factor(Ks, check_finite=False)
        y = sla.cho_solve(cf, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        Ks[np.diag_indices_from(Ks)] += 1e-10
        y = np.linalg.lstsq(Ks, rhs, rcond=None)[0]
    return y / d


def _barrier_delta(x, dx, t, c, lo, hi, A, b, nonlinear, g_old):
    """Change of the barrier function along ``dx``, computed from slack ratios
    to avoid cancellation; ``None`` if ``x + dx`` leaves the interior."""
    lo_f, hi_f = np.isfinite(lo), np.isfinite(hi)
    rl = dx[lo_f] / (x[lo_f] - lo[lo_f])
    rh = -dx[hi_f] / (hi[hi_f] - x[hi_f])
    if np.any(rl <= -1) or np.any(rh <= -1):
        return None
    delta = t * (c @ dx) + np.sum(np.log1p(rl)) + np.sum(np.log1p(rh))
    if b.size:
        s = b - A @ x
        rs = -(A @ dx) / s
        if np.any(rs <= -1):
            return None
        delta += np.sum(np.log1p(rs))
    x_new = x + dx
    for fn, old in zip(nonlinear, g_old):
        val = fn(x_new, 0)[0]
        if not val > 0:
            return None
        delta += math.log(val / old)
    return delta


def _center(x, t, c, lo, hi, A, b, nonlinear, newton_tol, max_steps, stop=None):
    steps = 0
    for steps in range(1, max_steps + 1):
        phi, g, K = _barrier_eval(x, t, c, lo, hi, A, b, nonlinear)
        dx = _newton_direction(g, K)
        dec = float(g @ dx)
        if dec / 2.0 <= newton_tol:
            break
        g_old = [fn(x, 0)[0] for fn in nonlinear]
        step = 1.0
        while True:
            delta = _barrier_delta(x, step * dx, t, c, lo, hi, A, b, nonlinear, g_old)
            if delta is not None and delta >= 0.01 * step * dec:
                break
            step *= 0.5
            if step < 1e-16:
                return x, steps, False
        x = x + step * dx
        if stop is not None and stop(x):
            break
        if delta <= 1e-13 * max(1.0, abs(t * (c @ x))):  # progress below roundoff
            break
    return x, steps, True


def barrier_maximize(c, x0, lo, hi, A=None, b=None, nonlinear: Sequence[ConstraintFn] = (),
                     gap_tol: float = 1e-10, t0: float = 1.0, mu: float = 20.0,
                     newton_tol: float = 1e-9, max_newton: int = 2000):
    """Maximize ``c @ x`` s.t. ``A @ x <= b``, ``g_i(x) >= 0``, ``lo <= x <= hi``.

    Each nonlinear constraint is a callable ``fn(x, order)`` returning
    ``(g, grad, hess)`` for a smooth concave ``g``; ``hess`` may be ``None``
    (linear), a 1-D diagonal or a dense matrix.  With ``order=0`` only ``g``
    is needed (the other two entries may be ``None``).  Bounds may be
    infinite, but the objective must be bounded on the feasible set and the
    barrier centering problems must be bounded, so give every variable that
    the constraints do not bound from both sides a finite box.

    A phase-I problem (maximize a common slack ``s``) supplies a strictly
    feasible start when ``x0`` is not one.  The returned point is strictly
    feasible; the objective is within ``gap_tol`` of optimal when the report
    says ``optimal``.  ``infeasible`` means the constraints have no interior.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if A is None:
        A, b = np.zeros((0, n)), np.zeros(0)
    A = np.asarray(A, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).reshape(-1)
    scale = np.maximum(np.abs(A).max(axis=1, initial=0.0), 1e-300) if b.size else np.ones(0)
    A, b = A / scale[:, None], b / scale

    x = np.asarray(x0, dtype=float).copy()
    both = np.isfinite(lo) & np.isfinite(hi)
    width = np.where(both, hi - lo, 1.0)
    margin = 1e-6 * width
    x = np.where(np.isfinite(lo), np.maximum(x, lo + margin), x)
    x = np.where(np.isfinite(hi), np.minimum(x, hi - margin), x)

    newton = 0
    if not _strictly_inside(x, A, b, nonlinear):
        x, steps, feasible = _phase_one(x, lo, hi, A, b, nonlinear, gap_tol, t0, mu,
                                        newton_tol, max_newton)
        newton += steps
        if not feasible:
            return x, SolveReport(INFEASIBLE, float(c @ x), newton)

    m_total = len(nonlinear) + b.size + int(np.isfinite(lo).sum() + np.isfinite(hi).sum())
    t = t0
    status = ITER_LIMIT
    while newton < max_newton:
        x, steps, ok = _center(x, t, c, lo, hi, A, b, nonlinear, newton_tol, max_newton - newton)
        newton += steps
        if m_total / t < gap_tol:
            status = OPTIMAL
            break
        if not ok and m_total / t < 1e3 * gap_tol:
            status = OPTIMAL  # numerically stuck at a point already within tolerance
            break
        t *= mu
    return x, SolveReport(status, float(c @ x), newton, 0.0, trace=[m_total / t])


def _strictly_inside(x, A, b, nonlinear) -> bool:
    """Interior test with a roundoff margin on the (row-normalized) linear slacks;
    a slack of a few ulps may evaluate to zero on the next pass."""
    if b.size and np.any(b - A @ x <= _INTERIOR_MARGIN * np.maximum(1.0, np.abs(b))):
        return False
    return all(fn(x, 0)[0] > 0 for fn in nonlinear)


def _phase_one(x, lo, hi, A, b, nonlinear, gap_tol, t0, mu, newton_tol, max_newton):
    """Find a strictly feasible point by maximizing a common slack ``s``."""
    n = x.size
    vals = [fn(x, 0)[0] for fn in nonlinear]
    if b.size:
        vals.extend(b - A @ x)
    s0 = min(vals) - 1.0
    z = np.append(x, s0)
    lo1, hi1 = np.append(lo, -np.inf), np.append(hi, 1.0)
    c1 = np.zeros(n + 1)
    c1[-1] = 1.0
    A1 = np.hstack([A, np.ones((b.size, 1))]) if b.size else np.zeros((0, n + 1))

    def lift(fn):
        def g(zz, order=2):
            val, grad, hess = fn(zz[:-1], order)
            if order == 0:
                return val - zz[-1], None, None
            grad1 = np.append(grad, -1.0)
            if hess is None:
                h1 = None
            elif hess.ndim == 1:
                h1 = np.append(hess, 0.0)
            else:
                h1 = np.zeros((n + 1, n + 1))
                h1[:n, :n] = hess
            return val - zz[-1], grad1, h1
        return g

    nl1 = [lift(fn) for fn in nonlinear]
    m_total = len(nl1) + b.size + int(np.isfinite(lo1).sum() + np.isfinite(hi1).sum())

    def strictly_feasible(zz):
        return zz[-1] > 0 and _strictly_inside(zz[:-1], A, b, nonlinear)

    t = t0
    newton = 0
    while newton < max_newton:
        z, steps, ok = _center(z, t, c1, lo1, hi1, A1, b, nl1, newton_tol, max_newton - newton,
                               stop=strictly_feasible)
        newton += steps
        if strictly_feasible(z):
            return z[:-1], newton, True
        if m_total / t < gap_tol or not ok:
            break
        t *= mu
    return z[:-1], newton, False


# ----------------------------------------------------------------------------
# exhaustive grid search

def grid_oracle(f: Callable, box: Sequence[tuple], resolution, vectorized: bool = False,
                chunk: int = 1 << 18):
    """Exhaustive maximization of ``f`` on a uniform grid over ``box``.

    Parameters
    ----------
    f : callable
        Objective. With ``vectorized=True`` it receives an ``(n, d)`` array
        and returns ``(n,)`` values; otherwise one point at a time.  Return
        ``-inf`` to mark infeasible points.
    box : sequence of (lo, hi)
        One interval per dimension, at most four dimensions.
    resolution : float or sequence of float
        Grid spacing per dimension; endpoints are always included.

    Returns
    -------
    (x_best, f_best)
        The first grid point (in C order) attaining the maximum.
    """
    box = [(float(a), float(b)) for a, b in box]
    d = len(box)
    if d > 4:
        raise ValueError(f"grid oracle is limited to 4 dimensions, got {d}")
    if d == 0:
        raise ValueError("empty box")
    res = np.broadcast_to(np.asarray(resolution, dtype=float), (d,))
    axes = [np.linspace(a, b, int(round((b - a) / r)) + 1) if b > a else np.array([a])
            for (a, b), r in zip(box, res)]
    shape = tuple(ax.size for ax in axes)
    total = int(np.prod(shape))
    best_val, best_idx = -np.inf, None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        sub = np.unravel_index(idx, shape)
        X = np.stack([ax[s] for ax, s in zip(axes, sub)], axis=1)
        if vectorized:
            vals = np.asarray(f(X), dtype=float)
        else:
            vals = np.array([f(row) for row in X], dtype=float)
        vals = np.where(np.isnan(vals), -np.inf, vals)
        j = int(np.argmax(vals))
        if vals[j] > best_val or best_idx is None:
            if best_idx is None or vals[j] > best_val:
                best_val, best_idx = float(vals[j]), idx[j]
    sub = np.unravel_index(best_idx, shape)
    return np.array([ax[s] for ax, s in zip(axes, sub)]), best_val
