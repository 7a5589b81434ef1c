import itertools

import numpy as np
import pytest

from fabcn.kernels import (INFEASIBLE, InfeasibleError, LinearProgram, OPTIMAL, barrier_maximize,
                           bisect_maximin, grid_oracle, project_box, project_box_budget,
                           projected_gradient_max, solve_lp)


def vertex_enumeration(c, A, b, lo, hi):
    """Best vertex of {A x <= b, lo <= x <= hi} by solving every n-subset of active rows."""
    n = c.size
    G = np.vstack([A, np.eye(n), -np.eye(n)])
    h = np.concatenate([b, hi, -lo])
    combos = np.array(list(itertools.combinations(range(G.shape[0]), n)))
    mats, rhs = G[combos], h[combos]
    ok = np.abs(np.linalg.det(mats)) > 1e-9
    xs = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
    feas = np.all(xs @ G.T <= h + 1e-9, axis=1)
    return float(np.max(xs[feas] @ c))


# ---------------------------------------------------------------- solve_lp

def test_lp_single_variable():
    x, rep = solve_lp(LinearProgram(c=[1.0], A_ub=[[1.0]], b_ub=[1.0], lo=[0.0], hi=[2.0]))
    assert rep.status == OPTIMAL
    assert x[0] == pytest.approx(1.0, abs=1e-12)


def test_lp_degenerate_face():
    x, rep = solve_lp(LinearProgram(c=[1.0, 1.0], A_ub=[[1.0, 1.0]], b_ub=[1.0], lo=[0.0, 0.0]))
    assert rep.objective == pytest.approx(1.0, abs=1e-10)
    assert np.all(x >= -1e-12) and x.sum() <= 1 + 1e-10


def test_lp_infeasible_status():
    x, rep = solve_lp(LinearProgram(c=[1.0], A_ub=[[1.0], [-1.0]], b_ub=[-1.0, -1.0]))
    assert x is None and rep.status == INFEASIBLE


def test_lp_rejects_inconsistent_bounds():
    with pytest.raises(ValueError):
        LinearProgram(c=[1.0], lo=[1.0], hi=[0.0])
    with pytest.raises(ValueError):
        LinearProgram(c=[1.0], A_ub=[[np.nan]], b_ub=[1.0])


@pytest.mark.parametrize("seed", range(5))
def test_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = 8, 5
    c = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    b = rng.uniform(0.5, 2.0, m)
    lo, hi = np.zeros(n), np.ones(n)
    x, rep = solve_lp(LinearProgram(c=c, A_ub=A, b_ub=b, lo=lo, hi=hi))
    assert rep.ok and rep.max_violation <= 1e-8
    assert rep.objective == pytest.approx(vertex_enumeration(c, A, b, lo, hi), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_lp_duality_gap(seed):
    rng = np.random.default_rng(100 + seed)
    n, m = 6, 4
    c = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    b = rng.uniform(0.5, 2.0, m)
    lo, hi = -np.ones(n), 2.0 * np.ones(n)
    x, rep = solve_lp(LinearProgram(c=c, A_ub=A, b_ub=b, lo=lo, hi=hi))
    y, u, l = rep.duals["ineq"], rep.duals["upper"], rep.duals["lower"]
    assert np.all(y >= -1e-12) and np.all(u >= -1e-12) and np.all(l >= -1e-12)
    np.testing.assert_allclose(A.T @ y + u - l, c, atol=1e-8)
    dual_value = b @ y + hi @ u - lo @ l
    assert abs(dual_value - c @ x) <= 1e-6


def test_lp_is_deterministic():
    rng = np.random.default_rng(7)
    lp = LinearProgram(c=rng.standard_normal(5), A_ub=rng.standard_normal((3, 5)),
                       b_ub=np.ones(3), lo=np.zeros(5), hi=np.ones(5))
    x1, _ = solve_lp(lp)
    x2, _ = solve_lp(lp)
    assert np.array_equal(x1, x2)


# ---------------------------------------------------------------- bisect_maximin

def test_bisect_threshold():
    assert bisect_maximin(lambda q: q <= 0.7, 0.0, 1.0, tol=1e-6) == pytest.approx(0.7, abs=1e-6)


def test_bisect_returns_hi_when_always_feasible():
    assert bisect_maximin(lambda q: True, 0.0, 3.0) == 3.0


def test_bisect_raises_when_lower_end_fails():
    with pytest.raises(InfeasibleError):
        bisect_maximin(lambda q: q > 0.5, 0.0, 1.0)
    with pytest.raises(ValueError):
        bisect_maximin(lambda q: True, 1.0, 1.0)


def test_bisect_bracket_halves_and_call_count():
    calls = []

    def feas(q):
        calls.append(q)
        return q <= 0.3141

    hist = []
    q = bisect_maximin(feas, 0.0, 1.0, tol=1e-6, history=hist)
    widths = np.array([hi - lo for lo, hi in hist])
    np.testing.assert_allclose(widths[1:] / widths[:-1], 0.5, rtol=1e-9)
    assert widths[0] == pytest.approx(0.5)
    assert len(calls) <= 2 + int(np.ceil(np.log2(1.0 / 1e-6)))
    assert feas(q) and abs(q - 0.3141) <= 1e-6


# ---------------------------------------------------------------- projections and gradient

def test_project_box_budget_properties(rng):
    lo, hi = np.zeros(6), np.full(6, 0.4)
    for _ in range(20):
        y = rng.normal(0.2, 0.5, 6)
        x = project_box_budget(y, lo, hi, 1.0)
        assert np.all(x >= lo - 1e-15) and np.all(x <= hi + 1e-15) and x.sum() <= 1 + 1e-12
        # variational inequality of the Euclidean projection
        for _ in range(5):
            z = project_box_budget(rng.uniform(0, 0.4, 6), lo, hi, 1.0)
            assert (y - x) @ (z - x) <= 1e-10
    xe = project_box_budget(rng.normal(size=6), lo, hi, 1.0, equality=True)
    assert xe.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InfeasibleError):
        project_box_budget(np.zeros(6), lo, hi, 5.0, equality=True)


def _quadratic(center):
    return (lambda x: -float((x - center) @ (x - center)), lambda x: -2.0 * (x - center))


def test_projected_gradient_interior_center():
    c = np.array([0.3, -0.2, 0.5])
    f, g = _quadratic(c)
    x, rep = projected_gradient_max(f, g, lambda y: project_box(y, -1, 1), np.zeros(3))
    np.testing.assert_allclose(x, c, atol=1e-6)
    assert rep.ok


def test_projected_gradient_clips_outside_center():
    c = np.array([2.0, -3.0, 0.5])
    f, g = _quadratic(c)
    x, _ = projected_gradient_max(f, g, lambda y: project_box(y, -1, 1), np.zeros(3))
    np.testing.assert_allclose(x, np.clip(c, -1, 1), atol=1e-6)


def test_projected_gradient_log_sum_matches_grid(rng):
    w = np.array([1.0, 2.0, 0.5, 3.0])
    a = np.array([0.1, 0.3, 0.05, 0.2])
    lin = np.array([0.4, 0.1, 0.2, 0.3])

    def f(x):
        return float(np.sum(w * np.log1p(x / a)) - lin @ x)

    def grad(x):
        return w / (a + x) - lin

    proj = lambda y: project_box_budget(y, 0.0, 1.0, 2.0)
    x, rep = projected_gradient_max(f, grad, proj, np.full(4, 0.25))
    assert np.all(np.diff(rep.trace) >= 0)

    def fv(X):
        vals = np.sum(w * np.log1p(X / a), axis=1) - X @ lin
        return np.where(X.sum(axis=1) <= 2.0 + 1e-12, vals, -np.inf)

    # three free coordinates on a 1e-3 grid would be huge; refine around the solution
    box = [(max(0.0, v - 0.05), min(1.0, v + 0.05)) for v in x]
    _, f_grid = grid_oracle(fv, box, 1e-3 * 5, vectorized=True)
    assert f(x) >= f_grid - 1e-2
    assert abs(f(x) - f_grid) <= 1e-2


def test_projected_gradient_trace_monotone(rng):
    for _ in range(10):
        Qm = rng.standard_normal((5, 5))
        H = -(Qm @ Qm.T) - 0.1 * np.eye(5)
        q = rng.standard_normal(5)
        f = lambda x: float(0.5 * x @ H @ x + q @ x)
        g = lambda x: H @ x + q
        _, rep = projected_gradient_max(f, g, lambda y: project_box_budget(y, 0, 1, 2.0),
                                        rng.uniform(0, 0.4, 5))
        assert np.all(np.diff(rep.trace) >= 0)


# ---------------------------------------------------------------- barrier

def test_barrier_lp_and_log_constraint():
    # maximize x + y s.t. log(1 + x) + log(1 + y) >= log 2, x + 2y <= 2, box [0, 2]
    def con(x, order):
        val = np.log1p(x[0]) + np.log1p(x[1]) - np.log(2.0)
        if order == 0:
            return val, None, None
        return val, 1.0 / (1.0 + x), -1.0 / (1.0 + x) ** 2

    x, rep = barrier_maximize([1.0, 1.0], [0.5, 0.5], 0.0, 2.0, A=[[1.0, 2.0]], b=[2.0],
                              nonlinear=[con])
    assert rep.ok
    assert rep.objective == pytest.approx(2.0, abs=1e-6)
    assert x[0] + 2 * x[1] < 2.0


def test_barrier_phase_one_and_infeasible():
    x, rep = barrier_maximize([1.0], [5.0], 0.0, 1.0, A=[[-1.0]], b=[-0.5])
    assert rep.ok and x[0] == pytest.approx(1.0, abs=1e-6)
    _, rep = barrier_maximize([1.0], [0.5], 0.0, 1.0, A=[[-1.0]], b=[-2.0])
    assert rep.status == INFEASIBLE


# ---------------------------------------------------------------- grid_oracle

def test_grid_oracle_parabola():
    x, fx = grid_oracle(lambda x: -(x[0] - 0.5) ** 2, [(0.0, 1.0)], 1e-3)
    assert abs(x[0] - 0.5) <= 1e-3 and fx == pytest.approx(0.0, abs=1e-6)


def test_grid_oracle_constant_returns_first_point():
    x, fx = grid_oracle(lambda x: 3.0, [(0.0, 1.0), (2.0, 3.0)], 0.25)
    np.testing.assert_array_equal(x, [0.0, 2.0])
    assert fx == 3.0


def test_grid_oracle_rejects_high_dimension():
    with pytest.raises(ValueError):
        grid_oracle(lambda x: 0.0, [(0, 1)] * 5, 0.5)


@pytest.mark.parametrize("seed", range(4))
def test_grid_oracle_matches_projected_gradient(seed):
    rng = np.random.default_rng(seed)
    Qm = rng.standard_normal((2, 2))
    H = -(Qm @ Qm.T) - 0.5 * np.eye(2)
    q = rng.standard_normal(2)
    f = lambda x: float(0.5 * x @ H @ x + q @ x)
    fv = lambda X: 0.5 * np.einsum("ij,jk,ik->i", X, H, X) + X @ q
    x_pg, _ = projected_gradient_max(f, lambda x: H @ x + q, lambda y: project_box(y, -1, 1), np.zeros(2))
    res = 1e-3
    x_g, f_g = grid_oracle(fv, [(-1, 1), (-1, 1)], res, vectorized=True)
    assert np.max(np.abs(x_g - x_pg)) <= 2 * res + 1e-6
    assert f_g <= f(x_pg) + 1e-9
