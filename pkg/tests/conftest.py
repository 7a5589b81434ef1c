import numpy as np
import pytest

from fabcn import ChannelGenConfig, ChannelSet, SystemConfig, generate_channels, noise_for_snr
from fabcn.kernels import grid_oracle
from fabcn.system import Allocation, max_violation


def make_instance(seed=0, M=2, N=16, snr_db=20.0, realization=0, **sys_kw):
    """Two-device style instance with the default geometry and calibrated noise."""
    d_bd = (2.5, 4.0, 3.0, 3.5)[:M]
    cfg = ChannelGenConfig(L_f=min(4, N), L_g=min(4, N), L_h=min(8, N), L_v=min(6, N),
                           d_fap_bd=d_bd, d_bd_lu=(15.0,) * M, seed=seed, realization=realization)
    kw = dict(M=M, N=N, sigma2=noise_for_snr(cfg, 1.0, snr_db), p_peak=20.0 / (M * N))
    kw.update(sys_kw)
    sys = SystemConfig(**kw)
    return sys, generate_channels(cfg, sys)


def symmetric_instance(M=2, N=8, seed=3, **sys_kw):
    """All devices share identical channels."""
    rng = np.random.default_rng(seed)

    def taps(L, p):
        return np.sqrt(p / 2) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))

    f, g, v = taps(2, 1.6e-4), taps(2, 1.6e-4), taps(2, 4.4e-6)
    h = taps(4, 4.4e-6)
    ch = ChannelSet.from_taps(np.tile(f, (M, 1)), np.tile(g, (M, 1)), h, np.tile(v, (M, 1)), N)
    kw = dict(M=M, N=N, sigma2=3e-10, p_peak=20.0 / (M * N))
    kw.update(sys_kw)
    return SystemConfig(**kw), ch


def simplex_grid_oracle(alpha, ch, sys, res):
    """Best objective over the budget-tight power simplex (last power = budget - rest)."""
    b, lu, fwd = ch.bs_gain[0], ch.lu_gain, ch.fwd_gain[0]

    def f(X):
        P = np.column_stack([X, sys.p_total - X.sum(axis=1)])
        ok = np.all((P >= -1e-12) & (P <= sys.p_peak + 1e-12), axis=1)
        P = np.maximum(P, 0.0)
        ok &= np.log2(1 + P * lu / sys.sigma2).sum(axis=1) / sys.N >= sys.D
        ok &= sys.eta[0] * (1 - alpha) * (P @ fwd) >= sys.E_min[0]
        val = np.log2(1 + alpha / sys.sigma2 * (P @ b)) / sys.N
        return np.where(ok, val, -np.inf)

    box = [(0.0, min(sys.p_peak, sys.p_total))] * (sys.N - 1)
    return grid_oracle(f, box, res * sys.p_total, vectorized=True)[1]


def two_carrier_instance(E_min, N=8):
    """Two devices, each backscattering on its own carrier, harvesting flat on carriers 0-1.

    With no legacy-rate requirement and no interference the optimum puts all
    slot-m power on carrier m, so (tau_1, alpha_1, alpha_2, budget share of
    slot 1) describes it exactly.
    """
    F = np.zeros((2, N), complex)
    F[:, :2] = np.sqrt(1.6e-4)
    G = np.zeros((2, N), complex)
    G[0, 0], G[1, 1] = np.sqrt(1.6e-4), np.sqrt(0.7e-4)
    ch = ChannelSet(F, G, np.full(N, np.sqrt(4e-6), complex), np.zeros((2, N), complex))
    sys = SystemConfig(M=2, N=N, sigma2=2.56e-9, p_peak=10.0, D=0.0, E_min=E_min)
    return sys, ch


def two_carrier_oracle(sys, ch, step=0.02):
    b = ch.bs_gain[[0, 1], [0, 1]]
    fw, eta, N = ch.fwd_gain[0, 0], sys.eta[0], sys.N

    def q(X):
        t1, a1, a2, s = X.T
        t2 = 1.0 - t1
        p1, p2 = s / t1, (1.0 - s) / t2
        r1 = t1 / N * np.log2(1 + a1 * b[0] * p1 / sys.sigma2)
        r2 = t2 / N * np.log2(1 + a2 * b[1] * p2 / sys.sigma2)
        e1 = eta * fw * (s * (1 - a1) + (1 - s))
        e2 = eta * fw * (s + (1 - s) * (1 - a2))
        ok = (p1 <= sys.p_peak) & (p2 <= sys.p_peak) & (e1 >= sys.E_min[0]) & (e2 >= sys.E_min[1])
        return np.where(ok, np.minimum(r1, r2), -np.inf)

    return grid_oracle(q, [(step, 1 - step), (0, 1), (0, 1), (0, 1)], step, vectorized=True)[1]


def random_feasible(sys, ch, rng):
    """A random allocation that meets every constraint (retrying as needed)."""
    for _ in range(200):
        tau = rng.dirichlet(np.ones(sys.M)) * rng.uniform(0.7, 1.0)
        alpha = rng.uniform(0.0, 0.6, sys.M)
        P = rng.uniform(0.2, 1.0, (sys.M, sys.N)) * sys.p_peak
        P *= min(1.0, sys.p_total / float(tau @ P.sum(axis=1)))
        a = Allocation(tau, alpha, P)
        if max_violation(a, ch, sys) <= 1e-12:
            return a
    raise RuntimeError("no random feasible allocation found")


@pytest.fixture
def inst():
    return make_instance(seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
