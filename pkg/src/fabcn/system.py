"""Closed-form physical-layer quantities of the full-duplex backscatter network.

All rates are in bps/Hz with base-2 logarithms and are normalized to a frame of
unit duration, so harvested energies come out in joules per frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelSet


def _per_device(value, M: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(M, float(arr))
    if arr.shape != (M,):
        raise ValueError(f"{name} needs one value per device (M={M})")
    return arr


@dataclass
class SystemConfig:
    """Scenario constants.

    ``D`` is the legacy user's rate requirement (bps/Hz) and ``E_min`` the
    per-device harvested-energy requirement in joules per (unit) frame.
    """

    M: int = 2
    N: int = 64
    n_cp: int = 16
    p_total: float = 1.0
    p_peak: float = 20.0 / 128
    sigma2: float = 1e-9
    eta: np.ndarray | float = 0.5
    D: float = 1.0
    E_min: np.ndarray | float = 10e-6
    epsilon: float = 1e-4

    def __post_init__(self):
        self.M, self.N, self.n_cp = int(self.M), int(self.N), int(self.n_cp)
        if self.M < 1 or self.N < 1 or self.n_cp < 0:
            raise ValueError("need M >= 1, N >= 1 and n_cp >= 0")
        self.eta = _per_device(self.eta, self.M, "eta")
        self.E_min = _per_device(self.E_min, self.M, "E_min")
        if np.any((self.eta < 0) | (self.eta > 1)):
            raise ValueError("harvesting efficiency must lie in [0, 1]")
        for name in ("p_total", "p_peak", "sigma2", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.D < 0 or np.any(self.E_min < 0):
            raise ValueError("requirements D and E_min must be nonnegative")

    @property
    def p_ave(self) -> float:
        return 1.0 / (self.M * self.N)

    def to_dict(self) -> dict:
        return {"M": self.M, "N": self.N, "n_cp": self.n_cp, "p_total": self.p_total,
                "p_peak": self.p_peak, "sigma2": self.sigma2, "eta": self.eta.tolist(),
                "D": self.D, "E_min": self.E_min.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(**d)


@dataclass
class Allocation:
    """Backscatter times ``tau`` (M,), reflection coefficients ``alpha`` (M,)
    and subcarrier powers ``P`` (M, N)."""

    tau: np.ndarray
    alpha: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if not (self.tau.shape == self.alpha.shape == (self.P.shape[0],)):
            raise ValueError("tau, alpha and P rows must agree on M")

    def copy(self) -> "Allocation":
        return Allocation(self.tau.copy(), self.alpha.copy(), self.P.copy())

    def to_dict(self) -> dict:
        return {"tau": self.tau.tolist(), "alpha": self.alpha.tolist(), "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Allocation":
        return cls(d["tau"], d["alpha"], d["P"])

    @classmethod
    def initial(cls, sys: SystemConfig, alpha: float = 0.5) -> "Allocation":
        """Uniform starting point: tau = 1/M, P = 1/(MN)."""
        M, N = sys.M, sys.N
        return cls(np.full(M, 1.0 / M), np.full(M, alpha), np.full((M, N), 1.0 / (M * N)))


def bd_snr(m: int, alpha: float, P_row, ch: ChannelSet, sys: SystemConfig) -> float:
    """Post-combining SNR of device ``m``: (alpha/sigma2) sum_k |F G|^2 P_k."""
    return float(alpha / sys.sigma2 * np.dot(ch.bs_gain[m], np.asarray(P_row, dtype=float)))


def bd_rates(alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Throughput of every device, shape (M,)."""
    snr = alloc.alpha / sys.sigma2 * np.einsum("mk,mk->m", ch.bs_gain, alloc.P)
    return alloc.tau / sys.N * np.log2(1.0 + snr)


def bd_throughput(m: int, alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> float:
    snr = bd_snr(m, alloc.alpha[m], alloc.P[m], ch, sys)
    return float(alloc.tau[m] / sys.N * math.log2(1.0 + snr))


def lu_slot_rates(alpha, P, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Legacy-user rate inside each slot (before weighting by tau), shape (M,).

    The backscattered signal of the active device is treated as interference.
    """
    P = np.atleast_2d(P)
    alpha = np.asarray(alpha, dtype=float).reshape(-1, 1)
    sinr = ch.lu_gain * P / (alpha * ch.intf_gain * P + sys.sigma2)
    return np.log2(1.0 + sinr).sum(axis=1) / sys.N


def lu_throughput(alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> float:
    return float(np.dot(alloc.tau, lu_slot_rates(alloc.alpha, alloc.P, ch, sys)))


def energy_matrix(alpha, P, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Coefficients ``A[m, r]`` such that device m harvests ``sum_r A[m, r] tau_r``."""
    alpha = np.asarray(alpha, dtype=float)
    A = sys.eta[:, None] * (ch.fwd_gain @ np.atleast_2d(P).T)  # A[m, r] = eta_m sum_k |F_mk|^2 P_rk
    A[np.diag_indices_from(A)] *= 1.0 - alpha
    return A


def energies(alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> np.ndarray:
    """Energy harvested by every device over the frame (J), shape (M,)."""
    return energy_matrix(alloc.alpha, alloc.P, ch, sys) @ alloc.tau


def harvested_energy(m: int, alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> float:
    return float(energies(alloc, ch, sys)[m])


def violations(alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> dict:
    """Violation of each network constraint, clipped at zero.

    Rate shortfalls are absolute (bps/Hz); energy shortfalls are relative to
    ``E_min``; budget and peak excess are relative to ``p_total`` and
    ``p_peak``; time and reflection bounds are absolute.
    """
    E = energies(alloc, ch, sys)
    emin = np.maximum(sys.E_min, 1e-300)
    return {
        "lu_rate": max(0.0, sys.D - lu_throughput(alloc, ch, sys)),
        "energy": float(np.max(np.where(sys.E_min > 0, (sys.E_min - E) / emin, 0.0), initial=0.0)),
        "budget": max(0.0, (float(np.sum(alloc.tau[:, None] * alloc.P)) - sys.p_total) / sys.p_total),
        "time": max(0.0, float(alloc.tau.sum()) - 1.0, float(-alloc.tau.min())),
        "peak": max(0.0, float((alloc.P.max() - sys.p_peak) / sys.p_peak), float(-alloc.P.min())),
        "alpha": max(0.0, float(alloc.alpha.max()) - 1.0, float(-alloc.alpha.min())),
    }


def max_violation(alloc: Allocation, ch: ChannelSet, sys: SystemConfig) -> float:
    return max(violations(alloc, ch, sys).values())


def verify_snr_monte_carlo(m: int, alpha: float, P_row, ch: ChannelSet, sys: SystemConfig,
                           n_symbols: int = 100_000, rng=None, combiner: str = "mrc",
                           block: int = 8192) -> float:
    """Empirical SNR of the access point's estimate of device ``m``'s symbol.

    Each OFDM symbol is built in the time domain with a cyclic prefix, passed
    through the cascaded forward/backward taps, modulated by a unit-modulus
    device symbol, stripped of its prefix and transformed back; per-subcarrier
    noise CN(0, sigma2) is then added.  When the channel carries no taps the
    per-subcarrier model is used directly.

    ``combiner="mrc"`` weights subcarrier k by conj(a_k), where
    a_k = sqrt(alpha P_k) F_k G_k S_k, giving an SNR equal to :func:`bd_snr`.
    ``combiner="equal"`` divides each subcarrier by a_k and averages, with
    zero-power subcarriers left out.

    Returns
    -------
    float
        ``E|X|^2 / E|X_hat - X|^2`` over the simulated symbols.
    """
    if n_symbols < 10_000:
        raise ValueError("n_symbols must be at least 1e4 for a stable estimate")
    if combiner not in ("mrc", "equal"):
        raise ValueError(f"unknown combiner {combiner!r}")
    rng = np.random.default_rng(rng)
    P_row = np.asarray(P_row, dtype=float)
    N = sys.N
    if P_row.shape != (N,) or np.any(P_row < 0):
        raise ValueError("P_row must be a nonnegative vector of length N")
    gain = ch.F[m] * ch.G[m]
    amp = np.sqrt(alpha * P_row) * gain
    used = np.abs(amp) > 0
    if not used.any():
        raise ValueError("no subcarrier carries backscatter signal (all P_k alpha |F G| are zero)")

    cascade = None
    if ch.taps is not None:
        cascade = np.convolve(ch.taps["f"][m], ch.taps["g"][m])
        if cascade.size - 1 > sys.n_cp:
            raise ValueError(f"cascaded channel spans {cascade.size} taps, "
                             f"longer than the cyclic prefix ({sys.n_cp}) + 1")

    err_power = 0.0
    done = 0
    while done < n_symbols:
        n = min(block, n_symbols - done)
        S = np.exp(2j * np.pi * rng.random((n, N)))
        X = np.exp(2j * np.pi * rng.random(n))
        W = math.sqrt(sys.sigma2 / 2.0) * (rng.standard_normal((n, N))
                                           + 1j * rng.standard_normal((n, N)))
        if cascade is None:
            Y = amp * S * X[:, None] + W
        else:
            s = np.fft.ifft(np.sqrt(P_row) * S, axis=1)           # (1/N) sum_k ... e^{+j2pi kt/N}
            s_cp = np.concatenate([s[:, N - sys.n_cp:], s], axis=1) if sys.n_cp else s
            r = np.zeros_like(s_cp)
            for l, c in enumerate(cascade):
                r[:, l:] += c * s_cp[:, :s_cp.shape[1] - l]
            r *= math.sqrt(alpha) * X[:, None]
            Y = np.fft.fft(r[:, sys.n_cp:], axis=1) + W
        a = amp * S
        if combiner == "mrc":
            X_hat = np.sum(np.conj(a) * Y, axis=1) / np.sum(np.abs(amp) ** 2)
        else:
            X_hat = np.mean(Y[:, used] / a[:, used], axis=1)
        err_power += float(np.sum(np.abs(X_hat - X) ** 2))
        done += n
    return n_symbols / err_power if err_power > 0 else math.inf
