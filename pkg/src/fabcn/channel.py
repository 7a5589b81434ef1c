"""Multipath block-fading channels and their OFDM subcarrier responses.

Four link types are generated per realization:

``f``  forward link, access point to backscatter device ``m``
``g``  backward link, device ``m`` to access point
``h``  legacy link, access point to the legacy user
``v``  interference link, device ``m`` to the legacy user

Every tap is circularly-symmetric complex Gaussian (Rayleigh magnitude).  The
expected power of tap ``l`` on a link of length ``d`` metres is
``first_path_gain * d**-pathloss_exponent * exp(-pdp_decay * l)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .system import SystemConfig

LINKS = ("f", "g", "h", "v")
_LINK_CODE = {name: i for i, name in enumerate(LINKS)}


@dataclass(frozen=True)
class MultipathChannel:
    """Time-domain taps of a single link."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.atleast_1d(np.asarray(self.taps, dtype=complex))
        if taps.ndim != 1 or taps.size < 1:
            raise ValueError("a multipath channel needs at least one tap")
        if not np.all(np.isfinite(taps)):
            raise ValueError("channel taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def L(self) -> int:
        return self.taps.size

    def response(self, N: int) -> np.ndarray:
        return freq_response(self, N)


def freq_response(ch, N: int) -> np.ndarray:
    """Frequency response of a tapped-delay line at the ``N`` OFDM subcarriers.

    Computes ``X[k] = sum_l x[l] exp(-2j*pi*k*l/N)`` by direct summation, which
    is exact for any ``N`` and cheap for the short channels used here.

    Parameters
    ----------
    ch : MultipathChannel or array_like
        Taps, either a single 1-D channel or a 2-D array with one channel per
        row.
    N : int
        Number of subcarriers; must be at least the number of taps.

    Returns
    -------
    ndarray
        Complex responses with shape ``(N,)`` or ``(rows, N)``.
    """
    taps = ch.taps if isinstance(ch, MultipathChannel) else np.asarray(ch, dtype=complex)
    L = taps.shape[-1]
    if N < L:
        raise ValueError(f"N={N} subcarriers cannot resolve {L} channel taps")
    k = np.arange(N)[:, None]
    l = np.arange(L)[None, :]
    basis = np.exp(-2j * np.pi * k * l / N)
    return taps @ basis.T


@dataclass
class ChannelGenConfig:
    """Geometry and fading statistics for channel generation."""

    L_f: int = 4
    L_g: int = 4
    L_h: int = 8
    L_v: int = 6
    d_fap_bd: Sequence[float] = (2.5, 4.0)
    d_bd_lu: Sequence[float] = (15.0, 15.0)
    d_fap_lu: float = 15.0
    first_path_gain: float = 1e-3
    pathloss_exponent: float = 2.0
    pdp_decay: float = 1.0
    seed: int = 0
    realization: int = 0

    def __post_init__(self):
        self.d_fap_bd = tuple(float(d) for d in np.atleast_1d(self.d_fap_bd))
        self.d_bd_lu = tuple(float(d) for d in np.atleast_1d(self.d_bd_lu))
        self.d_fap_lu = float(self.d_fap_lu)
        if len(self.d_fap_bd) != len(self.d_bd_lu):
            raise ValueError("d_fap_bd and d_bd_lu must list one distance per device")
        for name in ("L_f", "L_g", "L_h", "L_v"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
            setattr(self, name, int(getattr(self, name)))
        if min(self.d_fap_bd + self.d_bd_lu + (self.d_fap_lu,)) <= 0:
            raise ValueError("all distances must be positive")
        if self.pdp_decay < 0:
            raise ValueError("pdp_decay must be >= 0")
        if self.first_path_gain <= 0:
            raise ValueError("first_path_gain must be positive")

    @property
    def M(self) -> int:
        return len(self.d_fap_bd)

    def path_powers(self, link: str, m: int = 0) -> np.ndarray:
        """Expected power of each tap on ``link`` (for device ``m``)."""
        L = {"f": self.L_f, "g": self.L_g, "h": self.L_h, "v": self.L_v}[link]
        d = {"f": self.d_fap_bd[m], "g": self.d_fap_bd[m], "h": self.d_fap_lu,
             "v": self.d_bd_lu[m]}[link]
        first = self.first_path_gain * d ** (-self.pathloss_exponent)
        return first * np.exp(-self.pdp_decay * np.arange(L))

    def rng(self, link: str, m: int = 0) -> np.random.Generator:
        # spawn_key pins each (realization, link, device) stream independently of M
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.realization), _LINK_CODE[link], int(m)))
        return np.random.default_rng(ss)

    def to_dict(self) -> dict:
        return {
            "L_f": self.L_f, "L_g": self.L_g, "L_h": self.L_h, "L_v": self.L_v,
            "d_fap_bd": list(self.d_fap_bd), "d_bd_lu": list(self.d_bd_lu),
            "d_fap_lu": self.d_fap_lu, "first_path_gain": self.first_path_gain,
            "pathloss_exponent": self.pathloss_exponent, "pdp_decay": self.pdp_decay,
            "seed": self.seed, "realization": self.realization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelGenConfig":
        return cls(**d)


def rayleigh_taps(rng: np.random.Generator, powers, size=None) -> np.ndarray:
    """Draw CSCG taps with per-tap variances ``powers``.

    ``size`` prepends extra sample dimensions, e.g. ``size=(n,)`` gives ``(n, L)``.
    """
    powers = np.asarray(powers, dtype=float)
    shape = powers.shape if size is None else tuple(np.atleast_1d(size)) + powers.shape
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return np.sqrt(powers / 2.0) * z


@dataclass
class ChannelSet:
    """One channel realization: taps and per-subcarrier responses.

    ``F``, ``G`` and ``V`` have shape ``(M, N)``; ``H`` has shape ``(N,)``.
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    V: np.ndarray
    taps: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=complex))
        self.G = np.atleast_2d(np.asarray(self.G, dtype=complex))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=complex))
        self.H = np.asarray(self.H, dtype=complex).reshape(-1)
        if not (self.F.shape == self.G.shape == self.V.shape):
            raise ValueError("F, G and V must share shape (M, N)")
        if self.H.shape != (self.F.shape[1],):
            raise ValueError("H must have one entry per subcarrier")

    @property
    def M(self) -> int:
        return self.F.shape[0]

    @property
    def N(self) -> int:
        return self.F.shape[1]

    # power gains used throughout the optimizers
    @property
    def bs_gain(self) -> np.ndarray:
        """|F G|^2, cascaded backscatter gain, shape (M, N)."""
        return np.abs(self.F * self.G) ** 2

    @property
    def fwd_gain(self) -> np.ndarray:
        """|F|^2, shape (M, N)."""
        return np.abs(self.F) ** 2

    @property
    def lu_gain(self) -> np.ndarray:
        """|H|^2, shape (N,)."""
        return np.abs(self.H) ** 2

    @property
    def intf_gain(self) -> np.ndarray:
        """|F V|^2, shape (M, N)."""
        return np.abs(self.F * self.V) ** 2

    def device(self, m: int) -> "ChannelSet":
        """Single-device view used by the single-BD solver."""
        taps = None
        if self.taps is not None:
            taps = {"f": self.taps["f"][m:m + 1], "g": self.taps["g"][m:m + 1],
                    "h": self.taps["h"], "v": self.taps["v"][m:m + 1]}
        return ChannelSet(self.F[m:m + 1], self.G[m:m + 1], self.H, self.V[m:m + 1], taps)

    @classmethod
    def from_taps(cls, f, g, h, v, N: int) -> "ChannelSet":
        f, g, v = (np.atleast_2d(np.asarray(x, dtype=complex)) for x in (f, g, v))
        h = np.asarray(h, dtype=complex).reshape(-1)
        return cls(freq_response(f, N), freq_response(g, N), freq_response(h, N),
                   freq_response(v, N), taps={"f": f, "g": g, "h": h, "v": v})

    def to_dict(self) -> dict:
        def pairs(a):
            a = np.asarray(a)
            return np.stack([a.real, a.imag], axis=-1).tolist()

        if self.taps is not None:
            return {"N": self.N, "taps": {k: pairs(self.taps[k]) for k in LINKS}}
        return {"N": self.N, "responses": {"F": pairs(self.F), "G": pairs(self.G),
                                           "H": pairs(self.H), "V": pairs(self.V)}}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSet":
        def cplx(x):
            a = np.asarray(x, dtype=float)
            return a[..., 0] + 1j * a[..., 1]

        if "taps" in d:
            t = {k: cplx(v) for k, v in d["taps"].items()}
            return cls.from_taps(t["f"], t["g"], t["h"], t["v"], int(d["N"]))
        r = {k: cplx(v) for k, v in d["responses"].items()}
        return cls(r["F"], r["G"], r["H"], r["V"])


def generate_channels(cfg: ChannelGenConfig, sys: "SystemConfig") -> ChannelSet:
    """Draw one Rayleigh block-fading realization for every link.

    Deterministic for a fixed ``(cfg.seed, cfg.realization)``; each link and
    device has its own random stream, so adding devices leaves the links of
    existing devices unchanged.
    """
    if cfg.M != sys.M:
        raise ValueError(f"channel geometry lists {cfg.M} devices, system has M={sys.M}")
    f = np.stack([rayleigh_taps(cfg.rng("f", m), cfg.path_powers("f", m)) for m in range(sys.M)])
    g = np.stack([rayleigh_taps(cfg.rng("g", m), cfg.path_powers("g", m)) for m in range(sys.M)])
    v = np.stack([rayleigh_taps(cfg.rng("v", m), cfg.path_powers("v", m)) for m in range(sys.M)])
    h = rayleigh_taps(cfg.rng("h"), cfg.path_powers("h"))
    return ChannelSet.from_taps(f, g, h, v, sys.N)


def cascade_gain(cfg: ChannelGenConfig, m: int = 0) -> float:
    """sum_l E|g_{m,l} f_{m,l}|^2 for independent taps (closed form)."""
    pf, pg = cfg.path_powers("f", m), cfg.path_powers("g", m)
    L = min(pf.size, pg.size)
    return float(np.sum(pf[:L] * pg[:L]))


def average_receive_snr(cfg: ChannelGenConfig, sys: "SystemConfig") -> float:
    """Average receive SNR at the access point from device 1 (linear)."""
    return sys.p_total / sys.sigma2 * cascade_gain(cfg, 0)


def noise_for_snr(cfg: ChannelGenConfig, p_total: float, snr_db: float) -> float:
    """Noise power that makes :func:`average_receive_snr` equal ``snr_db``."""
    return p_total * cascade_gain(cfg, 0) / 10.0 ** (snr_db / 10.0)
