"""Empirical stochastic air-to-ground channel model.

A parameter bank of measured marginals and correlation coefficients, a
Gaussian-copula generator that draws geometry-correlated channel statistics,
and an MPC synthesizer that realizes a drawn (K, sigma_tau, sigma_nu) exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import stats as st
from .airchan import Mpc
from .sage import FLOOR_MIN_DB, SnapshotEstimate

MODES = ("horizontal", "vertical")
STAT_NAMES = ("shadow_db", "k_db", "log10_ds", "log10_dops")
MAX_DELAY = 8e-6      # stays inside the CIR unambiguous span
MAX_DOPPLER = 100.0   # SAGE search range


class InfeasibleDraw(ValueError):
    """The requested statistics cannot be realized within the delay/Doppler limits."""


def spearman_to_latent(rho):
    """Latent Gaussian correlation that yields Spearman rank correlation ``rho``."""
    return 2.0 * np.sin(np.pi * np.asarray(rho, float) / 6.0)


@dataclass(frozen=True)
class Marginal:
    keys: tuple
    family: str
    mu: float
    sigma: float
    rho: float

    def __post_init__(self):
        if self.family not in st.FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")

    def dist(self):
        return st.FAMILIES[self.family](loc=self.mu, scale=self.sigma)


@dataclass
class Bank:
    mode: str
    key: str                 # fixed geometry per flight ("h_m" or "d_m")
    keys: tuple
    variable: str            # geometry swept during a flight
    variable_range: tuple
    gamma_table: dict
    stats: dict
    gamma_linear: dict | None = None

    def __post_init__(self):
        lo, hi = self.variable_range
        if not 0 < lo < hi:
            raise ValueError("variable_range must satisfy 0 < lo < hi")
        if set(self.gamma_table) != set(self.keys):
            raise ValueError(f"{self.mode}: gamma table keys do not match bank keys")
        for name in STAT_NAMES:
            cover = sorted(k for m in self.stats[name] for k in m.keys)
            if cover != sorted(self.keys):
                raise ValueError(f"{self.mode}/{name}: regimes must cover each key once")

    def nearest_key(self, geometry: float) -> float:
        keys = np.asarray(self.keys, float)
        return float(keys[np.argmin(np.abs(keys - geometry))])

    def marginal(self, name: str, geometry: float) -> Marginal:
        k = self.nearest_key(geometry)
        return next(m for m in self.stats[name] if k in m.keys)

    def gamma(self, geometry: float) -> float:
        return self.gamma_table[self.nearest_key(geometry)]

    @property
    def geometry_range(self):
        return min(self.keys), max(self.keys)


@dataclass
class ModelParams:
    horizontal: Bank
    vertical: Bank
    version: int = 1
    carrier_hz: float = st.DEFAULT_CARRIER

    def bank(self, mode: str) -> Bank:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return getattr(self, mode)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        banks = {}
        for mode in MODES:
            b = d[mode]
            stats = {name: [Marginal(tuple(float(k) for k in m["keys"]), m["family"],
                                     float(m["mu"]), float(m["sigma"]), float(m["rho"]))
                            for m in b["stats"][name]] for name in STAT_NAMES}
            banks[mode] = Bank(mode, b["key"], tuple(float(k) for k in b["keys"]), b["variable"],
                               tuple(b["variable_range"]),
                               {float(k): float(v) for k, v in b["gamma_table"].items()},
                               stats, b.get("gamma_linear"))
        return cls(banks["horizontal"], banks["vertical"], int(d.get("version", 1)),
                   float(d.get("carrier_hz", st.DEFAULT_CARRIER)))

    @classmethod
    def load(cls, path=None) -> "ModelParams":
        if path is None:
            text = resources.files("a2gsounder").joinpath("data/model_params.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class ModelDraw:
    mode: str
    d: float
    h: float
    gamma: float
    x_db: float
    k_db: float
    sigma_tau: float
    sigma_nu: float
    gain_db: float


@dataclass
class ModelDraws:
    """Column-oriented batch of draws for one flight geometry."""

    mode: str
    geometry: float
    d: np.ndarray
    h: np.ndarray
    gamma: np.ndarray
    x_db: np.ndarray
    k_db: np.ndarray
    log10_ds: np.ndarray
    log10_dops: np.ndarray
    gain_db: np.ndarray

    COLUMNS = ("d", "h", "gamma", "x_db", "k_db", "log10_ds", "log10_dops", "gain_db")

    def __len__(self):
        return self.d.size

    @property
    def sigma_tau(self):
        return 10.0 ** self.log10_ds

    @property
    def sigma_nu(self):
        return 10.0 ** self.log10_dops

    @property
    def variable(self) -> np.ndarray:
        return self.d if self.mode == "horizontal" else self.h

    def __getitem__(self, i) -> ModelDraw:
        return ModelDraw(self.mode, float(self.d[i]), float(self.h[i]), float(self.gamma[i]),
                         float(self.x_db[i]), float(self.k_db[i]), float(self.sigma_tau[i]),
                         float(self.sigma_nu[i]), float(self.gain_db[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def stat(self, name: str) -> np.ndarray:
        return getattr(self, name if name != "shadow_db" else "x_db")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            cols = [getattr(self, c) for c in self.COLUMNS]
            for row in zip(*cols):
                wr.writerow([f"{v:.9g}" for v in row])


def _copula(z_geo, marginal: Marginal, rng, absolute=False):
    r = float(spearman_to_latent(marginal.rho))
    z = r * z_geo + np.sqrt(1 - r * r) * rng.standard_normal(z_geo.size)
    u = sps.norm.cdf(z)
    if absolute:
        # correlation acts on |X|; the sign is independent so X keeps its marginal
        mag = sps.halfnorm(scale=marginal.sigma).ppf(u)
        return marginal.mu + mag * rng.choice([-1.0, 1.0], size=z_geo.size)
    return marginal.dist().ppf(u)


def draw_statistics(mode: str, geometry: float, n: int, seed=None,
                    params: ModelParams | None = None, extrapolate: bool = False,
                    gamma_source: str = "table", reference_db: float = 0.0) -> ModelDraws:
    """Draw ``n`` geometry-correlated statistic sets for one flight.

    ``geometry`` is the fixed flight parameter (height for horizontal flights,
    horizontal distance for vertical ones); the swept variable is drawn
    uniformly over the flight range and each statistic is coupled to it through
    a Gaussian copula whose rank correlation equals the tabled coefficient.
    """
    params = params or ModelParams.load()
    bank = params.bank(mode)
    lo, hi = bank.geometry_range
    if not extrapolate and not lo <= geometry <= hi:
        raise ValueError(f"{mode} geometry {geometry} outside modelled range [{lo}, {hi}]")
    if gamma_source not in ("table", "linear"):
        raise ValueError("gamma_source must be 'table' or 'linear'")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    vlo, vhi = bank.variable_range
    u = rng.uniform(size=n)
    var = vlo + (vhi - vlo) * u
    z_geo = sps.norm.ppf(u)
    out = {name: _copula(z_geo, bank.marginal(name, geometry), rng, absolute=(name == "shadow_db"))
           for name in STAT_NAMES}
    if gamma_source == "linear":
        if bank.gamma_linear is None:
            raise ValueError(f"{mode} bank has no linear gamma model")
        g = bank.gamma_linear
        gamma = st.gamma_height_model(geometry, g["a"], g["b"], g["sigma_c"]).rvs(
            size=n, random_state=rng)
    else:
        gamma = np.full(n, bank.gamma(geometry))
    gain = reference_db - 10 * gamma * np.log10(var / vlo) + out["shadow_db"]
    if mode == "horizontal":
        d, h = var, np.full(n, float(geometry))
    else:
        d, h = np.full(n, float(geometry)), var
    return ModelDraws(mode, float(geometry), d, h, gamma, out["shadow_db"], out["k_db"],
                      out["log10_ds"], out["log10_dops"], gain)


# ------------------------------------------------------------ MPC synthesis


def _pairwise_spread(p, v):
    # sigma^2 = sum_ij p_i p_j (v_i - v_j)^2 / (2 (sum p)^2); independent of stats module
    dv = v[:, None] - v[None, :]
    return np.sqrt(np.sum(p[:, None] * p[None, :] * dv * dv) / (2 * p.sum() ** 2))


def _limit_scale(scale, offsets, limit, clip, what, unit):
    peak = scale * np.abs(offsets).max()
    if peak <= limit:
        return scale, False
    if not clip:
        raise InfeasibleDraw(f"{what} {peak:.3g} {unit} exceeds {limit:g} {unit}")
    return limit / np.abs(offsets).max(), True


def realize_mpcs(draw: ModelDraw, L: int = 10, seed=None, t: float = 0.0,
                 los_doppler: float = 0.0, max_delay: float = MAX_DELAY,
                 max_doppler: float = MAX_DOPPLER, clip: bool = False):
    """Like :func:`synthesize_mpcs` but returns ``(estimate, clipped)``.

    With ``clip=True`` a spread that cannot be met inside the delay/Doppler
    limits is reduced to the largest realizable value instead of raising.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    rng = np.random.default_rng(seed)
    total = 10 ** (draw.gain_db / 10)
    if L == 1 or np.isposinf(draw.k_db):
        est = SnapshotEstimate(t, [Mpc(complex(np.sqrt(total)), 0.0, los_doppler, label="los")],
                               FLOOR_MIN_DB, 0.0, total)
        return est, False
    if not np.isfinite(draw.k_db):
        raise ValueError("K must be finite for a multipath draw")
    k = 10 ** (draw.k_db / 10)
    # moderately even scattered powers and balanced-sign Doppler offsets keep
    # the largest offset needed for a given spread small
    w = rng.gamma(4.0, size=L - 1)
    p = np.concatenate([[total * k / (k + 1)], total / (k + 1) * w / w.sum()])
    delay = np.concatenate([[0.0], rng.exponential(size=L - 1)])
    sign = np.resize([1.0, -1.0], L - 1)
    rng.shuffle(sign)
    doppler = np.concatenate([[0.0], sign * rng.uniform(0.5, 1.0, L - 1)])
    s_tau, c1 = _limit_scale(draw.sigma_tau / _pairwise_spread(p, delay), delay, max_delay,
                             clip, "delay", "s")
    s_nu, c2 = _limit_scale(draw.sigma_nu / _pairwise_spread(p, doppler), doppler,
                            max_doppler - abs(los_doppler), clip, "Doppler offset", "Hz")
    delay *= s_tau
    doppler = doppler * s_nu + los_doppler
    phase = rng.uniform(0, 2 * np.pi, L)
    paths = [Mpc(complex(np.sqrt(pi) * np.exp(1j * ph)), float(tau), float(nu),
                 label="los" if i == 0 else "scatter")
             for i, (pi, tau, nu, ph) in enumerate(zip(p, delay, doppler, phase))]
    return SnapshotEstimate(t, paths, FLOOR_MIN_DB, 0.0, float(total)), c1 or c2


def synthesize_mpcs(draw: ModelDraw, L: int = 10, seed=None, t: float = 0.0,
                    los_doppler: float = 0.0, max_delay: float = MAX_DELAY,
                    max_doppler: float = MAX_DOPPLER) -> SnapshotEstimate:
    """One dominant path plus ``L-1`` scattered paths realizing the draw.

    The dominant/scattered power ratio equals K, total power equals the drawn
    gain, and the delay and Doppler offsets are rescaled so the power-weighted
    spreads equal sigma_tau and sigma_nu. Raises :class:`InfeasibleDraw` when
    that needs a delay beyond ``max_delay`` or a Doppler beyond ``max_doppler``.
    """
    return realize_mpcs(draw, L, seed, t, los_doppler, max_delay, max_doppler)[0]


def fading_trace(est: SnapshotEstimate, n: int, seed=None) -> np.ndarray:
    """Fast-fading power samples: the dominant path is steady while every
    scattered path fades as an independent complex Gaussian, so the power is
    Rician with the realized K."""
    rng = np.random.default_rng(seed)
    a = np.array([p.amplitude for p in est.paths])
    if a.size == 0:
        return np.zeros(n)
    g = (rng.standard_normal((n, a.size - 1)) + 1j * rng.standard_normal((n, a.size - 1)))
    field_ = a[0] + g @ (np.abs(a[1:]) / np.sqrt(2))
    return np.abs(field_) ** 2


# ----------------------------------------------------------------- closed loop


@dataclass
class RoundtripReport:
    mode: str
    n_windows: int
    n_clipped: int
    gamma: dict = field(default_factory=dict)
    shadow: dict = field(default_factory=dict)
    regimes: dict = field(default_factory=dict)
    k_flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n_windows": self.n_windows,
                "n_clipped": self.n_clipped, "gamma": self.gamma,
                "shadow": self.shadow, "regimes": self.regimes, "k_flags": self.k_flags}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _summary(values, geo, marginal: Marginal) -> dict:
    fit = st.fit_distribution(values, marginal.family)
    return {"family": marginal.family, "configured_mu": marginal.mu,
            "configured_sigma": marginal.sigma, "configured_rho": marginal.rho,
            "mu": fit.mu, "sigma": fit.sigma, "sample_mean": float(np.mean(values)),
            "rho": st.correlation(values, geo), "n": int(values.size)}


def model_roundtrip(mode: str = "horizontal", n_windows: int = 10_000, seed=0,
                    params: ModelParams | None = None, n_paths: int = 10,
                    fast_samples: int = 1000) -> RoundtripReport:
    """Draw statistics for every measured flight, synthesize MPC sets and
    fast-fading windows, then recover the parameters with the stats module.

    Each window contributes one mean power (path-loss fit and shadow fading),
    one K estimate from its unsmoothed fast-fading samples, and one delay and
    Doppler spread from its MPC set. Draws whose spreads exceed the
    delay/Doppler limits are clipped to the largest realizable spread and
    counted in ``n_clipped``. Windows whose K estimate is flagged Rayleigh-like
    carry no finite K in dB and are left out of the K summary.
    """
    params = params or ModelParams.load()
    bank = params.bank(mode)
    ss = np.random.SeedSequence(seed)
    per_key = max(n_windows // len(bank.keys), 30)
    rows = {k: [] for k in bank.keys}
    n_clip, flags = 0, {"ok": 0, "saturated": 0, "rayleigh": 0}
    for key, child in zip(bank.keys, ss.spawn(len(bank.keys))):
        s_draw, s_mpc = child.spawn(2)
        draws = draw_statistics(mode, key, per_key, s_draw, params)
        rng = np.random.default_rng(s_mpc)
        for draw, x in zip(draws, draws.variable):
            est, clipped = realize_mpcs(draw, n_paths, rng, clip=True)
            n_clip += clipped
            fast = fading_trace(est, fast_samples, rng)
            kf = st.k_factor(fast)
            flags[kf.flag] += 1
            rows[key].append((x, fast.mean(), kf.k_db if kf.flag != "rayleigh" else np.nan,
                              np.log10(st.rms_delay_spread(est)),
                              np.log10(st.rms_doppler_spread(est))))
    report = RoundtripReport(mode, sum(len(r) for r in rows.values()), n_clip, k_flags=flags)
    arr = {k: np.array(v) for k, v in rows.items()}
    xs, shadows = [], []
    for key, a in arr.items():
        fit = st.fit_log_distance(10 * np.log10(a[:, 1]), a[:, 0])
        report.gamma[str(key)] = {"configured": bank.gamma_table[key], "recovered": fit.gamma}
        xs.append(a[:, 0])
        shadows.append(fit.residuals)
    xs, shadows = np.concatenate(xs), np.concatenate(shadows)
    sm = bank.stats["shadow_db"][0]
    fit = st.fit_distribution(shadows, "normal")
    report.shadow = {"configured_sigma": sm.sigma, "sigma": fit.sigma, "mu": fit.mu,
                     "configured_rho": sm.rho, "rho": st.correlation(np.abs(shadows), xs)}
    for col, name in ((2, "k_db"), (3, "log10_ds"), (4, "log10_dops")):
        for m in bank.stats[name]:
            a = np.concatenate([arr[k] for k in m.keys])
            ok = np.isfinite(a[:, col])
            label = f"{name}@" + ",".join(f"{k:g}" for k in m.keys)
            report.regimes[label] = _summary(a[ok, col], a[ok, 0], m)
    return report
