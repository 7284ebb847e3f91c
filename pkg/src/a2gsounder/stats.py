"""Channel statistics from multipath estimates plus flight geometry.

Power, spatial smoothing, log-distance path-loss fits, shadow fading,
moment-based Rician K-factor, RMS delay/Doppler spreads, Pearson correlation
and maximum-likelihood distribution fits.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

C_LIGHT = 299_792_458.0
DEFAULT_CARRIER = 2.585e9
FAMILIES = {"normal": sps.norm, "extreme_value": sps.gumbel_l}


@dataclass
class GeoTaggedPower:
    time: np.ndarray
    d: np.ndarray
    h: np.ndarray
    power: np.ndarray
    travel: np.ndarray | None = None

    def __post_init__(self):
        for name in ("time", "d", "h", "power"):
            setattr(self, name, np.asarray(getattr(self, name), float))
        n = self.time.size
        if any(getattr(self, k).shape != (n,) for k in ("d", "h", "power")):
            raise ValueError("time, d, h and power must have equal length")
        if np.any(self.d < 0) or np.any(self.h < 0):
            raise ValueError("d and h must be >= 0")
        if self.travel is None:
            step = np.hypot(np.diff(self.d), np.diff(self.h))
            self.travel = np.concatenate([[0.0], np.cumsum(step)])
        else:
            self.travel = np.asarray(self.travel, float)

    def __len__(self):
        return self.time.size

    @property
    def power_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10 * np.log10(self.power)

    def subset(self, sel) -> "GeoTaggedPower":
        return GeoTaggedPower(self.time[sel], self.d[sel], self.h[sel], self.power[sel],
                              self.travel[sel])


@dataclass
class FitResult:
    gamma: float
    intercept: float
    residuals: np.ndarray
    r2: float
    rmse: float
    n: int
    regressor: str = "d"


@dataclass
class KFactor:
    k_db: float
    k_linear: float
    gamma_m: float
    flag: str  # ok | saturated | rayleigh


@dataclass
class StatsRecord:
    t: float
    d: float
    h: float
    p_db: float
    p_smoothed_db: float
    x_db: float
    k_db: float
    delay_spread: float
    doppler_spread: float


@dataclass
class DistributionFit:
    family: str
    mu: float
    sigma: float
    ks_stat: float
    ks_pvalue: float
    n: int

    def dist(self):
        return FAMILIES[self.family](loc=self.mu, scale=self.sigma)


# ------------------------------------------------------------------- power


def channel_power(est) -> float:
    return float(sum(abs(p.amplitude) ** 2 for p in est.paths))


def geotag(estimates, trajectory, bs_position=(0.0, 0.0, 20.0)) -> GeoTaggedPower:
    """Attach UAV geometry to each estimate. ``d`` is the horizontal distance
    to the BS, ``h`` the UAV height; ``travel`` is arc length along the flight."""
    t = np.array([e.t for e in estimates], float)
    pos = trajectory.position(t)
    bs = np.asarray(bs_position, float)
    d = np.hypot(pos[:, 0] - bs[0], pos[:, 1] - bs[1])
    wp = trajectory.waypoints
    seg = np.linalg.norm(np.diff(wp[:, 1:], axis=0), axis=1)
    arc = np.interp(t, wp[:, 0], np.concatenate([[0.0], np.cumsum(seg)]))
    p = np.array([channel_power(e) for e in estimates], float)
    return GeoTaggedPower(t, d, pos[:, 2], p, arc)


def smooth_power(series: GeoTaggedPower, window: float = 20.0,
                 carrier: float = DEFAULT_CARRIER, travel=None) -> GeoTaggedPower:
    """Centered moving average of linear power over ``window`` wavelengths of
    travelled distance. Samples near the ends use a truncated window."""
    s = np.asarray(series.travel if travel is None else travel, float)
    if np.any(np.diff(s) < 0):
        raise ValueError("travelled distance must be non-decreasing")
    width = window * C_LIGHT / carrier
    if width > s[-1] - s[0]:
        raise ValueError(f"smoothing window {width:.3f} m exceeds trace extent")
    lo = np.searchsorted(s, s - width / 2, side="left")
    hi = np.searchsorted(s, s + width / 2, side="right")
    cs = np.concatenate([[0.0], np.cumsum(series.power)])
    sm = (cs[hi] - cs[lo]) / (hi - lo)
    return GeoTaggedPower(series.time, series.d, series.h, sm, s)


def block_windows(travel, window: float = 20.0, carrier: float = DEFAULT_CARRIER,
                  min_samples: int = 1) -> np.ndarray:
    """Window label per sample for non-overlapping spatial blocks of ``window``
    wavelengths; sparse blocks are merged forward until they hold
    ``min_samples`` samples."""
    s = np.asarray(travel, float)
    width = window * C_LIGHT / carrier
    raw = np.floor((s - s[0]) / width).astype(int)
    labels = np.empty_like(raw)
    cur, count, start_of = 0, 0, None
    for i, r in enumerate(raw):
        if start_of is None:
            start_of = r
        if r != start_of and count >= min_samples:
            cur += 1
            count = 0
            start_of = r
        labels[i] = cur
        count += 1
    if count < min_samples and cur > 0:
        labels[labels == cur] = cur - 1
    return labels


# --------------------------------------------------------------- path loss


def fit_log_distance(power_db, x, regressor: str = "d") -> FitResult:
    """OLS of path loss (= -power dB) on 10*log10(x).

    Residuals are reported as shadow fading X = power - fitted mean power, so a
    positive X means stronger than the path-loss line.
    """
    y = -np.asarray(power_db, float)
    x = np.asarray(x, float)
    ok = np.isfinite(y) & np.isfinite(x) & (x > 0)
    if ok.sum() < 30:
        raise ValueError("path-loss fit needs at least 30 finite points")
    y, x = y[ok], x[ok]
    if x.max() < 2 * x.min():
        raise ValueError("degenerate regressor range (needs a factor of 2)")
    g = 10 * np.log10(x)
    A = np.column_stack([g, np.ones_like(g)])
    (gamma, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ [gamma, b]
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return FitResult(float(gamma), float(b), -resid, float(r2),
                     float(np.sqrt(np.mean(resid ** 2))), int(ok.sum()), regressor)


def fit_path_loss(series: GeoTaggedPower, regressor: str = "d") -> FitResult:
    if regressor not in ("d", "h"):
        raise ValueError("regressor must be 'd' or 'h'")
    return fit_log_distance(series.power_db, getattr(series, regressor), regressor)


def gamma_height_model(h, a: float = -0.02, b: float = 3.42, sigma_c: float = 0.48):
    """Distribution of the horizontal path-loss exponent at height ``h``."""
    h = np.asarray(h, float)
    if np.any(h <= 0):
        raise ValueError("height must be positive")
    return sps.norm(loc=a * h + b, scale=sigma_c)


def refit_gamma_height(heights, gammas):
    """Least-squares (a, b) and residual std of gamma = a*h + b + c."""
    h, g = np.asarray(heights, float), np.asarray(gammas, float)
    a, b = np.polyfit(h, g, 1)
    return float(a), float(b), float(np.std(g - (a * h + b), ddof=2 if h.size > 2 else 0))


# ---------------------------------------------------------------- K-factor


def k_factor(power, k_max_db: float = 40.0, min_samples: int = 50) -> KFactor:
    """Moment-based Rician K-factor from linear power samples."""
    p = np.asarray(power, float)
    if p.size < min_samples:
        raise ValueError(f"K-factor window needs >= {min_samples} samples, got {p.size}")
    mean = p.mean()
    if not mean > 0:
        raise ValueError("power window has no positive mean")
    gm = p.var() / mean ** 2
    kmax = 10 ** (k_max_db / 10)
    if gm >= 1:
        return KFactor(-np.inf, 0.0, float(gm), "rayleigh")
    r = np.sqrt(1 - gm)
    k = r / (1 - r) if r < 1 else np.inf
    if k >= kmax:
        return KFactor(float(k_max_db), kmax, float(gm), "saturated")
    return KFactor(float(10 * np.log10(k)), float(k), float(gm), "ok")


def windowed_k_factor(series: GeoTaggedPower, window: float = 20.0,
                      carrier: float = DEFAULT_CARRIER, min_samples: int = 50):
    """K-factor per spatial block; returns (per-sample K dB, list of KFactor)."""
    labels = block_windows(series.travel, window, carrier, min_samples)
    out = np.full(len(series), np.nan)
    results = []
    for lab in np.unique(labels):
        sel = labels == lab
        try:
            kf = k_factor(series.power[sel], min_samples=min_samples)
        except ValueError:
            results.append(None)
            continue
        results.append(kf)
        out[sel] = kf.k_db
    return out, results


# ----------------------------------------------------------------- spreads


def power_weighted_spread(weights, values, axis=-1):
    """sqrt of the power-weighted second central moment along ``axis``."""
    w = np.asarray(weights, float)
    v = np.asarray(values, float)
    # shifting by the minimum keeps a single path exactly at zero spread
    v = v - v.min(axis=axis, keepdims=True)
    tot = w.sum(axis=axis, keepdims=True)
    mu = (w * v).sum(axis=axis, keepdims=True) / tot
    var = (w * (v - mu) ** 2).sum(axis=axis) / np.squeeze(tot, axis=axis)
    return np.sqrt(np.maximum(var, 0.0))


def _spread(est, attr):
    if not est.paths:
        raise ValueError("spread undefined for an empty estimate")
    w = [abs(p.amplitude) ** 2 for p in est.paths]
    return float(power_weighted_spread(w, [getattr(p, attr) for p in est.paths]))


def rms_delay_spread(est) -> float:
    return _spread(est, "delay")


def rms_doppler_spread(est) -> float:
    return _spread(est, "doppler")


# ------------------------------------------------------------ correlation


def correlation(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("correlation needs two equal-length series of >= 2 samples")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = np.sum(dx * dx), np.sum(dy * dy)
    if vx == 0 or vy == 0:
        raise ValueError("correlation undefined for zero variance")
    return float(np.clip(np.sum(dx * dy) / np.sqrt(vx * vy), -1.0, 1.0))


def fit_distribution(samples, family: str = "normal") -> DistributionFit:
    if family not in FAMILIES:
        raise ValueError(f"unsupported family {family!r}; choose from {sorted(FAMILIES)}")
    x = np.asarray(samples, float)
    x = x[np.isfinite(x)]
    if x.size < 30:
        raise ValueError("distribution fit needs at least 30 samples")
    if np.ptp(x) == 0:
        raise ValueError("degenerate (constant) samples")
    mu, sigma = FAMILIES[family].fit(x)
    ks = sps.kstest(x, FAMILIES[family](loc=mu, scale=sigma).cdf)
    return DistributionFit(family, float(mu), float(sigma), float(ks.statistic),
                           float(ks.pvalue), int(x.size))


# --------------------------------------------------------------- pipeline


STATS_COLUMNS = ["t", "d_m", "h_m", "P_dB", "P_smoothed_dB", "X_dB", "K_dB",
                 "log10_ds", "log10_dops"]


@dataclass
class StatsReport:
    records: list
    summary: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(STATS_COLUMNS)
            for r in self.records:
                ld = np.log10(r.delay_spread) if r.delay_spread > 0 else np.nan
                lv = np.log10(r.doppler_spread) if r.doppler_spread > 0 else np.nan
                wr.writerow([f"{v:.9g}" for v in (r.t, r.d, r.h, r.p_db, r.p_smoothed_db,
                                                   r.x_db, r.k_db, ld, lv)])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


def compute_stats(estimates, trajectory, bs_position=(0.0, 0.0, 20.0),
                  carrier: float = DEFAULT_CARRIER, regressor: str | None = None,
                  window: float = 20.0, k_min_samples: int = 50) -> StatsReport:
    """Per-estimate statistics plus fit summary. Fits whose preconditions are
    not met (too few points, narrow range) are reported as skipped."""
    if regressor is None:
        regressor = "h" if trajectory.kind == "vertical" else "d"
    series = geotag(estimates, trajectory, bs_position)
    n = len(series)
    summary = {"n_estimates": n, "regressor": regressor, "carrier_hz": carrier}
    live = series.power > 0
    p_sm = np.full(n, np.nan)
    x_db = np.full(n, np.nan)
    k_db = np.full(n, np.nan)
    try:
        sm = smooth_power(series.subset(live), window, carrier)
        p_sm[live] = sm.power_db
        fit = fit_path_loss(sm, regressor)
        x_db[live] = fit.residuals
        summary["path_loss"] = {"gamma": fit.gamma, "b_db": fit.intercept, "r2": fit.r2,
                                "rmse_db": fit.rmse, "n": fit.n}
    except ValueError as exc:
        summary["path_loss"] = {"skipped": str(exc)}
    try:
        k_live, _ = windowed_k_factor(series.subset(live), window, carrier, k_min_samples)
        k_db[live] = k_live
    except (ValueError, IndexError) as exc:
        summary["k_factor"] = {"skipped": str(exc)}
    ds = np.array([rms_delay_spread(e) if e.paths else np.nan for e in estimates])
    dv = np.array([rms_doppler_spread(e) if e.paths else np.nan for e in estimates])
    geo = getattr(series, regressor)
    with np.errstate(divide="ignore"):
        lds, ldv = np.log10(ds), np.log10(dv)
    for name, vals, fam in (("shadow", x_db, "normal"), ("k_db", k_db, "normal"),
                            ("log10_ds", lds, "normal"), ("log10_dops", ldv, "extreme_value"
                                                           if regressor == "d" else "normal")):
        ok = np.isfinite(vals)
        entry = {}
        try:
            fd = fit_distribution(vals[ok], fam)
            entry.update(family=fam, mu=fd.mu, sigma=fd.sigma, ks=fd.ks_stat)
        except ValueError as exc:
            entry["fit_skipped"] = str(exc)
        try:
            if ok.sum() < 30:
                raise ValueError("correlation needs at least 30 finite samples")
            v = np.abs(vals[ok]) if name == "shadow" else vals[ok]
            entry["rho"] = correlation(v, geo[ok])
        except ValueError as exc:
            entry["rho_skipped"] = str(exc)
        summary[name] = entry
    recs = [StatsRecord(series.time[i], series.d[i], series.h[i], series.power_db[i], p_sm[i],
                        x_db[i], k_db[i], ds[i], dv[i]) for i in range(n)]
    for k, v in list(summary.items()):
        if isinstance(v, dict):
            summary[k] = {kk: (_finite(vv) if isinstance(vv, (float, np.floating)) else vv)
                          for kk, vv in v.items()}
    return StatsReport(recs, summary)
