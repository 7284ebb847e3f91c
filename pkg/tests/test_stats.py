import csv
import json
import math

import numpy as np
import pytest

from a2gsounder import airchan as ac
from a2gsounder import stats as st
from a2gsounder.sage import SnapshotEstimate

LAM = st.C_LIGHT / st.DEFAULT_CARRIER


def _est(amps, delays=None, dops=None, t=0.0):
    n = len(amps)
    delays = np.zeros(n) if delays is None else delays
    dops = np.zeros(n) if dops is None else dops
    paths = [ac.Mpc(complex(a), float(d), float(v)) for a, d, v in zip(amps, delays, dops)]
    return SnapshotEstimate(t, paths, -100.0, 0.0, 1.0)


def _brute_spread(weights, values):
    tot = math.fsum(weights)
    m1 = math.fsum(w * v for w, v in zip(weights, values)) / tot
    m2 = math.fsum(w * (v - m1) ** 2 for w, v in zip(weights, values)) / tot
    return math.sqrt(m2)


def _rician(k_db, n, rng):
    k = 10 ** (k_db / 10)
    los = np.sqrt(k / (k + 1))
    diff = np.sqrt(1 / (2 * (k + 1))) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return np.abs(los * np.exp(1j * rng.uniform(0, 2 * np.pi)) + diff) ** 2


def _series(power, step=LAM / 40):
    n = len(power)
    s = np.arange(n) * step
    return st.GeoTaggedPower(np.arange(n) * 0.01, 10 + s, np.full(n, 50.0), power, s)


def test_channel_power():
    assert st.channel_power(_est([1.0, 0.5])) == pytest.approx(1.25)
    assert st.channel_power(_est([])) == 0.0


def test_geotagged_power_validation():
    with pytest.raises(ValueError):
        st.GeoTaggedPower([0, 1], [1, 2], [1], [1, 1])
    with pytest.raises(ValueError):
        st.GeoTaggedPower([0], [-1], [1], [1])


def test_geotag_along_flight():
    traj = ac.horizontal_flight(30.0)
    ests = [_est([1.0], t=t) for t in (0.0, 20.0, 40.0)]
    g = st.geotag(ests, traj)
    assert np.allclose(g.h, 30.0)
    assert np.allclose(g.d, traj.position(g.time)[:, 0])
    assert np.all(np.diff(g.travel) > 0)


def test_smooth_constant_unchanged():
    sm = st.smooth_power(_series(np.full(4000, 3.0)))
    assert np.allclose(sm.power, 3.0)


def test_smooth_ripple_attenuated():
    s = _series(np.ones(8000)).travel
    ripple = 0.5 * np.cos(2 * np.pi * s / (LAM / 2) + 0.3)
    sm = st.smooth_power(_series(1 + ripple))
    width = 20 * LAM
    core = (s > s[0] + width) & (s < s[-1] - width)
    left = np.max(np.abs(sm.power[core] - 1))
    assert 20 * np.log10(left / 0.5) <= -20


def test_smooth_step_width():
    step = LAM / 40
    p = np.r_[np.ones(3000), np.full(3000, 10.0)]
    sm = st.smooth_power(_series(p, step))
    moving = np.flatnonzero((sm.power > 1 + 1e-9) & (sm.power < 10 - 1e-9))
    width = (moving[-1] - moving[0] + 1) * step
    assert width == pytest.approx(20 * LAM, abs=2 * step)


def test_smooth_window_too_large():
    with pytest.raises(ValueError):
        st.smooth_power(_series(np.ones(100)))


@pytest.mark.parametrize("gamma,lo,hi", [(3.64, 10, 500), (0.07, 20, 300)])
def test_fit_noiseless_slopes(gamma, lo, hi):
    x = np.linspace(lo, hi, 200)
    pdb = -(10 * gamma * np.log10(x) + 12.0)
    fit = st.fit_log_distance(pdb, x)
    assert fit.gamma == pytest.approx(gamma, abs=1e-6)
    assert fit.intercept == pytest.approx(12.0, abs=1e-6)


def test_fit_shadowed_line():
    rng = np.random.default_rng(0)
    x = rng.uniform(10, 500, 10_000)
    X = rng.normal(0, 2.7, x.size)
    fit = st.fit_log_distance(-(10 * 2.3 * np.log10(x) + 5) + X, x)
    assert fit.gamma == pytest.approx(2.3, abs=0.05)
    assert np.std(fit.residuals) == pytest.approx(2.7, abs=0.2)
    assert abs(np.mean(fit.residuals)) < 1e-9
    # positive residual means stronger than the line
    assert np.corrcoef(fit.residuals, X)[0, 1] > 0.99


def test_fit_preconditions():
    with pytest.raises(ValueError):
        st.fit_log_distance(np.zeros(10), np.linspace(10, 100, 10))
    with pytest.raises(ValueError):
        st.fit_log_distance(np.zeros(50), np.linspace(100, 150, 50))


def test_fit_path_loss_regressor():
    g = st.GeoTaggedPower(np.arange(40), np.full(40, 100.0), np.linspace(20, 300, 40),
                          10 ** (-(10 * 1.2 * np.log10(np.linspace(20, 300, 40))) / 10))
    assert st.fit_path_loss(g, "h").gamma == pytest.approx(1.2)
    with pytest.raises(ValueError):
        st.fit_path_loss(g, "z")


def test_gamma_height_model():
    assert st.gamma_height_model(15).mean() == pytest.approx(3.12)
    assert st.gamma_height_model(100).mean() == pytest.approx(1.42)
    assert st.gamma_height_model(50).std() == pytest.approx(0.48)
    with pytest.raises(ValueError):
        st.gamma_height_model(0)


def test_refit_gamma_height_table():
    # hand OLS on the five (h, gamma) means: Sxy = -101.95, Sxx = 4670
    a, b, _ = st.refit_gamma_height([15, 30, 50, 75, 100], [3.64, 2.30, 2.28, 1.31, 1.67])
    assert a == pytest.approx(-101.95 / 4670, abs=1e-9)
    assert b == pytest.approx(2.24 + 54 * 101.95 / 4670, abs=1e-9)
    assert a == pytest.approx(-0.02, abs=0.002) and b == pytest.approx(3.4, abs=0.05)


def test_k_factor_constant_saturates():
    kf = st.k_factor(np.ones(100))
    assert kf.flag == "saturated" and kf.k_db == 40.0


@pytest.mark.parametrize("k_db", [0.0, 10.0])
def test_k_factor_rician(k_db):
    kf = st.k_factor(_rician(k_db, 10_000, np.random.default_rng(1)))
    assert kf.flag == "ok"
    assert kf.k_db == pytest.approx(k_db, abs=1)


def test_k_factor_rayleigh():
    rng = np.random.default_rng(2)
    kf = st.k_factor(np.abs(rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)) ** 2)
    assert kf.flag == "rayleigh" or kf.k_db <= -10


def test_k_factor_scale_invariant():
    p = _rician(7.0, 2000, np.random.default_rng(3))
    assert st.k_factor(p).k_db == pytest.approx(st.k_factor(1e-7 * p).k_db)


def test_k_factor_short_window():
    with pytest.raises(ValueError):
        st.k_factor(np.ones(49))


def test_windowed_k_factor_blocks():
    p = _rician(8.0, 20_000, np.random.default_rng(4))
    g = _series(p, LAM / 100)
    k, res = st.windowed_k_factor(g)
    assert len(res) == 10
    assert np.all(np.isfinite(k))
    assert np.mean([r.k_db for r in res]) == pytest.approx(8.0, abs=1)


def test_block_windows_merge_sparse():
    s = np.r_[np.linspace(0, 2.0, 60), 2.5, 2.6]
    lab = st.block_windows(s, min_samples=10)
    assert np.unique(lab).size == 1


def test_spread_examples():
    assert st.rms_delay_spread(_est([1, 1], [0, 100e-9])) == pytest.approx(50e-9)
    assert st.rms_delay_spread(_est([0.4], [3e-6])) == 0
    assert st.rms_doppler_spread(_est([1, 1], dops=[-25, 25])) == pytest.approx(25)
    assert st.rms_doppler_spread(_est([1], dops=[51.7])) == 0
    with pytest.raises(ValueError):
        st.rms_delay_spread(_est([]))


def test_spread_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        a = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        tau = rng.uniform(0, 5e-6, n)
        nu = rng.uniform(-100, 100, n)
        e = _est(a, tau, nu)
        w = [abs(x) ** 2 for x in a]
        for got, want in ((st.rms_delay_spread(e), _brute_spread(w, tau)),
                          (st.rms_doppler_spread(e), _brute_spread(w, nu))):
            assert got == pytest.approx(want, rel=1e-12)


def test_spread_invariances():
    rng = np.random.default_rng(6)
    a = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    tau = rng.uniform(0, 2e-6, 6)
    base = st.rms_delay_spread(_est(a, tau))
    assert st.rms_delay_spread(_est(a, tau + 7e-6)) == pytest.approx(base, rel=1e-9)
    assert st.rms_delay_spread(_est(3j * a, tau)) == pytest.approx(base, rel=1e-12)


def test_correlation_properties():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(500), rng.standard_normal(500)
    assert st.correlation(x, x) == pytest.approx(1.0)
    assert st.correlation(x, -x) == pytest.approx(-1.0)
    assert st.correlation(x, y) == pytest.approx(st.correlation(y, x))
    assert st.correlation(3 * x + 2, y) == pytest.approx(st.correlation(x, y))
    with pytest.raises(ValueError):
        st.correlation(np.ones(5), x[:5])
    with pytest.raises(ValueError):
        st.correlation([1.0], [2.0])


def test_correlation_planted():
    rng = np.random.default_rng(8)
    z = rng.multivariate_normal([0, 0], [[1, 0.36], [0.36, 1]], 100_000)
    assert st.correlation(z[:, 0], z[:, 1]) == pytest.approx(0.36, abs=0.01)


def test_fit_normal():
    x = np.random.default_rng(9).normal(0, 2.7, 100_000)
    fd = st.fit_distribution(x, "normal")
    assert fd.mu == pytest.approx(0, abs=0.03)
    assert fd.sigma == pytest.approx(2.7, abs=0.03)
    assert fd.ks_pvalue > 0.01


def test_fit_extreme_value():
    # density exp((x-mu)/s) exp(-exp((x-mu)/s)) / s is the minimum Gumbel
    x = st.FAMILIES["extreme_value"](loc=0.9, scale=0.4).rvs(100_000, random_state=10)
    fd = st.fit_distribution(x, "extreme_value")
    assert fd.mu == pytest.approx(0.9, abs=0.01)
    assert fd.sigma == pytest.approx(0.4, abs=0.01)
    z = (0.3 - 0.9) / 0.4
    assert fd.dist().pdf(0.3) == pytest.approx(np.exp(z) * np.exp(-np.exp(z)) / 0.4, rel=0.05)


def test_fit_distribution_errors():
    with pytest.raises(ValueError):
        st.fit_distribution(np.ones(100))
    with pytest.raises(ValueError):
        st.fit_distribution(np.arange(100.0), "weibull")
    with pytest.raises(ValueError):
        st.fit_distribution(np.arange(10.0))


def _synthetic_flight(gamma=2.0, n=4000, seed=11):
    rng = np.random.default_rng(seed)
    traj = ac.horizontal_flight(50.0, round_trip=False)
    t = np.linspace(traj.t_start + 1, traj.t_end - 1, n)
    d = traj.position(t)[:, 0]
    ests = []
    for i, ti in enumerate(t):
        p_los = 10 ** (-(10 * gamma * np.log10(d[i])) / 10)
        k = 10 ** 0.8
        diff = np.sqrt(p_los / (2 * k)) * (rng.standard_normal(3) + 1j * rng.standard_normal(3)) / np.sqrt(3)
        amps = np.r_[np.sqrt(p_los), diff]
        ests.append(_est(amps, np.r_[0, rng.uniform(1e-7, 1e-6, 3)],
                         np.r_[0, rng.uniform(-50, 50, 3)], ti))
    return traj, ests


def test_compute_stats_end_to_end(tmp_path):
    traj, ests = _synthetic_flight()
    rep = st.compute_stats(ests, traj)
    s = rep.summary
    assert s["regressor"] == "d"
    assert s["path_loss"]["gamma"] == pytest.approx(2.0, abs=0.1)
    assert s["log10_dops"]["family"] == "extreme_value"
    assert "rho" in s["shadow"]
    rep.write_csv(tmp_path / "s.csv")
    rep.write_summary(tmp_path / "s.json")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == st.STATS_COLUMNS
    assert len(rows) == len(ests) + 1
    assert json.loads((tmp_path / "s.json").read_text())["n_estimates"] == len(ests)


def test_compute_stats_short_trace_skips():
    traj, ests = _synthetic_flight(n=20)
    s = st.compute_stats(ests, traj).summary
    assert "skipped" in s["path_loss"]
    assert "rho_skipped" in s["log10_ds"]
