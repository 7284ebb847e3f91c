import numpy as np
import pytest

from a2gsounder import airchan as ac
from a2gsounder import sage
from a2gsounder import waveform as wf
from a2gsounder.cirex import CirStream

B = 18e6
F = wf.DEFAULT_NUMEROLOGY.frequencies()[wf.make_crs(0, 0, 0).indices]
TIMES = np.arange(10) * 5e-3


def _snap(paths, snr_db=None, seed=0, n=10):
    return ac.synthesize_cirs(paths, np.arange(n) * 5e-3, F, snr_db, seed).snapshots()[0]


def _random_paths(rng, n=5):
    d = np.cumsum(np.r_[rng.uniform(0.2e-6, 0.5e-6), rng.uniform(0.3e-6, 1.0e-6, n - 1)])
    nu = rng.uniform(-80, 80, n)
    pw = -2.0 * np.arange(n)
    return [ac.Mpc(10 ** (pw[i] / 20) * np.exp(1j * rng.uniform(0, 2 * np.pi)), d[i], nu[i])
            for i in range(n)]


def test_config_validation():
    with pytest.raises(ValueError):
        sage.SageConfig(pre_pass_paths=0)
    with pytest.raises(ValueError):
        sage.SageConfig(iterations=0)
    assert sage.SageConfig().pre_pass_paths == 30
    assert sage.SageConfig().iterations == 15


def test_noise_floor_white_noise():
    rng = np.random.default_rng(0)
    sigma2 = 0.04
    taps = np.sqrt(sigma2 / 2) * (rng.standard_normal((10, 200)) + 1j * rng.standard_normal((10, 200)))
    s = CirStream(taps, TIMES, np.ones(10, bool), 1 / B, F)
    assert sage.estimate_noise_floor(s) == pytest.approx(10 * np.log10(sigma2) + 3, abs=0.5)


def test_noise_floor_noiseless_below_path():
    s = _snap([ac.Mpc(1.0, 0.0, 0.0)])
    assert sage.estimate_noise_floor(s) < -100


def test_noise_floor_all_invalid():
    s = _snap([ac.Mpc(1.0, 0.0, 0.0)])
    s.valid[:] = False
    with pytest.raises(ValueError):
        sage.estimate_noise_floor(s)


def test_single_path():
    e = sage.sage_snapshot(_snap([ac.Mpc(1.0, 0.0, 0.0)], 30, seed=1))
    assert e.L_hat == 1
    p = e.paths[0]
    assert abs(p.delay) < 1 / (5 * B)
    assert abs(p.doppler) < 2
    assert abs(20 * np.log10(abs(p.amplitude))) < 0.5


def test_two_paths_resolved():
    dt = 1 / (5 * B)
    ok = 0
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        t1 = rng.uniform(0.5e-6, 3e-6)
        ph = rng.uniform(0, 2 * np.pi, 2)
        paths = [ac.Mpc(np.exp(1j * ph[0]), t1, 10.0), ac.Mpc(np.exp(1j * ph[1]), t1 + dt, 10.0)]
        e = sage.sage_snapshot(_snap(paths, 30, seed))
        d = sorted(p.delay for p in e.paths)
        ok += e.L_hat == 2 and abs(d[0] - t1) < 5e-9 and abs(d[1] - t1 - dt) < 5e-9
    assert ok >= 5


@pytest.mark.parametrize("seed", range(3))
def test_five_paths(seed):
    rng = np.random.default_rng(200 + seed)
    paths = _random_paths(rng)
    e = sage.sage_snapshot(_snap(paths, 20, seed))
    assert e.L_hat == 5
    for p, q in zip(paths, e.paths):
        assert abs(p.delay - q.delay) < 0.2 / B
        assert abs(p.doppler - q.doppler) < 2
    total = sum(p.power for p in paths)
    est = sum(p.power for p in e.paths)
    assert abs(10 * np.log10(est / total)) < 1


def test_estimate_invariants():
    rng = np.random.default_rng(7)
    e = sage.sage_snapshot(_snap(_random_paths(rng, 4), 15, 7))
    floor = 10 ** (e.noise_floor_db / 10)
    assert e.L_hat <= 30
    assert all(p.power > floor for p in e.paths)
    assert e.residual_power <= e.input_power
    assert all(abs(p.doppler) <= 100 for p in e.paths)


def test_residual_history_monotone():
    rng = np.random.default_rng(3)
    for s in range(5):
        e = sage.sage_snapshot(_snap(_random_paths(rng, 3), 10, s))
        h = np.asarray(e.residual_history)
        assert len(h) == 16
        assert np.all(np.diff(h) <= 1e-9 * h[:-1])


def test_reconstruction_identity():
    rng = np.random.default_rng(4)
    snap = _snap(_random_paths(rng, 3), 20, 4)
    e = sage.sage_snapshot(snap)
    total = sage.path_cirs(e, snap).sum(axis=0) + sage.residual_cirs(e, snap)
    assert np.allclose(total, snap.taps, atol=1e-12)


def test_scale_equivariance():
    rng = np.random.default_rng(5)
    snap = _snap(_random_paths(rng, 3), 25, 5)
    a = 3.0 * np.exp(0.7j)
    e0 = sage.sage_snapshot(snap)
    e1 = sage.sage_snapshot(snap.scaled(a))
    assert e1.L_hat == e0.L_hat
    assert e1.noise_floor_db == pytest.approx(e0.noise_floor_db + 20 * np.log10(3.0))
    for p, q in zip(e0.paths, e1.paths):
        assert q.amplitude == pytest.approx(a * p.amplitude, rel=1e-6)
        assert q.delay == pytest.approx(p.delay, abs=1e-13)
        assert q.doppler == pytest.approx(p.doppler, abs=1e-6)


def test_doppler_bound():
    # a path beyond +100 Hz aliases; estimates must stay on the grid bounds
    e = sage.sage_snapshot(_snap([ac.Mpc(1.0, 1e-6, 130.0)], 30, 2))
    assert all(abs(p.doppler) <= 100 for p in e.paths)


def test_empty_snapshot_gives_no_paths():
    s = _snap([ac.Mpc(1.0, 0.0, 0.0)])
    s.taps[:] = 0
    e = sage.sage_snapshot(s)
    assert e.L_hat == 0 and e.paths == []


def test_mostly_invalid_snapshot_flagged():
    s = _snap([ac.Mpc(1.0, 0.0, 0.0)])
    s.valid[:8] = False
    e = sage.sage_snapshot(s)
    assert not e.valid and e.L_hat == 0


def test_sage_run_counts():
    cfg = sage.SageConfig(pre_pass_paths=2, iterations=2, pre_pass_iterations=2, refine=False)
    s200 = ac.synthesize_cirs([ac.Mpc(1.0, 0.0, 0.0)], np.arange(200) * 5e-3, F)
    assert len(sage.sage_run(s200, cfg)) == 20
    assert len(sage.sage_run(s200[:199], cfg)) == 19
    assert len(sage.sage_run(s200, cfg, stride=4)) == 5
    with pytest.raises(ValueError):
        sage.sage_run(s200[:9], cfg)
    ts = [e.t for e in sage.sage_run(s200, cfg)]
    assert np.all(np.diff(ts) > 0)


def test_estimates_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    e = sage.sage_snapshot(_snap(_random_paths(rng, 2), 20, 6))
    sage.write_estimates(tmp_path / "m.jsonl", [e, e])
    back = sage.read_estimates(tmp_path / "m.jsonl")
    assert len(back) == 2
    assert back[0].L_hat == e.L_hat
    assert back[0].paths[0].amplitude == e.paths[0].amplitude
    assert back[0].noise_floor_db == e.noise_floor_db
