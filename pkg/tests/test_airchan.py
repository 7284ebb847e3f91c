import numpy as np
import pytest
from scipy import signal

from a2gsounder import airchan as ac
from a2gsounder import waveform as wf
from a2gsounder.iq import IqTrace

FS = 30.72e6


def _bandlimited_noise(n, seed=0, fs=FS, bw=18e6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    f = np.fft.fftfreq(n, 1 / fs)
    X = np.fft.ifft(np.fft.fft(X) * (np.abs(f) < 0.4 * bw))
    return IqTrace(X, fs)


def _static(paths):
    return ac.ChannelTracks.static(paths, [0.0])


def test_stationary_single_path_geometry():
    d, h = 120.0, 60.0
    traj = ac.FlightTrajectory.stationary((d, 0.0, h), 1.0)
    tr = ac.mpc_tracks(traj, ac.ScattererSet())
    assert tr.n_paths == 1
    assert np.allclose(tr.doppler, 0)
    assert np.allclose(tr.delay, np.hypot(d, h - 20) / ac.C_LIGHT)
    lam = ac.C_LIGHT / ac.DEFAULT_CARRIER
    assert np.allclose(np.abs(tr.amplitude), lam / (4 * np.pi * np.hypot(d, h - 20)))


def test_radial_flight_doppler():
    # v fc / c = 6 * 2.585e9 / 299792458
    traj = ac.FlightTrajectory(np.array([[0, 100, 0, 20], [10, 160, 0, 20]], float))
    tr = ac.mpc_tracks(traj, ac.ScattererSet(), 100.0)
    assert np.allclose(tr.doppler[:, 0], -51.7358, atol=1e-3)


def test_doppler_matches_delay_rate():
    traj = ac.horizontal_flight(50.0)
    scat = ac.load_scenario("horizontal50").scatterers
    tr = ac.mpc_tracks(traj, scat, 200.0, 30.0, 31.0)
    rate = np.gradient(tr.delay[:, 0], tr.times)
    assert np.allclose(-ac.DEFAULT_CARRIER * rate, tr.doppler[:, 0], atol=0.05)


def test_vertical_zero_crossing_near_bs_height():
    traj = ac.vertical_flight(200.0)
    tr = ac.mpc_tracks(traj, ac.ScattererSet(), 20.0)
    nu = tr.doppler[:, 0]
    moving = np.abs(traj.velocity(tr.times)[:, 2]) > 0.5
    z = tr.positions[:, 2]
    assert np.all(nu[moving & (z < 15)] > 0)
    assert np.all(nu[moving & (z > 25)] < 0)


def test_zero_link_distance_rejected():
    traj = ac.FlightTrajectory.stationary(ac.DEFAULT_BS)
    with pytest.raises(ValueError):
        ac.mpc_tracks(traj, ac.ScattererSet())


def test_invalid_types():
    with pytest.raises(ValueError):
        ac.Scatterer((0, 0, 0), loss_db=-1)
    with pytest.raises(ValueError):
        ac.FlightTrajectory(np.array([[0, 0, 0, 1], [0, 1, 0, 1]], float))
    with pytest.raises(ValueError):
        ac.FlightTrajectory(np.array([[0, 0, 0, -1]], float))


def test_scatterer_visibility_and_ground():
    traj = ac.horizontal_flight(30.0)
    sc = ac.load_scenario("horizontal30")
    tr = ac.mpc_tracks(traj, sc.scatterers, 10.0)
    assert tr.labels[:2] == ["los", "ground"]
    counts = tr.path_count()
    assert counts.min() >= 2 and counts.max() > counts.min()
    # single bounce is always longer than the direct path
    assert np.all(tr.delay[:, 1:] >= tr.delay[:, :1])


def test_identity_channel():
    x = _bandlimited_noise(4096)
    y = ac.apply_channel(x, _static([ac.Mpc(1.0, 0.0, 0.0)]))
    assert np.allclose(y.samples, x.samples)


def test_amplitude_scaling():
    x = _bandlimited_noise(4096)
    y = ac.apply_channel(x, _static([ac.Mpc(0.5, 0.0, 0.0)]))
    assert np.isclose(np.mean(np.abs(y.samples) ** 2), 0.25 * np.mean(np.abs(x.samples) ** 2))


def test_energy_with_fractional_delay():
    n = 1 << 15
    x = _bandlimited_noise(n, 3)
    x.samples[:256] = 0
    x.samples[-256:] = 0
    y = ac.apply_channel(x, _static([ac.Mpc(1.0, 7.37 / FS, 0.0)]))
    ex, ey = np.sum(np.abs(x.samples) ** 2), np.sum(np.abs(y.samples) ** 2)
    assert abs(ey / ex - 1) < 1e-6


def test_delay_recovered_by_xcorr():
    x = _bandlimited_noise(1 << 14, 4)
    paths = [ac.Mpc(1.0, 40 / FS, 0.0), ac.Mpc(0.5, 151 / FS, 0.0)]
    y = ac.apply_channel(x, _static(paths))
    c = np.abs(np.fft.ifft(np.fft.fft(y.samples) * np.conj(np.fft.fft(x.samples))))
    pk, _ = signal.find_peaks(c)
    top = sorted(pk[np.argsort(c[pk])[-2:]])
    assert top == [40, 151]


def test_destructive_fading():
    # equal paths half a carrier period apart cancel at baseband
    x = IqTrace(np.ones(2000, complex), FS)
    half = 0.5 / ac.DEFAULT_CARRIER
    paths = [ac.Mpc(1.0, 0.0, 0.0), ac.Mpc(np.exp(-2j * np.pi * ac.DEFAULT_CARRIER * half), half, 0.0)]
    y = ac.apply_channel(x, _static(paths))
    assert np.mean(np.abs(y.samples[200:-200]) ** 2) < 1e-3


def test_doppler_tone_shift_with_block_continuity():
    fs = 100e3
    n = int(fs)
    x = IqTrace(np.exp(2j * np.pi * 1000.0 * np.arange(n) / fs), fs)
    times = np.arange(0, 1.0, 1 / 200)
    tr = ac.ChannelTracks.static([ac.Mpc(1.0, 0.0, 37.3)], times)
    y = ac.apply_channel(x, tr)
    ph = np.unwrap(np.angle(y.samples * np.conj(x.samples)))
    slope = np.polyfit(np.arange(n) / fs, ph, 1)[0] / (2 * np.pi)
    assert abs(slope - 37.3) < 0.1
    # no phase jumps at block boundaries
    assert np.max(np.abs(np.diff(ph))) < 2 * np.pi * 37.3 / fs * 1.01


def test_apply_channel_errors():
    x = _bandlimited_noise(1024)
    with pytest.raises(ValueError):
        ac.apply_channel(x, _static([ac.Mpc(1.0, 30e-6, 0.0)]))
    with pytest.raises(ValueError):
        ac.apply_channel(x, _static([ac.Mpc(np.nan, 0.0, 0.0)]))
    with pytest.raises(ValueError):
        ac.apply_channel(x, _static([ac.Mpc(1.0, 1e-6, 0.0)]), delay_reference=2e-6)


def test_add_noise_snr_in_band():
    x = IqTrace(wf.generate(wf.CellConfig(5), 1).samples, FS)
    y = ac.add_noise(x, 10.0, seed=1)
    nz = y.samples - x.samples
    f = np.fft.fftfreq(len(nz), 1 / FS)
    N = np.abs(np.fft.fft(nz)) ** 2
    inband = N[np.abs(f) <= 9e6].sum() / N.sum() * np.mean(np.abs(nz) ** 2)
    snr = 10 * np.log10(np.mean(np.abs(x.samples) ** 2) / inband)
    assert snr == pytest.approx(10.0, abs=0.1)


def test_noise_deterministic_by_seed():
    x = _bandlimited_noise(512)
    a = ac.add_noise(x, 5, seed=9).samples
    assert np.array_equal(a, ac.add_noise(x, 5, seed=9).samples)
    assert not np.array_equal(a, ac.add_noise(x, 5, seed=10).samples)


def test_resample_identity_and_duration():
    x = _bandlimited_noise(30720)
    assert np.array_equal(ac.resample(x, FS).samples, x.samples)
    y = ac.resample(x, 25e6)
    assert abs(y.duration - x.duration) <= 1 / 25e6


def test_resample_tone_preserved():
    n = 30720 * 4
    x = IqTrace(np.exp(2j * np.pi * 5e6 * np.arange(n) / FS), FS)
    y = ac.resample(x, 25e6)
    core = y.samples[2000:-2000]
    db = 10 * np.log10(np.mean(np.abs(core) ** 2))
    assert abs(db) < 0.1


def test_resample_band_energy():
    x = _bandlimited_noise(1 << 16, 7)
    y = ac.resample(x, 25e6)
    ratio = np.mean(np.abs(y.samples) ** 2) / np.mean(np.abs(x.samples) ** 2)
    assert abs(10 * np.log10(ratio)) < 0.1


def test_resample_rejects_aliasing_rate():
    with pytest.raises(ValueError):
        ac.resample(_bandlimited_noise(1024), 10e6)


def test_synthesize_cirs_single_tap():
    f = wf.DEFAULT_NUMEROLOGY.frequencies()[wf.make_crs(0, 0, 0).indices]
    s = ac.synthesize_cirs([ac.Mpc(1.0, 0.0, 0.0)], np.arange(10) * 5e-3, f)
    assert np.allclose(np.abs(s.taps[:, 0]), 1.0)
    assert np.allclose(s.taps[:, 1:], 0, atol=1e-12)
    assert s.delay_resolution == pytest.approx(1 / 18e6)


@pytest.mark.parametrize("name", ac.builtin_scenarios())
def test_builtin_scenarios_load(name):
    sc = ac.load_scenario(name)
    t0, t1 = sc.segment()
    assert sc.trajectory.t_start <= t0 < t1 <= sc.trajectory.t_end
    assert sc.bs_position[2] == 20.0


def test_missing_scenario():
    with pytest.raises(FileNotFoundError):
        ac.load_scenario("nosuch")
