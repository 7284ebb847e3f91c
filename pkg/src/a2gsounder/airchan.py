"""Geometric air-to-ground channel simulator.

Builds ground-truth multipath tracks (LoS, single-bounce scatterers, ground
reflection as an image source) along a UAV trajectory and applies them to an
IqTrace as a time-variant tapped delay line with Doppler phase integration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal, special

from .iq import IqTrace

C_LIGHT = 299_792_458.0
DEFAULT_CARRIER = 2.585e9
DEFAULT_BS = (0.0, 0.0, 20.0)
OCCUPIED_BW = 18e6
FD_TAPS = 64
FD_BETA = 13.0
TRAJECTORY_KINDS = ("horizontal", "vertical", "custom")


# ------------------------------------------------------------ trajectories


@dataclass
class FlightTrajectory:
    """Piecewise-linear flight path through (t, x, y, z) waypoints."""

    waypoints: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 4 or len(w) < 1:
            raise ValueError("waypoints must be an array of (t, x, y, z) rows")
        if not np.all(np.isfinite(w)):
            raise ValueError("waypoints must be finite")
        if np.any(np.diff(w[:, 0]) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if np.any(w[:, 3] < 0):
            raise ValueError("z must be >= 0")
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"kind must be one of {TRAJECTORY_KINDS}")
        self.waypoints = w

    @property
    def t_start(self) -> float:
        return float(self.waypoints[0, 0])

    @property
    def t_end(self) -> float:
        return float(self.waypoints[-1, 0])

    def position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        w = self.waypoints
        return np.stack([np.interp(t, w[:, 0], w[:, i]) for i in (1, 2, 3)], axis=-1)

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        w = self.waypoints
        if len(w) == 1:
            return np.zeros((t.size, 3))
        seg = np.clip(np.searchsorted(w[:, 0], t, side="right") - 1, 0, len(w) - 2)
        dt = w[seg + 1, 0] - w[seg, 0]
        return (w[seg + 1, 1:] - w[seg, 1:]) / dt[:, None]

    @classmethod
    def stationary(cls, position, duration: float = 1.0):
        p = list(position)
        return cls(np.array([[0.0] + p, [duration] + p]), "custom")


def _trapezoid_profile(length, v_max, accel, dt):
    """Times and travelled distance for accelerate / cruise / decelerate."""
    t_acc = v_max / accel
    d_acc = 0.5 * accel * t_acc ** 2
    if 2 * d_acc > length:
        t_acc = np.sqrt(length / accel)
        v_max = accel * t_acc
        d_acc = length / 2
    t_cruise = (length - 2 * d_acc) / v_max
    total = 2 * t_acc + t_cruise
    n = max(2, int(np.ceil(total / dt)) + 1)
    t = np.linspace(0.0, total, n)
    s = np.where(t < t_acc, 0.5 * accel * t ** 2,
                 np.where(t < t_acc + t_cruise, d_acc + v_max * (t - t_acc),
                          length - 0.5 * accel * np.clip(total - t, 0, None) ** 2))
    return t, s


def horizontal_flight(height: float, start: float = 10.0, length: float = 500.0,
                      speed: float = 6.0, accel: float = 1.0, round_trip: bool = True,
                      hover: float = 2.0, azimuth_deg: float = 0.0, dt: float = 0.05):
    """Straight radial route at constant height, optionally flown back.

    The UAV accelerates from rest, cruises at ``speed`` and decelerates to rest
    at the far end; it hovers for ``hover`` seconds before returning.
    """
    t, s = _trapezoid_profile(length, speed, accel, dt)
    if round_trip:
        t2 = t[-1] + hover + t
        t = np.concatenate([t, t2])
        s = np.concatenate([s, length - s])
    r = start + s
    az = np.deg2rad(azimuth_deg)
    w = np.column_stack([t, r * np.cos(az), r * np.sin(az), np.full_like(t, height)])
    return FlightTrajectory(w, "horizontal")


def vertical_flight(distance: float, top: float = 300.0, bottom: float = 0.0,
                    speed: float = 2.5, accel: float = 0.5, dt: float = 0.05,
                    azimuth_deg: float = 0.0):
    """Vertical ascent from ``bottom`` to ``top`` at a fixed horizontal distance."""
    t, s = _trapezoid_profile(top - bottom, speed, accel, dt)
    az = np.deg2rad(azimuth_deg)
    w = np.column_stack([t, np.full_like(t, distance * np.cos(az)),
                         np.full_like(t, distance * np.sin(az)), bottom + s])
    return FlightTrajectory(w, "vertical")


# ------------------------------------------------------------------- paths


@dataclass
class Mpc:
    amplitude: complex
    delay: float
    doppler: float
    birth: float = -np.inf
    death: float = np.inf
    label: str = ""

    @property
    def power(self) -> float:
        return abs(self.amplitude) ** 2


@dataclass
class Scatterer:
    position: tuple
    loss_db: float = 10.0
    visibility_radius: float | None = None
    phase: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.loss_db < 0:
            raise ValueError("interaction loss must be >= 0 dB")


@dataclass
class ScattererSet:
    scatterers: list = field(default_factory=list)
    bs_position: tuple = DEFAULT_BS
    carrier: float = DEFAULT_CARRIER
    ground_reflection: bool = False
    ground_loss_db: float = 6.0

    def __post_init__(self):
        if self.ground_loss_db < 0:
            raise ValueError("ground loss must be >= 0 dB")

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier


@dataclass
class ChannelTracks:
    """Per-snapshot path parameters; zero amplitude marks a path not alive."""

    times: np.ndarray
    amplitude: np.ndarray  # (S, P) complex
    delay: np.ndarray      # (S, P) s
    doppler: np.ndarray    # (S, P) Hz
    labels: list
    positions: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.amplitude.shape[1]

    def __len__(self) -> int:
        return self.times.size

    def alive(self) -> np.ndarray:
        return np.abs(self.amplitude) > 0

    def at(self, i: int) -> list:
        a = self.alive()[i]
        return [Mpc(complex(self.amplitude[i, p]), float(self.delay[i, p]),
                    float(self.doppler[i, p]), label=self.labels[p]) for p in np.flatnonzero(a)]

    def path_count(self) -> np.ndarray:
        return self.alive().sum(axis=1)

    @classmethod
    def static(cls, paths, times):
        times = np.asarray(times, float)
        S = times.size
        amp = np.tile([complex(p.amplitude) for p in paths], (S, 1))
        tau = np.tile([p.delay for p in paths], (S, 1))
        nu = np.tile([p.doppler for p in paths], (S, 1))
        return cls(times, amp, tau, nu, [p.label for p in paths])


def _leg(src, pos, vel):
    """Distance from a fixed point and its rate of change."""
    v = pos - np.asarray(src, float)
    d = np.linalg.norm(v, axis=-1)
    if np.any(d < 1e-6):
        raise ValueError("zero link distance")
    return d, np.einsum("ij,ij->i", v, vel) / d


def mpc_tracks(traj: FlightTrajectory, scat: ScattererSet, snapshot_rate: float = 200.0,
               t_start: float | None = None, t_end: float | None = None) -> ChannelTracks:
    """Ground-truth paths sampled at ``snapshot_rate`` along the trajectory.

    Delays are absolute propagation delays. Each path keeps the carrier phase
    it had when it became visible; its later phase evolution is carried by the
    Doppler integral, so that ``-carrier * d(delay)/dt == doppler``.
    """
    if snapshot_rate <= 0:
        raise ValueError("snapshot_rate must be positive")
    t0 = traj.t_start if t_start is None else t_start
    t1 = traj.t_end if t_end is None else t_end
    n = max(1, int(np.floor((t1 - t0) * snapshot_rate + 1e-9)) + 1)
    times = t0 + np.arange(n) / snapshot_rate
    pos, vel = traj.position(times), traj.velocity(times)
    lam, fc = scat.wavelength, scat.carrier
    bs = np.asarray(scat.bs_position, float)

    dists, rates, gains, labels, visible = [], [], [], [], []
    d, r = _leg(bs, pos, vel)
    dists.append(d); rates.append(r); gains.append(1.0); labels.append("los")
    visible.append(np.ones(n, bool))
    if scat.ground_reflection:
        img = bs * np.array([1, 1, -1])
        d, r = _leg(img, pos, vel)
        dists.append(d); rates.append(r)
        gains.append(-10 ** (-scat.ground_loss_db / 20))
        labels.append("ground"); visible.append(np.ones(n, bool))
    for i, s in enumerate(scat.scatterers):
        sp = np.asarray(s.position, float)
        d1 = np.linalg.norm(sp - bs)
        if d1 < 1e-6:
            raise ValueError("zero link distance")
        d2, r2 = _leg(sp, pos, vel)
        dists.append(d1 + d2); rates.append(r2)
        gains.append(10 ** (-s.loss_db / 20) * np.exp(1j * s.phase))
        labels.append(s.label or f"scatterer{i}")
        vis = np.ones(n, bool) if s.visibility_radius is None else d2 <= s.visibility_radius
        visible.append(vis)

    D = np.stack(dists, 1)
    tau = D / C_LIGHT
    nu = -np.stack(rates, 1) * fc / C_LIGHT
    vis = np.stack(visible, 1)
    mag = lam / (4 * np.pi * D) * np.asarray(gains)[None, :]
    # carrier phase frozen at the start of each visibility interval
    birth = vis & ~np.vstack([np.zeros((1, vis.shape[1]), bool), vis[:-1]])
    rows = np.arange(n)[:, None]
    last_birth = np.maximum.accumulate(np.where(birth, rows, -1), axis=0)
    cols = np.arange(tau.shape[1])[None, :]
    phase = np.where(last_birth >= 0, -2 * np.pi * fc * tau[np.maximum(last_birth, 0), cols], 0.0)
    amp = np.where(vis, np.abs(mag) * np.exp(1j * (np.angle(mag) + phase)), 0.0)
    return ChannelTracks(times, amp, tau, np.where(vis, nu, 0.0), labels, pos)


# ----------------------------------------------------------- channel apply


def fractional_delay_taps(mu: float, ntaps: int = FD_TAPS, beta: float = FD_BETA) -> np.ndarray:
    """Kaiser-windowed sinc realizing a delay of (ntaps/2 - 1 + mu) samples."""
    half = ntaps // 2
    x = np.arange(ntaps) - (half - 1) - mu
    w = special.i0(beta * np.sqrt(np.clip(1 - (x / half) ** 2, 0, None))) / special.i0(beta)
    return np.sinc(x) * w


def _doppler_phase_at_blocks(times, nu):
    """Accumulated Doppler phase (rad) at each block start, per path."""
    dt = np.diff(times)
    inc = 2 * np.pi * nu[:-1] * dt[:, None]
    return np.vstack([np.zeros((1, nu.shape[1])), np.cumsum(inc, axis=0)])


def apply_channel(iq: IqTrace, tracks: ChannelTracks, snr_db: float | None = None,
                  seed=None, capture_rate: float | None = None,
                  noise_bandwidth: float = OCCUPIED_BW, max_delay: float = 20e-6,
                  delay_reference: float = 0.0) -> IqTrace:
    """Pass ``iq`` through the tracked channel, optionally resample, add noise.

    ``delay_reference`` is subtracted from every path delay, e.g. to remove the
    bulk propagation delay of a long link. Noise variance per sample is chosen
    so that noise power inside ``noise_bandwidth`` equals signal power / SNR.
    """
    for name in ("amplitude", "delay", "doppler"):
        if not np.all(np.isfinite(getattr(tracks, name))):
            raise ValueError(f"non-finite path {name}")
    tau_all = tracks.delay - delay_reference
    alive = tracks.alive()
    if np.any(tau_all[alive] < 0):
        raise ValueError("path delay before the delay reference")
    if np.any(tau_all[alive] > max_delay):
        raise ValueError(f"path delay exceeds the configured maximum {max_delay} s")
    fs = iq.sample_rate
    x = iq.samples
    N = x.size
    pad = int(np.ceil(max_delay * fs)) + FD_TAPS
    xp = np.concatenate([np.zeros(pad, complex), x, np.zeros(FD_TAPS, complex)])
    times = np.asarray(tracks.times, float)
    edges = np.ceil((times - iq.start_time) * fs - 1e-9).astype(np.int64)
    edges = np.clip(edges, 0, N)
    edges[0] = 0
    edges = np.append(edges, N)
    phi0 = _doppler_phase_at_blocks(times, tracks.doppler)
    y = np.zeros(N, complex)
    half = FD_TAPS // 2
    for s in range(times.size):
        a, b = int(edges[s]), int(edges[s + 1])
        if b <= a:
            continue
        tn = iq.start_time + np.arange(a, b) / fs - times[s]
        for p in np.flatnonzero(alive[s]):
            D = tau_all[s, p] * fs
            ki = int(np.floor(D))
            mu = D - ki
            seg = xp[pad + a - ki - half: pad + b - ki + half - 1]
            if abs(mu) < 1e-12:
                z = seg[half: half + (b - a)]
            else:
                z = signal.oaconvolve(seg, fractional_delay_taps(mu), mode="valid")
            ph = phi0[s, p] + 2 * np.pi * tracks.doppler[s, p] * tn
            y[a:b] += tracks.amplitude[s, p] * z * np.exp(1j * ph)
    out = iq.replace(samples=y)
    if capture_rate is not None and not np.isclose(capture_rate, fs):
        out = resample(out, capture_rate)
    if snr_db is not None:
        out = add_noise(out, snr_db, seed, noise_bandwidth)
    return out


def add_noise(iq: IqTrace, snr_db: float, seed=None, noise_bandwidth: float = OCCUPIED_BW,
              signal_power: float | None = None) -> IqTrace:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = np.mean(np.abs(iq.samples) ** 2) if signal_power is None else signal_power
    ratio = max(iq.sample_rate / noise_bandwidth, 1.0)
    var = p / 10 ** (snr_db / 10) * ratio
    n = rng.standard_normal((2, len(iq))) * np.sqrt(var / 2)
    out = iq.replace(samples=iq.samples + n[0] + 1j * n[1])
    out.metadata["snr_db"] = float(snr_db)
    out.metadata["noise_variance"] = float(var)
    return out


def resample(iq: IqTrace, target_rate: float, occupied_bandwidth: float = OCCUPIED_BW) -> IqTrace:
    """Rational band-limited resampling (polyphase)."""
    if target_rate < occupied_bandwidth:
        raise ValueError(f"target rate {target_rate} Hz below occupied bandwidth "
                         f"{occupied_bandwidth} Hz would alias")
    if np.isclose(target_rate, iq.sample_rate):
        return iq.replace()
    frac = Fraction(target_rate / iq.sample_rate).limit_denominator(10_000)
    y = signal.resample_poly(iq.samples, frac.numerator, frac.denominator,
                             window=("kaiser", 8.0))
    return iq.replace(samples=y, sample_rate=float(target_rate))


# ------------------------------------------------------ CIR-domain oracle


def synthesize_cirs(paths, times, pilot_frequencies, snr_db: float | None = None, seed=None,
                    delay_reference: float = 0.0, window=None):
    """Ideal pilot-lattice CIRs for the given paths (CIR-domain shortcut).

    ``paths`` is a ChannelTracks or a list of static Mpc. The channel transfer
    function is evaluated exactly at the pilot frequencies and inverse
    transformed the same way ``cirex.extract_cir`` does. SNR is per pilot.
    """
    from .cirex import CirStream

    times = np.asarray(times, float)
    f = np.asarray(pilot_frequencies, float)
    if not isinstance(paths, ChannelTracks):
        paths = ChannelTracks.static(list(paths), times[:1])
    tr = paths
    phi_blocks = _doppler_phase_at_blocks(tr.times, tr.doppler)
    s = np.clip(np.searchsorted(tr.times, times, side="right") - 1, 0, len(tr) - 1)
    dt = times - tr.times[s]
    amp = tr.amplitude[s]
    tau = tr.delay[s] - delay_reference
    ph = phi_blocks[s] + 2 * np.pi * tr.doppler[s] * dt[:, None]
    H = np.einsum("cp,cpm->cm", amp * np.exp(1j * ph),
                  np.exp(-2j * np.pi * tau[:, :, None] * f[None, None, :]))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if snr_db is not None:
        p = np.mean(np.abs(H) ** 2)
        var = p / 10 ** (snr_db / 10)
        H = H + np.sqrt(var / 2) * (rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape))
    w = np.ones(f.size) if window is None else np.asarray(window, float)
    taps = np.fft.ifft(H * w, axis=1)
    spacing = float(np.median(np.diff(np.sort(f))))
    return CirStream(taps=taps, timestamps=times, valid=np.ones(times.size, bool),
                     delay_resolution=1.0 / (f.size * spacing), pilot_frequencies=f,
                     window="rect" if window is None else "custom", weights=w)


# --------------------------------------------------------------- scenarios


@dataclass
class Scenario:
    name: str
    trajectory: FlightTrajectory
    scatterers: ScattererSet
    seed: int = 0
    pci: int = 301
    cp_mode: str = "normal"
    segment_start: float | None = None
    segment_duration: float = 0.25
    snapshot_rate: float = 200.0
    raw: dict = field(default_factory=dict)

    @property
    def bs_position(self):
        return self.scatterers.bs_position

    def segment(self):
        t0 = self.trajectory.t_start if self.segment_start is None else self.segment_start
        return t0, t0 + self.segment_duration


def trajectory_from_dict(d: dict) -> FlightTrajectory:
    kind = d.get("kind", "custom")
    if kind == "horizontal":
        return horizontal_flight(d["height_m"], d.get("start_m", 10.0), d.get("length_m", 500.0),
                                 d.get("speed_mps", 6.0), d.get("accel_mps2", 1.0),
                                 d.get("round_trip", True), d.get("hover_s", 2.0),
                                 d.get("azimuth_deg", 0.0))
    if kind == "vertical":
        return vertical_flight(d["distance_m"], d.get("top_m", 300.0), d.get("bottom_m", 0.0),
                               d.get("speed_mps", 2.5), d.get("accel_mps2", 0.5),
                               azimuth_deg=d.get("azimuth_deg", 0.0))
    if kind == "custom":
        return FlightTrajectory(np.asarray(d["waypoints"], float), "custom")
    raise ValueError(f"unknown trajectory kind {kind!r}")


def scenario_from_dict(d: dict) -> Scenario:
    g = d.get("ground_reflection", {})
    scat = ScattererSet(
        scatterers=[Scatterer(tuple(s["position"]), s.get("loss_db", 10.0),
                              s.get("visibility_radius_m"), s.get("phase_rad", 0.0),
                              s.get("label", "")) for s in d.get("scatterers", [])],
        bs_position=tuple(d.get("bs_position", DEFAULT_BS)),
        carrier=d.get("carrier_hz", DEFAULT_CARRIER),
        ground_reflection=g.get("enabled", False),
        ground_loss_db=g.get("loss_db", 6.0),
    )
    cell = d.get("cell", {})
    seg = d.get("segment", {})
    return Scenario(name=d.get("name", "scenario"), trajectory=trajectory_from_dict(d["trajectory"]),
                    scatterers=scat, seed=int(d.get("seed", 0)), pci=int(cell.get("pci", 301)),
                    cp_mode=cell.get("cp_mode", "normal"), segment_start=seg.get("start_s"),
                    segment_duration=float(seg.get("duration_s", 0.25)),
                    snapshot_rate=float(d.get("snapshot_rate_hz", 200.0)), raw=d)


def builtin_scenarios() -> list:
    root = Path(__file__).parent / "data" / "scenarios"
    return sorted(p.stem for p in root.glob("*.json"))


def load_scenario(path) -> Scenario:
    """Load a scenario JSON file. A bare name refers to a bundled scenario."""
    p = Path(path)
    if not p.exists():
        bundled = Path(__file__).parent / "data" / "scenarios" / f"{p.stem}.json"
        if p.suffix in ("", ".json") and p.parent == Path(".") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(f"scenario file {path} not found")
    return scenario_from_dict(json.loads(p.read_text()))
