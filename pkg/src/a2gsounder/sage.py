"""SAGE estimation of (amplitude, delay, Doppler) per path from CIR snapshots.

The estimator works on the pilot-domain transfer function of a snapshot,
Y[c, m] = FFT(h_c)[m], with the per-path model

    A(tau, nu)[c, m] = w_m * exp(-j 2 pi f_m tau) * exp(j 2 pi nu t_c)

where f_m are the exact pilot frequencies (so the DC gap is modelled), w_m
the CIR window and t_c the CIR times relative to the snapshot centre.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .airchan import Mpc
from .cirex import SNAPSHOT_SIZE, CirStream

FLOOR_MIN_DB = -400.0


@dataclass
class SageConfig:
    pre_pass_paths: int = 30
    iterations: int = 15
    pre_pass_iterations: int = 15
    delay_oversampling: int = 8          # delay grid spacing = 1 / (oversampling * B)
    doppler_step: float = 1.0            # Hz
    doppler_max: float | None = None     # default: half the CIR rate
    noise_floor_margin_db: float = 3.0
    tail_fraction: float = 0.25
    dynamic_range_db: float = 40.0
    refine: bool = True                  # joint local ML refinement after pass 2
    snapshot_size: int = SNAPSHOT_SIZE

    def __post_init__(self):
        if self.pre_pass_paths < 1 or self.iterations < 1 or self.pre_pass_iterations < 1:
            raise ValueError("path count and iteration counts must be >= 1")
        if not 0 < self.tail_fraction < 1:
            raise ValueError("tail_fraction must be in (0, 1)")


@dataclass
class SnapshotEstimate:
    t: float
    paths: list
    noise_floor_db: float
    residual_power: float
    input_power: float
    residual_history: list = field(default_factory=list)
    pre_pass_powers: list = field(default_factory=list)
    refined: bool = False
    valid: bool = True

    @property
    def L_hat(self) -> int:
        return len(self.paths)

    def to_json(self) -> dict:
        return {
            "t": self.t, "L": self.L_hat,
            "paths": [{"re": p.amplitude.real, "im": p.amplitude.imag,
                       "tau_s": p.delay, "nu_hz": p.doppler} for p in self.paths],
            "noise_floor_db": self.noise_floor_db,
            "residual_power": self.residual_power, "input_power": self.input_power,
            "valid": self.valid,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SnapshotEstimate":
        paths = [Mpc(complex(p["re"], p["im"]), p["tau_s"], p["nu_hz"]) for p in d["paths"]]
        return cls(d["t"], paths, d["noise_floor_db"], d.get("residual_power", float("nan")),
                   d.get("input_power", float("nan")), valid=d.get("valid", True))


# ------------------------------------------------------------- snapshot data


class _Problem:
    """Precomputed quantities for one snapshot."""

    def __init__(self, snap: CirStream, cfg: SageConfig):
        use = snap.valid
        self.Y = snap.cfr()[use]
        self.f = snap.pilot_frequencies
        self.w = np.asarray(snap.weights, float)
        ts = snap.timestamps[use]
        self.t_ref = float(np.mean(ts))
        self.t = ts - self.t_ref
        C, M = self.Y.shape
        self.C, self.M = C, M
        self.norm2 = C * np.sum(self.w ** 2)
        span = snap.unambiguous_delay_span
        self.dtau = span / (cfg.delay_oversampling * M)
        self.tau_grid = np.arange(cfg.delay_oversampling * M) * self.dtau
        if cfg.doppler_max is None:
            step = np.median(np.diff(snap.timestamps)) if len(snap) > 1 else 5e-3
            numax = 0.5 / step
        else:
            numax = cfg.doppler_max
        self.numax = float(numax)
        nv = int(np.floor(numax / cfg.doppler_step + 1e-9))
        self.nu_grid = np.arange(-nv, nv + 1) * cfg.doppler_step
        self.dnu = cfg.doppler_step
        self.Ef = self.w[:, None] * np.exp(2j * np.pi * np.outer(self.f, self.tau_grid))
        self.Dt = np.exp(-2j * np.pi * np.outer(self.t, self.nu_grid))
        self.span = span

    def atom(self, tau, nu):
        return (np.exp(2j * np.pi * nu * self.t)[:, None]
                * (self.w * np.exp(-2j * np.pi * self.f * tau))[None, :])

    def corr(self, x, tau, nu):
        return np.vdot(self.atom(tau, nu), x)

    def power(self, x):
        return float(np.sum(np.abs(x) ** 2)) / (self.M * self.C)


def _parabolic(y, k):
    if 0 < k < y.size - 1:
        den = y[k - 1] - 2 * y[k] + y[k + 1]
        if den < 0:
            return float(np.clip(0.5 * (y[k - 1] - y[k + 1]) / den, -0.5, 0.5))
    return 0.0


def _update_tau(pb, x, tau, nu):
    g = np.exp(-2j * np.pi * nu * pb.t) @ x
    obj = np.abs(g @ pb.Ef) ** 2
    k = int(np.argmax(obj))
    cands = [tau, pb.tau_grid[k], pb.tau_grid[k] + _parabolic(obj, k) * pb.dtau]
    vals = [abs(pb.corr(x, c, nu)) ** 2 for c in cands]
    return cands[int(np.argmax(vals))]


def _update_nu(pb, x, tau, nu):
    q = x @ (pb.w * np.exp(2j * np.pi * pb.f * tau))
    obj = np.abs(q @ pb.Dt) ** 2
    k = int(np.argmax(obj))
    cand = pb.nu_grid[k] + _parabolic(obj, k) * pb.dnu
    cands = [nu, pb.nu_grid[k], float(np.clip(cand, -pb.numax, pb.numax))]
    vals = [abs(pb.corr(x, tau, c)) ** 2 for c in cands]
    return cands[int(np.argmax(vals))]


def _update_path(pb, x, tau, nu):
    tau = _update_tau(pb, x, tau, nu)
    nu = _update_nu(pb, x, tau, nu)
    alpha = pb.corr(x, tau, nu) / pb.norm2
    return alpha, tau, nu


def _sic_init(pb, R, n_paths):
    params = []
    for _ in range(n_paths):
        G = R @ pb.Ef
        Z = np.abs(G.T @ pb.Dt) ** 2
        k, v = np.unravel_index(int(np.argmax(Z)), Z.shape)
        tau, nu = pb.tau_grid[k], pb.nu_grid[v]
        alpha, tau, nu = _update_path(pb, R, tau, nu)
        R = R - alpha * pb.atom(tau, nu)
        params.append([alpha, tau, nu])
    return params, R


def _sage_pass(pb, params, R, iterations):
    """Coordinate-wise EM sweeps; returns params, residual, residual history."""
    hist = [pb.power(R)]
    for _ in range(iterations):
        order = np.argsort([-abs(p[0]) for p in params], kind="stable")
        for i in order:
            a0, t0, n0 = params[i]
            x = R + a0 * pb.atom(t0, n0)
            a1, t1, n1 = _update_path(pb, x, t0, n0)
            R = x - a1 * pb.atom(t1, n1)
            params[i] = [a1, t1, n1]
        hist.append(pb.power(R))
    return params, R, hist


def _design(pb, taus, nus):
    return np.stack([pb.atom(t, n).ravel() for t, n in zip(taus, nus)], axis=1)


def _refit_amplitudes(pb, params):
    if not params:
        return params, pb.Y.copy()
    A = _design(pb, [p[1] for p in params], [p[2] for p in params])
    al, *_ = np.linalg.lstsq(A, pb.Y.ravel(), rcond=None)
    R = (pb.Y.ravel() - A @ al).reshape(pb.Y.shape)
    return [[complex(a), p[1], p[2]] for a, p in zip(al, params)], R


def _joint_refine(pb, params):
    """Joint Gauss-Newton / trust-region polish of all path parameters."""
    L = len(params)
    y = pb.Y.ravel()
    ts = 1e-9  # delay parameter unit
    lo = np.concatenate([np.full(2 * L, -np.inf), np.full(L, -pb.dtau / ts),
                         np.full(L, -pb.numax)])
    hi = np.concatenate([np.full(2 * L, np.inf), np.full(L, pb.span / ts), np.full(L, pb.numax)])
    a = np.array([p[0] for p in params])
    x0 = np.concatenate([a.real, a.imag, [p[1] / ts for p in params], [p[2] for p in params]])
    eps = 1e-9 * (hi - lo)[2 * L:]
    x0[2 * L:] = np.clip(x0[2 * L:], lo[2 * L:] + eps, hi[2 * L:] - eps)
    fm = np.tile(pb.f, pb.C)
    tc = np.repeat(pb.t, pb.M)

    def unpack(x):
        return x[:L] + 1j * x[L:2 * L], x[2 * L:3 * L] * ts, x[3 * L:]

    def fun(x):
        al, tau, nu = unpack(x)
        r = y - _design(pb, tau, nu) @ al
        return np.concatenate([r.real, r.imag])

    def jac(x):
        al, tau, nu = unpack(x)
        A = _design(pb, tau, nu)
        Jc = np.concatenate([-A, -1j * A,
                             (2j * np.pi * ts) * fm[:, None] * A * al,
                             (-2j * np.pi) * tc[:, None] * A * al], axis=1)
        return np.concatenate([Jc.real, Jc.imag], axis=0)

    c0 = 0.5 * np.sum(fun(x0) ** 2)
    try:
        sol = least_squares(fun, x0, jac=jac, bounds=(lo, hi), method="trf", x_scale="jac",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=100)
    except (ValueError, np.linalg.LinAlgError):
        return params, False
    if not sol.cost < c0:
        return params, False
    al, tau, nu = unpack(sol.x)
    return [[complex(a), float(t), float(n)] for a, t, n in zip(al, tau, nu)], True


def _eliminate(pb, params, floor_lin):
    """Backward elimination: drop the path whose removal costs the least
    residual power while that cost (after re-refinement) stays below the
    noise floor. Removes surplus paths fitted to one unresolved cluster."""
    _, R = _refit_amplitudes(pb, params)
    p_full = pb.power(R)
    while len(params) > 1:
        cost = [pb.power(_refit_amplitudes(pb, params[:i] + params[i + 1:])[1]) - p_full
                for i in range(len(params))]
        i = int(np.argmin(cost))
        if cost[i] >= floor_lin * 10:
            break
        cand, _ = _joint_refine(pb, params[:i] + params[i + 1:])
        cand, Rc = _refit_amplitudes(pb, cand)
        if pb.power(Rc) - p_full >= floor_lin:
            break
        params, R, p_full = cand, Rc, pb.power(Rc)
    return params, R


def estimate_noise_floor(snapshot: CirStream, cfg: SageConfig | None = None) -> float:
    """Mean PDP power over the delay-grid tail plus the configured margin (dB)."""
    cfg = cfg or SageConfig()
    use = snapshot.valid
    if not np.any(use):
        raise ValueError("snapshot has no valid CIRs")
    p = np.mean(np.abs(snapshot.taps[use]) ** 2, axis=0)
    n_tail = max(1, int(np.ceil(cfg.tail_fraction * p.size)))
    tail = max(float(np.mean(p[-n_tail:])), np.finfo(float).tiny)
    return max(10 * np.log10(tail) + cfg.noise_floor_margin_db, FLOOR_MIN_DB)


def _select(params, floor_lin, dr_db):
    if not params:
        return []
    params = sorted(params, key=lambda p: -abs(p[0]))
    pmax = abs(params[0][0]) ** 2
    keep = []
    for p in params:
        pw = abs(p[0]) ** 2
        if pw < floor_lin or pw < pmax * 10 ** (-dr_db / 10):
            break
        keep.append(p)
    return keep


def sage_snapshot(snapshot: CirStream, cfg: SageConfig | None = None) -> SnapshotEstimate:
    """Two-pass SAGE on one snapshot (see module docstring for the model)."""
    cfg = cfg or SageConfig()
    n_valid = int(np.sum(snapshot.valid))
    t_snap = float(np.mean(snapshot.timestamps))
    if n_valid < max(2, len(snapshot) // 2):
        return SnapshotEstimate(t_snap, [], FLOOR_MIN_DB, 0.0, 0.0, valid=False)
    floor_db = estimate_noise_floor(snapshot, cfg)
    floor_lin = 10 ** (floor_db / 10)
    pb = _Problem(snapshot, cfg)
    p_in = pb.power(pb.Y)

    # pass 1: path-count pre-estimation
    params, R = _sic_init(pb, pb.Y.copy(), cfg.pre_pass_paths)
    params, R, _ = _sage_pass(pb, params, R, cfg.pre_pass_iterations)
    pre = sorted(abs(p[0]) ** 2 for p in params)[::-1]
    params = _select(params, floor_lin, cfg.dynamic_range_db)

    # pass 2: L_hat paths, warm-started from pass 1
    R = pb.Y - sum((p[0] * pb.atom(p[1], p[2]) for p in params), np.zeros_like(pb.Y))
    params, R, hist = _sage_pass(pb, params, R, cfg.iterations)
    refined = False
    if cfg.refine and params:
        params, refined = _joint_refine(pb, params)
        params = _select(params, floor_lin, cfg.dynamic_range_db)
        params, R = _refit_amplitudes(pb, params)
        params, R = _eliminate(pb, params, floor_lin)
    kept = _select(params, floor_lin, cfg.dynamic_range_db)
    if len(kept) != len(params):
        kept, R = _refit_amplitudes(pb, kept)
    paths = [Mpc(complex(a), float(t), float(n)) for a, t, n in
             sorted(kept, key=lambda p: p[1])]
    return SnapshotEstimate(pb.t_ref, paths, floor_db, pb.power(R), p_in, hist, pre, refined)


def sage_run(stream: CirStream, cfg: SageConfig | None = None, stride: int = 1) -> list:
    """Estimate every ``stride``-th full snapshot of the stream, in time order."""
    cfg = cfg or SageConfig()
    if len(stream) < cfg.snapshot_size:
        raise ValueError(f"stream has {len(stream)} CIRs, fewer than one snapshot")
    snaps = stream.snapshots(cfg.snapshot_size)[::stride]
    return [sage_snapshot(s, cfg) for s in snaps]


def path_cirs(est: SnapshotEstimate, snapshot: CirStream) -> np.ndarray:
    """CIR-domain contribution of each estimated path, shape (L, n_cirs, n_taps)."""
    t = snapshot.timestamps - est.t
    f, w = snapshot.pilot_frequencies, np.asarray(snapshot.weights, float)
    out = np.zeros((est.L_hat, len(snapshot), snapshot.n_taps), complex)
    for i, p in enumerate(est.paths):
        H = p.amplitude * np.exp(2j * np.pi * p.doppler * t)[:, None] * (
            w * np.exp(-2j * np.pi * f * p.delay))[None, :]
        out[i] = np.fft.ifft(H, axis=1)
    return out


def residual_cirs(est: SnapshotEstimate, snapshot: CirStream) -> np.ndarray:
    return snapshot.taps - path_cirs(est, snapshot).sum(axis=0)


def write_estimates(path, estimates) -> None:
    with open(path, "w") as fh:
        for e in estimates:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_estimates(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(SnapshotEstimate.from_json(json.loads(line)))
    return out
