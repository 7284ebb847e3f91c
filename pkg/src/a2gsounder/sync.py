"""Cell search: 18 MHz low-pass, PSS timing/root search, SSS/CP search, PCI.

Timing convention: ``t0_hat`` is the sample index (modulo one half-frame) at
which a half-frame begins. A cell transmitted with a delay of ``s`` samples
therefore yields ``t0_hat == s % half_frame_samples``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from .iq import IqTrace
from .waveform import (CP_MODES, DEFAULT_NUMEROLOGY, HALF_FRAMES, N_CELL_ID1, Numerology,
                       compose_pci, demodulate_symbol, make_pss, ofdm_symbol,
                       sss_sequence, _sync_columns)

DEFAULT_FLOOR_RATIO = 8.0


class SyncError(RuntimeError):
    """Cell search failed (no cell, ambiguous result, or unusable input)."""


class NoCellFound(SyncError):
    pass


def compute_pci(i: int, k: int) -> int:
    return compose_pci(i, k)


# ---------------------------------------------------------------- low-pass


@dataclass(frozen=True)
class LowpassDesign:
    taps: np.ndarray
    sample_rate: float
    group_delay: int


def design_lowpass(sample_rate: float, passband: float = 9.0e6, stopband: float = 9.015e6,
                   atten_db: float = 65.0) -> LowpassDesign:
    """Kaiser-window FIR whose transition lies between the occupied band edge
    and the next subcarrier slot."""
    if sample_rate < 2 * passband:
        raise ValueError(f"sample rate {sample_rate} Hz is below the 18 MHz band")
    nyq = sample_rate / 2
    if stopband >= nyq:
        return LowpassDesign(np.array([1.0]), sample_rate, 0)
    ntaps, beta = signal.kaiserord(atten_db, (stopband - passband) / nyq)
    ntaps |= 1
    taps = signal.firwin(ntaps, (passband + stopband) / 2, window=("kaiser", beta),
                         fs=sample_rate)
    return LowpassDesign(taps, sample_rate, (ntaps - 1) // 2)


_LP_CACHE: dict = {}


def lowpass_18mhz(iq: IqTrace, compensate: bool = True) -> IqTrace:
    """Band-limit to +/-9 MHz. With ``compensate`` the FIR group delay is
    removed so output sample n aligns with input sample n; the delay is
    recorded in ``metadata['lowpass_group_delay']`` either way."""
    key = float(iq.sample_rate)
    if key not in _LP_CACHE:
        _LP_CACHE[key] = design_lowpass(key)
    d = _LP_CACHE[key]
    y = signal.oaconvolve(iq.samples, d.taps, mode="full")
    if compensate:
        y = y[d.group_delay:d.group_delay + len(iq)]
    else:
        y = y[:len(iq)]
    out = iq.replace(samples=y)
    out.metadata["lowpass_group_delay"] = d.group_delay
    out.metadata["lowpass_compensated"] = compensate
    return out


# --------------------------------------------------------------------- PSS


@dataclass
class PssDetection:
    t0_hat: int
    root_hat: int
    metric: np.ndarray          # coarse metric curve, shape (3, T // decimation)
    root_peaks: np.ndarray      # fine peak metric per root
    root_t0: np.ndarray         # fine t0 per root
    floor: float                # median of the coarse metric
    coarse_peaks: np.ndarray
    decimation: int
    floor_ratio: float = DEFAULT_FLOOR_RATIO

    @property
    def peak(self) -> float:
        return float(self.root_peaks[self.root_hat])

    def dominant_roots(self, ratio: float | None = None) -> list:
        r = self.floor_ratio if ratio is None else ratio
        return [int(i) for i in np.argsort(-self.coarse_peaks)
                if self.coarse_peaks[i] >= r * self.floor]


def _pss_replica(root: int, num: Numerology) -> np.ndarray:
    return ofdm_symbol(make_pss(root, num), num)


def _coarse_setup(num: Numerology):
    dec = num.fft_size // 128
    ntaps = 10 * dec + 1
    h = signal.firwin(ntaps, 0.96e6 * num.sample_rate / 30.72e6, window=("kaiser", 6.0),
                      fs=num.sample_rate)
    coarse = Numerology(num.sample_rate / dec, 128, num.subcarrier_spacing, 72, num.cp_mode)
    reps = [_pss_replica(r, coarse) for r in range(3)]
    return dec, h, (ntaps - 1) // 2, reps


def required_pss_length(n_half_frames: int, num: Numerology = DEFAULT_NUMEROLOGY) -> int:
    return (n_half_frames * num.half_frame_samples + num.useful_start(0, num.symbols_per_slot - 1)
            + num.fft_size + 2 * num.fft_size // 64)


def _fine_metric(x, rep, t0_candidates, n_half, num):
    """Exact full-rate Eq.-(2) metric at the given (possibly negative) t0."""
    T = num.half_frame_samples
    off = num.useful_start(0, num.symbols_per_slot - 1)
    lo, hi = int(t0_candidates.min()), int(t0_candidates.max())
    acc = np.zeros(hi - lo + 1)
    for n in range(n_half):
        a = lo + off + n * T
        seg = x[a:a + hi - lo + num.fft_size]
        acc += np.abs(np.correlate(seg, rep, mode="valid")) ** 2
    return acc[t0_candidates - lo] / n_half


def _exhaustive_metric(x, rep, n_half, num):
    T = num.half_frame_samples
    off = num.useful_start(0, num.symbols_per_slot - 1)
    acc = np.zeros(T)
    for n in range(n_half):
        seg = x[off + n * T: off + n * T + T + num.fft_size - 1]
        acc += np.abs(signal.correlate(seg, rep, mode="valid", method="fft")) ** 2
    return acc / n_half


def detect_pss(iq: IqTrace, n_half_frames: int = 10,
               numerology: Numerology = DEFAULT_NUMEROLOGY,
               floor_ratio: float = DEFAULT_FLOOR_RATIO, exhaustive: bool = False) -> PssDetection:
    """Joint PSS timing / root search averaged over ``n_half_frames``.

    The search first scans every half-frame offset on a 1/16-rate copy of the
    trace, then evaluates the exact full-rate metric within +/-2 coarse samples
    of each root's coarse peak. ``exhaustive=True`` evaluates the full-rate
    metric at every offset instead (slow; used to cross-check).
    """
    num = numerology
    if n_half_frames < 1:
        raise ValueError("n_half_frames must be >= 1")
    if not np.isclose(iq.sample_rate, num.sample_rate):
        raise ValueError("trace sample rate differs from the numerology; resample first")
    need = required_pss_length(n_half_frames, num)
    if len(iq) < need:
        raise SyncError(f"trace too short for {n_half_frames} half-frames "
                        f"({len(iq)} < {need} samples)")
    x = iq.samples
    T = num.half_frame_samples
    off = num.useful_start(0, num.symbols_per_slot - 1)
    dec, h, gd, creps = _coarse_setup(num)
    Tc = T // dec
    y = signal.upfirdn(h, x, up=1, down=dec)
    coarse = np.zeros((3, Tc))
    q0 = gd // dec + off // dec
    for r in range(3):
        c = signal.oaconvolve(y, np.conj(creps[r][::-1]), mode="valid")
        idx = q0 + np.arange(Tc)[None, :] + Tc * np.arange(n_half_frames)[:, None]
        coarse[r] = np.mean(np.abs(c[idx]) ** 2, axis=0)
    floor = float(np.median(coarse))
    cpeaks = coarse.max(axis=1)
    root_t0 = np.zeros(3, dtype=int)
    root_peaks = np.zeros(3)
    for r in range(3):
        rep = _pss_replica(r, num)
        if exhaustive:
            m = _exhaustive_metric(x, rep, n_half_frames, num)
            root_t0[r] = int(np.argmax(m))
            root_peaks[r] = m[root_t0[r]]
            continue
        tc = int(np.argmax(coarse[r])) * dec
        cand = tc + np.arange(-2 * dec, 2 * dec + 1)
        m = _fine_metric(x, rep, cand, n_half_frames, num)
        best = int(np.argmax(m))
        root_t0[r] = int(cand[best]) % T
        root_peaks[r] = m[best]
    root_hat = int(np.argmax(root_peaks))
    det = PssDetection(t0_hat=int(root_t0[root_hat]), root_hat=root_hat, metric=coarse,
                       root_peaks=root_peaks, root_t0=root_t0, floor=floor,
                       coarse_peaks=cpeaks, decimation=dec, floor_ratio=floor_ratio)
    if cpeaks.max() < floor_ratio * floor:
        raise NoCellFound(f"PSS peak {cpeaks.max():.3g} below {floor_ratio} x median {floor:.3g}")
    return det


# --------------------------------------------------------------------- SSS


@dataclass
class SssDetection:
    sss_index_hat: int
    cp_mode_hat: str
    metric: np.ndarray      # shape (2, 336): rows follow CP_MODES
    peak: float
    floor: float


def _sss_matrix(nid2: int) -> np.ndarray:
    return np.array([sss_sequence(k, None, nid2) for k in range(2 * N_CELL_ID1)])


_SSS_CACHE: dict = {}


def required_sss_length(t0_hat: int, n_frames: int, num: Numerology = DEFAULT_NUMEROLOGY) -> int:
    T = num.half_frame_samples
    return t0_hat + (2 * n_frames - 1) * T + num.useful_start(0, num.symbols_per_slot - 2) + num.fft_size


def detect_sss(iq: IqTrace, t0_hat: int, root_hat: int, n_frames: int = 5,
               numerology: Numerology = DEFAULT_NUMEROLOGY,
               floor_ratio: float = DEFAULT_FLOOR_RATIO) -> SssDetection:
    """SSS index / CP search at the PSS timing.

    Each hypothesis (CP mode j, index k) is scored by the squared SSS
    correlation averaged over ``n_frames`` frames. Both SSS symbols of a frame
    are used: the one at ``t0_hat`` under index k and the one a half-frame
    later under its partner index (k +/- 168).
    """
    if root_hat not in (0, 1, 2):
        raise ValueError("root_hat must be 0, 1 or 2")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    T = numerology.half_frame_samples
    x = iq.samples
    if root_hat not in _SSS_CACHE:
        _SSS_CACHE[root_hat] = _sss_matrix(root_hat)
    S = _SSS_CACHE[root_hat]
    partner = (np.arange(2 * N_CELL_ID1) + N_CELL_ID1) % (2 * N_CELL_ID1)
    metric = np.zeros((len(CP_MODES), 2 * N_CELL_ID1))
    for j, cp in enumerate(CP_MODES):
        num = numerology.with_cp(cp)
        sig, _ = _sync_columns(num)
        start = t0_hat + num.useful_start(0, num.symbols_per_slot - 2)
        n_half = 2 * n_frames
        if start + (n_half - 1) * T + num.fft_size > len(x):
            raise SyncError("trace too short for the requested SSS averaging")
        idx = start + T * np.arange(n_half)[:, None] + np.arange(num.fft_size)
        cols = demodulate_symbol(x[idx], num)[:, sig]
        corr = np.abs(cols @ S.T) ** 2          # (n_half, 336)
        metric[j] = (corr[0::2].sum(0) + corr[1::2][:, partner].sum(0)) / n_half
    j, k = np.unravel_index(int(np.argmax(metric)), metric.shape)
    peak = float(metric[j, k])
    floor = float(np.median(metric))
    if peak < floor_ratio * floor:
        raise SyncError(f"SSS/CP ambiguous: peak {peak:.3g} below {floor_ratio} x median {floor:.3g}")
    return SssDetection(int(k), CP_MODES[j], metric, peak, floor)


# -------------------------------------------------------------- cell search


@dataclass
class SyncResult:
    t0_hat: int
    pss_root_hat: int
    sss_index_hat: int
    cp_mode_hat: str
    half_frame_flag: str
    pci_hat: int
    pss_metric_peak: float
    pss_metric_floor: float
    sss_metric_peak: float
    sss_metric_floor: float
    sample_rate: float = DEFAULT_NUMEROLOGY.sample_rate
    dominant_roots: list = field(default_factory=list)

    def __post_init__(self):
        if self.pci_hat != compute_pci(self.pss_root_hat, self.sss_index_hat):
            raise ValueError("pci_hat inconsistent with (root, sss index)")
        expect = HALF_FRAMES[int(self.sss_index_hat >= N_CELL_ID1)]
        if self.half_frame_flag != expect:
            raise ValueError("half_frame_flag inconsistent with sss index")

    @property
    def frame_start(self) -> int:
        """Sample index (modulo two half-frames) of a frame boundary."""
        T = int(round(self.sample_rate * DEFAULT_NUMEROLOGY.frame_duration / 2))
        return self.t0_hat + (T if self.half_frame_flag == "second" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyncResult":
        return cls(**d)


def make_sync_result(t0: int, root: int, k: int, cp_mode: str, sample_rate=30.72e6) -> SyncResult:
    """SyncResult from known parameters (e.g. genie-aided tests)."""
    return SyncResult(t0, root, k, cp_mode, HALF_FRAMES[int(k >= N_CELL_ID1)], compute_pci(root, k),
                      float("nan"), float("nan"), float("nan"), float("nan"), sample_rate)


def prepare_capture(iq: IqTrace, numerology: Numerology = DEFAULT_NUMEROLOGY,
                    prefilter: bool = True) -> IqTrace:
    """Low-pass and (if needed) resample a capture to the working rate."""
    from .airchan import resample
    out = lowpass_18mhz(iq) if prefilter else iq
    if not np.isclose(out.sample_rate, numerology.sample_rate):
        out = resample(out, numerology.sample_rate)
    return out


def cell_search(iq: IqTrace, n_half_frames: int = 10, n_frames: int | None = None,
                numerology: Numerology = DEFAULT_NUMEROLOGY, prefilter: bool = True,
                floor_ratio: float = DEFAULT_FLOOR_RATIO) -> SyncResult:
    """Steps 1-3 of cell search on a trace already at (or resampled to) the
    working rate. ``n_frames`` defaults to ``n_half_frames // 2`` (at least 1)."""
    x = prepare_capture(iq, numerology, prefilter)
    pss = detect_pss(x, n_half_frames, numerology, floor_ratio)
    nf = max(1, n_half_frames // 2) if n_frames is None else n_frames
    sss = detect_sss(x, pss.t0_hat, pss.root_hat, nf, numerology, floor_ratio)
    k = sss.sss_index_hat
    return SyncResult(
        t0_hat=pss.t0_hat, pss_root_hat=pss.root_hat, sss_index_hat=k,
        cp_mode_hat=sss.cp_mode_hat, half_frame_flag=HALF_FRAMES[int(k >= N_CELL_ID1)],
        pci_hat=compute_pci(pss.root_hat, k), pss_metric_peak=pss.peak,
        pss_metric_floor=pss.floor, sss_metric_peak=sss.peak, sss_metric_floor=sss.floor,
        sample_rate=numerology.sample_rate, dominant_roots=pss.dominant_roots(),
    )
