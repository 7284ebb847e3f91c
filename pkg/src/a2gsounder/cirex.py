"""CIR extraction from CRS pilots: least-squares CFR on the pilot lattice,
inverse DFT over the lattice, one CIR per half-frame."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .iq import IqTrace
from .sync import SyncResult
from .waveform import DEFAULT_NUMEROLOGY, CellConfig, Numerology, demodulate_symbol, make_crs

SNAPSHOT_SIZE = 10
WINDOWS = ("rect", "hann")


@dataclass
class Cir:
    taps: np.ndarray
    delay_resolution: float
    timestamp: float
    unambiguous_delay_span: float
    valid: bool = True

    @property
    def delays(self) -> np.ndarray:
        return np.arange(self.taps.size) * self.delay_resolution


@dataclass
class CirStream:
    """Time-ordered CIR records on a common delay grid."""

    taps: np.ndarray               # (n, M) complex
    timestamps: np.ndarray         # (n,) s
    valid: np.ndarray              # (n,) bool
    delay_resolution: float
    pilot_frequencies: np.ndarray  # (M,) Hz, baseband
    window: str = "rect"
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.taps = np.atleast_2d(np.asarray(self.taps, complex))
        self.timestamps = np.asarray(self.timestamps, float)
        self.valid = np.asarray(self.valid, bool)
        self.pilot_frequencies = np.asarray(self.pilot_frequencies, float)
        if self.weights is None:
            self.weights = np.ones(self.taps.shape[1])
        n = self.taps.shape[0]
        if self.timestamps.shape != (n,) or self.valid.shape != (n,):
            raise ValueError("timestamps/valid must match the number of CIRs")

    def __len__(self) -> int:
        return self.taps.shape[0]

    @property
    def n_taps(self) -> int:
        return self.taps.shape[1]

    @property
    def unambiguous_delay_span(self) -> float:
        return self.n_taps * self.delay_resolution

    @property
    def delays(self) -> np.ndarray:
        return np.arange(self.n_taps) * self.delay_resolution

    def _subset(self, sel, cls=None):
        cls = cls or CirStream
        return cls(self.taps[sel], self.timestamps[sel], self.valid[sel], self.delay_resolution,
                   self.pilot_frequencies, self.window, self.weights)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Cir(self.taps[i].copy(), self.delay_resolution, float(self.timestamps[i]),
                       self.unambiguous_delay_span, bool(self.valid[i]))
        return self._subset(i)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def cfr(self) -> np.ndarray:
        """Windowed pilot-domain transfer function, inverse of the CIR transform."""
        return np.fft.fft(self.taps, axis=1)

    def scaled(self, a: complex) -> "CirStream":
        out = self._subset(slice(None))
        out.taps = out.taps * a
        return out

    def snapshots(self, size: int = SNAPSHOT_SIZE) -> list:
        """Consecutive non-overlapping snapshots; a partial tail is dropped."""
        n = len(self) // size
        return [self._subset(slice(i * size, (i + 1) * size), CirSnapshot) for i in range(n)]


class CirSnapshot(CirStream):
    """A block of consecutive CIRs treated as one estimation unit."""

    @property
    def t(self) -> float:
        return float(np.mean(self.timestamps))


def pilot_power_valid(power: np.ndarray, floor_rel: float) -> np.ndarray:
    med = np.median(power) if power.size else 0.0
    return (power > 0) & (power >= floor_rel * med)


def extract_cir(iq: IqTrace, sync: SyncResult, cell: CellConfig | None = None,
                numerology: Numerology = DEFAULT_NUMEROLOGY, window: str = "rect",
                pilot_floor_rel: float = 1e-3, timing_advance: int = 0) -> CirStream:
    """One CIR per half-frame from symbol 0 of slot 0 / slot 10.

    ``timing_advance`` moves the FFT window that many samples earlier (into the
    cyclic prefix), which delays every CIR tap by the same amount.
    """
    if window not in WINDOWS:
        raise ValueError(f"window must be one of {WINDOWS}")
    if cell is None:
        cell = CellConfig(sync.pci_hat, sync.cp_mode_hat)
    num = cell.numerology(numerology)
    if not 0 <= timing_advance <= num.cp_lengths[0]:
        raise ValueError("timing_advance must lie within the first cyclic prefix")
    if not np.isclose(iq.sample_rate, num.sample_rate):
        from .airchan import resample
        iq = resample(iq, num.sample_rate)
    T = num.half_frame_samples
    N = num.fft_size
    half_slot = num.slots_per_frame // 2
    F = sync.frame_start
    first = -((F + num.useful_start(0, 0)) // T)
    starts, slots = [], []
    h = first
    while True:
        slot = 0 if h % 2 == 0 else half_slot
        u = F + h * T + num.useful_start(0, 0) - timing_advance
        if u + N > len(iq):
            break
        if u >= 0:
            starts.append(u)
            slots.append(slot)
        h += 1
    if not starts:
        raise ValueError("trace too short for a single CRS symbol after frame start")
    starts = np.asarray(starts)
    X = demodulate_symbol(iq.samples[starts[:, None] + np.arange(N)], num)
    pil = {s: make_crs(cell.pci, s, 0, num) for s in set(slots)}
    idx = pil[slots[0]].indices
    sent = np.stack([pil[s].values for s in slots])
    rx = X[:, idx]
    power = np.mean(np.abs(rx) ** 2, axis=1)
    valid = pilot_power_valid(power, pilot_floor_rel)
    w = np.hanning(idx.size + 2)[1:-1] if window == "hann" else np.ones(idx.size)
    taps = np.fft.ifft(rx / sent * w, axis=1)
    taps[~valid] = 0
    spacing = pil[slots[0]].stride * num.subcarrier_spacing
    return CirStream(taps=taps, timestamps=iq.start_time + (starts + N / 2) / num.sample_rate,
                     valid=valid, delay_resolution=1.0 / (idx.size * spacing),
                     pilot_frequencies=num.frequencies()[idx], window=window, weights=w)


def pdp(stream: CirStream, window: int = 1) -> np.ndarray:
    """Concatenated PDPs, shape (n_cirs, n_taps); optional moving average of
    ``window`` consecutive CIRs."""
    p = np.abs(stream.taps) ** 2
    if window > 1:
        p = uniform_filter1d(p, size=window, axis=0, mode="nearest")
    return p


# ------------------------------------------------------------ binary format

_MAGIC = b"CIR1"
_HEADER = struct.Struct("<4sIIIIdd")
_WINDOW_CODES = {"rect": 0, "hann": 1, "custom": 2}


def _record_dtype(m):
    return np.dtype([("timestamp", "<f8"), ("valid", "<u4"), ("taps", "<f4", (2 * m,))])


def write_cirs(path, stream: CirStream) -> None:
    """Header (magic, version, n_taps, n_records, window, resolution, t0), the
    pilot frequencies and window weights as float64, then fixed-size records."""
    m, n = stream.n_taps, len(stream)
    t0 = float(stream.timestamps[0]) if n else 0.0
    rec = np.zeros(n, _record_dtype(m))
    rec["timestamp"] = stream.timestamps
    rec["valid"] = stream.valid
    rec["taps"][:, 0::2] = stream.taps.real
    rec["taps"][:, 1::2] = stream.taps.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, m, n, _WINDOW_CODES.get(stream.window, 2),
                              stream.delay_resolution, t0))
        fh.write(stream.pilot_frequencies.astype("<f8").tobytes())
        fh.write(np.asarray(stream.weights, "<f8").tobytes())
        fh.write(rec.tobytes())


def read_cirs(path) -> CirStream:
    data = Path(path).read_bytes()
    magic, version, m, n, wcode, res, _t0 = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a CIR v1 file")
    off = _HEADER.size
    f = np.frombuffer(data, "<f8", m, off).copy()
    off += 8 * m
    w = np.frombuffer(data, "<f8", m, off).copy()
    off += 8 * m
    rec = np.frombuffer(data, _record_dtype(m), n, off)
    taps = rec["taps"][:, 0::2].astype(float) + 1j * rec["taps"][:, 1::2].astype(float)
    window = {v: k for k, v in _WINDOW_CODES.items()}[wcode]
    return CirStream(taps, rec["timestamp"].copy(), rec["valid"].astype(bool), res, f, window, w)
