"""LTE-like FDD downlink waveform: numerology, sync/reference sequences, OFDM.

Sequence families follow the LTE physical layer definitions (Zadoff-Chu PSS,
interleaved m-sequence SSS, Gold-sequence QPSK CRS on antenna port 0). The
transmitter and the receiver replicas are built from the same functions here.

Frequency-domain symbols are represented as *grid columns*: vectors of length
``occupied_subcarriers`` ordered from the lowest to the highest subcarrier,
with the DC subcarrier excluded (index ``n_occ // 2`` is the first positive
subcarrier).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .iq import IqTrace

CP_MODES = ("normal", "extended")
N_CELL_ID1 = 168
N_PCI = 3 * N_CELL_ID1
PSS_ROOTS = (25, 29, 34)
SYNC_LEN = 62
SYNC_GUARD = 5
CRS_STRIDE = 6
HALF_FRAMES = ("first", "second")


@dataclass(frozen=True)
class Numerology:
    """OFDM timing parameters. Defaults are the 20 MHz LTE profile at 30.72 Msps
    with 1200 occupied subcarriers (18 MHz)."""

    sample_rate: float = 30.72e6
    fft_size: int = 2048
    subcarrier_spacing: float = 15e3
    occupied_subcarriers: int = 1200
    cp_mode: str = "normal"
    frame_duration: float = 10e-3
    slots_per_frame: int = 20

    def __post_init__(self):
        if self.cp_mode not in CP_MODES:
            raise ValueError(f"cp_mode must be one of {CP_MODES}")
        if self.occupied_subcarriers > self.fft_size - 1:
            raise ValueError("occupied_subcarriers must leave room for DC")
        if self.occupied_subcarriers % (2 * CRS_STRIDE):
            raise ValueError("occupied_subcarriers must be a multiple of 12")
        if self.fft_size % 128 or self.fft_size < 128:
            raise ValueError("fft_size must be a multiple of 128")
        if not np.isclose(self.fft_size * self.subcarrier_spacing, self.sample_rate):
            raise ValueError("sample_rate must equal fft_size * subcarrier_spacing")
        slot = self.frame_duration / self.slots_per_frame * self.sample_rate
        if not np.isclose(sum(self.cp_lengths) + self.symbols_per_slot * self.fft_size, slot):
            raise ValueError("CP lengths do not tile the slot")

    @property
    def symbols_per_slot(self) -> int:
        return 7 if self.cp_mode == "normal" else 6

    @property
    def cp_lengths(self) -> tuple:
        s = self.fft_size // 128
        if self.cp_mode == "normal":
            return (10 * s,) + (9 * s,) * 6
        return (32 * s,) * 6

    @property
    def samples_per_slot(self) -> int:
        return sum(self.cp_lengths) + self.symbols_per_slot * self.fft_size

    @property
    def samples_per_frame(self) -> int:
        return self.samples_per_slot * self.slots_per_frame

    @property
    def half_frame_samples(self) -> int:
        return self.samples_per_frame // 2

    @property
    def occupied_bandwidth(self) -> float:
        return self.occupied_subcarriers * self.subcarrier_spacing

    @property
    def symbols_per_frame(self) -> int:
        return self.symbols_per_slot * self.slots_per_frame

    def with_cp(self, cp_mode: str) -> "Numerology":
        return replace(self, cp_mode=cp_mode)

    def useful_start(self, slot: int, symbol: int) -> int:
        """Sample index (within the frame) of the first post-CP sample."""
        if not 0 <= symbol < self.symbols_per_slot:
            raise ValueError("symbol out of range")
        cps = self.cp_lengths
        return (slot * self.samples_per_slot + sum(cps[: symbol + 1])
                + symbol * self.fft_size)

    def subcarrier_offsets(self) -> np.ndarray:
        """Signed subcarrier number of each grid-column entry (never 0)."""
        half = self.occupied_subcarriers // 2
        i = np.arange(self.occupied_subcarriers)
        return np.where(i < half, i - half, i - half + 1)

    def fft_bins(self) -> np.ndarray:
        return self.subcarrier_offsets() % self.fft_size

    def frequencies(self) -> np.ndarray:
        return self.subcarrier_offsets() * self.subcarrier_spacing


DEFAULT_NUMEROLOGY = Numerology()


def compose_pci(root_index: int, sss_index: int) -> int:
    if root_index not in (0, 1, 2):
        raise ValueError("PSS root index must be 0, 1 or 2")
    if not 0 <= sss_index < 2 * N_CELL_ID1:
        raise ValueError("SSS index must be in 0..335")
    return root_index + 3 * (sss_index % N_CELL_ID1)


def decompose_pci(pci: int) -> tuple:
    """Return (pss_root_index, first-half sss_index)."""
    if not 0 <= pci < N_PCI:
        raise ValueError("pci must be in 0..503")
    return pci % 3, pci // 3


@dataclass(frozen=True)
class CellConfig:
    pci: int
    cp_mode: str = "normal"

    def __post_init__(self):
        decompose_pci(self.pci)
        if self.cp_mode not in CP_MODES:
            raise ValueError(f"cp_mode must be one of {CP_MODES}")

    @classmethod
    def from_indices(cls, root_index: int, sss_index: int, cp_mode="normal"):
        return cls(compose_pci(root_index, sss_index), cp_mode)

    @property
    def pss_root_index(self) -> int:
        return self.pci % 3

    @property
    def sss_index(self) -> int:
        return self.pci // 3

    def numerology(self, base: Numerology = DEFAULT_NUMEROLOGY) -> Numerology:
        return base.with_cp(self.cp_mode)


@dataclass(frozen=True)
class SymbolMap:
    pss_positions: list
    sss_positions: list
    crs_positions: list
    crs_subcarrier_stride: int = CRS_STRIDE
    crs_freq_shift: int = 0


def symbol_map(cell: CellConfig, numerology: Numerology = DEFAULT_NUMEROLOGY) -> SymbolMap:
    num = cell.numerology(numerology)
    last = num.symbols_per_slot - 1
    sync_slots = (0, num.slots_per_frame // 2)
    crs_syms = (0, num.symbols_per_slot - 3)
    return SymbolMap(
        pss_positions=[(s, last) for s in sync_slots],
        sss_positions=[(s, last - 1) for s in sync_slots],
        crs_positions=[(s, l) for s in range(num.slots_per_frame) for l in crs_syms],
        crs_freq_shift=cell.pci % CRS_STRIDE,
    )


def _sync_columns(numerology: Numerology):
    half = numerology.occupied_subcarriers // 2
    sig = np.arange(SYNC_LEN) - SYNC_LEN // 2 + half
    guard = np.arange(sig[0] - SYNC_GUARD, sig[-1] + SYNC_GUARD + 1)
    return sig, guard


def pss_sequence(root_index: int) -> np.ndarray:
    """Length-62 Zadoff-Chu PSS sequence d_u(n) (the DC element is punctured)."""
    if root_index not in (0, 1, 2):
        raise ValueError("PSS root index must be 0, 1 or 2")
    u = PSS_ROOTS[root_index]
    n = np.arange(SYNC_LEN)
    m = np.where(n < 31, n * (n + 1), (n + 1) * (n + 2))
    return np.exp(-1j * np.pi * u * m / 63)


def make_pss(root_index: int, numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    col = np.zeros(numerology.occupied_subcarriers, complex)
    sig, _ = _sync_columns(numerology)
    col[sig] = pss_sequence(root_index)
    return col


def _msequence(taps, n=31):
    x = np.zeros(n, dtype=int)
    x[4] = 1
    for i in range(n - 5):
        x[i + 5] = sum(x[i + t] for t in taps) % 2
    return 1 - 2 * x


@lru_cache(maxsize=None)
def _sss_base():
    s = _msequence((0, 2))
    c = _msequence((0, 3))
    z = _msequence((0, 1, 2, 4))
    return s, c, z


def _sss_m0_m1(nid1: int):
    qp = nid1 // 30
    q = (nid1 + qp * (qp + 1) // 2) // 30
    mp = nid1 + q * (q + 1) // 2
    m0 = mp % 31
    m1 = (m0 + mp // 31 + 1) % 31
    return m0, m1


def _resolve_sss_index(k: int, half_frame) -> int:
    if not 0 <= k < 2 * N_CELL_ID1:
        raise ValueError("SSS index must be in 0..335")
    if half_frame is None:
        return k
    if half_frame not in HALF_FRAMES:
        raise ValueError(f"half_frame must be one of {HALF_FRAMES}")
    if half_frame == "second":
        return k % N_CELL_ID1 + N_CELL_ID1
    if k >= N_CELL_ID1:
        raise ValueError("index >= 168 already denotes the second half-frame")
    return k


def sss_sequence(k: int, half_frame=None, nid2: int = 0) -> np.ndarray:
    """Length-62 +/-1 SSS sequence. ``k`` in 0..167 is the first half-frame
    variant of N_ID1 = k; 168..335 are the second half-frame variants."""
    k = _resolve_sss_index(k, half_frame)
    if nid2 not in (0, 1, 2):
        raise ValueError("nid2 must be 0, 1 or 2")
    nid1, second = k % N_CELL_ID1, k >= N_CELL_ID1
    s, c, z = _sss_base()
    m0, m1 = _sss_m0_m1(nid1)
    n = np.arange(31)
    s0, s1 = s[(n + m0) % 31], s[(n + m1) % 31]
    c0, c1 = c[(n + nid2) % 31], c[(n + nid2 + 3) % 31]
    z0, z1 = z[(n + m0 % 8) % 31], z[(n + m1 % 8) % 31]
    d = np.empty(SYNC_LEN)
    if not second:
        d[0::2], d[1::2] = s0 * c0, s1 * c1 * z0
    else:
        d[0::2], d[1::2] = s1 * c0, s0 * c1 * z1
    return d


def make_sss(k: int, half_frame=None, numerology: Numerology = DEFAULT_NUMEROLOGY,
             nid2: int = 0) -> np.ndarray:
    col = np.zeros(numerology.occupied_subcarriers, complex)
    sig, _ = _sync_columns(numerology)
    col[sig] = sss_sequence(k, half_frame, nid2)
    return col


def gold_sequence(c_init: int, length: int, nc: int = 1600) -> np.ndarray:
    """Length-31 Gold sequence c(n) used for LTE scrambling."""
    n = length + nc + 31
    x1 = np.zeros(n, dtype=np.uint8)
    x2 = np.zeros(n, dtype=np.uint8)
    x1[0] = 1
    x2[:31] = [(c_init >> i) & 1 for i in range(31)]
    for i in range(n - 31):
        x1[i + 31] = x1[i + 3] ^ x1[i]
        x2[i + 31] = x2[i + 3] ^ x2[i + 2] ^ x2[i + 1] ^ x2[i]
    return (x1[nc:nc + length] ^ x2[nc:nc + length]).astype(int)


@dataclass(frozen=True)
class Pilots:
    """CRS pilots of one OFDM symbol: grid-column indices and values."""

    indices: np.ndarray
    values: np.ndarray
    offset: int
    stride: int = CRS_STRIDE

    def frequencies(self, numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
        return numerology.frequencies()[self.indices]


@lru_cache(maxsize=4096)
def _crs_cached(pci, slot, symbol, n_occ, n_sym, cp_mode):
    n_rb = n_occ // 12
    n_rb_max = 110
    ncp = 1 if cp_mode == "normal" else 0
    c_init = (2 ** 10 * (7 * (slot + 1) + symbol + 1) * (2 * pci + 1) + 2 * pci + ncp)
    c = gold_sequence(c_init, 4 * n_rb_max)
    r = ((1 - 2 * c[0::2]) + 1j * (1 - 2 * c[1::2])) / np.sqrt(2)
    m = np.arange(2 * n_rb)
    values = r[m + n_rb_max - n_rb]
    v = 0 if symbol == 0 else 3
    offset = (v + pci % CRS_STRIDE) % CRS_STRIDE
    return offset, values


def make_crs(pci: int, slot: int, symbol: int,
             numerology: Numerology = DEFAULT_NUMEROLOGY) -> Pilots:
    """Port-0 cell-specific reference signal for one (slot, symbol)."""
    decompose_pci(pci)
    if not 0 <= slot < numerology.slots_per_frame:
        raise ValueError("slot out of range")
    if symbol not in (0, numerology.symbols_per_slot - 3):
        raise ValueError(f"({slot}, {symbol}) is not a CRS position")
    offset, values = _crs_cached(pci, slot, symbol, numerology.occupied_subcarriers,
                                 numerology.symbols_per_slot, numerology.cp_mode)
    idx = offset + CRS_STRIDE * np.arange(values.size)
    return Pilots(indices=idx, values=values.copy(), offset=offset)


def to_fft_bins(column: np.ndarray, numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    column = np.asarray(column)
    out = np.zeros(column.shape[:-1] + (numerology.fft_size,), complex)
    out[..., numerology.fft_bins()] = column
    return out


def ofdm_symbol(column: np.ndarray, numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    """Useful (CP-free) time-domain part of an OFDM symbol; unitary transform."""
    return np.fft.ifft(to_fft_bins(column, numerology), norm="ortho")


def demodulate_symbol(window: np.ndarray, numerology: Numerology = DEFAULT_NUMEROLOGY) -> np.ndarray:
    """Grid column(s) from fft_size-sample useful window(s) (last axis)."""
    spec = np.fft.fft(window, norm="ortho")
    return spec[..., numerology.fft_bins()]


def frame_grid(cell: CellConfig, frame_index: int = 0,
               numerology: Numerology = DEFAULT_NUMEROLOGY, data_fill: bool = True,
               data_power: float = 1.0, seed: int = 0) -> np.ndarray:
    """Resource grid of one frame, shape (symbols_per_frame, occupied_subcarriers)."""
    num = cell.numerology(numerology)
    smap = symbol_map(cell, num)
    nsym, nocc = num.symbols_per_frame, num.occupied_subcarriers
    spsl = num.symbols_per_slot
    if data_fill:
        rng = np.random.default_rng([seed, cell.pci, frame_index])
        bits = rng.integers(0, 2, size=(2, nsym, nocc))
        grid = ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) * np.sqrt(data_power / 2)
    else:
        grid = np.zeros((nsym, nocc), complex)
    sig, guard = _sync_columns(num)
    nid2 = cell.pss_root_index
    for half, (slot, sym) in enumerate(smap.pss_positions):
        row = slot * spsl + sym
        grid[row, guard] = 0
        grid[row, sig] = pss_sequence(nid2)
    for half, (slot, sym) in enumerate(smap.sss_positions):
        row = slot * spsl + sym
        grid[row, guard] = 0
        grid[row, sig] = sss_sequence(cell.sss_index, HALF_FRAMES[half], nid2)
    for slot, sym in smap.crs_positions:
        p = make_crs(cell.pci, slot, sym, num)
        grid[slot * spsl + sym, p.indices] = p.values
    return grid


def grid_to_time(grid: np.ndarray, numerology: Numerology) -> np.ndarray:
    """CP-prefixed time signal of whole slots of a resource grid."""
    useful = np.fft.ifft(to_fft_bins(grid, numerology), norm="ortho")
    cps = numerology.cp_lengths
    spsl = numerology.symbols_per_slot
    pieces = []
    for row, sym in enumerate(useful):
        cp = cps[row % spsl]
        pieces.append(sym[-cp:])
        pieces.append(sym)
    return np.concatenate(pieces)


def modulate_frame(cell: CellConfig, frame_index: int = 0,
                   numerology: Numerology = DEFAULT_NUMEROLOGY, data_fill: bool = True,
                   data_power: float = 1.0, seed: int = 0) -> IqTrace:
    """One 10 ms frame as an IqTrace segment starting at frame_index * 10 ms."""
    num = cell.numerology(numerology)
    grid = frame_grid(cell, frame_index, num, data_fill, data_power, seed)
    return IqTrace(
        samples=grid_to_time(grid, num),
        sample_rate=num.sample_rate,
        start_time=frame_index * num.frame_duration,
        description=f"pci={cell.pci} cp={cell.cp_mode} frame={frame_index}",
    )


def generate(cell: CellConfig, n_frames: int, numerology: Numerology = DEFAULT_NUMEROLOGY,
             data_fill: bool = True, data_power: float = 1.0, seed: int = 0,
             first_frame: int = 0) -> IqTrace:
    """Concatenate ``n_frames`` consecutive frames."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = [modulate_frame(cell, first_frame + f, numerology, data_fill, data_power, seed)
              for f in range(n_frames)]
    out = frames[0].replace(samples=np.concatenate([f.samples for f in frames]))
    out.description = f"pci={cell.pci} cp={cell.cp_mode} frames={n_frames}"
    out.metadata = {"pci": cell.pci, "cp_mode": cell.cp_mode, "seed": seed,
                    "data_fill": data_fill, "first_frame": first_frame}
    return out


def demodulate_frame(samples: np.ndarray, numerology: Numerology) -> np.ndarray:
    """Inverse of ``grid_to_time`` for one frame of samples."""
    spsl = numerology.symbols_per_slot
    starts = [numerology.useful_start(s, l)
              for s in range(numerology.slots_per_frame) for l in range(spsl)]
    idx = np.asarray(starts)[:, None] + np.arange(numerology.fft_size)
    return demodulate_symbol(samples[idx], numerology)
