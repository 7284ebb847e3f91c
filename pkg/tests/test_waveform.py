import numpy as np
import pytest

from a2gsounder import waveform as wf
from a2gsounder.waveform import CellConfig, Numerology

NUM = wf.DEFAULT_NUMEROLOGY
# full length-63 ZC cross-correlation maxima for roots (25, 29, 34), computed
# once by brute force over all cyclic lags and frozen here
ZC63_XCORR = {(0, 1): 0.12599, (0, 2): 0.37796, (1, 2): 0.12599}


def _zc63(u):
    n = np.arange(63)
    return np.exp(-1j * np.pi * u * n * (n + 1) / 63)


def _max_cyclic_xcorr(a, b):
    c = np.fft.ifft(np.fft.fft(a) * np.conj(np.fft.fft(b)))
    return np.max(np.abs(c)) / np.sqrt(np.vdot(a, a).real * np.vdot(b, b).real)


def test_numerology_defaults():
    assert NUM.samples_per_frame == 307200
    assert NUM.half_frame_samples == 153600
    assert np.isclose(NUM.occupied_bandwidth, 18e6)
    assert NUM.symbols_per_slot == 7
    assert NUM.with_cp("extended").symbols_per_slot == 6
    for cp in wf.CP_MODES:
        n = NUM.with_cp(cp)
        assert sum(n.cp_lengths) + n.symbols_per_slot * n.fft_size == n.samples_per_slot


def test_numerology_rejects_bad_profile():
    with pytest.raises(ValueError):
        Numerology(cp_mode="long")
    with pytest.raises(ValueError):
        Numerology(occupied_subcarriers=2048)
    with pytest.raises(ValueError):
        Numerology(sample_rate=25e6)


def test_subcarrier_mapping_excludes_dc():
    off = NUM.subcarrier_offsets()
    assert 0 not in off
    assert off[0] == -600 and off[-1] == 600
    assert np.all(np.diff(off) > 0)


@pytest.mark.parametrize("pci", range(504))
def test_pci_compose_roundtrip(pci):
    i, k = wf.decompose_pci(pci)
    assert wf.compose_pci(i, k) == pci
    assert wf.compose_pci(i, k + 168) == pci


def test_cell_config_validation():
    with pytest.raises(ValueError):
        CellConfig(504)
    with pytest.raises(ValueError):
        CellConfig(3, "short")
    c = CellConfig.from_indices(2, 170)
    assert c.pci == 8 and c.pss_root_index == 2 and c.sss_index == 2


def test_pss_self_correlation_and_power():
    for i in range(3):
        col = wf.make_pss(i)
        seq = col[col != 0]
        assert seq.size == 62
        assert np.allclose(np.abs(seq), 1.0)
        assert np.isclose(np.vdot(seq, seq).real / 62, 1.0)
        assert np.isclose(abs(np.vdot(seq, seq)) / 62, 1.0)


def test_pss_parseval():
    col = wf.make_pss(1)
    t = wf.ofdm_symbol(col)
    assert np.isclose(np.sum(np.abs(t) ** 2), np.sum(np.abs(col) ** 2))


def test_zc63_cross_correlation_frozen():
    for (a, b), ref in ZC63_XCORR.items():
        got = _max_cyclic_xcorr(_zc63(wf.PSS_ROOTS[a]), _zc63(wf.PSS_ROOTS[b]))
        assert got == pytest.approx(ref, abs=1e-4)


def test_pss_cross_correlation_bounds():
    # roots 25 and 34 sum to 59 while gcd(34-25, 63) = 9, so that pair
    # correlates more strongly than the others
    seqs = [wf.pss_sequence(i) for i in range(3)]
    x = {(a, b): _max_cyclic_xcorr(seqs[a], seqs[b]) for a in range(3) for b in range(a + 1, 3)}
    assert x[(0, 1)] < 0.3
    assert all(v < 0.4 for v in x.values())


def test_pss_invalid_root():
    with pytest.raises(ValueError):
        wf.make_pss(3)


def test_sss_determinism_and_half_frames():
    a = wf.make_sss(5, "first")
    assert np.array_equal(a, wf.make_sss(5, "first"))
    b = wf.make_sss(5, "second")
    assert not np.allclose(a, b)
    assert np.array_equal(b, wf.make_sss(5 + 168))


def test_sss_family_pairwise_correlation():
    S = np.stack([wf.sss_sequence(k) for k in range(336)])
    G = np.abs(S @ S.T) / 62
    np.fill_diagonal(G, 0)
    assert G.max() < 0.5


def test_sss_invalid_index():
    with pytest.raises(ValueError):
        wf.make_sss(336)
    with pytest.raises(ValueError):
        wf.make_sss(200, "first")


def test_crs_lattice():
    p = wf.make_crs(1, 0, 0)
    assert p.offset == 1
    assert p.indices.size == NUM.occupied_subcarriers // 6
    assert np.allclose(np.abs(p.values), 1.0)
    p0, p6 = wf.make_crs(0, 3, 0), wf.make_crs(6, 3, 0)
    assert p0.offset == p6.offset
    assert not np.allclose(p0.values, p6.values)
    q = wf.make_crs(7, 4, 4)
    assert np.array_equal(q.values, wf.make_crs(7, 4, 4).values)


def test_crs_rejects_non_crs_symbol():
    with pytest.raises(ValueError):
        wf.make_crs(0, 0, 1)


def test_symbol_map_positions():
    m = wf.symbol_map(CellConfig(10))
    assert m.pss_positions == [(0, 6), (10, 6)]
    assert m.sss_positions == [(0, 5), (10, 5)]
    assert len(m.crs_positions) == 40
    assert m.crs_freq_shift == 4


@pytest.mark.parametrize("cp", wf.CP_MODES)
def test_frame_length_and_pss_demod(cp):
    cell = CellConfig(301, cp)
    num = cell.numerology()
    fr = wf.modulate_frame(cell, 0)
    assert len(fr) == 307200
    last = num.symbols_per_slot - 1
    for slot in (0, 10):
        u = num.useful_start(slot, last)
        col = wf.demodulate_symbol(fr.samples[u:u + num.fft_size], num)
        sig, _ = wf._sync_columns(num)
        assert np.allclose(col[sig], wf.make_pss(cell.pss_root_index)[sig], atol=1e-9)


def test_sss_half_frame_variants_in_frame():
    cell = CellConfig(301)
    num = cell.numerology()
    fr = wf.modulate_frame(cell, 0)
    sig, guard = wf._sync_columns(num)
    for slot, k in ((0, cell.sss_index), (10, cell.sss_index + 168)):
        u = num.useful_start(slot, num.symbols_per_slot - 2)
        col = wf.demodulate_symbol(fr.samples[u:u + num.fft_size], num)
        assert np.allclose(col[sig], wf.sss_sequence(k, nid2=cell.pss_root_index), atol=1e-9)
        assert np.allclose(col[np.setdiff1d(guard, sig)], 0, atol=1e-9)


def test_ofdm_roundtrip_exact():
    rng = np.random.default_rng(1)
    col = rng.standard_normal(1200) + 1j * rng.standard_normal(1200)
    back = wf.demodulate_symbol(wf.ofdm_symbol(col))
    assert np.max(np.abs(back - col)) / np.max(np.abs(col)) < 1e-9


def test_grid_roundtrip_frame():
    cell = CellConfig(42)
    num = cell.numerology()
    grid = wf.frame_grid(cell, 3)
    back = wf.demodulate_frame(wf.grid_to_time(grid, num), num)
    assert np.max(np.abs(back - grid)) < 1e-9


def test_consecutive_frames_continuous():
    cell = CellConfig(11)
    two = wf.generate(cell, 2)
    assert len(two) == 2 * 307200
    assert np.array_equal(two.samples[307200:], wf.modulate_frame(cell, 1).samples)


def test_pilots_only_mode():
    cell = CellConfig(11)
    grid = wf.frame_grid(cell, 0, data_fill=False)
    occupied = np.count_nonzero(np.abs(grid) > 0)
    # 40 CRS symbols x 200 pilots + 2 PSS + 2 SSS symbols x 62
    assert occupied == 40 * 200 + 4 * 62
