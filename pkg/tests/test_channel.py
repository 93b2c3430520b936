import dataclasses

import numpy as np
import pytest
from scipy.special import j0

from nrxsim import channel as ch
from nrxsim.slot import SlotConfig


def tiny_cfg(**kw):
    defaults = dict(num_subcarriers=4, num_symbols=4, pilot_symbols=(1,),
                    num_ues=1, comb_size=1, bs_antennas=1, ue_antennas=1)
    defaults.update(kw)
    return SlotConfig(**defaults)


def single_tap(doppler_hz):
    return ch.TdlProfile("flat", np.array([0.0]), np.array([1.0]), doppler_hz, 0.0)


# ---------------------------------------------------------------------------
# TDL sampling
# ---------------------------------------------------------------------------


def test_profile_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        ch.TdlProfile("bad", np.array([0.0, 1e-9]), np.array([0.6, 0.6]), 10.0, 1e-9)
    with pytest.raises(ValueError, match="ascending"):
        ch.TdlProfile("bad", np.array([1e-9, 0.0]), np.array([0.5, 0.5]), 10.0, 1e-9)


def test_zero_doppler_is_time_constant():
    cfg = tiny_cfg(num_symbols=14)
    h = ch.sample_tdl(ch.tdl_b(doppler_hz=0.0), cfg, np.random.default_rng(0))
    assert np.max(np.abs(h - h[:, :1])) < 1e-12


def test_delay_beyond_cyclic_prefix_rejected():
    cfg = tiny_cfg()
    bad = ch.TdlProfile("late", np.array([0.0, 3e-6]), np.array([0.5, 0.5]), 10.0, 3e-6)
    with pytest.raises(ValueError, match="cyclic prefix"):
        ch.sample_tdl(bad, cfg, np.random.default_rng(0))


def test_per_tap_power_monte_carlo():
    """Recover tap amplitudes from the frequency response by least squares
    and compare their empirical powers to the profile (the MC oracle)."""
    cfg = tiny_cfg(num_subcarriers=24, num_symbols=1, pilot_symbols=(0,))
    profile = ch.tdl_b(doppler_hz=0.0)
    phase = np.exp(-2j * np.pi * cfg.subcarrier_spacing_hz
                   * np.outer(profile.delays_s, np.arange(24)))
    pinv = np.linalg.pinv(phase)
    draws = 10_000
    powers = np.zeros(profile.powers.size)
    for i in range(draws):
        h = ch.sample_tdl(profile, cfg, np.random.default_rng((1, i)))[:, 0, 0, 0]
        amps = h @ pinv
        powers += np.abs(amps) ** 2
    powers /= draws
    np.testing.assert_allclose(powers, profile.powers, rtol=0.05)


def test_doppler_autocorrelation_matches_bessel():
    """Temporal autocorrelation at lag tau is J0(2 pi f_D tau) within 0.05."""
    cfg = tiny_cfg(num_subcarriers=1, num_symbols=14, pilot_symbols=(0,))
    fd = 400.0
    profile = single_tap(fd)
    draws = 10_000
    acc = np.zeros(cfg.num_symbols, dtype=np.complex128)
    for i in range(draws):
        g = ch.sample_tdl(profile, cfg, np.random.default_rng((2, i)))[0, :, 0, 0]
        for lag in range(cfg.num_symbols):
            acc[lag] += np.mean(g[: cfg.num_symbols - lag].conj() * g[lag:])
    acc /= draws
    lags_s = np.arange(cfg.num_symbols) * cfg.symbol_duration_s
    expected = j0(2 * np.pi * fd * lags_s)
    assert np.max(np.abs(acc.real - expected)) <= 0.05
    assert np.max(np.abs(acc.imag)) <= 0.05


@pytest.mark.parametrize("name", sorted(ch.PROFILES))
def test_energy_normalization_all_profiles(name):
    cfg = tiny_cfg(num_subcarriers=4, num_symbols=2, pilot_symbols=(0,))
    profile = ch.PROFILES[name]()
    total = 0.0
    draws = 10_000
    for i in range(draws):
        h = ch.sample_tdl(profile, cfg, np.random.default_rng((3, i)))
        total += np.mean(np.abs(h) ** 2)
    assert abs(total / draws - 1.0) < 0.05


# ---------------------------------------------------------------------------
# frequency synthesis
# ---------------------------------------------------------------------------


def test_cir_to_freq_single_tap_at_zero():
    h = ch.cir_to_freq(np.array([1.0 + 0j]), np.array([0.0]), 30e3, 8)
    np.testing.assert_allclose(h, np.ones(8))


def test_cir_to_freq_phase_slope():
    tau, df, s = 0.4e-6, 30e3, 16
    a = 0.7 - 0.2j
    h = ch.cir_to_freq(np.array([a]), np.array([tau]), df, s)
    np.testing.assert_allclose(np.abs(h), abs(a), rtol=1e-12)
    slopes = np.angle(h[1:] / h[:-1])
    np.testing.assert_allclose(slopes, -2 * np.pi * df * tau, rtol=1e-9)


def test_cir_to_freq_two_tap_null():
    df, s0 = 30e3, 12
    tau = 1.0 / (2 * df * s0)
    h = ch.cir_to_freq(np.array([1.0 + 0j, 1.0 + 0j]), np.array([0.0, tau]), df, 24)
    assert abs(h[s0]) < 1e-9
    assert abs(h[0] - 2.0) < 1e-12


# ---------------------------------------------------------------------------
# channel application
# ---------------------------------------------------------------------------


def test_apply_channel_identity_and_superposition():
    cfg = tiny_cfg(num_subcarriers=3, num_symbols=2, pilot_symbols=(0,))
    x = np.random.default_rng(4).normal(size=(1, 3, 2, 1)) + 0j
    h = np.ones((1, 3, 2, 1, 1), dtype=complex)
    y = ch.apply_channel(x, ch.ChannelRealization(h=h, n0=0.0), np.random.default_rng(0))
    np.testing.assert_allclose(y[..., 0], x[0, ..., 0])

    rng = np.random.default_rng(5)
    h2 = rng.normal(size=(2, 3, 2, 4, 1)) + 1j * rng.normal(size=(2, 3, 2, 4, 1))
    x2 = rng.normal(size=(2, 3, 2, 1)) + 1j * rng.normal(size=(2, 3, 2, 1))
    y2 = ch.apply_channel(x2, ch.ChannelRealization(h=h2, n0=0.0), rng)
    expected = np.einsum("ustbn,ustn->stb", h2, x2)
    np.testing.assert_allclose(y2, expected, rtol=1e-12)


def test_apply_channel_linearity():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(2, 4, 3, 2, 2)) + 1j * rng.normal(size=(2, 4, 3, 2, 2))
    x = rng.normal(size=(2, 4, 3, 2)) + 1j * rng.normal(size=(2, 4, 3, 2))
    real = ch.ChannelRealization(h=h, n0=0.0)
    y1 = ch.apply_channel(x, real, rng)
    y2 = ch.apply_channel(2.5 * x, real, rng)
    np.testing.assert_allclose(y2, 2.5 * y1, rtol=1e-12)


def test_noise_power_monte_carlo():
    n_res = (500, 50)  # 25k REs x 4 antennas = 1e5 noise samples
    h = np.zeros((1,) + n_res + (4, 1), dtype=complex)
    n0 = 0.37
    y = ch.apply_channel(np.zeros((1,) + n_res + (1,), dtype=complex),
                         ch.ChannelRealization(h=h, n0=n0), np.random.default_rng(7))
    measured = np.mean(np.abs(y) ** 2)
    assert abs(measured - n0) / n0 < 0.03


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------


def test_doubletdl_marginals_match_single_profile():
    cfg2 = SlotConfig(num_subcarriers=8, num_ues=2)
    cfg1 = dataclasses.replace(cfg2, num_ues=1)
    double = ch.doubletdl()
    single_b = ch.TdlChannelSource([ch.tdl_b()])
    h2 = double.sample(cfg2, (42,))
    h1 = single_b.sample(cfg1, (42,))
    np.testing.assert_array_equal(h2[0], h1[0])
    # and UE2 really uses the other profile
    single_c = ch.TdlChannelSource([ch.tdl_c(), ch.tdl_c()])
    np.testing.assert_array_equal(h2[1], single_c.sample(cfg2, (42,))[1])


def test_source_same_seed_same_draw():
    cfg = SlotConfig(num_subcarriers=8)
    src = ch.doubletdl()
    np.testing.assert_array_equal(src.sample(cfg, (9,)), src.sample(cfg, (9,)))
    assert not np.array_equal(src.sample(cfg, (9,)), src.sample(cfg, (10,)))


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------


class IidSource:
    def sample(self, cfg, seed_key):
        rng = np.random.default_rng(tuple(seed_key) + (0xF,))
        shape = (cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols,
                 cfg.bs_antennas, cfg.ue_antennas)
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def test_covariance_flat_channel_is_rank_one_ones():
    cfg = tiny_cfg(num_subcarriers=6, num_symbols=3, pilot_symbols=(0,))
    src = ch.TdlChannelSource([single_tap(0.0)])
    cov = ch.estimate_covariance(src, cfg, num_samples=400, seed=1)
    scale = cov.freq[0, 0].real
    np.testing.assert_allclose(cov.freq, np.ones((6, 6)) * scale, atol=1e-9)
    eig = np.linalg.eigvalsh(cov.freq)
    assert eig[-1] > 100 * max(eig[-2], 1e-12)


def test_covariance_iid_channel_is_identity():
    cfg = tiny_cfg(num_subcarriers=8, num_symbols=4, pilot_symbols=(0,))
    cov = ch.estimate_covariance(IidSource(), cfg, num_samples=10_000, seed=2)
    off = cov.freq - np.diag(np.diag(cov.freq))
    assert np.max(np.abs(off)) <= 0.05
    np.testing.assert_allclose(np.diag(cov.freq).real, 1.0, atol=0.06)


def test_covariance_requires_samples():
    cfg = tiny_cfg()
    with pytest.raises(ValueError, match="at least 100"):
        ch.estimate_covariance(IidSource(), cfg, num_samples=10)


def test_covariance_psd_property():
    cfg = tiny_cfg(num_subcarriers=6, num_symbols=4, pilot_symbols=(0,))
    cov = ch.estimate_covariance(ch.TdlChannelSource([ch.tdl_c()]), cfg, 150, seed=3)
    for mat in (cov.freq, cov.time):
        eig = np.linalg.eigvalsh(mat)
        assert eig.min() >= -1e-9 * mat.trace().real


# ---------------------------------------------------------------------------
# CIR dataset files
# ---------------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    cfg = SlotConfig(num_subcarriers=6)
    samples = ch.generate_dataset(ch.doubletdl(), cfg, num_samples=5, seed=11)
    path = tmp_path / "chan.cird"
    ch.dataset_write(path, samples)
    loaded = ch.dataset_read(path)
    np.testing.assert_array_equal(loaded.h, samples.astype(np.complex64))


def test_dataset_empty_is_valid(tmp_path):
    path = tmp_path / "empty.cird"
    ch.dataset_write(path, np.zeros((0, 2, 4, 2, 6, 14), dtype=np.complex64))
    assert ch.dataset_read(path).num_samples == 0


def test_dataset_truncation_and_magic_errors(tmp_path):
    cfg = SlotConfig(num_subcarriers=6)
    samples = ch.generate_dataset(ch.doubletdl(), cfg, num_samples=2, seed=12)
    path = tmp_path / "chan.cird"
    ch.dataset_write(path, samples)
    blob = path.read_bytes()

    (tmp_path / "trunc.cird").write_bytes(blob[:-7])
    with pytest.raises(ValueError, match="truncated|expected"):
        ch.dataset_read(tmp_path / "trunc.cird")

    (tmp_path / "magic.cird").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        ch.dataset_read(tmp_path / "magic.cird")

    (tmp_path / "ver.cird").write_bytes(blob[:4] + b"\x09\x00\x00\x00" + blob[8:])
    with pytest.raises(ValueError, match="version"):
        ch.dataset_read(tmp_path / "ver.cird")


def test_dataset_source_replays_stored_channels(tmp_path):
    cfg = SlotConfig(num_subcarriers=6)
    samples = ch.generate_dataset(ch.doubletdl(), cfg, num_samples=4, seed=13)
    src = ch.CirDatasetSource(ch.CirDataset(h=samples.astype(np.complex64)), limit=2)
    h = src.sample(cfg, (0,))
    assert h.shape == (2, 6, 14, 4, 2)
    stored = np.transpose(samples, (0, 1, 4, 5, 2, 3))
    assert any(np.allclose(h, stored[i]) for i in range(2))
