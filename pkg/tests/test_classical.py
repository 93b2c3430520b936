import dataclasses

import numpy as np
import pytest

from nrxsim import channel as ch
from nrxsim import classical as rx
from nrxsim import slot as sl
from nrxsim.constellation import build_constellation


def cfg_1ue(**kw):
    kw.setdefault("num_ues", 1)
    return sl.SlotConfig(**kw)


def flat_y_from_pilots(cfg, book, h_eff):
    """Noiseless received grid containing only the pilots through h_eff."""
    y = np.zeros((cfg.num_subcarriers, cfg.num_symbols, cfg.bs_antennas), dtype=complex)
    for u in range(cfg.num_ues):
        y += book.values[u][..., None] * h_eff[u]
    return y


# ---------------------------------------------------------------------------
# LS estimation
# ---------------------------------------------------------------------------


def test_ls_flat_channel_exact():
    cfg = cfg_1ue()
    book = sl.generate_pilots(cfg, 0)
    h = np.array([0.3 - 1.1j, -0.8 + 0.2j, 1.0 + 0j, 0.1 + 0.9j])
    h_eff = np.broadcast_to(h, (1, cfg.num_subcarriers, cfg.num_symbols, 4))
    est = rx.ls_estimate(flat_y_from_pilots(cfg, book, h_eff), book, cfg)
    np.testing.assert_allclose(est.h_eff, h_eff, atol=1e-12)


def test_ls_linear_in_frequency_exact():
    """Comb-2 linear interpolation is exact for channels linear in s."""
    cfg = sl.SlotConfig(num_ues=2)
    book = sl.generate_pilots(cfg, 1)
    s = np.arange(cfg.num_subcarriers, dtype=float)
    h_eff = np.zeros((2, cfg.num_subcarriers, cfg.num_symbols, 4), dtype=complex)
    for u in range(2):
        slope = (0.02 + 0.03j) * (u + 1)
        h_eff[u] = (1.0 + slope * s)[:, None, None] * np.ones(4)
    est = rx.ls_estimate(flat_y_from_pilots(cfg, book, h_eff), book, cfg)
    np.testing.assert_allclose(est.h_eff, h_eff, atol=1e-10)


def test_ls_pilot_re_mse_equals_n0():
    """Pilot-RE estimation error is N0 for unit-modulus pilots (MC oracle,
    vectorized over 10^4 draws along the antenna axis)."""
    draws = 10_000
    cfg = cfg_1ue(bs_antennas=draws, num_subcarriers=4)
    book = sl.generate_pilots(cfg, 2)
    rng = np.random.default_rng(3)
    n0 = 0.21
    h = (rng.standard_normal(draws) + 1j * rng.standard_normal(draws)) / np.sqrt(2)
    h_eff = np.broadcast_to(h, (1, 4, cfg.num_symbols, draws))
    y = flat_y_from_pilots(cfg, book, h_eff)
    noise = np.sqrt(n0 / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    est = rx.ls_estimate(y + noise, book, cfg)
    pmask = book.mask(0)
    err = est.h_eff[0][pmask] - h_eff[0][pmask]
    mse = np.mean(np.abs(err) ** 2)
    assert abs(mse - n0) / n0 < 0.05


def test_ls_requires_pilots():
    with pytest.raises(ValueError):
        cfg_1ue(pilot_symbols=())


# ---------------------------------------------------------------------------
# LMMSE estimation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tdl_setup():
    cfg = cfg_1ue(bs_antennas=4)
    src = ch.TdlChannelSource([ch.tdl_b()])
    cov = ch.estimate_covariance(src, cfg, num_samples=600, seed=4)
    return cfg, src, cov


def test_lmmse_matches_ls_at_pilots_when_noise_vanishes(tdl_setup):
    cfg, src, _ = tdl_setup
    # full-rank pilot covariance is the stated precondition for the limit
    s_dim, t_dim = cfg.num_subcarriers, cfg.num_symbols
    cov = ch.CovarianceModel(
        freq=np.eye(s_dim) + 0.4 * np.ones((s_dim, s_dim)),
        time=np.eye(t_dim) + 0.4 * np.ones((t_dim, t_dim)),
        num_samples=1)
    book = sl.generate_pilots(cfg, 5)
    h = src.sample(cfg, (5,))
    h_eff = np.einsum("ustbn,un->ustb", h, cfg.beam_matrix)
    y = flat_y_from_pilots(cfg, book, h_eff)
    ls = rx.ls_estimate(y, book, cfg)
    lm = rx.lmmse_estimate(y, book, cfg, cov, n0=1e-10)
    pmask = book.mask(0)
    dev = np.abs(lm.h_eff[0][pmask] - ls.h_eff[0][pmask])
    assert dev.max() < 1e-6


def test_lmmse_dominates_ls_on_correlated_channels(tdl_setup):
    cfg, src, cov = tdl_setup
    n0 = 10 ** (-6 / 10)
    rng = np.random.default_rng(6)
    se_ls = se_lm = 0.0
    for i in range(1000):
        book = sl.generate_pilots(cfg, 100 + i)
        h = src.sample(cfg, (6, i))
        h_eff = np.einsum("ustbn,un->ustb", h, cfg.beam_matrix)
        y = flat_y_from_pilots(cfg, book, h_eff)
        y += np.sqrt(n0 / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        se_ls += np.mean(np.abs(rx.ls_estimate(y, book, cfg).h_eff - h_eff) ** 2)
        se_lm += np.mean(np.abs(rx.lmmse_estimate(y, book, cfg, cov, n0).h_eff - h_eff) ** 2)
    assert se_lm / 1000 <= se_ls / 1000 + 1e-6


def test_lmmse_flat_channel_approaches_pilot_average():
    """Rank-one all-ones frequency covariance averages the pilots; the MSE
    approaches N0 / num_pilots (closed-form oracle via direct solve)."""
    cfg = cfg_1ue(num_subcarriers=8, pilot_symbols=(2,), bs_antennas=1, comb_size=1)
    s_dim, t_dim = 8, cfg.num_symbols
    cov = ch.CovarianceModel(freq=np.ones((s_dim, s_dim), dtype=complex),
                             time=np.ones((t_dim, t_dim), dtype=complex), num_samples=1)
    rng = np.random.default_rng(7)
    n0 = 0.01
    draws = 4000
    sq = 0.0
    for i in range(draws):
        book = sl.generate_pilots(cfg, i)
        h = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2)
        y = book.values[0][..., None] * h
        y += np.sqrt(n0 / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        est = rx.lmmse_estimate(y, book, cfg, cov, n0)
        # direct-solve oracle: frequency stage W = R[:,p](R[p,p]+n0 I)^-1 on
        # the raw pilot LS, then the single-pilot-symbol time stage 1/(1+n0)
        raw = (y[:, 2, 0] * book.values[0][:, 2].conj())
        w = np.ones((8, 8)) @ np.linalg.inv(np.ones((8, 8)) + n0 * np.eye(8))
        expected_col = (w @ raw) / (1.0 + n0)
        np.testing.assert_allclose(est.h_eff[0, :, 2, 0], expected_col, atol=1e-9)
        sq += np.mean(np.abs(est.h_eff[0, :, 2, 0] - h) ** 2)
    # pilot averaging: MSE ~= N0/P plus the small LMMSE shrinkage bias
    assert 0.5 * n0 / 8 < sq / draws < 1.3 * n0 / 8


# ---------------------------------------------------------------------------
# LMMSE equalization
# ---------------------------------------------------------------------------


def test_equalize_siso_zero_noise_divides():
    h = np.full((1, 2, 2, 1), 0.4 - 0.6j)
    y = np.ones((2, 2, 1), dtype=complex) * (1.1 + 0.3j)
    z, nvar = rx.lmmse_equalize(y, rx.ChannelEstimate(h_eff=h), n0=0.0)
    np.testing.assert_allclose(z[0], y[..., 0] / h[0, ..., 0], rtol=1e-12)
    assert np.all(nvar > 0)


def test_equalize_orthogonal_columns_exact():
    h = np.zeros((2, 1, 1, 4), dtype=complex)
    h[0, 0, 0] = [1, 1, 0, 0]
    h[1, 0, 0] = [0, 0, 1, -1]
    x = np.array([0.7 + 0.2j, -0.5 + 0.5j])
    y = (np.moveaxis(h, 0, -1)[0, 0] @ x)[None, None, :]
    z, _ = rx.lmmse_equalize(y, rx.ChannelEstimate(h_eff=h), n0=0.0)
    np.testing.assert_allclose(z[:, 0, 0], x, atol=1e-12)


def test_equalize_2x4_noiseless_recovers_exactly():
    rng = np.random.default_rng(8)
    h = (rng.standard_normal((2, 3, 4, 4)) + 1j * rng.standard_normal((2, 3, 4, 4))) / np.sqrt(2)
    x = (rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))) / np.sqrt(2)
    y = np.einsum("ustb,ust->stb", h, x)
    z, _ = rx.lmmse_equalize(y, rx.ChannelEstimate(h_eff=h), n0=0.0)
    np.testing.assert_allclose(z, x, atol=1e-9)


# ---------------------------------------------------------------------------
# demapping
# ---------------------------------------------------------------------------


def test_qpsk_app_llr_closed_form():
    """Exact APP equals -2 sqrt(2) Re(y)/N0 and -2 sqrt(2) Im(y)/N0."""
    qpsk = build_constellation(2)
    rng = np.random.default_rng(9)
    y = rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)
    n0 = 10 ** rng.uniform(-2, 1, size=10_000)
    llr = rx.app_demap(y, qpsk, n0, mode="exact")
    np.testing.assert_allclose(llr[:, 0], -2 * np.sqrt(2) * y.real / n0, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(llr[:, 1], -2 * np.sqrt(2) * y.imag / n0, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("order", (2, 4, 6))
def test_zero_observation_gives_zero_sign_bit_llrs(order):
    """y = 0 zeroes every LLR whose bit splits the constellation into
    mirror-symmetric halves: all of QPSK, and the two quadrant bits of the
    higher orders (amplitude bits see asymmetric distances at y = 0)."""
    llr = rx.app_demap(np.array(0.0 + 0.0j), build_constellation(order), 0.8)
    np.testing.assert_allclose(llr[:2], 0.0, atol=1e-10)
    if order == 2:
        np.testing.assert_allclose(llr, 0.0, atol=1e-10)
    else:
        assert np.all(llr[2:] < 0)  # inner amplitudes are closer to y = 0


@pytest.mark.parametrize("order", (2, 4, 6))
def test_llr_sign_convention_noiseless(order):
    """ell > 0 iff bit 1, verified on every constellation point."""
    const = build_constellation(order)
    llr = rx.app_demap(const.points, const, 1e-4)
    np.testing.assert_array_equal(llr > 0, const.labels.astype(bool))


@pytest.mark.parametrize("order", (2, 4, 6))
def test_maxlog_bound_and_qpsk_sign_agreement(order):
    const = build_constellation(order)
    rng = np.random.default_rng(10)
    n = 100_000 if order == 2 else 20_000
    y = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    exact = rx.app_demap(y, const, 1.0, mode="exact")
    maxlog = rx.app_demap(y, const, 1.0, mode="maxlog")
    assert np.max(np.abs(exact - maxlog)) <= np.log(2.0 ** order) + 1e-9
    if order == 2:
        both = (np.abs(exact) >= 1e-9) & (np.abs(maxlog) >= 1e-9)
        assert (np.sign(exact[both]) == np.sign(maxlog[both])).all()


def test_masked_demap_quadrant_signs_match_qpsk():
    qpsk = build_constellation(2)
    c64 = build_constellation(6)
    rng = np.random.default_rng(11)
    y = rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)
    keep = (np.abs(y.real) > 1e-6) & (np.abs(y.imag) > 1e-6)
    y = y[keep]
    masked = rx.masked_demap(y, c64, 2, 0.5)
    matched = rx.app_demap(y, qpsk, 0.5)
    np.testing.assert_array_equal(np.sign(masked), np.sign(matched))
    # magnitudes do in general not match
    frac_diff = np.mean(np.abs(np.abs(masked) - np.abs(matched)) > 1e-6)
    assert frac_diff >= 0.99


def test_masked_demap_high_snr_recovers_bits():
    c16 = build_constellation(4)
    qpsk = build_constellation(2)
    llr = rx.masked_demap(qpsk.points, c16, 2, 1e-5)
    np.testing.assert_array_equal(llr > 0, qpsk.labels.astype(bool))


def test_masked_demap_validates_orders():
    c16 = build_constellation(4)
    with pytest.raises(ValueError):
        rx.masked_demap(np.array(0j), c16, 4, 1.0)
    with pytest.raises(ValueError):
        rx.masked_demap(np.array(0j), c16, 3, 1.0)


def test_demap_rejects_bad_noise_var():
    with pytest.raises(ValueError, match="positive"):
        rx.app_demap(np.array(0j), build_constellation(2), 0.0)


# ---------------------------------------------------------------------------
# K-Best and the ML oracle
# ---------------------------------------------------------------------------


def _random_instances(rng, n, b=4, u=2):
    h = (rng.standard_normal((n, b, u)) + 1j * rng.standard_normal((n, b, u))) / np.sqrt(2)
    return h


def test_kbest_single_stream_is_nearest_point():
    const = build_constellation(4)
    rng = np.random.default_rng(12)
    h = _random_instances(rng, 100, b=2, u=1)
    y = (rng.standard_normal((100, 2)) + 1j * rng.standard_normal((100, 2)))
    hard, _, _ = rx.kbest_detect(y, h, 0.1, [const], k=const.points.size)
    ml, _ = rx.ml_detect_exhaustive(y, h, [const])
    np.testing.assert_array_equal(hard, ml)


def test_kbest_full_width_matches_exhaustive_ml():
    const = build_constellation(4)
    rng = np.random.default_rng(13)
    n = 200
    h = _random_instances(rng, n)
    x_idx = rng.integers(0, 16, size=(n, 2))
    x = const.points[x_idx]
    y = np.einsum("nbu,nu->nb", h, x)
    y += 0.3 * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    hard, _, _ = rx.kbest_detect(y, h, 0.18, [const, const], k=16 ** 2)
    ml, _ = rx.ml_detect_exhaustive(y, h, [const, const])
    assert (hard == ml).all()


def test_kbest_noiseless_recovery_with_moderate_k():
    const = build_constellation(4)
    rng = np.random.default_rng(14)
    n = 300
    h = _random_instances(rng, n)
    x_idx = rng.integers(0, 16, size=(n, 2))
    y = np.einsum("nbu,nu->nb", h, const.points[x_idx])
    hard, llrs, _ = rx.kbest_detect(y, h, 1e-9, [const, const], k=16)
    np.testing.assert_array_equal(hard, x_idx)
    # LLR signs reproduce the transmitted labels
    for u in range(2):
        bits = const.labels[x_idx[:, u]]
        np.testing.assert_array_equal(llrs[u] > 0, bits.astype(bool))


def test_kbest_metric_monotone_in_k():
    const = build_constellation(4)
    rng = np.random.default_rng(15)
    h = _random_instances(rng, 50)
    y = (rng.standard_normal((50, 4)) + 1j * rng.standard_normal((50, 4)))
    prev = None
    for k in (1, 2, 4, 8, 16, 64, 256):
        _, _, best = rx.kbest_detect(y, h, 0.2, [const, const], k=k)
        if prev is not None:
            assert (best <= prev + 1e-12).all()
        prev = best


def test_kbest_rejects_bad_k():
    const = build_constellation(2)
    with pytest.raises(ValueError):
        rx.kbest_detect(np.zeros((1, 2), dtype=complex), np.zeros((1, 2, 1), dtype=complex), 0.1, [const], k=0)


def test_ml_oracle_guard():
    const = build_constellation(6)
    with pytest.raises(ValueError, match="2\\^20"):
        rx.ml_detect_exhaustive(np.zeros((1, 4), dtype=complex),
                                np.zeros((1, 4, 4), dtype=complex), [const] * 4)


def test_ml_noiseless_returns_transmitted_tuple():
    const = build_constellation(2)
    rng = np.random.default_rng(16)
    h = _random_instances(rng, 64)
    x_idx = rng.integers(0, 4, size=(64, 2))
    y = np.einsum("nbu,nu->nb", h, const.points[x_idx])
    ml, metric = rx.ml_detect_exhaustive(y, h, [const, const])
    np.testing.assert_array_equal(ml, x_idx)
    assert np.max(metric) < 1e-18
