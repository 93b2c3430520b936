"""Stochastic channels: TDL profiles with Jakes Doppler, per-RE synthesis,
noise application, covariance estimation, and binary CIR datasets.

Every tap is a Rayleigh-fading complex Gaussian process generated by a
sum-of-sinusoids with uniformly distributed arrival angles, evaluated at
OFDM-symbol granularity (the channel is constant within a symbol). Taps are
independent across antenna pairs; there is no spatial correlation. The
frequency response on subcarrier s is sum_k a_k exp(-j 2 pi s df tau_k).

SNR convention used throughout the project: unit symbol energy and unit
average channel gain, so SNR = 1/N0 and SNR[dB] = -10 log10(N0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .slot import SlotConfig

NUM_SINUSOIDS = 32
_CIR_MAGIC = b"CIRD"
_CIR_VERSION = 1


@dataclass(frozen=True)
class TdlProfile:
    """Tapped-delay-line power-delay profile with a Doppler spread."""

    name: str
    delays_s: np.ndarray   # ascending, seconds
    powers: np.ndarray     # linear, sums to 1
    doppler_hz: float
    delay_spread_s: float  # the scale the delays were drawn at

    def __post_init__(self):
        d = np.asarray(self.delays_s, dtype=np.float64)
        p = np.asarray(self.powers, dtype=np.float64)
        object.__setattr__(self, "delays_s", d)
        object.__setattr__(self, "powers", p)
        if d.ndim != 1 or p.shape != d.shape:
            raise ValueError("delays and powers must be 1-D and matched")
        if (d < 0).any() or (np.diff(d) < 0).any():
            raise ValueError("tap delays must be non-negative and ascending")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"tap powers must sum to 1, got {p.sum()}")

    def with_doppler(self, doppler_hz: float) -> "TdlProfile":
        return TdlProfile(self.name, self.delays_s, self.powers, doppler_hz, self.delay_spread_s)


def _profile(name, delays_norm, powers_db, delay_spread_s, doppler_hz) -> TdlProfile:
    p = 10.0 ** (np.asarray(powers_db, dtype=np.float64) / 10.0)
    p /= p.sum()
    return TdlProfile(
        name=name,
        delays_s=np.asarray(delays_norm, dtype=np.float64) * delay_spread_s,
        powers=p,
        doppler_hz=doppler_hz,
        delay_spread_s=delay_spread_s,
    )


# Desk-scale 5-tap approximations of the named 38.901 profiles; the tests
# depend only on these declared values.
def tdl_a(delay_spread_s=30e-9, doppler_hz=50.0) -> TdlProfile:
    return _profile("tdl_a", [0.0, 0.7, 1.5, 2.4, 3.6], [0.0, -3.0, -6.5, -10.0, -14.0],
                    delay_spread_s, doppler_hz)


def tdl_b(delay_spread_s=100e-9, doppler_hz=400.0) -> TdlProfile:
    return _profile("tdl_b", [0.0, 0.35, 0.9, 1.7, 3.0], [0.0, -1.5, -3.3, -5.7, -9.0],
                    delay_spread_s, doppler_hz)


def tdl_c(delay_spread_s=300e-9, doppler_hz=100.0) -> TdlProfile:
    return _profile("tdl_c", [0.0, 0.7, 1.4, 2.6, 4.4], [-1.0, 0.0, -2.4, -4.8, -8.2],
                    delay_spread_s, doppler_hz)


def tdl_d(delay_spread_s=60e-9, doppler_hz=20.0) -> TdlProfile:
    # dominant first tap: a flat-ish, slowly fading channel
    return _profile("tdl_d", [0.0, 0.5, 1.2, 2.0, 3.2], [0.0, -9.0, -12.0, -15.0, -18.0],
                    delay_spread_s, doppler_hz)


PROFILES = {"tdl_a": tdl_a, "tdl_b": tdl_b, "tdl_c": tdl_c, "tdl_d": tdl_d}


@dataclass(frozen=True)
class ChannelRealization:
    """Per-RE MIMO matrices for every stream plus the noise power."""

    h: np.ndarray  # (U, S, T, B, N_u) complex
    n0: float

    def effective(self, cfg: SlotConfig) -> np.ndarray:
        """Post-beamforming per-stream channel, (U, S, T, B)."""
        beams = cfg.beam_matrix  # (U, N_u)
        return np.einsum("ustbn,un->ustb", self.h, beams)


def cir_to_freq(tap_amps: np.ndarray, delays_s: np.ndarray, subcarrier_spacing_hz: float,
                num_subcarriers: int) -> np.ndarray:
    """Frequency response H[s] = sum_k a_k exp(-j 2 pi s df tau_k).

    tap_amps: (..., taps) complex amplitudes at one time instant.
    Returns (..., S).
    """
    s = np.arange(num_subcarriers)
    phase = np.exp(-2j * np.pi * subcarrier_spacing_hz * np.outer(delays_s, s))  # (taps, S)
    return np.tensordot(tap_amps, phase, axes=([-1], [0]))


def sample_tdl(profile: TdlProfile, cfg: SlotConfig, rng: np.random.Generator,
               num_sinusoids: int = NUM_SINUSOIDS) -> np.ndarray:
    """One slot of fading for every antenna pair of one UE: (S, T, B, N_u).

    Jakes-type Doppler by sum of sinusoids with uniform angles, independent
    taps per antenna pair, tap powers per the profile.
    """
    max_delay = float(profile.delays_s.max())
    if max_delay > cfg.cp_duration_s:
        raise ValueError(
            f"tap delay {max_delay:.3g}s exceeds the cyclic prefix bound {cfg.cp_duration_s:.3g}s")
    b, nu, taps = cfg.bs_antennas, cfg.ue_antennas, profile.delays_s.size
    t_sym = np.arange(cfg.num_symbols) * cfg.symbol_duration_s
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(b, nu, taps, num_sinusoids))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(b, nu, taps, num_sinusoids))
    omega = 2.0 * np.pi * profile.doppler_hz * np.cos(angles)  # (b, nu, taps, ns)
    arg = omega[..., None] * t_sym + phases[..., None]         # (b, nu, taps, ns, T)
    gains = np.exp(1j * arg).sum(axis=3) / np.sqrt(num_sinusoids)  # (b, nu, taps, T)
    gains *= np.sqrt(profile.powers)[:, None]
    h = cir_to_freq(np.moveaxis(gains, 3, 2), profile.delays_s,
                    cfg.subcarrier_spacing_hz, cfg.num_subcarriers)  # (b, nu, T, S)
    return np.moveaxis(h, (0, 1, 2, 3), (2, 3, 1, 0))  # (S, T, b, nu)


def apply_channel(tx_antenna_grids: np.ndarray, realization: ChannelRealization,
                  rng: np.random.Generator) -> np.ndarray:
    """Received grid y = sum_u H_u x_u + n with n ~ CN(0, N0 I) per RE.

    tx_antenna_grids: (U, S, T, N_u) post-beamforming transmit signals.
    Returns (S, T, B).
    """
    y = np.einsum("ustbn,ustn->stb", realization.h, tx_antenna_grids)
    if realization.n0 > 0:
        scale = np.sqrt(realization.n0 / 2.0)
        noise = scale * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        y = y + noise
    return y


# ---------------------------------------------------------------------------
# channel sources
# ---------------------------------------------------------------------------


class TdlChannelSource:
    """Per-UE TDL profiles; UE u's draw depends only on (seed key, u).

    With different profiles per UE this is the two-profile evaluation
    channel; each UE's marginal is identical to a single-profile source
    seeded the same way.
    """

    def __init__(self, profiles):
        self.profiles = tuple(profiles)

    def describe(self) -> str:
        return "+".join(f"{p.name}({p.doppler_hz:g}Hz,{p.delay_spread_s * 1e9:g}ns)" for p in self.profiles)

    def sample(self, cfg: SlotConfig, seed_key) -> np.ndarray:
        """(U, S, T, B, N_u) channel draw for one slot."""
        if len(self.profiles) < cfg.num_ues:
            raise ValueError(f"source has {len(self.profiles)} profiles for {cfg.num_ues} UEs")
        out = np.empty((cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols,
                        cfg.bs_antennas, cfg.ue_antennas), dtype=np.complex128)
        base = seed_key if isinstance(seed_key, tuple) else (int(seed_key),)
        for u in range(cfg.num_ues):
            rng = np.random.default_rng(base + (u,))
            out[u] = sample_tdl(self.profiles[u], cfg, rng)
        return out


class CirDatasetSource:
    """Replays stored channel grids, sampling indices with replacement."""

    def __init__(self, dataset: "CirDataset", limit: int | None = None):
        self.dataset = dataset
        self.limit = dataset.h.shape[0] if limit is None else min(limit, dataset.h.shape[0])
        if self.limit == 0:
            raise ValueError("empty CIR dataset")

    def describe(self) -> str:
        return f"cir[{self.limit}]"

    def sample(self, cfg: SlotConfig, seed_key) -> np.ndarray:
        h = self.dataset.h
        if h.shape[1] < cfg.num_ues or h.shape[4] != cfg.num_subcarriers or h.shape[5] != cfg.num_symbols:
            raise ValueError(f"dataset dims {h.shape[1:]} incompatible with slot config")
        base = seed_key if isinstance(seed_key, tuple) else (int(seed_key),)
        rng = np.random.default_rng(base + (0xC1D,))
        idx = int(rng.integers(0, self.limit))
        # stored order (sample, u, rx, tx, s, t) -> (u, s, t, rx, tx)
        return np.transpose(h[idx, :cfg.num_ues], (0, 3, 4, 1, 2)).astype(np.complex128)


def doubletdl(profile_a: TdlProfile | None = None, profile_b: TdlProfile | None = None) -> TdlChannelSource:
    """The two-UE evaluation channel: UE1 on one profile, UE2 on another."""
    return TdlChannelSource([profile_a or tdl_b(), profile_b or tdl_c()])


# ---------------------------------------------------------------------------
# covariance estimation for LMMSE channel estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceModel:
    """Sample time/frequency covariance of per-stream channel coefficients."""

    freq: np.ndarray  # (S, S) complex, Hermitian PSD
    time: np.ndarray  # (T, T) complex, Hermitian PSD
    num_samples: int

    def __post_init__(self):
        for mat in (self.freq, self.time):
            assert np.allclose(mat, mat.conj().T, atol=1e-9)
            eig = np.linalg.eigvalsh(mat)
            assert eig.min() >= -1e-9 * max(np.trace(mat).real, 1.0)


def estimate_covariance(source, cfg: SlotConfig, num_samples: int, seed: int = 0) -> CovarianceModel:
    """Sample covariance of the effective per-stream channel across a source.

    Frequency covariance averages over symbols, antennas, UEs and draws;
    time covariance averages over subcarriers likewise. Both are
    Hermitian-symmetrized.
    """
    if num_samples < 100:
        raise ValueError(f"need at least 100 samples for covariance estimation, got {num_samples}")
    s_dim, t_dim = cfg.num_subcarriers, cfg.num_symbols
    r_f = np.zeros((s_dim, s_dim), dtype=np.complex128)
    r_t = np.zeros((t_dim, t_dim), dtype=np.complex128)
    beams = cfg.beam_matrix
    nf = nt = 0
    for i in range(num_samples):
        h = source.sample(cfg, (seed, 0xC0F, i))
        eff = np.einsum("ustbn,un->ustb", h, beams)  # (U, S, T, B)
        cols_f = eff.transpose(0, 2, 3, 1).reshape(-1, s_dim)   # rows: (u,t,b)
        cols_t = eff.transpose(0, 1, 3, 2).reshape(-1, t_dim)
        r_f += cols_f.T @ cols_f.conj()
        r_t += cols_t.T @ cols_t.conj()
        nf += cols_f.shape[0]
        nt += cols_t.shape[0]
    r_f /= nf
    r_t /= nt
    r_f = 0.5 * (r_f + r_f.conj().T)
    r_t = 0.5 * (r_t + r_t.conj().T)
    return CovarianceModel(freq=r_f, time=r_t, num_samples=num_samples)


# ---------------------------------------------------------------------------
# binary CIR dataset format
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CirDataset:
    """Stored frequency responses, shape (num, U, B, N_u, S, T) complex64."""

    h: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.h.shape[0]


def dataset_write(path, samples: np.ndarray) -> None:
    """Write samples (num, U, B, N_u, S, T) complex to the CIRD format.

    Layout: magic 'CIRD', u32 version=1, u32 {num, S, T, B, N_u, U}, then
    little-endian f32 (re, im) pairs in (sample, u, rx, tx, s, t) order.
    """
    h = np.asarray(samples)
    if h.ndim != 6:
        raise ValueError(f"expected 6-D (num,U,B,N_u,S,T), got shape {h.shape}")
    num, u, b, nu, s, t = h.shape
    header = _CIR_MAGIC + struct.pack("<7I", _CIR_VERSION, num, s, t, b, nu, u)
    inter = np.empty(h.shape + (2,), dtype="<f4")
    inter[..., 0] = h.real
    inter[..., 1] = h.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(inter.tobytes())


def dataset_read(path) -> CirDataset:
    """Read a CIRD file, validating magic, version and exact payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 32:
        raise ValueError(f"{path}: truncated CIR dataset header")
    if blob[:4] != _CIR_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_CIR_MAGIC!r}")
    version, num, s, t, b, nu, u = struct.unpack("<7I", blob[4:32])
    if version != _CIR_VERSION:
        raise ValueError(f"{path}: unsupported CIR dataset version {version}")
    expected = num * u * b * nu * s * t * 2 * 4
    payload = blob[32:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected} (truncated or trailing data)")
    flat = np.frombuffer(payload, dtype="<f4").reshape(num, u, b, nu, s, t, 2)
    return CirDataset(h=(flat[..., 0] + 1j * flat[..., 1]).astype(np.complex64))


def generate_dataset(source, cfg: SlotConfig, num_samples: int, seed: int) -> np.ndarray:
    """Draw channels from a source into the (num, U, B, N_u, S, T) layout."""
    out = np.empty((num_samples, cfg.num_ues, cfg.bs_antennas, cfg.ue_antennas,
                    cfg.num_subcarriers, cfg.num_symbols), dtype=np.complex64)
    for i in range(num_samples):
        h = source.sample(cfg, (seed, 0xDA7A, i))  # (U, S, T, B, N_u)
        out[i] = np.transpose(h, (0, 3, 4, 1, 2))
    return out
