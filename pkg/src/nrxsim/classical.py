"""Classical baseline receivers.

LS and LMMSE channel estimation, per-RE LMMSE equalization, exact-APP soft
demapping (with a mismatched/masked mode), K-Best detection, and an
exhaustive maximum-likelihood oracle. All estimators work on the effective
post-beamforming channel (one B-vector per stream per RE), which is also
what the neural receiver sees.

LLRs are logits per the global convention: positive favours bit 1. Exact
APP demapping of QPSK therefore equals -2*sqrt(2)*Re(y)/N0 for bit 0 and
-2*sqrt(2)*Im(y)/N0 for bit 1, which pins the convention end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import CovarianceModel
from .constellation import Constellation
from .slot import PilotBook, SlotConfig

LLR_CLIP = 20.0
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class ChannelEstimate:
    """Effective per-stream channel estimates on the full grid."""

    h_eff: np.ndarray  # (U, S, T, B) complex


# ---------------------------------------------------------------------------
# channel estimation
# ---------------------------------------------------------------------------


def _pilot_ls(y: np.ndarray, book: PilotBook, cfg: SlotConfig, ue: int):
    """Raw LS values at the UE's pilot REs: (n_comb, n_pilot_syms, B)."""
    sc = cfg.comb_subcarriers(ue)
    ps = np.asarray(cfg.pilot_symbols)
    p = book.values[ue][np.ix_(sc, ps)]
    obs = y[np.ix_(sc, ps)]  # (F, K, B)
    return obs * (p.conj() / np.abs(p) ** 2)[..., None], sc, ps


def _interp_freq_linear(raw: np.ndarray, sc: np.ndarray, num_subcarriers: int) -> np.ndarray:
    """Linear interpolation over subcarriers with linear edge extrapolation.

    raw: (F, ...) values at comb positions sc (uniformly spaced).
    """
    step = sc[1] - sc[0] if sc.size > 1 else 1
    s = np.arange(num_subcarriers)
    j = np.clip((s - sc[0]) // step, 0, max(sc.size - 2, 0))
    if sc.size == 1:
        return np.broadcast_to(raw[0], (num_subcarriers,) + raw.shape[1:]).copy()
    frac = (s - sc[j]) / step
    frac = frac.reshape((-1,) + (1,) * (raw.ndim - 1))
    return raw[j] + frac * (raw[j + 1] - raw[j])


def ls_estimate(y: np.ndarray, book: PilotBook, cfg: SlotConfig) -> ChannelEstimate:
    """LS at pilots, linear interpolation across the comb, nearest-pilot hold
    across time."""
    if not cfg.pilot_symbols:
        raise ValueError("LS estimation needs a non-empty pilot set")
    ps = np.asarray(cfg.pilot_symbols)
    t = np.arange(cfg.num_symbols)
    nearest = np.argmin(np.abs(t[:, None] - ps[None, :]), axis=1)  # ties -> earlier
    out = np.empty((cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols, cfg.bs_antennas),
                   dtype=np.complex128)
    for u in range(cfg.num_ues):
        raw, sc, _ = _pilot_ls(y, book, cfg, u)
        freq = _interp_freq_linear(raw, sc, cfg.num_subcarriers)  # (S, K, B)
        out[u] = freq[:, nearest, :]
    return ChannelEstimate(h_eff=out)


def lmmse_estimate(y: np.ndarray, book: PilotBook, cfg: SlotConfig,
                   cov: CovarianceModel, n0: float) -> ChannelEstimate:
    """Separable LMMSE smoothing of the pilot LS values.

    Wiener filtering along frequency (per pilot symbol), then along time,
    using the sample covariances. The observation noise level is N0 for
    unit-modulus pilots; it is floored at 1e-12 to keep the systems posed.
    """
    n0_eff = max(float(n0), _VAR_FLOOR)
    ps = np.asarray(cfg.pilot_symbols)
    out = np.empty((cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols, cfg.bs_antennas),
                   dtype=np.complex128)

    r_t = cov.time
    rtt = r_t[np.ix_(ps, ps)] + n0_eff * np.eye(ps.size)
    w_t = np.linalg.solve(rtt, r_t[:, ps].conj().T).conj().T  # (T, K)

    for u in range(cfg.num_ues):
        raw, sc, _ = _pilot_ls(y, book, cfg, u)
        r_f = cov.freq
        rpp = r_f[np.ix_(sc, sc)] + n0_eff * np.eye(sc.size)
        w_f = np.linalg.solve(rpp, r_f[:, sc].conj().T).conj().T  # (S, F)
        est_f = np.einsum("sf,fkb->skb", w_f, raw)
        out[u] = np.einsum("tk,skb->stb", w_t, est_f)
    return ChannelEstimate(h_eff=out)


# ---------------------------------------------------------------------------
# equalization
# ---------------------------------------------------------------------------


def lmmse_equalize(y: np.ndarray, est, n0: float):
    """Per-RE LMMSE equalizer with unbiased post-equalization statistics.

    y: (..., S, T, B); channel estimate (..., U, S, T, B), both optionally
    with one leading batch axis. Returns (z, nvar): unbiased per-stream
    symbol estimates (..., U, S, T) and demapping noise variances.
    """
    h_eff = est.h_eff if isinstance(est, ChannelEstimate) else est
    h = np.moveaxis(h_eff, -4, -1)  # (..., S, T, B, U)
    u = h.shape[-1]
    gram = np.einsum("...bu,...bv->...uv", h.conj(), h)
    a = gram + max(float(n0), 0.0) * np.eye(u)
    rhs = np.einsum("...bu,...b->...u", h.conj(), y)
    try:
        x_hat = np.linalg.solve(a, rhs[..., None])[..., 0]
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        a = a + _VAR_FLOOR * np.eye(u)
        x_hat = np.linalg.solve(a, rhs[..., None])[..., 0]
        a_inv = np.linalg.inv(a)
    # G H = I - n0 A^-1, so the unbiasing gain is mu_u = 1 - n0 [A^-1]_uu
    mu = 1.0 - float(n0) * np.einsum("...uu->...u", a_inv).real
    mu = np.clip(mu, _VAR_FLOOR, None)
    z = x_hat / mu
    nvar = np.clip((1.0 - mu) / mu, _VAR_FLOOR, None)
    return np.moveaxis(z, -1, -3), np.moveaxis(nvar, -1, -3)


# ---------------------------------------------------------------------------
# soft demapping
# ---------------------------------------------------------------------------


def _bit_masks(const: Constellation) -> np.ndarray:
    return const.labels.T.astype(bool)  # (m, 2^m), True where bit = 1


def app_demap(z: np.ndarray, const: Constellation, noise_var, mode: str = "exact") -> np.ndarray:
    """Per-bit LLRs from symbol observations in AWGN.

    exact: log-sum-exp over constellation points with CN densities
    exp(-|z - x|^2 / sigma^2); maxlog replaces log-sum-exp by max.
    """
    if mode not in ("exact", "maxlog"):
        raise ValueError(f"unknown demapping mode '{mode}'")
    nv = np.asarray(noise_var, dtype=np.float64)
    if np.any(nv <= 0):
        raise ValueError("noise variance must be positive")
    z = np.asarray(z, dtype=np.complex128)
    metric = -np.abs(z[..., None] - const.points) ** 2 / nv[..., None]
    masks = _bit_masks(const)

    def _reduce(vals):
        if mode == "maxlog":
            return vals.max(axis=-1)
        top = vals.max(axis=-1, keepdims=True)
        return (top + np.log(np.exp(vals - top).sum(axis=-1, keepdims=True)))[..., 0]

    llr = np.empty(z.shape + (const.order,), dtype=np.float64)
    for k in range(const.order):
        llr[..., k] = _reduce(metric[..., masks[k]]) - _reduce(metric[..., ~masks[k]])
    return llr


def masked_demap(z: np.ndarray, const_high: Constellation, m_low: int, noise_var) -> np.ndarray:
    """Mismatched demapping: run the higher-order demapper, keep the bit
    positions the Gray recursion assigns to the lower order (a label prefix).

    Signs match the matched demapper; magnitudes in general do not.
    """
    if m_low >= const_high.order:
        raise ValueError(f"target order {m_low} must be below the demapper order {const_high.order}")
    if m_low not in (2, 4):
        raise ValueError(f"no recursive sub-constellation of order {m_low}")
    return app_demap(z, const_high, noise_var, mode="exact")[..., :m_low]


# ---------------------------------------------------------------------------
# K-Best detection and the ML oracle
# ---------------------------------------------------------------------------


def kbest_detect(y: np.ndarray, h: np.ndarray, n0: float, constellations, k: int,
                 llr_clip: float = LLR_CLIP):
    """Breadth-first K-Best over streams with max-log LLRs from the list.

    y: (N, B) observations, h: (N, B, U) per-RE channels, one constellation
    per stream. Returns (hard symbol indices (N, U), llrs list of (N, m_u),
    best metrics (N,)). Missing counter-hypotheses are clipped at +-llr_clip.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(y, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    n, b, u = h.shape
    n0_eff = max(float(n0), _VAR_FLOOR)

    q, r = np.linalg.qr(h)                       # (N, B, U), (N, U, U)
    y_t = np.einsum("nbu,nb->nu", q.conj(), y)   # (N, U)

    cand_idx = np.zeros((n, 1, 0), dtype=np.int64)
    cand_sym = np.zeros((n, 1, 0), dtype=np.complex128)
    metrics = np.zeros((n, 1), dtype=np.float64)

    for level in range(u - 1, -1, -1):
        points = constellations[level].points
        c = points.size
        # interference of already-decided (higher) streams on this row
        if cand_sym.shape[2]:
            upper = np.einsum("nj,nkj->nk", r[:, level, level + 1:], cand_sym)
        else:
            upper = np.zeros((n, cand_idx.shape[1]))
        resid = (y_t[:, level, None, None] - upper[..., None]
                 - r[:, level, level, None, None] * points)
        new_metrics = (metrics[..., None] + np.abs(resid) ** 2).reshape(n, -1)
        keep = min(k, new_metrics.shape[1])
        if keep < new_metrics.shape[1]:
            part = np.argpartition(new_metrics, keep - 1, axis=1)[:, :keep]
        else:
            part = np.broadcast_to(np.arange(new_metrics.shape[1]), (n, new_metrics.shape[1])).copy()
        metrics = np.take_along_axis(new_metrics, part, axis=1)
        parent, sym_choice = part // c, part % c
        cand_idx = np.concatenate(
            [np.take_along_axis(cand_idx, parent[..., None], axis=1), sym_choice[..., None]], axis=2)
        cand_sym = np.concatenate(
            [np.take_along_axis(cand_sym, parent[..., None], axis=1), points[sym_choice][..., None]], axis=2)

    # candidate stream order is (U-1, ..., 0): flip back
    cand_idx = cand_idx[:, :, ::-1]
    best = np.argmin(metrics, axis=1)
    hard = np.take_along_axis(cand_idx, best[:, None, None], axis=1)[:, 0, :]

    llrs = []
    for stream in range(u):
        labels = constellations[stream].labels  # (C, m)
        bits = labels[cand_idx[:, :, stream]]   # (N, K, m)
        m = labels.shape[1]
        out = np.empty((n, m), dtype=np.float64)
        for j in range(m):
            one = bits[..., j] == 1
            m1 = np.where(one, metrics, np.inf).min(axis=1)
            m0 = np.where(one, np.inf, metrics).min(axis=1)
            with np.errstate(invalid="ignore"):
                val = (m0 - m1) / n0_eff
            val = np.where(np.isposinf(m0), llr_clip, val)
            val = np.where(np.isposinf(m1), -llr_clip, val)
            out[:, j] = np.clip(val, -llr_clip, llr_clip)
        llrs.append(out)
    return hard, llrs, metrics[np.arange(n), best]


def ml_detect_exhaustive(y: np.ndarray, h: np.ndarray, constellations):
    """Exact minimizer of ||y - H x||^2 over all symbol tuples (test oracle)."""
    y = np.asarray(y, dtype=np.complex128)
    h = np.asarray(h, dtype=np.complex128)
    n, b, u = h.shape
    sizes = [c.points.size for c in constellations]
    total = int(np.prod(sizes))
    if total > 2 ** 20:
        raise ValueError(f"exhaustive search space {total} exceeds 2^20")
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    idx = np.stack([g.reshape(-1) for g in grids], axis=1)      # (total, U)
    x = np.stack([constellations[j].points[idx[:, j]] for j in range(u)], axis=1)
    hx = np.einsum("nbu,cu->nbc", h, x)
    metrics = (np.abs(y[:, :, None] - hx) ** 2).sum(axis=1)  # (N, total)
    best = metrics.argmin(axis=1)
    return idx[best], metrics[np.arange(n), best]
