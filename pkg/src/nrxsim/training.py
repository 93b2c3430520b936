"""Training loops: mixed-MCS batch sampling, multi-loss double-readout
updates, and site-specific fine-tuning without ground-truth CSI.

Each batch sample is one full slot: the number of active users is drawn
from a triangular rule P(u) proportional to u, every active user gets an
iid MCS from the supported set, and the sample SNR is uniform in dB shifted
by the mean of the active users' per-MCS offsets plus a user-count offset.
The training loss accumulates, over every unrolled iteration, the masked
bit BCE plus gamma times the channel-estimate MSE. Fine-tuning reuses the
same step with gamma forced to zero (no ground-truth CSI at a site) and
channels replayed from a recorded dataset.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .channel import ChannelRealization, CirDatasetSource, apply_channel
from .nrx import NrxConfig, assemble_features, ls_features, nrx_forward_graph
from .slot import (SlotConfig, assemble_slot, beamform, generate_pilots,
                   random_payloads, slot_code)

log = logging.getLogger(__name__)


def default_user_count_offset_db(num_active: int) -> float:
    return 10.0 * np.log10(num_active)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    batch_size: int = 16
    steps: int = 10_000
    snr_lo_db: float = -4.0
    snr_hi_db: float = 4.0
    gamma: float = 0.1
    learning_rate: float = 1e-3
    supported_mcs: tuple[int, ...] = (14,)
    max_ues: int = 2
    mcs_snr_offsets_db: tuple = ((9, 0.0), (14, 2.0), (19, 5.0))
    user_count_offsets_db: tuple | None = None  # index u-1; default 10log10(u)
    seed: int = 0
    fine_tune: bool = False
    snapshot_steps: tuple[int, ...] = ()
    log_every: int = 200

    def __post_init__(self):
        if not self.snr_lo_db < self.snr_hi_db:
            raise ValueError("need snr_lo_db < snr_hi_db")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.max_ues < 1:
            raise ValueError("max_ues must be >= 1")

    @property
    def offsets(self) -> dict:
        return dict(self.mcs_snr_offsets_db)

    def user_offset(self, num_active: int) -> float:
        if self.user_count_offsets_db is not None:
            return float(self.user_count_offsets_db[num_active - 1])
        return default_user_count_offset_db(num_active)

    @property
    def effective_gamma(self) -> float:
        if self.fine_tune and self.gamma != 0.0:
            log.warning("fine-tuning disables the channel-estimate loss; overriding gamma=%g to 0", self.gamma)
            return 0.0
        return self.gamma


@dataclass
class TrainBatch:
    """Numpy arrays for one training step (N samples, U user slabs)."""

    y: np.ndarray            # (N, S, T, B) complex
    ls: np.ndarray           # (N, U, S, T, B) complex
    n0: np.ndarray           # (N,)
    snr_db: np.ndarray       # (N,)
    mods: np.ndarray         # (N, U) modulation order per slab
    mcs_index: np.ndarray    # (N, U)
    active: np.ndarray       # (N, U) float32
    labels: np.ndarray       # (N, U, S, T, m_width) uint8
    label_mask: np.ndarray   # (N, U, S, T, m_width) float32
    chest_target: np.ndarray  # (N, U, S, T, 2B) float32
    num_active: np.ndarray   # (N,)


def sample_active_count(max_ues: int, rng: np.random.Generator) -> int:
    """Triangular rule: P(u) proportional to u over 1..max_ues."""
    weights = np.arange(1, max_ues + 1, dtype=np.float64)
    return int(rng.choice(np.arange(1, max_ues + 1), p=weights / weights.sum()))


def sample_snr_db(tcfg: TrainConfig, mcs_indices, num_active: int,
                  rng: np.random.Generator) -> float:
    base = rng.uniform(tcfg.snr_lo_db, tcfg.snr_hi_db)
    offsets = tcfg.offsets
    mcs_shift = float(np.mean([offsets.get(i, 0.0) for i in mcs_indices]))
    return base + mcs_shift + tcfg.user_offset(num_active)


def sample_training_batch(slot_cfg: SlotConfig, source, tcfg: TrainConfig,
                          mcs_table, model_config: NrxConfig, step: int) -> TrainBatch:
    """Draw one batch of independent slots with per-sample seed streams."""
    n = tcfg.batch_size
    u_max = slot_cfg.num_ues
    s_dim, t_dim, b = slot_cfg.num_subcarriers, slot_cfg.num_symbols, slot_cfg.bs_antennas
    m_width = model_config.m_max

    y = np.empty((n, s_dim, t_dim, b), dtype=np.complex128)
    n0 = np.empty(n)
    snr = np.empty(n)
    mods = np.empty((n, u_max), dtype=np.int64)
    mcs_idx = np.zeros((n, u_max), dtype=np.int64)
    active = np.zeros((n, u_max), dtype=np.float32)
    labels = np.zeros((n, u_max, s_dim, t_dim, m_width), dtype=np.uint8)
    label_mask = np.zeros((n, u_max, s_dim, t_dim, m_width), dtype=np.float32)
    chest = np.zeros((n, u_max, s_dim, t_dim, 2 * b), dtype=np.float32)
    books = []

    fallback_mod = (model_config.io_modulations[0] if model_config.variant == "var_io"
                    else model_config.m_max)
    for i in range(n):
        rng = np.random.default_rng((tcfg.seed, 0x7A, step, i))
        n_act = sample_active_count(min(tcfg.max_ues, u_max), rng)
        picks = rng.choice(np.asarray(tcfg.supported_mcs), size=n_act)
        snr[i] = sample_snr_db(tcfg, picks, n_act, rng)
        n0[i] = 10.0 ** (-snr[i] / 10.0)
        slot_seed = int(rng.integers(0, 2 ** 62))

        cfg_act = (slot_cfg if n_act == u_max
                   else dataclasses.replace(slot_cfg, num_ues=n_act))
        entries = tuple(mcs_table[int(p)] for p in picks)
        payloads = random_payloads(cfg_act, entries, rng)
        tx = assemble_slot(cfg_act, entries, payloads, slot_seed)

        h = source.sample(slot_cfg, (tcfg.seed, 0xC4, step, i))
        antennas = np.zeros((u_max, s_dim, t_dim, slot_cfg.ue_antennas), dtype=np.complex128)
        for ue in range(n_act):
            antennas[ue] = beamform(tx.grids[ue].symbols, slot_cfg.beam_matrix[ue])
        noise_rng = np.random.default_rng((tcfg.seed, 0x40, step, i))
        real = ChannelRealization(h=h, n0=float(n0[i]))
        y[i] = apply_channel(antennas, real, noise_rng)

        eff = real.effective(slot_cfg)  # (U, S, T, B)
        chest[i, :, ..., 0::2] = eff.real
        chest[i, :, ..., 1::2] = eff.imag

        active[i, :n_act] = 1.0
        mods[i] = fallback_mod
        for ue in range(n_act):
            mods[i, ue] = entries[ue].modulation_order
            mcs_idx[i, ue] = entries[ue].index
            m = entries[ue].modulation_order
            labels[i, ue, ..., :m] = tx.labels[ue][..., :m]
            label_mask[i, ue, ..., :m] = tx.label_mask[ue][..., :m]
        books.append(generate_pilots(slot_cfg, slot_seed))

    ls = ls_features(y, books, slot_cfg)
    return TrainBatch(y=y, ls=ls, n0=n0, snr_db=snr, mods=mods, mcs_index=mcs_idx,
                      active=active, labels=labels, label_mask=label_mask,
                      chest_target=chest, num_active=active.sum(axis=1).astype(np.int64))


def _zero_grads(weights: dict) -> None:
    for t in weights.values():
        t.grad = None


def train_step(weights: dict, adam: ad.AdamState, batch: TrainBatch,
               model_config: NrxConfig, slot_cfg: SlotConfig, tcfg: TrainConfig) -> dict:
    """One multi-loss gradient step; returns the loss breakdown."""
    gamma = tcfg.effective_gamma
    feats = assemble_features(batch.y, batch.ls, batch.n0, slot_cfg, model_config)
    out = nrx_forward_graph(feats, weights, model_config, slot_cfg, batch.mods,
                            training=True, active=batch.active,
                            collect_chest=gamma > 0)

    n, u = out.batch, out.num_ues
    flat_labels = batch.labels.reshape(n * u, *batch.labels.shape[2:])
    flat_mask = batch.label_mask.reshape(n * u, *batch.label_mask.shape[2:])
    flat_target = batch.chest_target.reshape(n * u, *batch.chest_target.shape[2:])
    chest_mask = np.broadcast_to(
        batch.active.reshape(n * u, 1, 1, 1), flat_target.shape).astype(np.float32)

    bce_terms, mse_terms = [], []
    for it, groups in enumerate(out.llr_groups):
        weights_sum = sum(float(flat_mask[idx][..., :t.shape[-1]].sum()) for t, idx in groups)
        if weights_sum <= 0:
            raise RuntimeError("batch carries no valid bit labels")
        parts = []
        for tensor, idx in groups:
            width = tensor.shape[-1]
            mask_g = flat_mask[idx][..., :width]
            share = float(mask_g.sum())
            if share == 0:
                continue
            term = ad.bce_with_logits(tensor, flat_labels[idx][..., :width], mask=mask_g)
            parts.append(ad.mul(term, share / weights_sum))
        bce_terms.append(parts[0] if len(parts) == 1 else _sum(parts))
        if gamma > 0:
            mse_terms.append(ad.mse(out.chest[it], flat_target, mask=chest_mask))

    total = _sum(bce_terms)
    if mse_terms:
        total = ad.add(total, ad.mul(_sum(mse_terms), gamma))

    total_val = total.item()
    if not np.isfinite(total_val):
        parts = [t.item() for t in bce_terms]
        raise RuntimeError(f"non-finite training loss {total_val} (bce per iteration: {parts})")

    _zero_grads(weights)
    ad.backward(total)
    # update only parameters the loss actually touched (the chest head is
    # out of the graph when gamma = 0, and a var_io group may sit out a batch)
    touched = {k: t for k, t in weights.items() if t.grad is not None}
    ad.adam_step(touched, None, adam)
    _zero_grads(weights)
    return {
        "total": total_val,
        "bce": float(np.sum([t.item() for t in bce_terms])),
        "mse": float(np.sum([t.item() for t in mse_terms])) if mse_terms else 0.0,
    }


def _sum(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc


@dataclass
class TrainResult:
    weights: dict
    adam: ad.AdamState
    history: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    steps_done: int = 0
    wall_time_s: float = 0.0


def train(weights: dict, model_config: NrxConfig, slot_cfg: SlotConfig, source,
          tcfg: TrainConfig, mcs_table, adam: ad.AdamState | None = None,
          progress=None) -> TrainResult:
    """Run tcfg.steps training steps; snapshots are deep weight copies.

    Batch k+1 is prefetched on a worker thread while step k computes;
    batches depend only on (seed, step), so this changes nothing numerically.
    """
    adam = adam or ad.AdamState(lr=tcfg.learning_rate)
    result = TrainResult(weights=weights, adam=adam)
    t0 = time.perf_counter()
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    fetch = lambda s: sample_training_batch(slot_cfg, source, tcfg, mcs_table, model_config, s)
    pending = pool.submit(fetch, 0) if tcfg.steps else None
    for step in range(tcfg.steps):
        batch = pending.result()
        pending = pool.submit(fetch, step + 1) if step + 1 < tcfg.steps else None
        losses = train_step(weights, adam, batch, model_config, slot_cfg, tcfg)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("step %d/%d: total=%.4f bce=%.4f mse=%.4f",
                     step, tcfg.steps, losses["total"], losses["bce"], losses["mse"])
            result.history.append((step, losses))
        if (step + 1) in tcfg.snapshot_steps:
            result.snapshots[step + 1] = {k: ad.Tensor(t.data.copy(), requires_grad=True)
                                          for k, t in weights.items()}
        if progress is not None:
            progress(step, losses)
    pool.shutdown(wait=False)
    result.steps_done = tcfg.steps
    result.wall_time_s = time.perf_counter() - t0
    return result


def fine_tune(weights: dict, model_config: NrxConfig, slot_cfg: SlotConfig,
              data, num_ft_steps: int, num_td: int | None, tcfg: TrainConfig,
              mcs_table, snapshot_steps: tuple = ()) -> TrainResult:
    """Adapt pre-trained weights to recorded channels, without double-readout.

    `data` is a CirDataset (sampled with replacement, truncated to num_td)
    or any channel source. gamma is forced to zero; N_FT = 0 returns the
    weights untouched.
    """
    if hasattr(data, "h"):
        if data.num_samples == 0:
            raise ValueError("empty fine-tuning dataset")
        source = CirDatasetSource(data, limit=num_td)
    else:
        source = data
    ft_cfg = dataclasses.replace(tcfg, fine_tune=True, steps=num_ft_steps,
                                 snapshot_steps=tuple(snapshot_steps))
    if num_ft_steps == 0:
        return TrainResult(weights=weights, adam=ad.AdamState(lr=ft_cfg.learning_rate))
    return train(weights, model_config, slot_cfg, source, ft_cfg, mcs_table)
