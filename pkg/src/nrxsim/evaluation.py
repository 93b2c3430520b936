"""Monte-Carlo link evaluation, latency benchmarking, and CSV emission.

TBLER evaluation runs independent slots per (receiver, SNR) point with
per-sample seed streams, so the counts are bit-reproducible no matter how
many worker threads process the chunks. A point stops at min_block_errors
or max_blocks, checked on fixed chunk boundaries.

SNR is defined against unit symbol energy and unit average channel gain:
SNR[dB] = -10 log10(N0).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import classical as cl
from .channel import ChannelRealization, apply_channel, estimate_covariance
from .constellation import build_constellation
from .nrx import nrx_forward
from .slot import (SlotConfig, assemble_slot, beamform, extract_data_llrs,
                   generate_pilots, random_payloads)

LLR_CLIP = 20.0


@dataclass(frozen=True)
class EvalConfig:
    """One TBLER sweep: receivers x SNR grid with a per-point stop rule."""

    snr_grid_db: tuple
    receivers: tuple = ("ls_lmmse", "lmmse_kbest", "nrx")
    mcs_indices: tuple = (14, 14)   # per UE
    num_iterations: int | None = None  # NRX inference depth
    seed: int = 0
    min_block_errors: int = 200
    max_blocks: int = 20_000
    kbest_k: int = 16
    chunk_slots: int = 128
    num_workers: int = 1
    llr_clip: float = LLR_CLIP
    decoder_iterations: int = 20
    covariance_samples: int = 500

    def __post_init__(self):
        if self.min_block_errors < 1 or self.max_blocks < 1:
            raise ValueError("stop rule must be positive")


@dataclass(frozen=True)
class MetricsRecord:
    """Error counts of one receiver at one SNR point."""

    receiver: str
    snr_db: float
    blocks: int
    block_errors: int
    bit_errors: int
    bits: int

    @property
    def tbler(self) -> float:
        return self.block_errors / self.blocks if self.blocks else float("nan")

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits if self.bits else float("nan")


# ---------------------------------------------------------------------------
# receivers
# ---------------------------------------------------------------------------


def _demap_equalized(z, nvar, consts, clip):
    out = []
    for u, const in enumerate(consts):
        llr = cl.app_demap(z[:, u], const, nvar[:, u], mode="exact")
        out.append(np.clip(llr, -clip, clip))
    return out


def _kbest_grids(y, h_eff, n0, consts, cfg, k, clip):
    """Batched K-Best on the data REs of a chunk: y (N,S,T,B), h (N,U,S,T,B)."""
    s_idx, t_idx = cfg.data_re_indices()
    n, n_data = y.shape[0], s_idx.size
    h = np.moveaxis(h_eff, 1, -1)[:, s_idx, t_idx]    # (N, Nd, B, U)
    obs = y[:, s_idx, t_idx]                          # (N, Nd, B)
    flat_h = h.reshape(n * n_data, *h.shape[2:])
    flat_y = obs.reshape(n * n_data, -1)
    llr_parts = [[] for _ in consts]
    step = 16384  # bound the (REs x k x |C|) expansion buffers
    for start in range(0, flat_y.shape[0], step):
        sl = slice(start, min(start + step, flat_y.shape[0]))
        _, llrs, _ = cl.kbest_detect(flat_y[sl], flat_h[sl], n0, consts, k=k, llr_clip=clip)
        for u in range(len(consts)):
            llr_parts[u].append(llrs[u])
    grids = []
    for u, const in enumerate(consts):
        grid = np.zeros((n, cfg.num_subcarriers, cfg.num_symbols, const.order))
        grid[:, s_idx, t_idx] = np.concatenate(llr_parts[u]).reshape(n, n_data, const.order)
        grids.append(grid)
    return grids


class ReceiverBank:
    """Builds per-UE LLR grids for every configured receiver name.

    run() operates on a whole chunk of slots at once: the equalizer, the
    demappers, K-Best and the neural receiver are all batched over slots.
    """

    def __init__(self, ecfg: EvalConfig, slot_cfg: SlotConfig, mcs_table,
                 source=None, nrx_model=None, covariance=None):
        self.ecfg = ecfg
        self.slot_cfg = slot_cfg
        self.entries = tuple(mcs_table[i] for i in ecfg.mcs_indices)
        self.consts = tuple(build_constellation(m.modulation_order) for m in self.entries)
        self.nrx_model = nrx_model
        self.covariance = covariance
        if covariance is None and source is not None and any(
                r.startswith("lmmse") for r in ecfg.receivers):
            self.covariance = estimate_covariance(
                source, slot_cfg, ecfg.covariance_samples, seed=ecfg.seed)

    def run(self, name, y, books, h_eff_true, n0):
        """Chunk of slots -> list per UE of (N, S, T, m_u) LLR grids."""
        cfg, clip = self.slot_cfg, self.ecfg.llr_clip
        n = y.shape[0]
        if name == "ls_lmmse":
            est = np.stack([cl.ls_estimate(y[i], books[i], cfg).h_eff for i in range(n)])
            z, nvar = cl.lmmse_equalize(y, est, n0)
            return _demap_equalized(z, nvar, self.consts, clip)
        if name == "lmmse_kbest":
            est = np.stack([cl.lmmse_estimate(y[i], books[i], cfg, self.covariance, n0).h_eff
                            for i in range(n)])
            return _kbest_grids(y, est, n0, self.consts, cfg, self.ecfg.kbest_k, clip)
        if name == "perfect_kbest":
            return _kbest_grids(y, h_eff_true, n0, self.consts, cfg, self.ecfg.kbest_k, clip)
        if name == "nrx":
            config, weights = self.nrx_model
            out = [[] for _ in self.consts]
            for start in range(0, n, 48):  # bound peak activation memory
                sl = slice(start, min(start + 48, n))
                llrs, _ = nrx_forward(y[sl], books[sl.start:sl.stop], cfg, self.entries,
                                      weights, config, n0,
                                      num_iterations=self.ecfg.num_iterations)
                for u, grid in enumerate(llrs):
                    out[u].append(np.clip(grid, -clip, clip))
            return [np.concatenate(g) for g in out]
        if name == "random_llrs":
            rng = np.random.default_rng((self.ecfg.seed, 0xBAD, int(abs(n0) * 1e9)))
            return [rng.choice([-clip, clip], size=(n, cfg.num_subcarriers, cfg.num_symbols, c.order))
                    for c in self.consts]
        raise ValueError(f"unknown receiver '{name}'")


# ---------------------------------------------------------------------------
# TBLER evaluation
# ---------------------------------------------------------------------------


def _evaluate_chunk(bank: ReceiverBank, source, receiver: str, snr_db: float,
                    indices) -> tuple:
    cfg = bank.slot_cfg
    ecfg = bank.ecfg
    n0 = 10.0 ** (-snr_db / 10.0)
    snr_key = int(round(snr_db * 1000))
    n = len(indices)
    s_dim, t_dim, b = cfg.num_subcarriers, cfg.num_symbols, cfg.bs_antennas

    y = np.empty((n, s_dim, t_dim, b), dtype=np.complex128)
    h_eff = np.empty((n, cfg.num_ues, s_dim, t_dim, b), dtype=np.complex128)
    books, slots = [], []
    for j, i in enumerate(indices):
        rng = np.random.default_rng((ecfg.seed, snr_key, i, 1))
        payloads = random_payloads(cfg, bank.entries, rng)
        slot_seed = int(rng.integers(0, 2 ** 62))
        tx = assemble_slot(cfg, bank.entries, payloads, slot_seed)
        h = source.sample(cfg, (ecfg.seed, snr_key, i, 2))
        antennas = np.stack([beamform(tx.grids[u].symbols, cfg.beam_matrix[u])
                             for u in range(cfg.num_ues)])
        real = ChannelRealization(h=h, n0=n0)
        y[j] = apply_channel(antennas, real, np.random.default_rng((ecfg.seed, snr_key, i, 3)))
        h_eff[j] = real.effective(cfg)
        books.append(generate_pilots(cfg, slot_seed))
        slots.append(tx)

    grids = bank.run(receiver, y, books, h_eff, n0)

    s_idx, t_idx = cfg.data_re_indices()
    blocks = block_errors = bit_errors = bits = 0
    for u in range(cfg.num_ues):
        m = bank.entries[u].modulation_order
        llr = grids[u][:, s_idx, t_idx, :m].reshape(n, -1)
        code = slots[0].codes[u]
        decoded, _ = code.decode(np.clip(llr, -ecfg.llr_clip, ecfg.llr_clip),
                                 ecfg.decoder_iterations)
        payloads = np.stack([slots[j].payloads[u] for j in range(n)])
        errs = (decoded != payloads).sum(axis=1)
        blocks += n
        block_errors += int((errs > 0).sum())
        bit_errors += int(errs.sum())
        bits += int(payloads.size)
    return blocks, block_errors, bit_errors, bits


def evaluate_tbler(slot_cfg: SlotConfig, source, ecfg: EvalConfig, mcs_table,
                   nrx_model=None, covariance=None, progress=None):
    """Monte-Carlo TBLER/BER per (receiver, SNR); deterministic for a fixed
    seed regardless of num_workers."""
    bank = ReceiverBank(ecfg, slot_cfg, mcs_table, source=source,
                        nrx_model=nrx_model, covariance=covariance)
    records = []
    for receiver in ecfg.receivers:
        for snr_db in ecfg.snr_grid_db:
            counts = np.zeros(4, dtype=np.int64)
            next_start = 0

            def make_chunk(start):
                stop = min(start + ecfg.chunk_slots, (ecfg.max_blocks + slot_cfg.num_ues - 1)
                           // slot_cfg.num_ues)
                return range(start, stop)

            with concurrent.futures.ThreadPoolExecutor(max_workers=ecfg.num_workers) as pool:
                while True:
                    wave = []
                    for _ in range(ecfg.num_workers):
                        chunk = make_chunk(next_start)
                        if len(chunk):
                            wave.append(pool.submit(_evaluate_chunk, bank, source,
                                                    receiver, float(snr_db), chunk))
                            next_start = chunk.stop
                    if not wave:
                        break
                    stop = False
                    for fut in wave:  # accumulate strictly in submission order
                        if stop:
                            fut.cancel()  # speculative chunk past the stop point
                            continue
                        counts += np.asarray(fut.result(), dtype=np.int64)
                        if counts[1] >= ecfg.min_block_errors or counts[0] >= ecfg.max_blocks:
                            stop = True
                    if stop:
                        break
            rec = MetricsRecord(receiver=receiver, snr_db=float(snr_db),
                                blocks=int(counts[0]), block_errors=int(counts[1]),
                                bit_errors=int(counts[2]), bits=int(counts[3]))
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


# ---------------------------------------------------------------------------
# SNR @ target TBLER
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SnrAtTbler:
    snr_db: float
    sigma_db: float
    target: float


def snr_at_tbler(records, target: float = 0.1) -> SnrAtTbler:
    """Interpolate log10(TBLER) vs SNR linearly at the first crossing.

    The returned sigma comes from the binomial variance of the two
    bracketing points via the delta method.
    """
    pts = sorted(records, key=lambda r: r.snr_db)
    if len(pts) < 2:
        raise ValueError("need at least two SNR points")
    for lo, hi in zip(pts[:-1], pts[1:]):
        p1, p2 = lo.tbler, hi.tbler
        if p1 >= target >= p2 and p1 > p2 and p1 > 0 and p2 > 0:
            l1, l2, lt = np.log10(p1), np.log10(p2), np.log10(target)
            frac = (l1 - lt) / (l1 - l2)
            snr = lo.snr_db + (hi.snr_db - lo.snr_db) * frac
            return SnrAtTbler(float(snr), _sigma(lo, hi, target), target)
    span = f"[{pts[0].snr_db}, {pts[-1].snr_db}] dB with TBLER [{pts[0].tbler:.3g}, {pts[-1].tbler:.3g}]"
    raise ValueError(f"target TBLER {target} not bracketed by the curve over {span}")


def _sigma(lo: MetricsRecord, hi: MetricsRecord, target: float) -> float:
    l1, l2, lt = np.log10(lo.tbler), np.log10(hi.tbler), np.log10(target)
    ds = hi.snr_db - lo.snr_db
    denom = (l1 - l2) ** 2
    dd1 = ds * (lt - l2) / denom
    dd2 = ds * (l1 - lt) / denom
    var = 0.0
    for rec, dd in ((lo, dd1), (hi, dd2)):
        p = rec.tbler
        var_log = (1 - p) / (rec.blocks * p * np.log(10.0) ** 2)
        var += dd ** 2 * var_log
    return float(np.sqrt(var))


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    depths: tuple
    samples_s: dict            # depth -> np.ndarray of wall times
    median_s: dict
    p10_s: dict
    p90_s: dict
    overhead_s: float          # affine fit a
    per_iteration_s: float     # affine fit b
    r_squared: float


def latency_bench(nrx_model, slot_cfg: SlotConfig, mcs_table, depths,
                  runs: int = 100, warmup: int = 10, seed: int = 0,
                  snr_db: float = 5.0) -> LatencyReport:
    """Single-stream wall-clock of one forward pass per depth, plus an
    affine fit median(N) = a + b N over the depths."""
    config, weights = nrx_model
    entries = tuple(mcs_table[i] for i in config.supported_mcs[:1] * slot_cfg.num_ues)
    rng = np.random.default_rng((seed, 0xBE4C))
    payloads = random_payloads(slot_cfg, entries, rng)
    tx = assemble_slot(slot_cfg, entries, payloads, slot_seed=seed)
    n0 = 10 ** (-snr_db / 10)
    from .channel import TdlChannelSource, tdl_b
    h = TdlChannelSource([tdl_b()] * slot_cfg.num_ues).sample(slot_cfg, (seed,))
    antennas = np.stack([beamform(tx.grids[u].symbols, slot_cfg.beam_matrix[u])
                         for u in range(slot_cfg.num_ues)])
    y = apply_channel(antennas, ChannelRealization(h=h, n0=n0), rng)
    book = tx.pilot_book

    samples = {}
    for depth in depths:
        for _ in range(warmup):
            nrx_forward(y, book, slot_cfg, entries, weights, config, n0, num_iterations=depth)
        times = np.empty(runs)
        for r in range(runs):
            t0 = time.perf_counter()
            nrx_forward(y, book, slot_cfg, entries, weights, config, n0, num_iterations=depth)
            times[r] = time.perf_counter() - t0
        samples[depth] = times

    med = {d: float(np.median(t)) for d, t in samples.items()}
    p10 = {d: float(np.percentile(t, 10)) for d, t in samples.items()}
    p90 = {d: float(np.percentile(t, 90)) for d, t in samples.items()}
    xs = np.asarray(list(depths), dtype=np.float64)
    ys = np.asarray([med[d] for d in depths])
    b_fit, a_fit = np.polyfit(xs, ys, 1)
    pred = a_fit + b_fit * xs
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LatencyReport(depths=tuple(depths), samples_s=samples, median_s=med,
                         p10_s=p10, p90_s=p90, overhead_s=float(a_fit),
                         per_iteration_s=float(b_fit), r_squared=float(r2))


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------


def write_metrics_csv(records, path) -> None:
    lines = ["receiver,snr_db,blocks,block_errors,bit_errors,bits,tbler,ber"]
    for r in records:
        lines.append(f"{r.receiver},{r.snr_db:g},{r.blocks},{r.block_errors},"
                     f"{r.bit_errors},{r.bits},{r.tbler:.8g},{r.ber:.8g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "receiver,snr_db,blocks,block_errors,bit_errors,bits,tbler,ber":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            f = line.strip().split(",")
            if len(f) != 8:
                continue
            records.append(MetricsRecord(receiver=f[0], snr_db=float(f[1]), blocks=int(f[2]),
                                         block_errors=int(f[3]), bit_errors=int(f[4]), bits=int(f[5])))
    return records


def write_sweep_csv(rows, path) -> None:
    """Fine-tuning sweep rows: (num_ft_iter, num_td, snr_at_tbler, eval_set)."""
    lines = ["num_ft_iter,num_td,snr_at_tbler_target_db,eval_set"]
    for ft, td, snr, name in rows:
        lines.append(f"{ft},{td},{snr:.6g},{name}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_latency_csv(report: LatencyReport, path) -> None:
    lines = ["n_it,median_s,p10_s,p90_s"]
    for d in report.depths:
        lines.append(f"{d},{report.median_s[d]:.9g},{report.p10_s[d]:.9g},{report.p90_s[d]:.9g}")
    lines.append(f"# fit a={report.overhead_s:.9g},b={report.per_iteration_s:.9g},r2={report.r_squared:.6g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
