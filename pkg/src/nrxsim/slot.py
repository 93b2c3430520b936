"""Slot construction: resource grids, DMRS-style pilots, MCS table, beamforming.

A slot is the S x T grid of resource elements per transmit stream. Two OFDM
symbols carry pilots; within a pilot symbol the users occupy disjoint
frequency combs and nobody transmits data. All remaining REs carry data,
filled in a fixed subcarrier-major order so slots are bit-reproducible.
Each user sends one codeword per slot, rate-matched to exactly fill its
data REs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constellation import Constellation, build_constellation
from .ldpc import LdpcCode, rate_matched_code

RE_DATA, RE_PILOT, RE_NULL = 0, 1, 2


@dataclass(frozen=True)
class McsEntry:
    """Modulation-and-coding-scheme table row."""

    index: int
    modulation_order: int  # bits per symbol
    code_rate: float

    def __post_init__(self):
        if self.modulation_order not in (2, 4, 6):
            raise ValueError(f"MCS {self.index}: unsupported modulation order {self.modulation_order}")
        if not 0.0 < self.code_rate < 1.0:
            raise ValueError(f"MCS {self.index}: code rate {self.code_rate} outside (0,1)")


def default_mcs_table() -> dict[int, McsEntry]:
    """Shipped defaults; rates are the 1024-denominator table values."""
    return {
        9: McsEntry(9, 2, 679 / 1024),
        14: McsEntry(14, 4, 553 / 1024),
        19: McsEntry(19, 6, 517 / 1024),
    }


@dataclass(frozen=True)
class SlotConfig:
    """Geometry of one uplink slot and the antenna setup."""

    num_subcarriers: int = 24
    num_symbols: int = 14
    pilot_symbols: tuple[int, ...] = (2, 11)
    comb_size: int = 2
    num_ues: int = 2
    bs_antennas: int = 4
    ue_antennas: int = 2
    beams: tuple = None  # per-UE unit-norm vectors, defaults to [1,1]/sqrt(2)
    subcarrier_spacing_hz: float = 30e3
    cp_fraction: float = 0.07

    def __post_init__(self):
        if any(t < 0 or t >= self.num_symbols for t in self.pilot_symbols):
            raise ValueError(f"pilot symbols {self.pilot_symbols} outside [0,{self.num_symbols})")
        if not self.pilot_symbols:
            raise ValueError("at least one pilot symbol is required")
        if self.num_ues > self.comb_size:
            raise ValueError(f"{self.num_ues} UEs cannot share a comb of size {self.comb_size}")
        if self.beams is None:
            v = np.ones(self.ue_antennas) / np.sqrt(self.ue_antennas)
            object.__setattr__(self, "beams", tuple(tuple(v) for _ in range(self.num_ues)))
        elif len(self.beams) > self.num_ues:
            # allows dataclasses.replace(cfg, num_ues=...) to drop trailing UEs
            object.__setattr__(self, "beams", tuple(self.beams[: self.num_ues]))
        beams = self.beam_matrix
        norms = np.linalg.norm(beams, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError(f"beam vectors must have unit norm, got {norms}")

    @property
    def beam_matrix(self) -> np.ndarray:
        return np.asarray(self.beams, dtype=np.complex128).reshape(self.num_ues, self.ue_antennas)

    @property
    def symbol_duration_s(self) -> float:
        return (1.0 + self.cp_fraction) / self.subcarrier_spacing_hz

    @property
    def cp_duration_s(self) -> float:
        return self.cp_fraction / self.subcarrier_spacing_hz

    def comb_subcarriers(self, ue: int) -> np.ndarray:
        return np.arange(ue % self.comb_size, self.num_subcarriers, self.comb_size)

    def re_kind(self, ue: int) -> np.ndarray:
        """(S, T) map of RE_DATA / RE_PILOT / RE_NULL for one UE's stream."""
        kind = np.full((self.num_subcarriers, self.num_symbols), RE_DATA, dtype=np.int8)
        kind[:, list(self.pilot_symbols)] = RE_NULL
        kind[np.ix_(self.comb_subcarriers(ue), list(self.pilot_symbols))] = RE_PILOT
        return kind

    @property
    def data_mask(self) -> np.ndarray:
        """(S, T) bool mask of data REs (identical for every UE)."""
        mask = np.ones((self.num_subcarriers, self.num_symbols), dtype=bool)
        mask[:, list(self.pilot_symbols)] = False
        return mask

    @property
    def num_data_res(self) -> int:
        return int(self.data_mask.sum())

    def data_re_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Data RE coordinates in the fixed subcarrier-major fill order."""
        s_idx, t_idx = np.nonzero(self.data_mask)  # C-order: s major, t minor
        return s_idx, t_idx


@dataclass(frozen=True)
class PilotBook:
    """Known pilot values per UE; zero off the UE's pilot REs."""

    values: np.ndarray  # (U, S, T) complex
    config: SlotConfig

    def mask(self, ue: int) -> np.ndarray:
        return self.config.re_kind(ue) == RE_PILOT


def generate_pilots(cfg: SlotConfig, slot_seed: int) -> PilotBook:
    """Unit-modulus QPSK pilot sequences, seeded per (slot_seed, ue)."""
    qpsk = build_constellation(2).points
    values = np.zeros((cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols), dtype=np.complex128)
    for u in range(cfg.num_ues):
        rng = np.random.default_rng((int(slot_seed), u, 0xD5))
        sc = cfg.comb_subcarriers(u)
        picks = rng.integers(0, 4, size=(sc.size, len(cfg.pilot_symbols)))
        values[u][np.ix_(sc, list(cfg.pilot_symbols))] = qpsk[picks]
    return PilotBook(values=values, config=cfg)


@dataclass(frozen=True)
class ResourceGrid:
    """One stream's modulated slot plus its RE designation map."""

    symbols: np.ndarray  # (S, T) complex
    kind: np.ndarray     # (S, T) int8


@dataclass(frozen=True)
class TxSlot:
    """Everything the transmitter side of one slot produced."""

    config: SlotConfig
    grids: list            # per-UE ResourceGrid (stream symbols, pre-beamforming)
    pilot_book: PilotBook
    mcs: tuple             # per-UE McsEntry
    codes: tuple           # per-UE LdpcCode
    payloads: tuple        # per-UE info bits
    coded_bits: tuple      # per-UE transmitted coded bits (length E_u)
    labels: np.ndarray     # (U, S, T, max_m) coded bits mapped onto the grid
    label_mask: np.ndarray  # (U, S, T, max_m) valid-bit mask

    @property
    def constellations(self) -> tuple[Constellation, ...]:
        return tuple(build_constellation(m.modulation_order) for m in self.mcs)


def slot_code(cfg: SlotConfig, mcs: McsEntry) -> LdpcCode:
    """The rate-matched code filling one stream's data REs."""
    return rate_matched_code(cfg.num_data_res * mcs.modulation_order, mcs.code_rate)


def payload_length(cfg: SlotConfig, mcs: McsEntry) -> int:
    return slot_code(cfg, mcs).k_eff


def random_payloads(cfg: SlotConfig, mcs_per_ue, rng: np.random.Generator):
    return tuple((rng.random(payload_length(cfg, m)) < 0.5).astype(np.uint8) for m in mcs_per_ue)


def assemble_slot(cfg: SlotConfig, mcs_per_ue, payloads, slot_seed: int) -> TxSlot:
    """Encode, modulate and place one slot for every UE.

    Data REs are filled subcarrier-major, then symbol; pilots come from the
    seeded per-UE QPSK sequence on disjoint combs.
    """
    if len(mcs_per_ue) != cfg.num_ues or len(payloads) != cfg.num_ues:
        raise ValueError(f"need {cfg.num_ues} MCS entries and payloads")
    pilot_book = generate_pilots(cfg, slot_seed)
    s_idx, t_idx = cfg.data_re_indices()
    max_m = max(m.modulation_order for m in mcs_per_ue)

    grids, codes, coded, labels, masks = [], [], [], [], []
    for u, (mcs, payload) in enumerate(zip(mcs_per_ue, payloads)):
        code = slot_code(cfg, mcs)
        payload = np.asarray(payload, dtype=np.uint8)
        if payload.shape != (code.k_eff,):
            raise ValueError(
                f"UE{u}: payload length {payload.shape} does not match code dimension ({code.k_eff},)")
        const = build_constellation(mcs.modulation_order)
        bits = code.encode(payload)
        per_re = bits.reshape(cfg.num_data_res, mcs.modulation_order)
        symbols = np.array(pilot_book.values[u])
        symbols[s_idx, t_idx] = const.map_bits(per_re)

        lab = np.zeros((cfg.num_subcarriers, cfg.num_symbols, max_m), dtype=np.uint8)
        msk = np.zeros_like(lab)
        lab[s_idx, t_idx, :mcs.modulation_order] = per_re
        msk[s_idx, t_idx, :mcs.modulation_order] = 1

        grids.append(ResourceGrid(symbols=symbols, kind=cfg.re_kind(u)))
        codes.append(code)
        coded.append(bits)
        labels.append(lab)
        masks.append(msk)

    return TxSlot(
        config=cfg, grids=grids, pilot_book=pilot_book,
        mcs=tuple(mcs_per_ue), codes=tuple(codes), payloads=tuple(np.asarray(p, dtype=np.uint8) for p in payloads),
        coded_bits=tuple(coded), labels=np.stack(labels), label_mask=np.stack(masks),
    )


def extract_data_llrs(cfg: SlotConfig, llr_grid: np.ndarray, modulation_order: int) -> np.ndarray:
    """Undo the grid mapping: (S, T, >=m) LLRs -> flat coded-bit LLRs."""
    s_idx, t_idx = cfg.data_re_indices()
    return llr_grid[s_idx, t_idx, :modulation_order].reshape(-1)


def beamform(stream_symbols: np.ndarray, beam: np.ndarray) -> np.ndarray:
    """Map stream symbols (...,) onto antenna ports (..., N_u): x = v * s."""
    return stream_symbols[..., None] * np.asarray(beam)
