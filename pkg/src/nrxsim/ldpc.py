"""Simplified LDPC coding: regular codes, min-sum decoding, alist files.

Codes are column-weight-3 regular with a seeded, 4-cycle-avoiding greedy
construction. The encoder comes from a one-time GF(2) reduction of the
parity-check matrix; information bits sit on the free columns. Rate
adjustment keeps a rate-1/2 mother code and shortens information bits
(known zeros, not transmitted) or punctures parity bits (transmitted
positions removed, decoder sees zero LLRs) to hit a target (length, rate).

LLRs everywhere follow the logit convention: positive means bit 1 is more
likely. The decoder is a flooding min-sum with early exit on parity.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

DEFAULT_N = 648
DEFAULT_K = 324
COLUMN_WEIGHT = 3
_SHORTENED_LLR = 60.0  # internal certainty for known-zero bits


@dataclass(frozen=True)
class LdpcCode:
    """A binary LDPC code plus its rate-matching pattern.

    n, k are the mother-code dimensions. `punctured` lists coded positions
    removed from transmission; `shortened` lists information positions fixed
    to zero and also not transmitted.
    """

    n: int
    k: int
    row_cols: np.ndarray        # (M, max_deg) int32, -1 padded
    col_rows: np.ndarray        # (n, COLUMN_WEIGHT) int32
    col_slots: np.ndarray       # (n, COLUMN_WEIGHT) int32
    info_positions: np.ndarray  # (k,) int64, ascending
    encode_mat_t: np.ndarray    # (k, M) float32: parity = info @ encode_mat_t mod 2
    punctured: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shortened: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_checks(self) -> int:
        return self.row_cols.shape[0]

    @property
    def k_eff(self) -> int:
        return self.k - self.shortened.size

    @property
    def tx_positions(self) -> np.ndarray:
        skip = np.zeros(self.n, dtype=bool)
        skip[self.punctured] = True
        skip[self.shortened] = True
        return np.flatnonzero(~skip)

    @property
    def num_tx_bits(self) -> int:
        return self.n - self.punctured.size - self.shortened.size

    @property
    def rate(self) -> float:
        return self.k_eff / self.num_tx_bits

    # -- encode / decode -----------------------------------------------------

    def codeword(self, info: np.ndarray) -> np.ndarray:
        """Full mother codeword (..., n), including punctured parity bits."""
        info = np.asarray(info)
        if info.shape[-1] != self.k_eff:
            raise ValueError(f"expected {self.k_eff} info bits, got {info.shape[-1]}")
        lead = info.shape[:-1]
        u = np.zeros(lead + (self.k,), dtype=np.float32)
        short_in_info = np.isin(self.info_positions, self.shortened)
        u[..., ~short_in_info] = info.astype(np.float32)
        parity = (u.reshape(-1, self.k) @ self.encode_mat_t) % 2.0
        cw = np.zeros((int(np.prod(lead)), self.n), dtype=np.uint8)
        cw[:, self.info_positions] = u.reshape(-1, self.k).astype(np.uint8)
        pivot = np.setdiff1d(np.arange(self.n), self.info_positions, assume_unique=False)
        cw[:, pivot] = parity.astype(np.uint8)
        return cw.reshape(lead + (self.n,))

    def encode(self, info: np.ndarray) -> np.ndarray:
        """Encode (..., k_eff) info bits into (..., num_tx_bits) coded bits."""
        return self.codeword(info)[..., self.tx_positions]

    def check_parity(self, codeword: np.ndarray) -> np.ndarray:
        """True where H @ c == 0, per leading index."""
        c = np.asarray(codeword, dtype=np.uint8)
        padded = np.concatenate([c, np.zeros(c.shape[:-1] + (1,), dtype=np.uint8)], axis=-1)
        gathered = padded[..., self.row_cols]  # -1 indexes the zero pad
        return (gathered.sum(axis=-1) % 2 == 0).all(axis=-1)

    def decode(self, llrs: np.ndarray, iterations: int = 20):
        """Min-sum decoding of (..., num_tx_bits) logit LLRs.

        Returns (info_bits (..., k_eff), success (...,)) where success means
        all parity checks were satisfied at exit.
        """
        llrs = np.asarray(llrs, dtype=np.float32)
        if llrs.shape[-1] != self.num_tx_bits:
            raise ValueError(f"expected {self.num_tx_bits} LLRs, got {llrs.shape[-1]}")
        lead = llrs.shape[:-1]
        flat = llrs.reshape(-1, self.num_tx_bits)
        batch = flat.shape[0]

        # assemble full-length channel values in the ln(p0/p1) convention
        chan = np.zeros((batch, self.n), dtype=np.float32)
        chan[:, self.tx_positions] = -flat
        chan[:, self.shortened] = _SHORTENED_LLR

        m_rows, dmax = self.row_cols.shape
        valid = self.row_cols >= 0
        rows_safe = np.where(valid, self.row_cols, 0)

        c2v = np.zeros((batch, m_rows, dmax), dtype=np.float32)
        hard = np.zeros((batch, self.n), dtype=np.uint8)
        done = np.zeros(batch, dtype=bool)

        for _ in range(iterations):
            total = chan + np.sum(
                c2v[:, self.col_rows, self.col_slots], axis=-1, dtype=np.float32)
            bits = (total < 0).astype(np.uint8)
            ok = self.check_parity(bits)
            newly = ok & ~done
            if newly.any():
                hard[newly] = bits[newly]
                done |= newly
            if done.all():
                break

            v2c = total[:, rows_safe] - c2v
            mag = np.where(valid, np.abs(v2c), np.float32(np.inf))
            sgn = np.where(valid & (v2c < 0), -1.0, 1.0).astype(np.float32)
            row_sign = sgn.prod(axis=-1)
            amin = mag.argmin(axis=-1)
            min1 = np.take_along_axis(mag, amin[..., None], axis=-1)[..., 0]
            tmp = mag.copy()
            np.put_along_axis(tmp, amin[..., None], np.float32(np.inf), axis=-1)
            min2 = tmp.min(axis=-1)
            use_min2 = np.arange(dmax)[None, None, :] == amin[..., None]
            out_mag = np.where(use_min2, min2[..., None], min1[..., None])
            c2v = row_sign[..., None] * sgn * out_mag
            c2v[:, ~valid] = 0.0
        else:
            total = chan + np.sum(
                c2v[:, self.col_rows, self.col_slots], axis=-1, dtype=np.float32)
            bits = (total < 0).astype(np.uint8)
            hard[~done] = bits[~done]

        info = hard[:, self.info_positions]
        keep = ~np.isin(self.info_positions, self.shortened)
        info = info[:, keep]
        return info.reshape(lead + (self.k_eff,)), done.reshape(lead)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _greedy_edges(n: int, m: int, rng: np.random.Generator):
    """Column-weight-3 edge placement avoiding 4-cycles where possible."""
    row_sets = [set() for _ in range(m)]
    degrees = np.zeros(m, dtype=np.int64)
    col_rows = np.zeros((n, COLUMN_WEIGHT), dtype=np.int64)
    order_noise = rng.random(m)
    for j in range(n):
        chosen: list[int] = []
        neighbours: set[int] = set()
        for _ in range(COLUMN_WEIGHT):
            ranking = np.lexsort((order_noise, degrees))
            pick = -1
            for r in ranking:
                if r in chosen:
                    continue
                if row_sets[r].isdisjoint(neighbours):
                    pick = int(r)
                    break
            if pick < 0:  # dense tail: accept the least-loaded row
                for r in ranking:
                    if r not in chosen:
                        pick = int(r)
                        break
            chosen.append(pick)
            neighbours |= row_sets[pick]
            degrees[pick] += 1
        order_noise = rng.random(m)
        for slot, r in enumerate(sorted(chosen)):
            col_rows[j, slot] = r
            row_sets[r].add(j)
    return col_rows, row_sets


def _pack_rows(row_sets, n: int) -> np.ndarray:
    m = len(row_sets)
    words = (n + 63) // 64
    packed = np.zeros((m, words), dtype=np.uint64)
    for r, cols in enumerate(row_sets):
        for c in cols:
            packed[r, c // 64] |= np.uint64(1) << np.uint64(c % 64)
    return packed


def _rref_gf2(packed: np.ndarray, n: int):
    """In-place reduced row echelon form; returns (rank, pivot column list)."""
    rows = packed
    m = rows.shape[0]
    pivots: list[int] = []
    r = 0
    for col in range(n):
        if r == m:
            break
        word, bit = divmod(col, 64)
        mask = np.uint64(1) << np.uint64(bit)
        below = np.flatnonzero(rows[r:, word] & mask)
        if below.size == 0:
            continue
        i = r + int(below[0])
        if i != r:
            rows[[r, i]] = rows[[i, r]]
        sel = (rows[:, word] & mask).astype(bool)
        sel[r] = False
        if sel.any():
            rows[sel] ^= rows[r]
        pivots.append(col)
        r += 1
    return r, pivots


def _bit_matrix(packed: np.ndarray, n: int) -> np.ndarray:
    cols = np.arange(n)
    return ((packed[:, cols // 64] >> (cols % 64).astype(np.uint64)) & np.uint64(1)).astype(np.uint8)


def _code_from_adjacency(col_rows: np.ndarray, m: int, n: int,
                         punctured=None, shortened=None) -> LdpcCode:
    row_lists = [[] for _ in range(m)]
    for j in range(n):
        for r in col_rows[j]:
            row_lists[int(r)].append(j)
    dmax = max(len(x) for x in row_lists)
    row_cols = np.full((m, dmax), -1, dtype=np.int32)
    for r, cols in enumerate(row_lists):
        row_cols[r, :len(cols)] = sorted(cols)

    slot_of = {}
    for r in range(m):
        for s, c in enumerate(row_cols[r]):
            if c >= 0:
                slot_of[(r, int(c))] = s
    col_slots = np.zeros_like(col_rows, dtype=np.int32)
    for j in range(n):
        for t, r in enumerate(col_rows[j]):
            col_slots[j, t] = slot_of[(int(r), j)]

    packed = _pack_rows([set(x) for x in row_lists], n)
    rank, pivots = _rref_gf2(packed, n)
    if rank < m:
        raise _RankDeficient()
    free = np.setdiff1d(np.arange(n), np.asarray(pivots))
    bitmat = _bit_matrix(packed, n)
    encode_mat_t = bitmat[:, free].astype(np.float32).T.copy()

    return LdpcCode(
        n=n, k=n - rank,
        row_cols=row_cols,
        col_rows=col_rows.astype(np.int32),
        col_slots=col_slots,
        info_positions=free.astype(np.int64),
        encode_mat_t=encode_mat_t,
        punctured=np.asarray(punctured if punctured is not None else [], dtype=np.int64),
        shortened=np.asarray(shortened if shortened is not None else [], dtype=np.int64),
    )


class _RankDeficient(Exception):
    pass


@functools.lru_cache(maxsize=64)
def build_regular_code(n: int = DEFAULT_N, k: int = DEFAULT_K, seed: int = 0) -> LdpcCode:
    """Seeded column-weight-3 regular code with full-rank parity checks."""
    if not 0 < k < n:
        raise ValueError(f"invalid code dimensions n={n}, k={k}")
    m = n - k
    attempt = 0
    while True:
        rng = np.random.default_rng((7103, n, k, seed + attempt))
        col_rows, _ = _greedy_edges(n, m, rng)
        try:
            return _code_from_adjacency(col_rows, m, n)
        except _RankDeficient:
            attempt += 1
            if attempt > 12:
                raise RuntimeError(f"could not build a full-rank ({n},{k}) code")


@functools.lru_cache(maxsize=64)
def rate_matched_code(num_tx_bits: int, rate: float, seed: int = 0) -> LdpcCode:
    """Rate-1/2 mother code shortened/punctured to (num_tx_bits, rate).

    k_eff = round(rate * num_tx_bits) information bits are carried; the
    mother size is the smallest rate-1/2 code that can supply both the
    information and the parity bits actually transmitted.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"code rate must be in (0,1), got {rate}")
    k_eff = int(round(rate * num_tx_bits))
    if k_eff < 1 or k_eff >= num_tx_bits:
        raise ValueError(f"degenerate rate matching: E={num_tx_bits}, rate={rate}")
    k0 = max(k_eff, num_tx_bits - k_eff)
    n0 = 2 * k0
    base = build_regular_code(n0, k0, seed)
    shortened = base.info_positions[: k0 - k_eff]
    n_parity_tx = num_tx_bits - k_eff
    parity_positions = np.setdiff1d(np.arange(n0), base.info_positions)
    punctured = parity_positions[n_parity_tx:]
    code = LdpcCode(
        n=base.n, k=base.k,
        row_cols=base.row_cols, col_rows=base.col_rows, col_slots=base.col_slots,
        info_positions=base.info_positions, encode_mat_t=base.encode_mat_t,
        punctured=np.asarray(punctured, dtype=np.int64),
        shortened=np.asarray(shortened, dtype=np.int64),
    )
    assert code.num_tx_bits == num_tx_bits and code.k_eff == k_eff
    return code


# ---------------------------------------------------------------------------
# alist interface
# ---------------------------------------------------------------------------


def write_alist(code: LdpcCode, path) -> None:
    """Write the parity-check matrix in standard alist layout (1-based)."""
    m = code.num_checks
    col_deg = [COLUMN_WEIGHT] * code.n
    row_deg = [(code.row_cols[r] >= 0).sum() for r in range(m)]
    lines = [f"{code.n} {m}", f"{max(col_deg)} {max(row_deg)}",
             " ".join(map(str, col_deg)), " ".join(map(str, row_deg))]
    for j in range(code.n):
        entries = [str(int(r) + 1) for r in code.col_rows[j]]
        entries += ["0"] * (max(col_deg) - len(entries))
        lines.append(" ".join(entries))
    for r in range(m):
        entries = [str(int(c) + 1) for c in code.row_cols[r] if c >= 0]
        entries += ["0"] * (max(row_deg) - len(entries))
        lines.append(" ".join(entries))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_alist(path) -> LdpcCode:
    """Load a parity-check matrix from alist text and derive the encoder."""
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    n, m = int(next(it)), int(next(it))
    max_col, max_row = int(next(it)), int(next(it))
    col_deg = [int(next(it)) for _ in range(n)]
    _row_deg = [int(next(it)) for _ in range(m)]
    if any(d != COLUMN_WEIGHT for d in col_deg):
        raise ValueError(f"expected column weight {COLUMN_WEIGHT} throughout, got degrees {sorted(set(col_deg))}")
    col_rows = np.zeros((n, COLUMN_WEIGHT), dtype=np.int64)
    for j in range(n):
        entries = [int(next(it)) for _ in range(max_col)]
        rows = [e - 1 for e in entries if e > 0]
        if len(rows) != COLUMN_WEIGHT:
            raise ValueError(f"column {j} lists {len(rows)} checks")
        col_rows[j] = sorted(rows)
    # per-row lists are redundant with the column lists; skip them
    return _code_from_adjacency(col_rows, m, n)
