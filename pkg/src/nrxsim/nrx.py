"""The neural receiver: an unrolled convolutional graph network over the grid.

Per user, a state tensor of shape (S, T, d_s) is initialized by a small CNN
from the received grid, the user's LS channel estimate, a positional
encoding of pilot distances, and (optionally) a log-noise-power plane. A
shared iteration block is then applied up to N_it times: a per-RE MLP turns
states into messages, each user receives the sum of all other users'
messages, and a CNN updates the state from (state, aggregate, positional
encoding) with a residual connection. Two MLP readouts map the final state
to per-bit LLR logits and to a refined channel estimate.

Variants:
  single   -- one set of IO layers, LLR width = the single configured order
  masking  -- LLR width m_max; lower orders keep the label-prefix slice
  var_io   -- per-modulation StateInit and ReadoutLLRs around shared blocks

The iteration block shares one weight set across all its applications, so
the unrolled depth can be reduced at inference without retraining.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classical import ls_estimate
from .slot import PilotBook, SlotConfig

VARIANTS = ("single", "masking", "var_io")
_CKPT_MAGIC = b"NRXW"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class NrxConfig:
    """Architecture hyperparameters of the receiver network."""

    d_s: int = 16
    num_iterations: int = 4
    kernel_size: int = 3
    hidden_width: int | None = None  # MLP hidden width; defaults to d_s
    variant: str = "single"
    supported_mcs: tuple[int, ...] = (14,)
    m_max: int = 4
    io_modulations: tuple[int, ...] = ()  # var_io only: distinct orders
    num_rx_ant: int = 4
    include_noise_plane: bool = True
    include_freq_encoding: bool = True

    def __post_init__(self):
        if self.d_s < 4:
            raise ValueError(f"state depth d_s must be >= 4, got {self.d_s}")
        if self.num_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.variant == "var_io" and not self.io_modulations:
            raise ValueError("var_io needs io_modulations")
        if any(i < 0 or i > 31 for i in self.supported_mcs):
            raise ValueError("MCS indices must fit the checkpoint bitmap (0..31)")
        if self.hidden_width is None:
            object.__setattr__(self, "hidden_width", self.d_s)

    @classmethod
    def from_table(cls, mcs_table, supported_mcs, variant="single", **kw):
        orders = tuple(mcs_table[i].modulation_order for i in supported_mcs)
        if variant == "single" and len(set(orders)) != 1:
            raise ValueError("single variant expects one modulation order")
        return cls(variant=variant,
                   supported_mcs=tuple(supported_mcs),
                   m_max=max(orders),
                   io_modulations=tuple(sorted(set(orders))) if variant == "var_io" else (),
                   **kw)

    @property
    def hidden(self) -> int:
        return self.hidden_width or self.d_s

    @property
    def input_channels(self) -> int:
        return 4 * self.num_rx_ant + 2 + (1 if self.include_noise_plane else 0)

    def llr_width(self, modulation_order: int) -> int:
        return modulation_order if self.variant == "var_io" else self.m_max


def expected_shapes(config: NrxConfig) -> dict:
    """Exact name -> shape map of the weight tensors for a configuration."""
    k, ds, hid = config.kernel_size, config.d_s, config.hidden
    cin = config.input_channels
    shapes: dict[str, tuple] = {}

    def conv_block(prefix, c0):
        shapes[f"{prefix}.conv0.w"] = (k, k, c0, ds)
        shapes[f"{prefix}.conv0.b"] = (ds,)
        shapes[f"{prefix}.conv1.w"] = (k, k, ds, ds)
        shapes[f"{prefix}.conv1.b"] = (ds,)

    def mlp(prefix, out):
        shapes[f"{prefix}.fc0.w"] = (ds, hid)
        shapes[f"{prefix}.fc0.b"] = (hid,)
        shapes[f"{prefix}.fc1.w"] = (hid, out)
        shapes[f"{prefix}.fc1.b"] = (out,)

    if config.variant == "var_io":
        for m in config.io_modulations:
            conv_block(f"state_init.m{m}", cin)
            mlp(f"readout_llr.m{m}", m)
    else:
        conv_block("state_init", cin)
        mlp("readout_llr", config.m_max)
    mlp("iteration.msg", ds)
    conv_block("iteration.update", 2 * ds + 2)
    mlp("readout_chest", 2 * config.num_rx_ant)
    return shapes


def init_weights(config: NrxConfig, seed: int) -> dict:
    """Seeded Glorot-uniform weights, zero biases, float32."""
    rng = np.random.default_rng((seed, 0x17EC))
    weights = {}
    for name, shape in sorted(expected_shapes(config).items()):
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = ad.glorot_uniform(rng, shape)
        weights[name] = ad.Tensor(arr, requires_grad=True)
    return weights


def count_parameters(weights: dict) -> int:
    return int(sum(t.data.size for t in weights.values()))


def active_parameter_count(config: NrxConfig, weights: dict, modulation_order: int) -> int:
    """Weights touched by one inference; for var_io only the active IO pair."""
    if config.variant != "var_io":
        return count_parameters(weights)
    total = 0
    for name, t in weights.items():
        if name.startswith(("state_init.m", "readout_llr.m")):
            prefix_m = int(name.split(".m", 1)[1].split(".", 1)[0])
            if prefix_m != modulation_order:
                continue
        total += t.data.size
    return total


# ---------------------------------------------------------------------------
# positional encoding and feature assembly
# ---------------------------------------------------------------------------


def positional_encoding(cfg: SlotConfig, ue: int, include_freq: bool = True) -> np.ndarray:
    """(S, T, 2) normalized distances to the nearest pilot symbol / comb
    subcarrier of the UE; exactly zero on the UE's pilot REs."""
    ps = np.asarray(cfg.pilot_symbols)
    t = np.arange(cfg.num_symbols)
    dt = np.min(np.abs(t[:, None] - ps[None, :]), axis=1) / cfg.num_symbols
    sc = cfg.comb_subcarriers(ue)
    s = np.arange(cfg.num_subcarriers)
    df = np.min(np.abs(s[:, None] - sc[None, :]), axis=1) / cfg.num_subcarriers
    if not include_freq:
        df = np.zeros_like(df)
    out = np.empty((cfg.num_subcarriers, cfg.num_symbols, 2), dtype=np.float32)
    out[..., 0] = dt[None, :]
    out[..., 1] = df[:, None]
    return out


def _ri(x: np.ndarray) -> np.ndarray:
    """Complex (..., B) -> real (..., 2B), channels interleaved re/im."""
    out = np.empty(x.shape + (2,), dtype=np.float32)
    out[..., 0] = x.real
    out[..., 1] = x.imag
    return out.reshape(x.shape[:-1] + (2 * x.shape[-1],))


def assemble_features(y: np.ndarray, ls_eff: np.ndarray, n0, cfg: SlotConfig,
                      config: NrxConfig) -> np.ndarray:
    """Stack the network inputs to (N, U, S, T, C_in) float32.

    y: (N, S, T, B) complex, ls_eff: (N, U, S, T, B) complex, n0: (N,).
    """
    n, u = ls_eff.shape[0], ls_eff.shape[1]
    s_dim, t_dim = cfg.num_subcarriers, cfg.num_symbols
    feats = np.empty((n, u, s_dim, t_dim, config.input_channels), dtype=np.float32)
    b2 = 2 * cfg.bs_antennas
    feats[..., :b2] = _ri(y)[:, None]
    feats[..., b2:2 * b2] = _ri(ls_eff)
    for ue in range(u):
        feats[:, ue, ..., 2 * b2:2 * b2 + 2] = positional_encoding(
            cfg, ue, config.include_freq_encoding)
    if config.include_noise_plane:
        log_n0 = np.log10(np.maximum(np.asarray(n0, dtype=np.float32), 1e-30))
        feats[..., -1] = log_n0.reshape(-1, 1, 1, 1)
    return feats


def ls_features(y: np.ndarray, books, cfg: SlotConfig) -> np.ndarray:
    """Per-sample LS estimates (N, U, S, T, B) for a batch of received grids."""
    n = y.shape[0]
    out = np.empty((n, cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols,
                    cfg.bs_antennas), dtype=np.complex128)
    for i in range(n):
        book = books[i] if not isinstance(books, PilotBook) else books
        out[i] = ls_estimate(y[i], book, cfg).h_eff
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _mlp(x, w, prefix, out_relu=False):
    c = x.shape[-1]
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, c))
    h = ad.relu(ad.add(ad.matmul(flat, w[f"{prefix}.fc0.w"]), w[f"{prefix}.fc0.b"]))
    out = ad.add(ad.matmul(h, w[f"{prefix}.fc1.w"]), w[f"{prefix}.fc1.b"])
    if out_relu:
        out = ad.relu(out)
    return ad.reshape(out, lead + (out.shape[-1],))


def _conv_block(x, w, prefix):
    h = ad.relu(ad.add(ad.conv2d(x, w[f"{prefix}.conv0.w"]), w[f"{prefix}.conv0.b"]))
    return ad.add(ad.conv2d(h, w[f"{prefix}.conv1.w"]), w[f"{prefix}.conv1.b"])


def _grouped_state_init(feats_t, w, config, mod_per_slab):
    """Apply the (possibly modulation-specific) init CNN to (NU, S, T, C)."""
    if config.variant != "var_io":
        return _conv_block(feats_t, w, "state_init")
    mods = np.asarray(mod_per_slab)
    pieces, order = [], []
    for m in config.io_modulations:
        idx = np.flatnonzero(mods == m)
        if idx.size:
            pieces.append(_conv_block(feats_t[idx], w, f"state_init.m{m}"))
            order.append(idx)
    inverse = np.argsort(np.concatenate(order))
    return ad.tensor_slice(ad.concat(pieces, axis=0), inverse)


def cgnn_iteration(state_t, pos_t, active_t, w, batch, num_ues):
    """One synchronous message-passing update of all user states.

    state_t: (N*U, S, T, d_s) Tensor; pos_t: (N*U, S, T, 2); active_t:
    (N, U, 1, 1, 1) activity mask. All users read pre-update states.
    """
    msg = _mlp(state_t, w, "iteration.msg")
    shaped = ad.reshape(msg, (batch, num_ues) + msg.shape[1:])
    agg = ad.sum_others(ad.mul(shaped, active_t), axis=1)
    agg_flat = ad.reshape(agg, (batch * num_ues,) + agg.shape[2:])
    upd_in = ad.concat([state_t, agg_flat, pos_t], axis=-1)
    return ad.add(state_t, _conv_block(upd_in, w, "iteration.update"))


def readout_chest(state_t, w):
    return _mlp(state_t, w, "readout_chest")


def readout_llrs(state_t, w, config: NrxConfig, mod_per_slab):
    """LLR readout; returns (groups, slab_indices) where each group is a
    Tensor (n_slabs, S, T, width). Single/masking variants yield one group."""
    if config.variant != "var_io":
        return [(_mlp(state_t, w, "readout_llr"), np.arange(state_t.shape[0]))]
    mods = np.asarray(mod_per_slab)
    out = []
    for m in config.io_modulations:
        idx = np.flatnonzero(mods == m)
        if idx.size:
            out.append((_mlp(state_t[idx], w, f"readout_llr.m{m}"), idx))
    return out


def mask_llrs(llr: np.ndarray, modulation_order: int, m_max: int) -> np.ndarray:
    """Keep the label-prefix positions the Gray recursion assigns to the
    target order (quadrant bits first)."""
    if modulation_order > m_max:
        raise ValueError(f"cannot mask to order {modulation_order} from width {m_max}")
    return llr[..., :modulation_order]


@dataclass
class ForwardReadouts:
    """Per-iteration graph outputs of a training-mode forward pass."""

    llr_groups: list        # per iteration: list of (Tensor, slab indices)
    chest: list             # per iteration: Tensor (N*U, S, T, 2B)
    batch: int
    num_ues: int


def nrx_forward_graph(features: np.ndarray, w: dict, config: NrxConfig,
                      cfg: SlotConfig, mod_per_ue: np.ndarray,
                      num_iterations: int | None = None, training: bool = False,
                      active: np.ndarray | None = None,
                      collect_chest: bool = True) -> ForwardReadouts:
    """Run the network on assembled features (N, U, S, T, C_in).

    mod_per_ue: (N, U) modulation order per slab; with training=True the
    readouts of every iteration are collected for the multi-loss.
    """
    n_it = config.num_iterations if num_iterations is None else int(num_iterations)
    if not 1 <= n_it <= config.num_iterations:
        raise ValueError(f"inference depth {n_it} outside [1, {config.num_iterations}]")
    batch, num_ues = features.shape[0], features.shape[1]
    bad = set(np.unique(mod_per_ue)) - set(
        config.io_modulations if config.variant == "var_io" else range(1, config.m_max + 1))
    if bad:
        raise ValueError(f"modulation orders {sorted(bad)} not supported by this model")

    feats_t = ad.Tensor(features.reshape((batch * num_ues,) + features.shape[2:]))
    pos = features[..., 4 * config.num_rx_ant:4 * config.num_rx_ant + 2]
    pos_t = ad.Tensor(pos.reshape((batch * num_ues,) + pos.shape[2:]))
    if active is None:
        active = np.ones((batch, num_ues), dtype=np.float32)
    active_t = ad.Tensor(active.reshape(batch, num_ues, 1, 1, 1).astype(np.float32))

    mod_slab = np.asarray(mod_per_ue).reshape(-1)
    state = _grouped_state_init(feats_t, w, config, mod_slab)

    llr_per_it, chest_per_it = [], []
    for _ in range(n_it):
        state = cgnn_iteration(state, pos_t, active_t, w, batch, num_ues)
        if training:
            llr_per_it.append(readout_llrs(state, w, config, mod_slab))
            if collect_chest:
                chest_per_it.append(readout_chest(state, w))
    if not training:
        llr_per_it = [readout_llrs(state, w, config, mod_slab)]
        chest_per_it = [readout_chest(state, w)]
    return ForwardReadouts(llr_groups=llr_per_it, chest=chest_per_it,
                           batch=batch, num_ues=num_ues)


def nrx_forward(y: np.ndarray, books, cfg: SlotConfig, mcs_per_ue, w: dict,
                config: NrxConfig, n0, num_iterations: int | None = None,
                apply_mask: bool = True):
    """Full receiver pass on received grids.

    y: (N, S, T, B) or (S, T, B) complex; books: PilotBook or list per
    sample; mcs_per_ue: per-UE McsEntry. Returns (llrs, chest): llrs is a
    list per UE of (N, S, T, m_u) arrays (masked for the masking variant),
    chest is (N, U, S, T, B) complex refined channel estimates.
    """
    unsupported = [m.index for m in mcs_per_ue if m.index not in config.supported_mcs]
    if unsupported:
        raise ValueError(f"MCS indices {unsupported} not in the model's supported set {config.supported_mcs}")
    single = y.ndim == 3
    if single:
        y = y[None]
    n = y.shape[0]
    n0_arr = np.full(n, n0, dtype=np.float64) if np.isscalar(n0) else np.asarray(n0)
    ls_eff = ls_features(y, books, cfg)
    feats = assemble_features(y, ls_eff, n0_arr, cfg, config)
    mods = np.tile([m.modulation_order for m in mcs_per_ue], (n, 1))
    out = nrx_forward_graph(feats, w, config, cfg, mods, num_iterations, training=False)

    width = {u: config.llr_width(mcs_per_ue[u].modulation_order) for u in range(cfg.num_ues)}
    llr_full = np.zeros((n, cfg.num_ues, cfg.num_subcarriers, cfg.num_symbols,
                         max(width.values())), dtype=np.float32)
    for tensor, idx in out.llr_groups[-1]:
        data = tensor.data
        llr_full[idx // cfg.num_ues, idx % cfg.num_ues, ..., :data.shape[-1]] = data
    llrs = []
    for u in range(cfg.num_ues):
        m = mcs_per_ue[u].modulation_order
        grid = llr_full[:, u, ..., :width[u]]
        if apply_mask and config.variant != "var_io":
            grid = mask_llrs(grid, m, config.m_max)
        llrs.append(grid[0] if single else grid)

    ch = out.chest[-1].data.reshape(n, cfg.num_ues, cfg.num_subcarriers,
                                    cfg.num_symbols, 2, cfg.bs_antennas)
    chest = (ch[..., 0, :] + 1j * ch[..., 1, :]).astype(np.complex64)
    return llrs, (chest[0] if single else chest)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_VARIANT_IDS = {name: i for i, name in enumerate(VARIANTS)}


def checkpoint_save(path, config: NrxConfig, weights: dict) -> None:
    """Binary checkpoint: magic, version, config block, named f32 tensors."""
    shapes = expected_shapes(config)
    if set(shapes) != set(weights):
        missing = set(shapes) ^ set(weights)
        raise ValueError(f"weights do not match the configuration: {sorted(missing)}")
    flags = (1 if config.include_noise_plane else 0) | (2 if config.include_freq_encoding else 0)
    bitmap = 0
    for i in config.supported_mcs:
        bitmap |= 1 << i
    blob = [_CKPT_MAGIC, struct.pack("<7I", _CKPT_VERSION, config.d_s, config.num_iterations,
                                     _VARIANT_IDS[config.variant], config.m_max, flags, bitmap),
            struct.pack("<I", len(weights))]
    for name in sorted(weights):
        t = weights[name]
        data = np.ascontiguousarray(t.data, dtype="<f4")
        blob.append(struct.pack("<H", len(name.encode())))
        blob.append(name.encode())
        blob.append(struct.pack("<B", data.ndim))
        blob.append(struct.pack(f"<{data.ndim}I", *data.shape))
        blob.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def checkpoint_load(path):
    """Load (NrxConfig, weights) with shape validation against the config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}")
    version, d_s, n_it, variant_id, m_max, flags, bitmap = struct.unpack("<7I", blob[4:32])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    count, = struct.unpack("<I", blob[32:36])
    pos = 36
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack("<H", blob[pos:pos + 2]); pos += 2
        name = blob[pos:pos + nlen].decode(); pos += nlen
        rank, = struct.unpack("<B", blob[pos:pos + 1]); pos += 1
        dims = struct.unpack(f"<{rank}I", blob[pos:pos + 4 * rank]); pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob[pos:pos + 4 * size], dtype="<f4").reshape(dims).copy()
        pos += 4 * size
        tensors[name] = arr
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")

    variant = VARIANTS[variant_id]
    io_mods = tuple(sorted({int(n.split(".m", 1)[1].split(".", 1)[0])
                            for n in tensors if n.startswith("state_init.m")}))
    chest_b = tensors.get("readout_chest.fc1.b")
    if chest_b is None:
        raise ValueError(f"{path}: checkpoint lacks readout_chest.fc1.b")
    some_conv = next(n for n in sorted(tensors)
                     if n.startswith("state_init") and n.endswith("conv0.w"))
    k = tensors[some_conv].shape[0]
    hid = tensors["iteration.msg.fc0.w"].shape[1]
    cin = tensors[some_conv].shape[2]
    num_rx = chest_b.size // 2
    noise_plane = bool(flags & 1)
    config = NrxConfig(
        d_s=d_s, num_iterations=n_it, kernel_size=k, hidden_width=hid,
        variant=variant, supported_mcs=tuple(i for i in range(32) if bitmap >> i & 1),
        m_max=m_max, io_modulations=io_mods, num_rx_ant=num_rx,
        include_noise_plane=noise_plane, include_freq_encoding=bool(flags & 2))
    if cin != config.input_channels:
        raise ValueError(f"{path}: {some_conv} has {cin} input channels, config implies {config.input_channels}")
    shapes = expected_shapes(config)
    if set(shapes) != set(tensors):
        raise ValueError(f"{path}: tensor names do not match config: {sorted(set(shapes) ^ set(tensors))}")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise ValueError(f"{path}: tensor '{name}' has shape {tensors[name].shape}, expected {shape}")
    weights = {n: ad.Tensor(a, requires_grad=True) for n, a in tensors.items()}
    return config, weights
