"""Structured text configuration: INI sections mapped onto the dataclasses.

Sections: [slot], [channel], [mcs], [nrx], [train], [eval]. Every key can be
overridden on the command line as --section.key=value. The [mcs] section is
the MCS table itself: `index = modulation_order, code_rate` per row.
"""

from __future__ import annotations

import configparser
import io

import numpy as np

from .channel import PROFILES, CirDatasetSource, TdlChannelSource, dataset_read
from .evaluation import EvalConfig
from .nrx import NrxConfig
from .slot import McsEntry, SlotConfig
from .training import TrainConfig

DEFAULT_CONFIG = """
[slot]
num_subcarriers = 24
num_symbols = 14
pilot_symbols = 2,11
comb_size = 2
num_ues = 2
bs_antennas = 4
ue_antennas = 2
subcarrier_spacing_hz = 30e3
cp_fraction = 0.07

[channel]
# per-UE taps: profile:doppler_hz:delay_spread_s; or source = cir:<path>
ue0 = tdl_b:400:100e-9
ue1 = tdl_c:100:300e-9

[mcs]
9 = 2, 0.6630859375
14 = 4, 0.5400390625
19 = 6, 0.5048828125

[nrx]
d_s = 16
num_iterations = 4
kernel_size = 3
variant = single
supported_mcs = 14
include_noise_plane = true
include_freq_encoding = true

[train]
batch_size = 16
steps = 10000
snr_lo_db = 0
snr_hi_db = 9
gamma = 0.1
learning_rate = 1e-3
mcs_snr_offsets_db = 9:0,14:2,19:5
snapshot_steps =
log_every = 200

[eval]
snr_grid_db = 5,6,7,8,9,10,11
receivers = ls_lmmse,lmmse_kbest,nrx
mcs_indices = 14,14
min_block_errors = 200
max_blocks = 20000
kbest_k = 16
chunk_slots = 128
num_workers = 1
llr_clip = 20
decoder_iterations = 20
covariance_samples = 500
"""


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    """Defaults, optionally overlaid with a file and --section.key=value pairs."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_file(io.StringIO(DEFAULT_CONFIG))
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    for item in overrides:
        key, _, value = item.partition("=")
        key = key.lstrip("-")
        section, _, option = key.partition(".")
        if not (section and option and _):
            raise ValueError(f"override '{item}' is not of the form section.key=value")
        if not parser.has_section(section):
            raise ValueError(f"unknown config section '{section}'")
        parser.set(section, option, value)
    return parser


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _ints(text: str) -> tuple:
    return tuple(int(float(x)) for x in text.replace(" ", "").split(",") if x)


def build_slot_config(cfg: configparser.ConfigParser) -> SlotConfig:
    s = cfg["slot"]
    return SlotConfig(
        num_subcarriers=s.getint("num_subcarriers"),
        num_symbols=s.getint("num_symbols"),
        pilot_symbols=_ints(s.get("pilot_symbols")),
        comb_size=s.getint("comb_size"),
        num_ues=s.getint("num_ues"),
        bs_antennas=s.getint("bs_antennas"),
        ue_antennas=s.getint("ue_antennas"),
        subcarrier_spacing_hz=s.getfloat("subcarrier_spacing_hz"),
        cp_fraction=s.getfloat("cp_fraction"),
    )


def build_mcs_table(cfg: configparser.ConfigParser) -> dict:
    table = {}
    for key, value in cfg["mcs"].items():
        idx = int(key)
        m, r = (x.strip() for x in value.split(","))
        table[idx] = McsEntry(index=idx, modulation_order=int(m), code_rate=float(r))
    return table


def build_channel_source(cfg: configparser.ConfigParser, slot_cfg: SlotConfig):
    c = cfg["channel"]
    src = c.get("source", fallback="").strip()
    if src.startswith("cir:"):
        return CirDatasetSource(dataset_read(src[4:]))
    profiles = []
    for u in range(slot_cfg.num_ues):
        spec = c.get(f"ue{u}", fallback=None)
        if spec is None:
            spec = c.get("ue0")
        name, doppler, spread = spec.split(":")
        if name not in PROFILES:
            raise ValueError(f"unknown TDL profile '{name}', have {sorted(PROFILES)}")
        profiles.append(PROFILES[name](delay_spread_s=float(spread), doppler_hz=float(doppler)))
    return TdlChannelSource(profiles)


def build_nrx_config(cfg: configparser.ConfigParser, mcs_table, slot_cfg: SlotConfig) -> NrxConfig:
    n = cfg["nrx"]
    return NrxConfig.from_table(
        mcs_table,
        supported_mcs=_ints(n.get("supported_mcs")),
        variant=n.get("variant"),
        d_s=n.getint("d_s"),
        num_iterations=n.getint("num_iterations"),
        kernel_size=n.getint("kernel_size"),
        num_rx_ant=slot_cfg.bs_antennas,
        include_noise_plane=n.getboolean("include_noise_plane"),
        include_freq_encoding=n.getboolean("include_freq_encoding"),
    )


def _offsets(text: str) -> tuple:
    pairs = []
    for item in text.replace(" ", "").split(","):
        if item:
            idx, _, off = item.partition(":")
            pairs.append((int(idx), float(off)))
    return tuple(pairs)


def build_train_config(cfg: configparser.ConfigParser, seed: int, **extra) -> TrainConfig:
    t = cfg["train"]
    n = cfg["nrx"]
    kw = dict(
        batch_size=t.getint("batch_size"),
        steps=t.getint("steps"),
        snr_lo_db=t.getfloat("snr_lo_db"),
        snr_hi_db=t.getfloat("snr_hi_db"),
        gamma=t.getfloat("gamma"),
        learning_rate=t.getfloat("learning_rate"),
        supported_mcs=_ints(n.get("supported_mcs")),
        max_ues=build_slot_config(cfg).num_ues,
        mcs_snr_offsets_db=_offsets(t.get("mcs_snr_offsets_db")),
        snapshot_steps=_ints(t.get("snapshot_steps", "")),
        log_every=t.getint("log_every"),
        seed=seed,
    )
    kw.update(extra)
    return TrainConfig(**kw)


def build_eval_config(cfg: configparser.ConfigParser, seed: int, **extra) -> EvalConfig:
    e = cfg["eval"]
    kw = dict(
        snr_grid_db=_floats(e.get("snr_grid_db")),
        receivers=tuple(x.strip() for x in e.get("receivers").split(",") if x.strip()),
        mcs_indices=_ints(e.get("mcs_indices")),
        seed=seed,
        min_block_errors=e.getint("min_block_errors"),
        max_blocks=e.getint("max_blocks"),
        kbest_k=e.getint("kbest_k"),
        chunk_slots=e.getint("chunk_slots"),
        num_workers=e.getint("num_workers"),
        llr_clip=e.getfloat("llr_clip"),
        decoder_iterations=e.getint("decoder_iterations"),
        covariance_samples=e.getint("covariance_samples"),
    )
    kw.update(extra)
    return EvalConfig(**kw)
