"""Command-line interface: train, finetune, eval, bench, dataset gen.

All subcommands read the INI configuration (defaults, optional file, then
--section.key=value overrides) and require an explicit --seed.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import configio
from .channel import dataset_read, dataset_write, generate_dataset
from .evaluation import (evaluate_tbler, latency_bench, snr_at_tbler,
                         write_latency_csv, write_metrics_csv, write_sweep_csv)
from .nrx import checkpoint_load, checkpoint_save, count_parameters, init_weights
from .training import fine_tune, train

log = logging.getLogger("nrxsim")

FT_MILESTONES = (100, 300, 1000, 3000, 10_000, 30_000, 100_000)


def _add_common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, required=True, help="run seed (mandatory)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override; bare --section.key=value also works")


def _setup(args, extra):
    overrides = list(args.set)
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item)
        else:
            raise SystemExit(f"unrecognized argument: {item}")
    return configio.load_config(args.config, overrides)


def _progress_record(rec):
    log.info("%s @ %.2f dB: TBLER=%.4g BER=%.4g (%d blocks)",
             rec.receiver, rec.snr_db, rec.tbler, rec.ber, rec.blocks)


def cmd_train(args, extra) -> int:
    cfg = _setup(args, extra)
    slot_cfg = configio.build_slot_config(cfg)
    table = configio.build_mcs_table(cfg)
    model_cfg = configio.build_nrx_config(cfg, table, slot_cfg)
    tcfg = configio.build_train_config(cfg, args.seed)
    source = configio.build_channel_source(cfg, slot_cfg)
    weights = init_weights(model_cfg, seed=args.seed)
    log.info("training %s variant, %d weights, %d steps on %s",
             model_cfg.variant, count_parameters(weights), tcfg.steps, source.describe())
    result = train(weights, model_cfg, slot_cfg, source, tcfg, table)
    checkpoint_save(args.out, model_cfg, weights)
    log.info("saved %s after %d steps (%.1f s)", args.out, result.steps_done, result.wall_time_s)
    return 0


def cmd_finetune(args, extra) -> int:
    cfg = _setup(args, extra)
    slot_cfg = configio.build_slot_config(cfg)
    table = configio.build_mcs_table(cfg)
    model_cfg, weights = checkpoint_load(args.ckpt)
    tcfg = configio.build_train_config(cfg, args.seed, fine_tune=True, steps=args.num_ft)
    data = dataset_read(args.dataset) if args.dataset else configio.build_channel_source(cfg, slot_cfg)
    milestones = tuple(m for m in FT_MILESTONES if m <= args.num_ft) if args.sweep_csv else ()
    result = fine_tune(weights, model_cfg, slot_cfg, data, args.num_ft, args.num_td,
                       tcfg, table, snapshot_steps=milestones)
    checkpoint_save(args.out, model_cfg, weights)
    log.info("saved fine-tuned checkpoint %s", args.out)

    if args.sweep_csv:
        source = configio.build_channel_source(cfg, slot_cfg)
        ecfg = configio.build_eval_config(cfg, args.seed, receivers=("nrx",))
        rows = []
        for step in milestones:
            snap = result.snapshots.get(step)
            if snap is None:
                continue
            records = evaluate_tbler(slot_cfg, source, ecfg, table,
                                     nrx_model=(model_cfg, snap), progress=_progress_record)
            point = snr_at_tbler(records, target=args.tbler_target)
            rows.append((step, args.num_td or 0, point.snr_db, args.eval_set_name))
        write_sweep_csv(rows, args.sweep_csv)
        log.info("wrote sweep CSV %s", args.sweep_csv)
    return 0


def cmd_eval(args, extra) -> int:
    cfg = _setup(args, extra)
    slot_cfg = configio.build_slot_config(cfg)
    table = configio.build_mcs_table(cfg)
    ecfg = configio.build_eval_config(cfg, args.seed)
    source = configio.build_channel_source(cfg, slot_cfg)
    nrx_model = checkpoint_load(args.ckpt) if args.ckpt else None
    if "nrx" in ecfg.receivers and nrx_model is None:
        raise SystemExit("--ckpt is required when the receiver list includes 'nrx'")
    records = evaluate_tbler(slot_cfg, source, ecfg, table, nrx_model=nrx_model,
                             progress=_progress_record)
    write_metrics_csv(records, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_bench(args, extra) -> int:
    cfg = _setup(args, extra)
    slot_cfg = configio.build_slot_config(cfg)
    table = configio.build_mcs_table(cfg)
    if args.ckpt:
        model = checkpoint_load(args.ckpt)
    else:
        model_cfg = configio.build_nrx_config(cfg, table, slot_cfg)
        model = (model_cfg, init_weights(model_cfg, seed=args.seed))
    if ":" in args.depths:
        lo, hi = args.depths.split(":")
        depths = tuple(range(int(lo), int(hi) + 1))
    else:
        depths = tuple(int(x) for x in args.depths.split(","))
    report = latency_bench(model, slot_cfg, table, depths, runs=args.runs, seed=args.seed)
    write_latency_csv(report, args.out)
    log.info("wrote %s (a=%.3g s, b=%.3g s/iter, R2=%.4f)", args.out,
             report.overhead_s, report.per_iteration_s, report.r_squared)
    return 0


def cmd_dataset_gen(args, extra) -> int:
    cfg = _setup(args, extra)
    slot_cfg = configio.build_slot_config(cfg)
    source = configio.build_channel_source(cfg, slot_cfg)
    samples = generate_dataset(source, slot_cfg, args.num_samples, seed=args.seed)
    dataset_write(args.out, samples)
    log.info("wrote %d channel samples to %s", args.num_samples, args.out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    parser = argparse.ArgumentParser(prog="nrxsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a neural receiver")
    _add_common(p)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint to recorded channels")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="CIRD dataset path (defaults to the [channel] source)")
    p.add_argument("--num-ft", type=int, required=True, help="fine-tuning steps")
    p.add_argument("--num-td", type=int, default=None, help="dataset samples to use")
    p.add_argument("--sweep-csv", help="write SNR@TBLER sweep over milestones")
    p.add_argument("--tbler-target", type=float, default=0.1)
    p.add_argument("--eval-set-name", default="site")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="Monte-Carlo TBLER/BER sweep")
    _add_common(p)
    p.add_argument("--ckpt", help="NRX checkpoint (required if receivers include nrx)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="single-stream inference latency")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--depths", default="1:8", help="e.g. 1:8 or 1,2,4")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p_ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = p_ds.add_subparsers(dest="ds_command", required=True)
    p = ds_sub.add_parser("gen", help="record channels into a CIRD file")
    _add_common(p)
    p.add_argument("--num-samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset_gen)

    args, extra = parser.parse_known_args(argv)
    return args.fn(args, extra)


if __name__ == "__main__":
    raise SystemExit(main())
