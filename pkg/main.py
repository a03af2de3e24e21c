#!/usr/bin/env python3
"""
DiG desk - Main Entry Point
Command-line driver for training, sampling, benchmarking, FLOP tables, the
invariant suite and the results web interface.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from bench import (DEFAULT_T, flops_table, scaling_run, scan_strategy_bench,
                   write_scaling_outputs)
from checks import run_checks
from datasets import make_toy_dataset
from gla import MODES
from model import preset_path
from profiler import create_profiler
from tensor import ConfigError, DiGError, save_tensors
from trainer import (dataset_for, init_state, load_checkpoint, load_config, sample_from_state,
                     train)
from utils import format_bytes, format_table, json_line, write_pgm

logger = logging.getLogger("dig")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def resolve_config(value):
    """(ModelConfig, TrainConfig) from a TOML path or a preset name."""
    path = Path(value)
    if not path.exists() and path.suffix != ".toml":
        path = preset_path(value)
    return load_config(path)


def apply_overrides(args, model_cfg, train_cfg, run_flags=True):
    changes = {}
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    if getattr(args, "chunk", None) is not None:
        changes["chunk"] = args.chunk
    if getattr(args, "patch", None) is not None:
        changes["patch_size"] = args.patch
    if changes:
        model_cfg = model_cfg.replace(**changes)
    train_changes = {}
    if not run_flags:
        return model_cfg, train_cfg
    if getattr(args, "seed", None) is not None:
        train_changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        train_changes["steps"] = args.steps
    if train_changes:
        train_cfg = train_cfg.replace(**train_changes)
    return model_cfg, train_cfg


def cmd_train(args):
    if args.resume:
        state = load_checkpoint(args.resume)
        model_cfg = state.model_cfg
        steps = args.steps
        if steps is None:
            steps = max(0, state.train_cfg.steps - state.step)
        out = Path(args.out) if args.out else Path(args.resume).parent
    else:
        model_cfg, train_cfg = apply_overrides(args, *resolve_config(args.config))
        state = init_state(model_cfg, train_cfg)
        steps = train_cfg.steps
        out = Path(args.out) if args.out else Path("runs") / model_cfg.name
    dataset = dataset_for(model_cfg, state.train_cfg)
    state = train(model_cfg, state.train_cfg, dataset, steps=steps, out_dir=out, state=state,
                  progress=args.progress)
    last = state.history[-1] if state.history else {}
    print(json_line({"step": state.step, "loss_simple": last.get("loss_simple"),
                     "loss_vb": last.get("loss_vb"), "out": str(out)}))
    return 0


def cmd_sample(args):
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    else:
        model_cfg, train_cfg = apply_overrides(args, *resolve_config(args.config),
                                               run_flags=False)
        state = init_state(model_cfg, train_cfg)
    samples = sample_from_state(state, args.num, seed=args.seed, progress=args.progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / "samples.bin", {"samples": samples})
    write_pgm(out / "samples.pgm", samples[:, 0])
    print(json_line({"samples": args.num, "seed": args.seed, "mean": float(samples.mean()),
                     "std": float(samples.std()), "out": str(out)}))
    return 0


def cmd_bench(args):
    profiler = create_profiler()
    profiler.start_profiling()
    if args.strategies:
        model_cfg, train_cfg = resolve_config(args.config)
        model_cfg, _ = apply_overrides(args, model_cfg, train_cfg, run_flags=False)
        result = scan_strategy_bench(model_cfg, repeats=args.repeats, warmup=args.warmup,
                                     profiler=profiler)
        print(format_table(result["rows"], ["strategy", "matrix_ops", "scan_ops", "median_ms",
                                            "p10_ms", "p90_ms"]))
        print(json_line({k: v for k, v in result.items() if k != "rows"}))
    else:
        dtype = np.float64 if args.f64 else np.float32
        if args.mode == "recurrent":
            raise ConfigError("the scaling study times the chunked scan; use --mode chunked")
        chunk = 64 if args.chunk is None else args.chunk
        report = scaling_run(args.D, chunk, args.T, args.batch, dtype=dtype,
                             repeats=args.repeats, warmup=args.warmup, backward=args.backward,
                             profiler=profiler)
        rows = [dict(r, est_peak=format_bytes(r["est_peak_bytes"])) for r in report.rows]
        print(format_table(rows, ["method", "T", "D", "M", "median_ms", "p10_ms", "p90_ms",
                                  "est_peak"]))
        print(json_line(report.summary()))
        if args.out:
            write_scaling_outputs(report, args.out)
    profiler.stop_profiling()
    if args.profile:
        print(profiler.generate_detailed_report())
    return 0


def cmd_flops(args):
    presets = [resolve_config(c)[0] for c in args.config] if args.config else None
    if presets is not None and args.patch is not None:
        presets = [c.replace(patch_size=args.patch, name=f"{c.name}/{args.patch}")
                   for c in presets]
    rows = flops_table(presets) if presets is not None else flops_table(
        patch_sizes=args.patch_sizes)
    for row in rows:
        print(json_line(row))
    return 0


def cmd_check(args):
    results = run_checks(emit=lambda r: print(json_line(r.to_dict()), flush=True))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("failed checks: %s", ", ".join(failed))
        return 1
    return 0


def cmd_dataset(args):
    data = make_toy_dataset(args.kind, args.n, seed=args.seed, size=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / f"{args.kind}.pgm", data.images[:64, 0])
    print(json_line({"kind": args.kind, "n": len(data), "variance": data.channel_variance(),
                     "labels": np.bincount(data.labels).tolist()}))
    return 0


def cmd_serve(args):
    from app import app

    app.run(host=args.host, port=args.port, debug=False)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dig", description="DiG diffusion backbone desk")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p, config_default="toy-s"):
        p.add_argument("--config", default=config_default,
                       help="TOML config file or preset name (default: %(default)s)")
        p.add_argument("--seed", type=int, help="Override the run seed")
        p.add_argument("--mode", choices=MODES, help="GLA scan mode")
        p.add_argument("--chunk", type=int, help="Chunk length M of the chunked scan")
        p.add_argument("--patch", type=int, help="Override the patch size")

    p = sub.add_parser("train", help="Train a model on a toy dataset")
    model_flags(p)
    p.add_argument("--steps", type=int, help="Number of optimizer steps")
    p.add_argument("--out", help="Run directory (default: runs/<name>)")
    p.add_argument("--resume", help="Checkpoint directory to continue from")
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="Draw samples with the EMA weights")
    model_flags(p)
    p.set_defaults(seed=0)
    p.add_argument("--checkpoint", help="Checkpoint directory (default: untrained model)")
    p.add_argument("--num", type=int, default=16, help="Number of samples")
    p.add_argument("--out", default="samples", help="Output directory")
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="Attention scaling study or scan-strategy timing")
    p.add_argument("--D", type=int, default=64, help="Key/value width")
    p.add_argument("--chunk", "--M", dest="chunk", type=int,
                   help="Chunk length M (default: 64, or the preset's with --strategies)")
    p.add_argument("--mode", choices=MODES, help="GLA scan mode for --strategies")
    p.add_argument("--T", type=int, nargs="+", default=list(DEFAULT_T), help="Sequence lengths")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--backward", action="store_true", help="Time forward and backward")
    p.add_argument("--f64", action="store_true", help="Time in float64 instead of float32")
    p.add_argument("--strategies", action="store_true", help="Compare scanning strategies")
    p.add_argument("--config", default="toy-b", help="Preset for --strategies")
    p.add_argument("--out", help="Directory for bench.csv and bench.json")
    p.add_argument("--profile", action="store_true", help="Print the profiler report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="Analytic FLOP table")
    p.add_argument("--config", action="append", help="Config file or preset (repeatable)")
    p.add_argument("--patch", type=int, help="Patch size override for --config")
    p.add_argument("--patch-sizes", type=int, nargs="*", help="Extra patch sizes for the table")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("check", help="Run the invariant suite")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("dataset", help="Write a preview of a toy dataset")
    p.add_argument("kind")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--out", default="datasets")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("serve", help="Serve the results web interface")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5000)
    p.set_defaults(func=cmd_serve)
    return parser


def cli(argv=None):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.func(args)
    except DiGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    """Main entry point for the DiG desk"""
    sys.exit(cli())


if __name__ == "__main__":
    main()
