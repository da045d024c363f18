"""Command-line entry point.

    lalign run <config-path> [--out DIR] [--seed N] [--threads N]
               [--resume CKPT] [--force]
    lalign gen-data <spec-path> --count N --seed N --out FILE
    lalign inspect <checkpoint>

Thread count resolution: --threads, then the LALIGN_THREADS environment
variable, then the config's `threads` key.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, describe_checkpoint, load_checkpoint
from .config import ConfigError, load_config, synth_spec_from_file
from .experiment import RunError, run
from .synthdata import gen_dataset, save_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lalign",
                                     description="Locality-alignment experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--out", type=Path, default=None, help="output directory (default: ./<run_id>)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--threads", type=int, default=None, help="intra-stage parallelism bound")
    p_run.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p_run.add_argument("--force", action="store_true",
                       help="resume even if the checkpoint fingerprint does not match")

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p_gen.add_argument("spec", type=Path, help="key-value file with dataset spec fields")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", type=Path, required=True)

    p_ins = sub.add_parser("inspect", help="print checkpoint tensor names, shapes, checksums")
    p_ins.add_argument("checkpoint", type=Path)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    elif os.environ.get("LALIGN_THREADS"):
        cfg.threads = int(os.environ["LALIGN_THREADS"])
    out_dir = args.out if args.out is not None else Path.cwd() / cfg.run_id
    return run(cfg, out_dir, resume_from=args.resume,
               allow_fingerprint_mismatch=args.force)


def _cmd_gen_data(args) -> int:
    spec = synth_spec_from_file(args.spec)
    dataset = gen_dataset(spec, args.count, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.meta
    print(f"fingerprint: {ckpt.fingerprint}")
    print(f"stage: {meta.get('stage')}  epochs_done: {meta.get('epochs_done')}"
          f"  complete: {meta.get('stage_complete')}")
    rows = describe_checkpoint(args.checkpoint)
    width = max((len(r["name"]) for r in rows), default=4)
    for r in rows:
        shape = "x".join(str(d) for d in r["shape"]) or "scalar"
        print(f"{r['name']:<{width}}  {shape:>12}  {r['dtype']:>8}  {r['sha256']}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        return _cmd_inspect(args)
    except (ConfigError, RunError, CheckpointError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
