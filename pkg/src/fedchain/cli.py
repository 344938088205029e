"""Command line front end.

Subcommands: run, baseline, profile, report-memory.  Exit codes: 0 success,
2 config error, 3 numeric (NaN/Inf) error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DataFormatError, load_dataset_from_config
from .federation import (
    DEFAULT_ASSUMPTIONS,
    IO_NOTE,
    MEMORY_PRESETS,
    RUN_MODES,
    estimate_peak_memory,
    run,
)
from .model import StackDims, build_stack
from .similarity import aggregate_profiles, profile_layers, select_start_layer
from .tensor import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedchain",
                                     description="Memory-budgeted federated adapter fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config JSON")
        p.add_argument("--out", help="output path (metrics stream or report JSON)")
        p.add_argument("--seed", type=int, help="override the experiment seed")

    p_run = sub.add_parser("run", help="run a federated chain fine-tuning experiment")
    common(p_run)
    p_run.add_argument("--rounds", type=int, help="override federation.rounds")
    p_run.add_argument("--checkpoint", help="override the final checkpoint base path")

    p_base = sub.add_parser("baseline", help="run a baseline or ablation")
    common(p_base)
    p_base.add_argument("--mode", required=True, choices=[m for m in RUN_MODES if m != "chainfed"])
    p_base.add_argument("--rounds", type=int)
    p_base.add_argument("--checkpoint", help="override the final checkpoint base path")

    p_prof = sub.add_parser("profile", help="phase-1 similarity profiling only")
    common(p_prof)

    p_mem = sub.add_parser("report-memory", help="peak-memory accounting for a model shape")
    p_mem.add_argument("--config", help="experiment config JSON supplying model dims")
    p_mem.add_argument("--preset", choices=sorted(MEMORY_PRESETS),
                       help="built-in model shape instead of --config")
    p_mem.add_argument("--q", type=int, nargs="+", default=[6, 7, 8], help="window sizes to sweep")
    p_mem.add_argument("--batch", type=int, default=DEFAULT_ASSUMPTIONS["batch"])
    p_mem.add_argument("--seq-len", type=int, default=DEFAULT_ASSUMPTIONS["seq_len"])
    p_mem.add_argument("--out")
    return parser


def _emit(payload: dict, out_path: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load_with_overrides(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.model.seed = args.seed
    if getattr(args, "rounds", None) is not None:
        if args.rounds < 0:
            raise ConfigError(["--rounds: must be >= 0"])
        cfg.federation.rounds = args.rounds
    return cfg


def _cmd_run(args, mode: str | None = None) -> int:
    cfg = _load_with_overrides(args)
    metrics = args.out or cfg.out.metrics
    checkpoint = getattr(args, "checkpoint", None) or cfg.out.checkpoint
    result = run(cfg, mode=mode, metrics_path=metrics, checkpoint_path=checkpoint,
                 progress=None if metrics else
                 (lambda rec: print(json.dumps(rec.as_dict()))))
    summary = {
        "mode": mode or cfg.mode,
        "rounds": len(result.records),
        "L_start": result.L_start,
        "Q": result.Q,
        "final_accuracy": result.final_accuracy,
    }
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def _cmd_profile(args) -> int:
    cfg = _load_with_overrides(args)
    seed = cfg.model.seed
    dataset = load_dataset_from_config(cfg.data, cfg.model, [seed, 2])
    dims = StackDims(
        L=cfg.model.L, u=cfg.model.u, v=cfg.model.v, C=dataset.C, kind=cfg.model.kind,
        ffn=cfg.model.ffn,
        vocab=dataset.vocab if dataset.kind == "tokens" else None,
        feature_dim=dataset.feature_dim if dataset.kind == "features" else None,
    )
    stack = build_stack(dims, seed=np.random.SeedSequence([seed, 1]),
                        init_scale=cfg.model.init_scale,
                        adapter_activation=cfg.model.adapter_activation)
    batch = dataset.x[: min(64, len(dataset))]
    budget = min(cfg.federation.budgets) if cfg.federation.budgets else None
    profile = aggregate_profiles([profile_layers(stack, batch, budget)])
    threshold = cfg.chain.T
    payload = {
        "scores": profile.scores,
        "sample_weight": profile.sample_weight,
        "threshold": threshold,
        "start_layer": (select_start_layer(profile, threshold)
                        if threshold is not None else cfg.chain.L_start),
    }
    _emit(payload, args.out)
    return EXIT_OK


def _cmd_report_memory(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise ConfigError(["report-memory: exactly one of --config / --preset required"])
    if args.preset:
        dims = MEMORY_PRESETS[args.preset]
        name = args.preset
    else:
        cfg = load_config(args.config)
        m = cfg.model
        if (m.vocab is None) == (m.feature_dim is None):
            raise ConfigError(["model.vocab / model.feature_dim: report-memory needs exactly one"])
        dims = StackDims(L=m.L, u=m.u, v=m.v, C=m.classes or 2, kind=m.kind, ffn=m.ffn,
                         vocab=m.vocab, feature_dim=m.feature_dim)
        name = args.config
    full = estimate_peak_memory(dims, args.batch, args.seq_len, mode="full")
    chain, reduction = {}, {}
    for q in args.q:
        if not 1 <= q <= dims.L:
            raise ConfigError([f"--q: must lie in [1, L={dims.L}], got {q}"])
        report = estimate_peak_memory(dims, args.batch, args.seq_len, Q=q)
        chain[str(q)] = report.as_dict()
        reduction[str(q)] = 1.0 - report.peak_bytes / full.peak_bytes
    payload = {
        "model": name,
        "dims": {"L": dims.L, "u": dims.u, "v": dims.v, "C": dims.C, "kind": dims.kind,
                 "ffn": dims.ffn_dim, "vocab": dims.vocab, "feature_dim": dims.feature_dim},
        "assumptions": {**DEFAULT_ASSUMPTIONS, "batch": args.batch, "seq_len": args.seq_len},
        "full": full.as_dict(),
        "chain": chain,
        "reduction": reduction,
        "io_note": IO_NOTE,
    }
    _emit(payload, args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "baseline":
            return _cmd_run(args, mode=args.mode)
        if args.command == "profile":
            return _cmd_profile(args)
        if args.command == "report-memory":
            return _cmd_report_memory(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"fedchain: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"fedchain: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, DataFormatError) as e:
        print(f"fedchain: i/o failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
