"""Command-line entry points for training, ablations, evaluation, and exports."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ABLATION_FLAGS, ConfigError, load_run_config
from .graph import GraphSpecError, load_graph
from .metrics import export_projection
from .trainer import CheckpointError, evaluate_checkpoint, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evotutor",
        description="Population-based tutor training against a simulated student.",
    )
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="run the full training loop")
    p_train.add_argument("config", help="path to a run config TOML file")
    p_train.add_argument("--resume", help="checkpoint file to resume from", default=None)

    p_ablate = sub.add_parser("ablate", help="run with one ablation flag enabled")
    p_ablate.add_argument("config")
    p_ablate.add_argument("flag", choices=ABLATION_FLAGS)

    p_eval = sub.add_parser("eval", help="evaluation episodes for a stored adapter set")
    p_eval.add_argument("checkpoint", help="path to a best_adapters.bin payload")
    p_eval.add_argument("config")
    p_eval.add_argument("--episodes", type=int, default=None)

    p_export = sub.add_parser(
        "export-projection", help="recompute projection.csv from stored elite vectors"
    )
    p_export.add_argument("run_dir")

    p_validate = sub.add_parser("validate", help="check a config and its graph")
    p_validate.add_argument("config")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.command == "train":
            config = load_run_config(args.config)
            result = run(config, resume_from=args.resume)
            print(f"run complete: best fitness {result.best_fitness:.4f} "
                  f"(individual {result.best_id}) -> {result.run_dir}")
            return 0
        if args.command == "ablate":
            config = load_run_config(args.config).with_ablation(args.flag)
            result = run(_with_suffixed_output(config, args.flag))
            print(f"ablation {args.flag} complete: best fitness {result.best_fitness:.4f} "
                  f"-> {result.run_dir}")
            return 0
        if args.command == "eval":
            config = load_run_config(args.config)
            returns = evaluate_checkpoint(args.checkpoint, config, args.episodes)
            mean = sum(returns) / len(returns)
            print(f"episodes: {len(returns)}  mean return: {mean:.4f}")
            for i, r in enumerate(returns):
                print(f"  episode {i}: {r:.4f}")
            return 0
        if args.command == "export-projection":
            out = export_projection(Path(args.run_dir))
            print(f"wrote {out}")
            return 0
        if args.command == "validate":
            config = load_run_config(args.config)
            load_graph(config.graph_path)
            print("config ok")
            return 0
    except (ConfigError, GraphSpecError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser.print_usage(sys.stderr)
    return 2


def _with_suffixed_output(config, flag: str):
    from dataclasses import replace

    out = Path(config.output_dir)
    return replace(config, output_dir=str(out.parent / f"{out.name}-{flag}"))


if __name__ == "__main__":
    sys.exit(main())
