"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
``FEDPROMPT_OUTPUT_DIR`` overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config
from .errors import ConfigError, FedPromptError
from .harness import (
    SWEEP_AXES,
    compare_variants,
    decode_checkpoint,
    run_attack,
    run_experiment_config,
    sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedprompt",
        description="Federated domain-aware dual prompt tuning at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment over all seeds")
    p_run.add_argument("config", help="path to the experiment config file")
    p_run.add_argument("--out", help="output directory override")

    p_cmp = sub.add_parser("compare", help="run several variants and tabulate accuracies")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--variants", required=True, help="comma-separated variant list")
    p_cmp.add_argument("--out", help="output directory override")

    p_sweep = sub.add_parser("sweep", help="rerun the experiment along one ablation axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--out", help="output directory override")

    p_atk = sub.add_parser("attack", help="gradient-inversion demo on prompt gradients")
    p_atk.add_argument("config")
    p_atk.add_argument("--capture", help="existing gradient capture file")
    p_atk.add_argument("--save-capture", help="write the freshly taken capture here")
    p_atk.add_argument("--iters", type=int, default=150)
    p_atk.add_argument("--restarts", type=int, default=2)
    p_atk.add_argument("--out", help="output directory override")

    p_dec = sub.add_parser("decode-prompts", help="nearest-vocab decoding of a prompt checkpoint")
    p_dec.add_argument("checkpoint")
    return parser


def _out_dir(args, cfg_output_dir: str) -> str:
    return args.out or os.environ.get("FEDPROMPT_OUTPUT_DIR") or cfg_output_dir


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            result = run_experiment_config(cfg, _out_dir(args, cfg.output_dir))
            per_domain = result.final_domain_accuracy()
            for domain in sorted(per_domain):
                print(f"domain {domain}: accuracy {per_domain[domain]:.4f}")
            print(f"mean accuracy: {result.mean_accuracy():.4f}")
            count = result.histories[cfg.seeds[0]].communication["trainable_parameter_count"]
            print(f"trainable parameters: {count}")
        elif args.command == "compare":
            cfg = load_config(args.config)
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            rows = compare_variants(cfg, variants, _out_dir(args, cfg.output_dir))
            for row in rows:
                print(
                    f"{row['variant']:<16} mean_acc={row['mean_accuracy']:.4f} "
                    f"std_domains={row['std_across_domains']:.4f}"
                )
        elif args.command == "sweep":
            cfg = load_config(args.config)
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            rows = sweep(cfg, args.axis, values, _out_dir(args, cfg.output_dir))
            for row in rows:
                print(f"{args.axis}={row['value']:<10} mean_acc={row['mean_accuracy']:.4f}")
        elif args.command == "attack":
            cfg = load_config(args.config)
            report = run_attack(
                cfg, args.capture, _out_dir(args, cfg.output_dir),
                iters=args.iters, restarts=args.restarts,
                save_capture_path=args.save_capture,
            )
            cos = report["cosine_to_truth"]
            cos_text = "n/a" if cos is None else f"{cos:.4f}"
            print(
                f"variant={report['variant']} iters={report['iters']} "
                f"final_objective={report['final_objective']:.6g} cosine_to_truth={cos_text}"
            )
        elif args.command == "decode-prompts":
            print(decode_checkpoint(args.checkpoint), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedPromptError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
