"""Command-line entry point.

Usage::

    evidseg generate  --config exp.cfg [--out DIR]
    evidseg train     --config exp.cfg [--head evidential|softmax] [--out DIR]
    evidseg eval      --config exp.cfg [--head H] [--sigma2 V] [--out DIR]
    evidseg sweep     --config exp.cfg [--out DIR]
    evidseg selfcheck [--inject-fault digamma]

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check failure.

The environment variable EVIDSEG_THREADS caps numeric parallelism; the
package pins BLAS thread pools to that value (default 1) at import time,
before numpy loads, so repeated runs are bit-reproducible.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evidseg",
        description="Evidential volumetric segmentation: phantom data, training, noise sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, config_required: bool = True):
        p = sub.add_parser(name, help=help_)
        p.add_argument(
            "--config", required=config_required, help="path to a flat key = value config file"
        )
        p.add_argument("--out", help="override the output directory from the config")
        return p

    add("generate", "write the phantom dataset and its manifest")

    p_train = add("train", "train one or all configured heads on the train split")
    p_train.add_argument(
        "--head", choices=("evidential", "softmax"), help="train only this head"
    )

    p_eval = add("eval", "evaluate a trained head on the test split at one noise variance")
    p_eval.add_argument(
        "--head", choices=("evidential", "softmax"), default="evidential"
    )
    p_eval.add_argument(
        "--sigma2", type=float, default=0.0, help="input Gaussian noise variance (default 0)"
    )

    add("sweep", "evaluate every configured head at every configured noise variance")

    p_check = add("selfcheck", "run the fast internal consistency suite", config_required=False)
    p_check.add_argument(
        "--inject-fault",
        choices=("digamma",),
        help="deliberately corrupt an internal kernel to prove the checks can fail",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; remap to this tool's usage code
        return 0 if e.code == 0 else 1

    # heavy imports after arg parsing so --help stays fast
    from . import harness

    try:
        if args.command == "selfcheck":
            ok = harness.cmd_selfcheck(fault=args.inject_fault)
            return 0 if ok else 3

        cfg = harness.load_experiment_config(args.config)
        if args.out:
            cfg = replace(cfg, out=args.out)

        if args.command == "generate":
            manifest = harness.cmd_generate(cfg)
            print(f"wrote {len(manifest['samples'])} samples to {harness._dataset_dir(cfg)}")
        elif args.command == "train":
            heads = (args.head,) if args.head else cfg.heads
            for head in heads:
                path = harness.cmd_train(cfg, head)
                print(f"trained {head} head -> {path}")
        elif args.command == "eval":
            rows = harness.cmd_eval(cfg, args.head, args.sigma2)
            import numpy as np

            wt = float(np.mean([r["dice_whole_tumor"] for r in rows]))
            print(
                f"evaluated {len(rows)} test samples, head={args.head},"
                f" sigma2={args.sigma2:g}, mean whole-tumor dice {wt:.4f}"
            )
        elif args.command == "sweep":
            result = harness.cmd_sweep(cfg)
            print(
                f"swept {len(result.summary)} (head, sigma2) cells,"
                f" {len(result.rows)} per-sample rows -> {cfg.out}"
            )
        return 0
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        from .volio import FormatError

        if isinstance(e, FormatError):
            print(f"error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
