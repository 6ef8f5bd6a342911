"""Command-line entry point.

Exit codes: 0 ok, 2 config, 3 stage ordering, 4 divergence, 5 checkpoint compatibility.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .checkpoint import CompatibilityError
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_ORDER, EXIT_DIVERGENCE, EXIT_COMPAT = 0, 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config key by dotted path, e.g. train.distill.steps=100")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crossdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate datasets, parallel corpus and vocabularies")
    train = sub.add_parser("train", parents=[common], help="run one training stage")
    train.add_argument("stage", choices=pipeline.STAGES)
    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained model per language")
    ev.add_argument("--model", choices=("student", "teacher"), default="student")
    ev.add_argument("--languages", type=int, nargs="+")
    sub.add_parser("report", parents=[common], help="summarize reports next to the random baseline")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.overrides)
        if args.command == "gen":
            root = pipeline.run_gen(cfg)
            print(f"data written to {root}")
        elif args.command == "train":
            out = pipeline.run_train(cfg, args.stage)
            print(f"checkpoint written to {out}")
        elif args.command == "eval":
            report = pipeline.run_eval(cfg, args.model, args.languages)
            print(report.render(f"{args.model} NDCG@10 / Recall (x100)"), end="")
        elif args.command == "report":
            pipeline.run_report(cfg)
            print((pipeline.output_root(cfg) / "reports" / "summary.txt").read_text(), end="")
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageOrderError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CompatibilityError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
