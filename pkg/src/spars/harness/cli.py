"""Command-line entry point: ``spars <subcommand> [--config F] [--seed S] [--out D] [--set k=v]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ParameterError, SparsError, StageError
from . import pipeline as P
from .config import load_config, parse_set_args

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _generate(cfg):
    cases = P.stage_generate(cfg)
    return {"cases": len(cases), "positive": sum(c.label for c in cases)}


def _split(cfg):
    split = P.stage_split(cfg)
    return {"development": len(split.development), "test": len(split.test)}


def _train_classifier(cfg):
    _, metrics = P.stage_train_classifier(cfg)
    return metrics.to_dict() if metrics is not None else {}


def _train_policy(cfg):
    _, history = P.stage_train_policy(cfg)
    return history[-1] if history else {}


def _segment(cfg):
    records, threshold = P.stage_segment(cfg)
    return {"cases": len(records), "map_threshold": threshold}


def _evaluate(cfg):
    rec = P.stage_evaluate(cfg)
    return {"dice": rec.dice, "miou": rec.miou}


def _ablate(cfg):
    table, _ = P.run_ablation(cfg)
    return table


def _run(cfg):
    rec = P.run_pipeline(cfg)
    return {"dice": rec.dice, "miou": rec.miou, "classifier": rec.classifier, "timings": rec.timings}


def _report(cfg):
    return P.build_report(cfg.out)


COMMANDS = {
    "generate": (_generate, "generate synthetic cases"),
    "split": (_split, "split cases into development and test sets"),
    "train-classifier": (_train_classifier, "train the image-level classifier"),
    "train-policy": (_train_policy, "train the window policy by self-play"),
    "segment": (_segment, "tune the map threshold and segment the test cases"),
    "evaluate": (_evaluate, "score exported masks against ground truth"),
    "ablate": (_ablate, "run the ablation sweep named by ablation.axis"),
    "run": (_run, "run every stage end to end"),
    "report": (_report, "summarise metric files in the output directory"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted keys")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="spars", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, parse_set_args(args.set), args.seed, args.out)
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    try:
        with P._Stage(args.command, {}):
            result = fn(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except SparsError as exc:  # pragma: no cover - _Stage converts these
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return EXIT_OK
