"""Command-line entry point: ``flexkd <subcommand> --config exp.yaml``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import FlexKDError

log = logging.getLogger("flexkd")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexkd", description="Task-relevant feature distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--out", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override the stage's seed")
        return sp

    add("train-teacher", "fine-tune the teacher")
    sp = add("score", "compute the importance profile of the teacher")
    sp.add_argument("--teacher", help="teacher checkpoint (default: <out>/teacher/checkpoint.json)")
    sp.add_argument("--calibration-fraction", type=float, help="fraction of the training split used for attribution")
    sp = add("distill", "train students for every configured (method, seed)")
    sp.add_argument("--teacher")
    sp.add_argument("--profile")
    sp.add_argument("--method", action="append", help="restrict to this method (repeatable)")
    sp = add("evaluate", "score a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp = add("compare", "aggregate finished runs into report.json / report.md")
    sp.add_argument("--metric", choices=["accuracy", "nll"], default="accuracy")
    sp = add("inspect", "activation-magnitude sparsity table")
    sp.add_argument("--checkpoint", help="default: the teacher checkpoint")
    sp.add_argument("--thresholds", type=float, nargs="+")
    return p


def _overrides(args) -> dict:
    out = {}
    if args.out:
        out["output_dir"] = args.out
    if args.seed is not None:
        if args.command == "train-teacher":
            out["teacher.seed"] = args.seed
        elif args.command == "score":
            out["attribution.seed"] = args.seed
        elif args.command == "distill":
            out["seeds"] = [args.seed]
    if getattr(args, "calibration_fraction", None) is not None:
        out["attribution.calibration_fraction"] = args.calibration_fraction
    return out


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, _overrides(args))
        if args.command == "train-teacher":
            print(harness.cmd_train_teacher(cfg))
        elif args.command == "score":
            print(harness.cmd_score(cfg, args.teacher))
        elif args.command == "distill":
            for path in harness.cmd_distill(cfg, args.teacher, args.profile, args.method):
                print(path)
        elif args.command == "evaluate":
            print(json.dumps(harness.cmd_evaluate(cfg, args.checkpoint), sort_keys=True))
        elif args.command == "compare":
            path = harness.cmd_compare(cfg, args.metric)
            print(path)
            print((path.parent / "report.md").read_text(), end="")
        elif args.command == "inspect":
            path = harness.cmd_inspect(cfg, args.checkpoint, args.thresholds)
            print(path)
            print((path.parent / "sparsity.txt").read_text(), end="")
    except FlexKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
