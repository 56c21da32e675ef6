import argparse
import logging
from pathlib import Path

from grokking_lab.commands.common import emit_csv, emit_json
from grokking_lab.core.exceptions import AssertionStyleError
from grokking_lab.services.efficiency_theory import allocation_grid, grid_violations, scaling_property_trials

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("verify", help="check the scaling and allocation theorems numerically")
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="CSV path for the allocation grid (stdout when omitted)")
    parser.set_defaults(handler=verify_command)


def verify_command(args: argparse.Namespace) -> int:
    failures = sum(1 for _, _, decreased in scaling_property_trials(args.trials, seed=args.seed) if not decreased)
    grid = allocation_grid(seed=args.seed)
    emit_csv(grid, args.out)
    bad = grid_violations(grid)
    if args.out:
        emit_json({"scaling_trials": args.trials, "scaling_failures": failures, "grid_cells": len(grid),
                   "grid_violations": len(bad), "grid_csv": str(Path(args.out))})
    if failures:
        raise AssertionStyleError(f"scaling logits up failed to lower the loss in {failures} of {args.trials} trials")
    if len(bad):
        raise AssertionStyleError(f"{len(bad)} allocation grid cells disagree with the closed form")
    logger.info(f"All {args.trials} scaling trials and {len(grid)} allocation cells agree")
    return 0
