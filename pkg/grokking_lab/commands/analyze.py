import argparse
import logging
import sys
from pathlib import Path

from grokking_lab.services.circuit_analysis import decomposition_csv, gen_only_filter
from grokking_lab.services.training import analyze_checkpoint

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("analyze", help="trig decomposition of a checkpoint's logits")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--energy-fraction", type=float)
    parser.add_argument("--out", help="CSV path for k,coefficient (stdout when omitted)")
    parser.set_defaults(handler=analyze_command)


def analyze_command(args: argparse.Namespace) -> int:
    ckpt, decomp, keys = analyze_checkpoint(Path(args.checkpoint), args.energy_fraction)
    text = decomposition_csv(decomp)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    logger.info(
        f"Epoch {ckpt.epoch}: trig fraction {decomp.trig_norm_fraction:.4f} "
        f"(gen-only: {gen_only_filter(decomp)}), key frequencies {keys}"
    )
    return 0
