import argparse
import logging
from pathlib import Path

from grokking_lab.commands.common import emit_csv, emit_json, float_list, int_list, read_config
from grokking_lab.core.config import settings
from grokking_lab.models.models import BinaryOp
from grokking_lab.schemas.schemas import TaskSpec, UngrokkingSweepConfig
from grokking_lab.services.sweeps import (
    estimate_critical_size,
    geometric_sizes,
    logit_ratio_report,
    middling_cells,
    run_efficiency_sweep,
    run_semigrok_sweep,
    run_ungrokking,
)

logger = logging.getLogger(__name__)


def _task(args: argparse.Namespace) -> TaskSpec:
    values = {}
    if args.modulus is not None:
        values["modulus"] = args.modulus
    if args.op is not None:
        values["op"] = args.op
    return TaskSpec(**values)


def _add_task_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--modulus", type=int)
    parser.add_argument("--op", choices=[op.value for op in BinaryOp])


def register(subparsers) -> None:
    eff = subparsers.add_parser("efficiency", help="correct-logit / parameter-norm sweep")
    eff.add_argument("--mode", choices=["gen", "mem"], required=True)
    eff.add_argument("--sizes", type=int_list, required=True, help="dataset sizes, e.g. '500,1000,2000'")
    eff.add_argument("--lambdas", type=float_list, default=[1.0])
    eff.add_argument("--seeds", type=int_list, required=True)
    eff.add_argument("--max-epochs", type=int)
    eff.add_argument("--workers", type=int)
    eff.add_argument("--out-dir", required=True)
    _add_task_arguments(eff)
    eff.set_defaults(handler=efficiency_command)

    ungrok = subparsers.add_parser("ungrok", help="continue a grokked checkpoint on reduced datasets")
    ungrok.add_argument("--config", help="JSON UngrokkingSweepConfig")
    ungrok.add_argument("--source", help="grokked checkpoint.bin")
    ungrok.add_argument("--sizes", type=int_list)
    ungrok.add_argument("--size-range", type=int, nargs=3, metavar=("LO", "HI", "COUNT"),
                        help="geometrically spaced reduced sizes")
    ungrok.add_argument("--lambdas", type=float_list)
    ungrok.add_argument("--seeds", type=int_list)
    ungrok.add_argument("--epochs", type=int)
    ungrok.add_argument("--eval-every", type=int)
    ungrok.add_argument("--carry-optimizer-state", action="store_true", default=None)
    ungrok.add_argument("--workers", type=int)
    ungrok.add_argument("--out-dir", required=True)
    ungrok.set_defaults(handler=ungrok_command)

    semi = subparsers.add_parser("semigrok", help="train near the critical size and band final test accuracy")
    semi.add_argument("--sizes", type=int_list)
    semi.add_argument("--around", type=float, help="critical size estimate to centre an even grid on")
    semi.add_argument("--width", type=float, default=0.15, help="relative half-width of the grid around --around")
    semi.add_argument("--count", type=int, default=5)
    semi.add_argument("--seeds", type=int_list, required=True)
    semi.add_argument("--epochs", type=int)
    semi.add_argument("--weight-decay", type=float, default=1.0)
    semi.add_argument("--eval-every", type=int)
    semi.add_argument("--workers", type=int)
    semi.add_argument("--out-dir", required=True)
    _add_task_arguments(semi)
    semi.set_defaults(handler=semigrok_command)

    crit = subparsers.add_parser("critical-size", help="estimate D_crit from an ungrokking summary")
    crit.add_argument("--csv", required=True, help="ungrokking summary.csv")
    crit.add_argument("--level", type=float, default=0.5)
    crit.set_defaults(handler=critical_size_command)


def efficiency_command(args: argparse.Namespace) -> int:
    result = run_efficiency_sweep(
        sizes=args.sizes, lambdas=args.lambdas, seeds=args.seeds, mode=args.mode, task=_task(args),
        max_epochs=args.max_epochs, out_dir=Path(args.out_dir), workers=args.workers,
    )
    logger.info(f"Wrote {len(result.records)} records to {result.summary_path}")
    emit_csv(result.isologit.correlations)
    return 0


def ungrok_command(args: argparse.Namespace) -> int:
    data = read_config(args.config)
    sizes = args.sizes
    if args.size_range is not None:
        lo, hi, count = args.size_range
        sizes = geometric_sizes(lo, hi, count)
    for key, value in (
        ("source_checkpoint", args.source),
        ("reduced_sizes", sizes),
        ("weight_decays", args.lambdas),
        ("seeds", args.seeds),
        ("continuation_epochs", args.epochs),
        ("eval_every", args.eval_every),
        ("carry_optimizer_state", args.carry_optimizer_state),
        ("workers", args.workers),
        ("out_dir", args.out_dir),
    ):
        if value is not None:
            data[key] = value
    sweep = UngrokkingSweepConfig.model_validate(data)
    frame = run_ungrokking(sweep)
    ratio = logit_ratio_report(frame)
    emit_csv(ratio, str(Path(sweep.out_dir) / "logit_ratio.csv"))
    middling = middling_cells(frame)
    logger.info(f"{len(middling)} of {len(frame)} ungrokking cells ended with middling test accuracy")
    emit_csv(frame)
    return 0


def semigrok_command(args: argparse.Namespace) -> int:
    sizes = args.sizes
    if sizes is None:
        if args.around is None:
            raise ValueError("give --sizes or --around")
        lo, hi = args.around * (1 - args.width), args.around * (1 + args.width)
        step = (hi - lo) / max(args.count - 1, 1)
        sizes = sorted({int(round(lo + i * step)) for i in range(args.count)})
    epochs = args.epochs if args.epochs is not None else settings.get_epoch_budget("semigrok")
    summary = run_semigrok_sweep(
        sizes=sizes, seeds=args.seeds, epochs=epochs, weight_decay=args.weight_decay, task=_task(args),
        eval_every=args.eval_every, out_dir=Path(args.out_dir), workers=args.workers,
    )
    emit_csv(summary)
    return 0


def critical_size_command(args: argparse.Namespace) -> int:
    estimate = estimate_critical_size(args.csv, level=args.level)
    lo, hi = estimate.spread
    emit_json({
        "estimate": estimate.estimate,
        "bracket": [estimate.lo, estimate.hi],
        "series_range": [lo, hi],
        "n_series": len(estimate.series),
    })
    return 0
