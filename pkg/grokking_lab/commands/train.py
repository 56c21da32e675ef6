import argparse
import logging
from pathlib import Path

import pandas as pd

from grokking_lab.commands.common import add_run_arguments, emit_json, run_config_from_args
from grokking_lab.models.models import LabelMode
from grokking_lab.schemas.schemas import EfficiencyRecord
from grokking_lab.services.training import first_epoch_reaching, run_grokking, run_mem_only

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    train = subparsers.add_parser("train", help="full-batch grokking run")
    add_run_arguments(train)
    train.set_defaults(handler=train_command)

    mem = subparsers.add_parser("mem-only", help="memorize randomized labels and record efficiency")
    add_run_arguments(mem)
    mem.add_argument("--label-seed", type=int)
    mem.set_defaults(handler=mem_only_command)


def train_command(args: argparse.Namespace) -> int:
    cfg = run_config_from_args(args)
    outcome = run_grokking(cfg, progress=True)
    history = pd.DataFrame(outcome.history)
    summary = {
        "run_dir": outcome.run_dir,
        "final_epoch": outcome.final_epoch,
        "stopped_early": outcome.stopped_early,
        "test_metrics_available": outcome.test_metrics_available,
        "epoch_train_acc_1": first_epoch_reaching(history, "train_acc", 1.0),
        **outcome.final_metrics,
    }
    if outcome.test_metrics_available:
        summary["epoch_test_acc_95"] = first_epoch_reaching(history, "test_acc", 0.95)
    emit_json(summary)
    return 0


def mem_only_command(args: argparse.Namespace) -> int:
    fixed = {"label_mode": LabelMode.RANDOMIZED.value}
    if args.label_seed is not None:
        fixed["label_seed"] = args.label_seed
    cfg = run_config_from_args(args, **fixed)
    record = run_mem_only(cfg, progress=True)
    frame = pd.DataFrame([record.model_dump(mode="json")], columns=EfficiencyRecord.csv_columns())
    frame.to_csv(Path(cfg.out_dir) / "record.csv", index=False, float_format="%.10g")
    emit_json(record.model_dump(mode="json"))
    return 0
