import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from grokking_lab.models.models import BinaryOp
from grokking_lab.schemas.schemas import RunConfig


def int_list(text: str) -> List[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def float_list(text: str) -> List[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def read_config(path: Optional[str]) -> Dict[str, Any]:
    """JSON document from ``--config``, or an empty mapping"""
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path} must hold a JSON object")
    return data


def set_nested(data: Dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    node = data
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON document overriding RunConfig defaults")
    parser.add_argument("--seed", type=int, required=True, help="init seed (also the split seed unless --split-seed)")
    parser.add_argument("--out-dir", required=True, help="run directory")
    parser.add_argument("--modulus", type=int)
    parser.add_argument("--op", choices=[op.value for op in BinaryOp])
    parser.add_argument("--train-count", type=int)
    parser.add_argument("--split-seed", type=int)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--init-scale", type=float)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--eval-every", type=int)
    parser.add_argument("--analyze-every", type=int)
    parser.add_argument("--checkpoint-every", type=int)
    parser.add_argument("--target-test-acc", type=float)
    parser.add_argument("--plateau-window", type=int)
    parser.add_argument("--resume-from")


def run_config_from_args(args: argparse.Namespace, **fixed: Any) -> RunConfig:
    """Schema defaults, then the ``--config`` file, then flags, then ``fixed``"""
    data = read_config(args.config)
    set_nested(data, "seed", args.seed)
    split_seed = args.split_seed if args.split_seed is not None else data.get("split_seed", args.seed)
    set_nested(data, "split_seed", split_seed)
    set_nested(data, "out_dir", args.out_dir)
    set_nested(data, "task.modulus", args.modulus)
    set_nested(data, "task.op", args.op)
    set_nested(data, "train_count", args.train_count)
    set_nested(data, "optimizer.weight_decay", args.weight_decay)
    set_nested(data, "optimizer.lr", args.lr)
    set_nested(data, "max_epochs", args.max_epochs)
    set_nested(data, "eval_every", args.eval_every)
    set_nested(data, "analyze_every", args.analyze_every)
    set_nested(data, "checkpoint_every", args.checkpoint_every)
    set_nested(data, "target_test_acc", args.target_test_acc)
    set_nested(data, "plateau_window", args.plateau_window)
    set_nested(data, "resume_from", args.resume_from)
    if args.init_scale is not None:
        # the model block is rebuilt for the task when absent, so only patch an explicit one
        if "model" in data:
            set_nested(data, "model.init_scale", args.init_scale)
        else:
            cfg = RunConfig.model_validate(data)
            data["model"] = cfg.model.model_copy(update={"init_scale": args.init_scale}).model_dump()
    for key, value in fixed.items():
        set_nested(data, key, value)
    return RunConfig.model_validate(data)


def emit_csv(frame: pd.DataFrame, path: Optional[str] = None) -> None:
    """Write ``frame`` to ``path``, or to stdout when no path is given"""
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.10g")
    else:
        frame.to_csv(sys.stdout, index=False, float_format="%.10g")


def emit_json(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, default=str) + "\n")
