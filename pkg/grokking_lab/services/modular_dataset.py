"""Modular binary-operation datasets in the ``x op y =`` token format.

Rows are never stored; everything regenerates from a TaskSpec and a
DataSplit. Grid cell ``i`` is the input ``(x, y) = divmod(i, P)``.

Every seeded operation draws from numpy's Philox counter-based generator
(``np.random.Generator(np.random.Philox(seed))``), whose streams are
identical across platforms and numpy versions:

* ``split`` keeps the first ``train_count`` entries of a Philox permutation
  of ``range(P**2)``;
* ``subsample_train`` keeps the first ``new_count`` entries of a Philox
  permutation of the current train ids;
* randomized labels are the cell-indexed draws ``integers(0, P, P**2)``.
"""

import logging
from typing import List, Tuple

import numpy as np

from grokking_lab.models.models import Batch, BinaryOp, ExampleRow, LabelMode
from grokking_lab.schemas.schemas import DataSplit, TaskSpec
from grokking_lab.utils.validators import validate_seed

logger = logging.getLogger(__name__)


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(validate_seed(seed)))


def apply_op(op: BinaryOp, x: np.ndarray, y: np.ndarray, modulus: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if op == BinaryOp.ADDITION:
        out = x + y
    elif op == BinaryOp.SUBTRACTION:
        out = x - y
    elif op == BinaryOp.MULTIPLICATION:
        out = x * y
    elif op == BinaryOp.SQUARE_SUM:
        out = x * x + y * y
    else:
        raise ValueError(f"unsupported operation {op!r}")
    return np.mod(out, modulus)


def grid_arrays(task: TaskSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Token matrix ``(P**2, 4)`` and true labels for the whole grid, row-major"""
    P = task.modulus
    x, y = np.divmod(np.arange(P * P, dtype=np.int64), P)
    tokens = np.stack([x, np.full_like(x, task.op_token), y, np.full_like(x, task.eq_token)], axis=1)
    return tokens, apply_op(task.op, x, y, P)


def build_full_dataset(task: TaskSpec) -> List[ExampleRow]:
    tokens, labels = grid_arrays(task)
    return [ExampleRow(tokens=tuple(int(t) for t in row), label=int(label)) for row, label in zip(tokens, labels)]


def split(task: TaskSpec, train_count: int, seed: int) -> DataSplit:
    grid = task.modulus ** 2
    if not 0 <= train_count <= grid:
        raise ValueError(f"train_count must be in [0, {grid}], got {train_count}")
    order = philox(seed).permutation(grid)
    train_ids = np.sort(order[:train_count])
    return DataSplit(task=task, train_ids=train_ids.tolist(), seed=seed)


def subsample_train(data: DataSplit, new_count: int, seed: int) -> DataSplit:
    """Keep a random ``new_count`` subset of the train ids; the test set stays the original one"""
    if not 0 <= new_count <= data.train_count:
        raise ValueError(f"new_count must be in [0, {data.train_count}], got {new_count}")
    current = np.asarray(data.train_ids, dtype=np.int64)
    kept = np.sort(current[philox(seed).permutation(current.size)[:new_count]])
    return data.model_copy(update={"train_ids": kept.tolist(), "test_ids": data.resolved_test_ids})


def random_label_table(task: TaskSpec, seed: int) -> np.ndarray:
    return philox(seed).integers(0, task.modulus, size=task.modulus ** 2, dtype=np.int64)


def randomize_labels(data: DataSplit, seed: int) -> DataSplit:
    return data.model_copy(update={"label_mode": LabelMode.RANDOMIZED, "label_seed": validate_seed(seed)})


def train_labels(data: DataSplit) -> np.ndarray:
    _, labels = grid_arrays(data.task)
    ids = np.asarray(data.train_ids, dtype=np.int64)
    if data.label_mode == LabelMode.RANDOMIZED:
        return random_label_table(data.task, data.label_seed)[ids]
    return labels[ids]


def materialize(data: DataSplit) -> Tuple[Batch, Batch]:
    """Train and test batches of a split; only train labels are randomized"""
    tokens, labels = grid_arrays(data.task)
    train_ids = np.asarray(data.train_ids, dtype=np.int64)
    test_ids = np.asarray(data.resolved_test_ids, dtype=np.int64)
    train = Batch(tokens=tokens[train_ids], labels=train_labels(data))
    test = Batch(tokens=tokens[test_ids], labels=labels[test_ids])
    logger.debug(f"Materialized split: {len(train)} train rows, {len(test)} test rows")
    return train, test


def split_to_json(data: DataSplit) -> str:
    return data.model_dump_json(exclude_none=True)


def split_from_json(text: str) -> DataSplit:
    return DataSplit.model_validate_json(text)
