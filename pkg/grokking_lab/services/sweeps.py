"""Multi-run experiments: efficiency sweeps, ungrokking, critical dataset size
and semi-grokking sweeps.

Every cell of a sweep is one isolated training run in its own subdirectory.
Cells go through a process pool (``workers`` wide, inline when 1); a failing
cell is logged and skipped. Aggregation happens after all cells finish, and
each sweep writes a top-level ``summary.csv``.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from grokking_lab.core.config import settings
from grokking_lab.core.exceptions import NonBracketingError, PreconditionError
from grokking_lab.models.models import AccuracyBand, CircuitTag, LabelMode
from grokking_lab.schemas.schemas import (
    EfficiencyRecord,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    TaskSpec,
    UngrokkingSweepConfig,
)
from grokking_lab.services import modular_dataset
from grokking_lab.services.checkpoint import load_checkpoint
from grokking_lab.services.circuit_analysis import IsologitSummary, bucket_index, gen_only_filter, isologit_buckets
from grokking_lab.services.training import Trainer, efficiency_record, run_mem_only
from grokking_lab.services.transformer import evaluate

logger = logging.getLogger(__name__)

RESTORED_COLUMN = "train_acc_restored"
SUMMARY_NAME = "summary.csv"
UNGROK_COLUMNS = [
    "reduced_size", "weight_decay", "seed", "final_test_acc", "final_train_acc", "train_acc_restored",
    "param_norm", "correct_logit_trig", "correct_logit_mem", "final_epoch",
]
SEMIGROK_COLUMNS = ["dataset_size", "seed", "final_test_acc", "final_train_acc", "band", "final_epoch"]

NEAR_RANDOM_BELOW = 0.2
FULL_ABOVE = 0.9


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def run_cells(fn: Callable, cells: Sequence, workers: int, desc: str) -> List:
    """Apply ``fn`` to every cell; returns results in cell order, None for failed cells"""
    results: List = [None] * len(cells)
    done_count = 0
    failed_count = 0
    if workers <= 1:
        for i, cell in enumerate(tqdm(cells, desc=desc, leave=False)):
            try:
                results[i] = fn(cell)
                done_count += 1
            except Exception as e:
                logger.error(f"{desc} cell {cell!r} failed: {e}")
                failed_count += 1
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(fn, cell): i for i, cell in enumerate(cells)}
            for future in tqdm(as_completed(futures), total=len(futures), desc=desc, leave=False):
                i = futures[future]
                try:
                    results[i] = future.result()
                    done_count += 1
                except Exception as e:
                    logger.error(f"{desc} cell {cells[i]!r} failed: {e}")
                    failed_count += 1
    logger.info(f"{desc}: {done_count} cells done, {failed_count} failed")
    return results


# Efficiency sweep

@dataclass(frozen=True)
class EfficiencyCell:
    mode: str
    size: int
    weight_decay: float
    seed: int
    task: TaskSpec
    max_epochs: int
    out_dir: Path
    model: Optional[ModelConfig] = None


def _efficiency_cell(cell: EfficiencyCell) -> Optional[EfficiencyRecord]:
    run_dir = cell.out_dir / f"{cell.mode}_D{cell.size}_wd{cell.weight_decay:g}_s{cell.seed}"
    cfg = RunConfig(
        task=cell.task,
        train_count=cell.size,
        split_seed=cell.seed,
        seed=cell.seed,
        model=cell.model,
        optimizer=OptimizerConfig(weight_decay=cell.weight_decay),
        max_epochs=cell.max_epochs,
        analyze_every=0,
        plateau_window=settings.PLATEAU_WINDOW,
        label_mode=LabelMode.RANDOMIZED if cell.mode == "mem" else LabelMode.TRUE,
        out_dir=run_dir,
    )
    if cell.mode == "mem":
        return run_mem_only(cfg)

    trainer = Trainer(cfg)
    outcome = trainer.run()
    record = efficiency_record(outcome, trainer.split, CircuitTag.GEN_ONLY, cell.seed, cell.weight_decay)
    if not gen_only_filter(record.trig_fraction):
        logger.info(f"Dropping {run_dir.name}: trig fraction {record.trig_fraction:.3f} is not gen-only")
        return None
    return record


@dataclass
class EfficiencySweepResult:
    records: pd.DataFrame
    isologit: IsologitSummary
    summary_path: Path


def run_efficiency_sweep(
    sizes: Sequence[int],
    lambdas: Sequence[float],
    seeds: Sequence[int],
    mode: str,
    task: Optional[TaskSpec] = None,
    max_epochs: Optional[int] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    model: Optional[ModelConfig] = None,
) -> EfficiencySweepResult:
    """Correct-logit / parameter-norm records over (size, weight decay, seed).

    ``mode`` is ``mem`` (randomized labels, memorization only) or ``gen``
    (true labels; a run is kept only when more than the gen-only threshold of
    its logit norm lies in the trig subspace).
    """
    if mode not in ("mem", "gen"):
        raise ValueError(f"mode must be 'mem' or 'gen', got {mode!r}")
    task = task or TaskSpec()
    out_dir = Path(out_dir or Path(settings.OUTPUT_ROOT) / f"efficiency_{mode}")
    if max_epochs is None:
        max_epochs = settings.get_epoch_budget("mem" if mode == "mem" else "grok")
    if mode == "gen" and sizes and min(sizes) < 0.25 * task.modulus ** 2:
        logger.warning(f"Gen sweep sizes below {0.25 * task.modulus ** 2:.0f} may not grok")

    cells = [
        EfficiencyCell(mode, size, wd, seed, task, max_epochs, out_dir, model)
        for size in sizes for wd in lambdas for seed in seeds
    ]
    results = run_cells(_efficiency_cell, cells, workers or settings.WORKERS, f"efficiency-{mode}")
    records = [r for r in results if r is not None]

    frame = pd.DataFrame([r.model_dump(mode="json") for r in records], columns=EfficiencyRecord.csv_columns())
    summary_path = _write_csv(frame, out_dir / SUMMARY_NAME)
    isologit = isologit_buckets(records)
    _write_csv(isologit.points, out_dir / "isologit_points.csv")
    _write_csv(isologit.correlations, out_dir / "isologit_spearman.csv")
    return EfficiencySweepResult(records=frame, isologit=isologit, summary_path=summary_path)


# Ungrokking

@dataclass(frozen=True)
class UngrokCell:
    source_checkpoint: Path
    reduced_size: int
    weight_decay: float
    seed: int
    epochs: int
    eval_every: int
    carry_optimizer_state: bool
    out_dir: Path


def _ungrok_cell(cell: UngrokCell) -> dict:
    ckpt = load_checkpoint(cell.source_checkpoint)
    reduced = modular_dataset.subsample_train(ckpt.split, cell.reduced_size, cell.seed)
    run_dir = cell.out_dir / f"D{cell.reduced_size}_wd{cell.weight_decay:g}_s{cell.seed}"
    cfg = RunConfig(
        task=reduced.task,
        train_count=reduced.train_count,
        split_seed=reduced.seed,
        seed=cell.seed,
        model=ckpt.model,
        optimizer=OptimizerConfig(weight_decay=cell.weight_decay),
        max_epochs=cell.epochs,
        eval_every=cell.eval_every,
        analyze_every=cell.epochs,
        out_dir=run_dir,
    )
    state = ckpt.optimizer_state if cell.carry_optimizer_state else None
    outcome = Trainer(cfg, split=reduced, params=ckpt.params, optimizer_state=state).run()
    final = outcome.final_metrics
    restored = final["train_acc"] >= 1.0
    if not restored:
        logger.warning(f"{run_dir.name}: train accuracy on the reduced set is {final['train_acc']:.4f}, not 1")
    return {
        "reduced_size": cell.reduced_size,
        "weight_decay": cell.weight_decay,
        "seed": cell.seed,
        "final_test_acc": final["test_acc"],
        "final_train_acc": final["train_acc"],
        RESTORED_COLUMN: restored,
        "param_norm": final["param_norm"],
        "correct_logit_trig": final["correct_logit_trig"],
        "correct_logit_mem": final["correct_logit_mem"],
        "final_epoch": outcome.final_epoch,
    }


def check_ungrok_source(sweep: UngrokkingSweepConfig, min_test_acc: float = 0.99) -> None:
    ckpt = load_checkpoint(sweep.source_checkpoint)
    if ckpt.split is None:
        raise PreconditionError(f"{sweep.source_checkpoint} has no sidecar split")
    too_big = [d for d in sweep.reduced_sizes if d > ckpt.split.train_count]
    if too_big:
        raise PreconditionError(f"reduced sizes {too_big} exceed the source training set ({ckpt.split.train_count})")
    _, test = modular_dataset.materialize(ckpt.split)
    if len(test) == 0:
        raise PreconditionError("source run has no test set to measure ungrokking on")
    _, test_acc = evaluate(ckpt.params, test, chunk=settings.ANALYSIS_BATCH)
    if test_acc < min_test_acc:
        raise PreconditionError(
            f"source checkpoint has test accuracy {test_acc:.4f} < {min_test_acc}; it has not grokked"
        )


def run_ungrokking(sweep: UngrokkingSweepConfig, min_source_test_acc: float = 0.99) -> pd.DataFrame:
    """Continue a grokked network on random subsets of its training set.

    Test accuracy is always measured on the source run's original test set.
    """
    check_ungrok_source(sweep, min_source_test_acc)
    cells = [
        UngrokCell(
            Path(sweep.source_checkpoint), size, wd, seed, sweep.continuation_epochs, sweep.eval_every,
            sweep.carry_optimizer_state, Path(sweep.out_dir),
        )
        for size in sweep.reduced_sizes for wd in sweep.weight_decays for seed in sweep.seeds
    ]
    rows = [r for r in run_cells(_ungrok_cell, cells, sweep.workers, "ungrok") if r is not None]
    frame = pd.DataFrame(rows, columns=UNGROK_COLUMNS)
    _write_csv(frame, Path(sweep.out_dir) / SUMMARY_NAME)
    return frame


def geometric_sizes(lo: int, hi: int, count: int) -> List[int]:
    return sorted({int(round(x)) for x in np.geomspace(lo, hi, count)})


# Critical dataset size

@dataclass
class CriticalSizeEstimate:
    estimate: float
    lo: float
    hi: float
    series: pd.DataFrame = field(default_factory=pd.DataFrame)  # seed, weight_decay, estimate, lo, hi

    @property
    def spread(self) -> Tuple[float, float]:
        return float(self.series["estimate"].min()), float(self.series["estimate"].max())


def _series_crossing(sizes: np.ndarray, acc: np.ndarray, level: float) -> Optional[Tuple[float, float, float]]:
    order = np.argsort(sizes, kind="stable")
    sizes, acc = sizes[order].astype(float), np.maximum.accumulate(acc[order].astype(float))
    above = np.nonzero(acc >= level)[0]
    if len(above) == 0 or above[0] == 0:
        return None
    i = int(above[0])
    x0, x1, y0, y1 = sizes[i - 1], sizes[i], acc[i - 1], acc[i]
    crossing = x0 + (level - y0) * (x1 - x0) / (y1 - y0)
    return crossing, x0, x1


def estimate_critical_size(
    data: Union[pd.DataFrame, str, Path],
    level: float = 0.5,
    acc_column: str = "final_test_acc",
    size_column: Optional[str] = None,
) -> CriticalSizeEstimate:
    """Dataset size where final test accuracy crosses ``level``.

    Each (seed, weight_decay) series is made monotone with a running maximum
    over increasing size and linearly interpolated between the two grid points
    around the crossing. The estimate is the median over series; ``lo`` and
    ``hi`` are the outermost bracketing grid points.
    Ungrokking cells that never got train accuracy back are left out.
    """
    frame = data if isinstance(data, pd.DataFrame) else pd.read_csv(data)
    frame = frame.dropna(subset=[acc_column])
    if RESTORED_COLUMN in frame.columns:
        restored = frame[RESTORED_COLUMN].astype(str).str.lower() == "true"
        if not restored.all():
            logger.warning(f"Excluding {int((~restored).sum())} cells whose train accuracy was not restored")
        frame = frame[restored]
    if size_column is None:
        size_column = "reduced_size" if "reduced_size" in frame.columns else "dataset_size"
    keys = [c for c in ("seed", "weight_decay") if c in frame.columns]
    groups = frame.groupby(keys, sort=True) if keys else [((), frame)]

    rows = []
    for key, group in groups:
        hit = _series_crossing(group[size_column].to_numpy(), group[acc_column].to_numpy(), level)
        if hit is None:
            logger.warning(f"Series {key} does not bracket test accuracy {level}; skipped")
            continue
        key = key if isinstance(key, tuple) else (key,)
        rows.append({**dict(zip(keys, key)), "estimate": hit[0], "lo": hit[1], "hi": hit[2]})

    if not rows:
        raise NonBracketingError(
            f"no series has final test accuracy on both sides of {level}; widen the reduced-size sweep"
        )
    series = pd.DataFrame(rows)
    return CriticalSizeEstimate(
        estimate=float(series["estimate"].median()),
        lo=float(series["lo"].min()),
        hi=float(series["hi"].max()),
        series=series,
    )


# Semi-grokking

def classify_band(test_acc: float) -> AccuracyBand:
    if test_acc < NEAR_RANDOM_BELOW:
        return AccuracyBand.NEAR_RANDOM
    if test_acc > FULL_ABOVE:
        return AccuracyBand.FULL
    return AccuracyBand.MIDDLING


@dataclass(frozen=True)
class SemigrokCell:
    size: int
    seed: int
    epochs: int
    weight_decay: float
    task: TaskSpec
    eval_every: int
    out_dir: Path


def _semigrok_cell(cell: SemigrokCell) -> Tuple[dict, pd.DataFrame]:
    run_dir = cell.out_dir / f"D{cell.size}_s{cell.seed}"
    # one master seed drives both the split and the initialization
    cfg = RunConfig(
        task=cell.task,
        train_count=cell.size,
        split_seed=cell.seed,
        seed=cell.seed,
        optimizer=OptimizerConfig(weight_decay=cell.weight_decay),
        max_epochs=cell.epochs,
        eval_every=cell.eval_every,
        analyze_every=0,
        out_dir=run_dir,
    )
    outcome = Trainer(cfg).run()
    final = outcome.final_metrics
    curve = pd.DataFrame(outcome.history)[["epoch", "train_acc", "test_acc"]]
    curve.insert(0, "seed", cell.seed)
    curve.insert(0, "dataset_size", cell.size)
    row = {
        "dataset_size": cell.size,
        "seed": cell.seed,
        "final_test_acc": final["test_acc"],
        "final_train_acc": final["train_acc"],
        "band": classify_band(final["test_acc"]).value if final["test_acc"] is not None else None,
        "final_epoch": outcome.final_epoch,
    }
    return row, curve


def run_semigrok_sweep(
    sizes: Sequence[int],
    seeds: Sequence[int],
    epochs: Optional[int] = None,
    weight_decay: float = 1.0,
    task: Optional[TaskSpec] = None,
    eval_every: Optional[int] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """Train from scratch at sizes near the critical size and band the final test accuracy.

    Writes ``summary.csv`` and ``accuracy_curves.csv`` (per-run accuracy over
    epochs) under ``out_dir``.
    """
    task = task or TaskSpec()
    epochs = settings.get_epoch_budget("semigrok") if epochs is None else epochs
    out_dir = Path(out_dir or Path(settings.OUTPUT_ROOT) / "semigrok")
    cells = [
        SemigrokCell(size, seed, epochs, weight_decay, task, eval_every or settings.EVAL_EVERY, out_dir)
        for size in sizes for seed in seeds
    ]
    results = [r for r in run_cells(_semigrok_cell, cells, workers or settings.WORKERS, "semigrok") if r is not None]
    summary = pd.DataFrame([row for row, _ in results], columns=SEMIGROK_COLUMNS)
    curves = pd.concat([curve for _, curve in results], ignore_index=True) if results else pd.DataFrame()
    _write_csv(summary, out_dir / SUMMARY_NAME)
    _write_csv(curves, out_dir / "accuracy_curves.csv")
    return summary


def middling_cells(ungrok: pd.DataFrame) -> pd.DataFrame:
    """Ungrokking cells whose final test accuracy lands in the middling band"""
    bands = ungrok["final_test_acc"].map(lambda acc: classify_band(acc).value)
    return ungrok[bands == AccuracyBand.MIDDLING.value]


# Logit ratio

def logit_ratio_report(ungrok: pd.DataFrame, n_buckets: Optional[int] = None) -> pd.DataFrame:
    """Trig/mem correct-logit ratio per ungrokking run, with geometric parameter-norm buckets"""
    n_buckets = n_buckets or settings.ISOLOGIT_BUCKETS
    frame = ungrok.dropna(subset=["correct_logit_trig", "correct_logit_mem"]).copy()
    frame = frame[frame["correct_logit_mem"] != 0]
    frame["logit_ratio"] = frame["correct_logit_trig"] / frame["correct_logit_mem"]
    norms = frame["param_norm"].to_numpy(float)
    if len(norms):
        edges = np.geomspace(norms.min(), norms.max(), n_buckets + 1)
        frame["norm_bucket"] = bucket_index(norms, edges)
    else:
        frame["norm_bucket"] = pd.Series(dtype=int)
    columns = ["reduced_size", "weight_decay", "seed", "param_norm", "norm_bucket", "logit_ratio"]
    return frame.sort_values(["norm_bucket", "reduced_size"])[columns].reset_index(drop=True)
