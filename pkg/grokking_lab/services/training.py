"""Full-batch training runs of the transformer.

One step is one epoch: the whole training set goes through
``loss_and_grads`` and AdamW once. A run directory holds ``config.json``,
``metrics.csv`` and ``checkpoint.bin`` (plus its ``checkpoint.json`` sidecar).
"""

import logging
import math
from collections import deque
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from grokking_lab.core.exceptions import DivergenceError, NonFiniteError, PreconditionError
from grokking_lab.models.models import CircuitTag, LabelMode, ModelParams, OptimizerState, RunOutcome
from grokking_lab.schemas.schemas import DataSplit, EfficiencyRecord, MetricsRow, RunConfig
from grokking_lab.services import modular_dataset
from grokking_lab.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from grokking_lab.services.circuit_analysis import (
    collect_logit_tensor,
    correct_logit_margin,
    correct_logit_mean,
    key_frequencies,
    project_trig,
)
from grokking_lab.services.optimizer import AdamW
from grokking_lab.services.transformer import evaluate, init_params, loss_and_grads, param_norm

logger = logging.getLogger(__name__)

METRICS_COLUMNS = list(MetricsRow.model_fields.keys())
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.csv"
CHECKPOINT_NAME = "checkpoint.bin"


def build_split(cfg: RunConfig) -> DataSplit:
    data = modular_dataset.split(cfg.task, cfg.train_count, cfg.split_seed)
    if cfg.label_mode == LabelMode.RANDOMIZED:
        data = modular_dataset.randomize_labels(data, cfg.label_seed)
    return data


def write_metrics(rows: List[MetricsRow], path: Path) -> None:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.10g")


def read_metrics(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def first_epoch_reaching(history: pd.DataFrame, column: str, threshold: float) -> Optional[int]:
    """First recorded epoch whose ``column`` is at least ``threshold``"""
    hits = history[history[column] >= threshold]
    return int(hits["epoch"].iloc[0]) if len(hits) else None


class Trainer:
    """Runs one training configuration to completion.

    ``split``, ``params`` and ``optimizer_state`` override what the config
    would build; ``start_epoch`` continues the epoch count of a checkpoint.
    """

    def __init__(
        self,
        cfg: RunConfig,
        split: Optional[DataSplit] = None,
        params: Optional[ModelParams] = None,
        optimizer_state: Optional[OptimizerState] = None,
        start_epoch: int = 0,
        progress: bool = False,
    ):
        self.cfg = cfg
        self.start_epoch = start_epoch
        self.progress = progress
        self.recent_totals: deque = deque(maxlen=(cfg.plateau_window or 0) + 1)

        if cfg.resume_from is not None:
            ckpt = load_checkpoint(cfg.resume_from)
            params = ckpt.params
            optimizer_state = ckpt.optimizer_state
            self.start_epoch = ckpt.epoch
            split = split or ckpt.split
            self.recent_totals.extend(ckpt.loss_window)
            if optimizer_state is None:
                logger.warning(f"Checkpoint {cfg.resume_from} has no optimizer state; moments restart at zero")

        self.split = split or build_split(cfg)
        if self.split.train_count == 0:
            raise PreconditionError("training needs at least one training example")
        self.train, self.test = modular_dataset.materialize(self.split)
        self.params = params if params is not None else init_params(cfg.model)
        self.optimizer = AdamW(self.params, cfg.optimizer, optimizer_state)

        self.run_dir = Path(cfg.out_dir)
        self.checkpoint_path = self.run_dir / CHECKPOINT_NAME
        self.metrics_path = self.run_dir / METRICS_NAME
        self.rows: List[MetricsRow] = []

    @property
    def has_test(self) -> bool:
        return len(self.test) > 0

    def _analysis(self) -> dict:
        Z = collect_logit_tensor(self.params, self.split.task)
        decomp = project_trig(Z)
        ids, labels = self.split.train_ids, self.train.labels
        return {
            "trig_fraction": decomp.trig_norm_fraction,
            "correct_logit_trig": correct_logit_mean(decomp.trig_component, ids, labels),
            "correct_logit_mem": correct_logit_mean(decomp.mem_component, ids, labels),
        }

    def measure(self, epoch: int, analyze: bool) -> MetricsRow:
        train_loss, train_acc = evaluate(self.params, self.train)
        values = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "param_norm": param_norm(self.params),
        }
        if self.has_test:
            values["test_loss"], values["test_acc"] = evaluate(self.params, self.test)
        if analyze:
            values.update(self._analysis())
        return MetricsRow(**values)

    def _checkpoint(self, epoch: int) -> None:
        save_checkpoint(
            self.checkpoint_path,
            Checkpoint(
                params=self.params,
                model=self.cfg.model,
                optimizer_state=self.optimizer.state,
                epoch=epoch,
                split=self.split,
                loss_window=list(self.recent_totals),
            ),
        )
        write_metrics(self.rows, self.metrics_path)

    def _reached_target(self, row: MetricsRow) -> bool:
        cfg = self.cfg
        hit_train = cfg.target_train_acc is not None and row.train_acc >= cfg.target_train_acc
        hit_test = cfg.target_test_acc is not None and row.test_acc is not None and row.test_acc >= cfg.target_test_acc
        return hit_train or hit_test

    def run(self) -> RunOutcome:
        cfg = self.cfg
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / CONFIG_NAME).write_text(cfg.model_dump_json(indent=2))
        if not self.has_test:
            logger.info("Test set is empty; only train metrics will be reported")

        def due(every: int, epoch: int) -> bool:
            return every > 0 and epoch % every == 0

        self.rows.append(self.measure(self.start_epoch, analyze=cfg.analyze_every > 0))
        stopped_early = False

        bar = tqdm(
            range(self.start_epoch + 1, cfg.max_epochs + 1),
            desc=f"train {self.run_dir.name}",
            disable=not self.progress,
            leave=False,
        )
        for epoch in bar:
            previous = self.params
            try:
                loss, grads = loss_and_grads(self.params, self.train)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"training loss is {loss}")
                self.params = self.optimizer.step(self.params, grads)
            except NonFiniteError as e:
                self.params = previous
                self._checkpoint(epoch - 1)
                logger.error(f"Run {self.run_dir} diverged at epoch {epoch}: {e}")
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}", epoch=epoch) from e

            if cfg.plateau_window:
                # xent at the pre-step parameters plus the matching decay term
                self.recent_totals.append(loss + 0.5 * cfg.optimizer.weight_decay * param_norm(previous) ** 2)

            is_last = epoch == cfg.max_epochs
            plateau = (
                bool(cfg.plateau_window)
                and len(self.recent_totals) == self.recent_totals.maxlen
                and abs(self.recent_totals[-1] - self.recent_totals[0]) < cfg.plateau_tol
            )
            analyze = due(cfg.analyze_every, epoch)
            if due(cfg.eval_every, epoch) or analyze or is_last or plateau:
                row = self.measure(epoch, analyze=analyze or ((is_last or plateau) and cfg.analyze_every > 0))
                self.rows.append(row)
                bar.set_postfix(train_acc=f"{row.train_acc:.3f}", test_acc=f"{row.test_acc or 0:.3f}")
                if plateau:
                    logger.info(f"Total loss plateaued at epoch {epoch}")
                    stopped_early = not is_last
                    break
                if self._reached_target(row) and not is_last:
                    logger.info(f"Accuracy target reached at epoch {epoch}")
                    stopped_early = True
                    break
            if due(cfg.checkpoint_every, epoch):
                self._checkpoint(epoch)

        final_epoch = self.rows[-1].epoch
        self._checkpoint(final_epoch)
        final = self.rows[-1]
        logger.info(
            f"Run {self.run_dir} finished at epoch {final_epoch}: "
            f"train_acc={final.train_acc:.4f} test_acc={final.test_acc} param_norm={final.param_norm:.3f}"
        )
        return RunOutcome(
            run_dir=str(self.run_dir),
            checkpoint_path=str(self.checkpoint_path),
            metrics_path=str(self.metrics_path),
            final_epoch=final_epoch,
            params=self.params,
            optimizer_state=self.optimizer.state,
            final_metrics=final.model_dump(),
            test_metrics_available=self.has_test,
            stopped_early=stopped_early,
            history=[row.model_dump() for row in self.rows],
        )


def run_grokking(cfg: RunConfig, progress: bool = False) -> RunOutcome:
    return Trainer(cfg, progress=progress).run()


def efficiency_record(
    outcome: RunOutcome, split: DataSplit, tag: CircuitTag, seed: int, weight_decay: float, complete: bool = True
) -> EfficiencyRecord:
    """Correct-logit / parameter-norm triple of a finished run over the raw logits"""
    Z = collect_logit_tensor(outcome.params, split.task)
    decomp = project_trig(Z)
    train_labels = modular_dataset.train_labels(split)
    test_ids = split.resolved_test_ids
    logit_test = None
    if tag != CircuitTag.MEM_ONLY and test_ids:
        _, labels = modular_dataset.grid_arrays(split.task)
        logit_test = correct_logit_mean(Z, test_ids, labels[np.asarray(test_ids)])
    return EfficiencyRecord(
        tag=tag,
        seed=seed,
        weight_decay=weight_decay,
        dataset_size=split.train_count,
        param_norm=param_norm(outcome.params),
        correct_logit_train=correct_logit_mean(Z, split.train_ids, train_labels),
        correct_logit_test=logit_test,
        trig_fraction=decomp.trig_norm_fraction,
        margin_train=correct_logit_margin(Z, split.train_ids, train_labels),
        complete=complete,
    )


def run_mem_only(cfg: RunConfig, progress: bool = False) -> EfficiencyRecord:
    """Memorize randomized labels and record the resulting efficiency triple.

    Without a plateau window the run stops as soon as train accuracy hits 1.
    """
    if cfg.label_mode != LabelMode.RANDOMIZED:
        raise PreconditionError("mem-only runs need randomized labels (label_mode=randomized)")
    if cfg.target_train_acc is None and cfg.plateau_window is None:
        cfg = cfg.model_copy(update={"target_train_acc": 1.0})
    trainer = Trainer(cfg, progress=progress)
    outcome = trainer.run()
    complete = outcome.final_metrics["train_acc"] >= 1.0
    if not complete:
        logger.warning(
            f"Mem-only run {outcome.run_dir} did not memorize within {cfg.max_epochs} epochs "
            f"(train_acc={outcome.final_metrics['train_acc']:.4f}); record flagged incomplete"
        )
    return efficiency_record(
        outcome, trainer.split, CircuitTag.MEM_ONLY, cfg.seed, cfg.optimizer.weight_decay, complete=complete
    )


def analyze_checkpoint(path: Path, energy_fraction: Optional[float] = None):
    """Trig decomposition of a stored model plus its key frequencies"""
    ckpt = load_checkpoint(path)
    if ckpt.split is None:
        raise PreconditionError(f"{path} has no sidecar split; cannot tell which task it was trained on")
    decomp = project_trig(collect_logit_tensor(ckpt.params, ckpt.split.task))
    return ckpt, decomp, key_frequencies(decomp, energy_fraction)
