from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Literal
from pathlib import Path
from grokking_lab.core.config import settings
from grokking_lab.models.models import BinaryOp, LabelMode, CircuitTag

SEED_MAX = 2**64 - 1


# Minimal model schemas
class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    pi_g: float = Field(1.0, gt=0)
    pi_m: float = Field(2.0, gt=0)
    k: float = Field(1.2, gt=0)
    weight_decay: float = Field(0.005, ge=0, alias="lambda")
    q: int = Field(113, ge=2)
    lr: float = Field(0.01, gt=0)
    w_g1_0: float = Field(0.0, ge=0)
    w_g2_0: float = Field(0.005, ge=0)
    w_m1_0: float = Field(0.0, ge=0)
    w_m2_0: float = Field(1.0, ge=0)
    steps: int = Field(default_factory=lambda: settings.SIM_STEPS, ge=0)


class SimTraceRow(BaseModel):
    step: int
    l_train: float
    l_test: float
    l_wd: float
    w_g: float
    w_m: float
    param_norm: float


# Dataset schemas
class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    modulus: int = Field(default_factory=lambda: settings.DEFAULT_MODULUS, ge=2)
    op: BinaryOp = BinaryOp.ADDITION

    @property
    def vocab_size(self) -> int:
        return self.modulus + 2

    @property
    def op_token(self) -> int:
        return self.modulus

    @property
    def eq_token(self) -> int:
        return self.modulus + 1


class DataSplit(BaseModel):
    """A train/test partition of the P x P grid.

    ``test_ids`` is ``None`` for a plain split (test = complement of train).
    Subsampled splits pin the original test set explicitly; the rows removed
    from training then belong to neither side.
    """

    model_config = ConfigDict(frozen=True)

    task: TaskSpec
    train_ids: List[int]
    seed: int = Field(ge=0, le=SEED_MAX)
    label_mode: LabelMode = LabelMode.TRUE
    label_seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)
    test_ids: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_ids(self):
        grid = self.task.modulus ** 2
        if self.train_ids != sorted(set(self.train_ids)):
            raise ValueError("train_ids must be sorted and unique")
        if self.train_ids and (self.train_ids[0] < 0 or self.train_ids[-1] >= grid):
            raise ValueError(f"train_ids must lie in [0, {grid})")
        if self.test_ids is not None:
            if self.test_ids != sorted(set(self.test_ids)):
                raise ValueError("test_ids must be sorted and unique")
            if self.test_ids and (self.test_ids[0] < 0 or self.test_ids[-1] >= grid):
                raise ValueError(f"test_ids must lie in [0, {grid})")
            if set(self.train_ids) & set(self.test_ids):
                raise ValueError("train_ids and test_ids overlap")
        if self.label_mode == LabelMode.RANDOMIZED and self.label_seed is None:
            raise ValueError("randomized labels need a label_seed")
        return self

    @property
    def resolved_test_ids(self) -> List[int]:
        if self.test_ids is not None:
            return list(self.test_ids)
        train = set(self.train_ids)
        return [i for i in range(self.task.modulus ** 2) if i not in train]

    @property
    def train_count(self) -> int:
        return len(self.train_ids)


# Transformer / optimizer schemas
class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_model: int = Field(128, ge=1)
    d_head: int = Field(32, ge=1)
    n_heads: int = Field(4, ge=1)
    d_mlp: int = Field(512, ge=1)
    vocab_size: int = Field(115, ge=3)
    seq_len: Literal[4] = 4
    n_answer_classes: int = Field(113, ge=2)
    init_scale: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0, le=SEED_MAX)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def check_shapes(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(f"n_heads * d_head must equal d_model ({self.n_heads} * {self.d_head} != {self.d_model})")
        if self.vocab_size != self.n_answer_classes + 2:
            raise ValueError("vocab_size must be n_answer_classes + 2 (numerals plus op and '=')")
        return self

    @classmethod
    def for_task(cls, task: TaskSpec, **overrides) -> "ModelConfig":
        return cls(vocab_size=task.vocab_size, n_answer_classes=task.modulus, **overrides)


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.98, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(1.0, ge=0)


# Experiment schemas
class RunConfig(BaseModel):
    task: TaskSpec = Field(default_factory=TaskSpec)
    train_count: int = Field(3831, ge=0)
    split_seed: int = Field(0, ge=0, le=SEED_MAX)
    seed: int = Field(0, ge=0, le=SEED_MAX)
    model: Optional[ModelConfig] = None
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    max_epochs: int = Field(default_factory=lambda: settings.GROK_EPOCHS, ge=0)
    eval_every: int = Field(default_factory=lambda: settings.EVAL_EVERY, ge=1)
    analyze_every: int = Field(default_factory=lambda: settings.ANALYZE_EVERY, ge=0)
    checkpoint_every: int = Field(default_factory=lambda: settings.CHECKPOINT_EVERY, ge=0)
    target_test_acc: Optional[float] = Field(None, ge=0, le=1)
    target_train_acc: Optional[float] = Field(None, ge=0, le=1)
    plateau_window: Optional[int] = Field(None, ge=1)
    plateau_tol: float = Field(default_factory=lambda: settings.PLATEAU_TOL, gt=0)
    label_mode: LabelMode = LabelMode.TRUE
    label_seed: Optional[int] = Field(None, ge=0, le=SEED_MAX)
    out_dir: Path = Field(default_factory=lambda: Path(settings.OUTPUT_ROOT) / "run")
    resume_from: Optional[Path] = None

    @model_validator(mode="after")
    def sync_model(self):
        if self.train_count > self.task.modulus ** 2:
            raise ValueError(f"train_count {self.train_count} exceeds the grid size {self.task.modulus ** 2}")
        if self.model is None:
            self.model = ModelConfig.for_task(self.task, seed=self.seed)
        elif self.model.n_answer_classes != self.task.modulus:
            raise ValueError("model answer classes must match the task modulus")
        elif self.model.seed != self.seed:
            self.model = self.model.model_copy(update={"seed": self.seed})
        if self.label_mode == LabelMode.RANDOMIZED and self.label_seed is None:
            self.label_seed = self.seed
        return self


class UngrokkingSweepConfig(BaseModel):
    source_checkpoint: Path
    reduced_sizes: List[int]
    weight_decays: List[float] = [0.3, 1.0, 3.0]
    continuation_epochs: int = Field(default_factory=lambda: settings.UNGROK_EPOCHS, ge=0)
    seeds: List[int] = [0]
    eval_every: int = Field(default_factory=lambda: settings.EVAL_EVERY, ge=1)
    carry_optimizer_state: bool = False
    out_dir: Path = Field(default_factory=lambda: Path(settings.OUTPUT_ROOT) / "ungrok")
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)

    @field_validator("reduced_sizes")
    @classmethod
    def positive_sizes(cls, v: List[int]) -> List[int]:
        if any(size < 1 for size in v):
            raise ValueError("reduced sizes must be >= 1")
        return v


# Theory schemas
class AllocationProblem(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    pis: List[float]
    p_norm: float = Field(2.0, gt=0)
    k: float = Field(1.0, gt=0)
    weight_decay: float = Field(0.005, gt=0, alias="lambda")
    q: int = Field(113, ge=2)

    @field_validator("pis")
    @classmethod
    def positive_norms(cls, v: List[float]) -> List[float]:
        if len(v) < 1:
            raise ValueError("need at least one circuit")
        if any(pi <= 0 for pi in v):
            raise ValueError("circuit parameter norms must be > 0")
        return v

    @property
    def n(self) -> int:
        return len(self.pis)


# Metrics / records
class MetricsRow(BaseModel):
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: Optional[float] = None
    test_acc: Optional[float] = None
    param_norm: float
    trig_fraction: Optional[float] = None
    correct_logit_trig: Optional[float] = None
    correct_logit_mem: Optional[float] = None


class EfficiencyRecord(BaseModel):
    tag: CircuitTag
    seed: int
    weight_decay: float
    dataset_size: int = Field(ge=1)
    param_norm: float = Field(ge=0)
    correct_logit_train: float
    correct_logit_test: Optional[float] = None
    trig_fraction: Optional[float] = None
    margin_train: Optional[float] = None
    complete: bool = True

    @classmethod
    def csv_columns(cls) -> List[str]:
        return list(cls.model_fields.keys())
