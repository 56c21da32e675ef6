from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, Iterator, List, Optional, Tuple
import enum

import numpy as np


class BinaryOp(str, enum.Enum):
    ADDITION = "addition"
    SUBTRACTION = "subtraction"
    MULTIPLICATION = "multiplication"
    SQUARE_SUM = "square_sum"  # x^2 + y^2 mod P


class LabelMode(str, enum.Enum):
    TRUE = "true"
    RANDOMIZED = "randomized"


class CircuitTag(str, enum.Enum):
    GEN_ONLY = "gen-only"
    MEM_ONLY = "mem-only"
    MIXED = "mixed"


class Regime(str, enum.Enum):
    WINNER_TAKE_ALL = "winner-take-all"
    MIXTURE = "mixture"


class AccuracyBand(str, enum.Enum):
    NEAR_RANDOM = "near-random"
    MIDDLING = "middling"
    FULL = "full"


# Minimal model

@dataclass(frozen=True)
class SimState:
    w_g1: float
    w_g2: float
    w_m1: float
    w_m2: float
    step: int = 0

    @property
    def w_g(self) -> float:
        return self.w_g1 * self.w_g2

    @property
    def w_m(self) -> float:
        return self.w_m1 * self.w_m2

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.w_g1, self.w_g2, self.w_m1, self.w_m2)


# Dataset

@dataclass(frozen=True)
class ExampleRow:
    tokens: Tuple[int, int, int, int]  # [x, op, y, =]
    label: int

    @property
    def x(self) -> int:
        return self.tokens[0]

    @property
    def y(self) -> int:
        return self.tokens[2]


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (batch, 4) int64
    labels: np.ndarray  # (batch,) int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray) -> "Batch":
        return Batch(tokens=self.tokens[index], labels=self.labels[index])


# Property checks

@dataclass(frozen=True)
class LogitTable:
    entries: np.ndarray  # (n_examples, n_labels)
    true_labels: np.ndarray  # (n_examples,)

    @property
    def n_examples(self) -> int:
        return int(self.entries.shape[0])

    @property
    def n_labels(self) -> int:
        return int(self.entries.shape[1])

    def has_perfect_accuracy(self) -> bool:
        rows = np.arange(self.n_examples)
        true_logit = self.entries[rows, self.true_labels]
        others = self.entries.copy()
        others[rows, self.true_labels] = -np.inf
        return bool(np.all(true_logit > others.max(axis=1)))


# Transformer

@dataclass
class ModelParams:
    """All weights of the one-layer transformer.

    Attention projections are stored per head: ``W_Q``, ``W_K`` and ``W_V``
    have shape ``(n_heads, d_model, d_head)``; ``W_O`` maps the concatenated
    heads ``(n_heads * d_head, d_model)`` back to the residual stream.
    The field order is also the on-disk tensor order of checkpoints.
    """

    W_E: np.ndarray  # (vocab_size, d_model)
    W_pos: np.ndarray  # (seq_len, d_model)
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray  # (n_heads * d_head, d_model)
    W_in: np.ndarray  # (d_model, d_mlp)
    W_out: np.ndarray  # (d_mlp, d_model)
    W_U: np.ndarray  # (d_model, n_answer_classes)

    @classmethod
    def tensor_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.tensor_names()}

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors().items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return replace(self, **{name: fn(t) for name, t in self.items()})

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    @property
    def n_scalars(self) -> int:
        return sum(int(t.size) for _, t in self.items())


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0


# Circuit analysis

@dataclass(frozen=True)
class LogitTensor:
    values: np.ndarray  # (P, P, P) indexed (a, b, c)
    P: int

    def __post_init__(self):
        if self.values.shape != (self.P, self.P, self.P):
            raise ValueError(f"logit tensor must have shape {(self.P,) * 3}, got {self.values.shape}")

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class TrigDecomposition:
    P: int
    trig_component: np.ndarray  # Z_T, (P, P, P)
    mem_component: np.ndarray  # Z_M, (P, P, P)
    coefficients: np.ndarray  # (K,) dot products with the unit basis vectors
    trig_norm_fraction: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(1, len(self.coefficients) + 1)


@dataclass
class RunOutcome:
    """What a finished training run hands back to its caller."""

    run_dir: str
    checkpoint_path: str
    metrics_path: str
    final_epoch: int
    params: ModelParams
    optimizer_state: Optional[OptimizerState]
    final_metrics: dict
    test_metrics_available: bool
    stopped_early: bool = False
    history: List[dict] = field(default_factory=list)
