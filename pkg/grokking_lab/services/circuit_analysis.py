"""Logit-level circuit decomposition over the P**3 grid of (a, b, c).

The trig subspace is spanned by the K = ceil((P-1)/2) unit vectors with
entries ``cos(2*pi*k*(a+b-c)/P) / norm_k``. Each one only depends on the
residue ``m = (a+b-c) mod P`` and every residue occurs P**2 times, so
projections reduce to a length-P histogram of Z over residues. The constant
direction (k = 0) is left out and lands in the memorization residual.
"""

import io
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from grokking_lab.core.config import settings
from grokking_lab.models.models import LogitTensor, ModelParams, TrigDecomposition
from grokking_lab.schemas.schemas import EfficiencyRecord, TaskSpec
from grokking_lab.services.modular_dataset import grid_arrays
from grokking_lab.services.transformer import forward
from grokking_lab.utils.validators import validate_fraction

logger = logging.getLogger(__name__)

TensorLike = Union[LogitTensor, np.ndarray]


def residues(P: int) -> np.ndarray:
    r = np.arange(P)
    return np.mod(r[:, None, None] + r[None, :, None] - r[None, None, :], P)


@dataclass(frozen=True)
class FourierBasis:
    P: int

    @property
    def K(self) -> int:
        return math.ceil((self.P - 1) / 2)

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(1, self.K + 1)

    @cached_property
    def profile(self) -> np.ndarray:
        """``(K, P)``: value of each unit basis vector at each residue"""
        m = np.arange(self.P)
        waves = np.cos(2 * np.pi * np.outer(self.frequencies, m) / self.P)
        norms = self.P * np.sqrt(np.sum(waves ** 2, axis=1, keepdims=True))
        return waves / norms

    @cached_property
    def residue_index(self) -> np.ndarray:
        return residues(self.P)

    def vector(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.K:
            raise ValueError(f"frequency must lie in [1, {self.K}], got {k}")
        return self.profile[k - 1][self.residue_index]

    def materialize(self) -> np.ndarray:
        """All basis vectors as a ``(K, P**3)`` matrix; only sensible for small P"""
        return self.profile[:, self.residue_index.reshape(-1)]

    def gram(self) -> np.ndarray:
        # inner products via residue counts (each residue appears P**2 times)
        return self.P ** 2 * self.profile @ self.profile.T


def _values(Z: TensorLike) -> np.ndarray:
    return Z.values if isinstance(Z, LogitTensor) else np.asarray(Z)


def collect_logit_tensor(params: ModelParams, task: TaskSpec, chunk: Optional[int] = None) -> LogitTensor:
    """Logits of every class for every input ``(a, op, b, =)``"""
    P = task.modulus
    if params.W_U.shape[1] != P:
        raise ValueError(f"model has {params.W_U.shape[1]} answer classes, task modulus is {P}")
    tokens, _ = grid_arrays(task)
    chunk = chunk or settings.ANALYSIS_BATCH
    rows = [forward(params, tokens[start:start + chunk]) for start in range(0, len(tokens), chunk)]
    values = np.concatenate(rows, axis=0).astype(np.float64).reshape(P, P, P)
    return LogitTensor(values=values, P=P)


def project_trig(Z: TensorLike, basis: Optional[FourierBasis] = None) -> TrigDecomposition:
    values = _values(Z).astype(np.float64)
    P = values.shape[0]
    basis = basis or FourierBasis(P)
    if basis.P != P:
        raise ValueError(f"basis is for P={basis.P}, tensor is for P={P}")

    by_residue = np.bincount(basis.residue_index.reshape(-1), weights=values.reshape(-1), minlength=P)
    coefficients = basis.profile @ by_residue
    trig = (coefficients @ basis.profile)[basis.residue_index]
    mem = values - trig

    total = float(np.sum(values ** 2))
    fraction = float(np.sum(trig ** 2) / total) if total > 0 else 0.0
    return TrigDecomposition(
        P=P, trig_component=trig, mem_component=mem, coefficients=coefficients, trig_norm_fraction=fraction
    )


def correct_logit_mean(Z: TensorLike, ids: Sequence[int], labels: Sequence[int]) -> float:
    """Mean logit of the true label over grid cells ``ids``"""
    values = _values(Z)
    P = values.shape[0]
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("no examples to average over")
    return float(np.mean(values.reshape(P * P, P)[ids, np.asarray(labels, dtype=np.int64)]))


def correct_logit_margin(Z: TensorLike, ids: Sequence[int], labels: Sequence[int]) -> float:
    """Mean of (true-label logit - largest other logit) over grid cells ``ids``"""
    values = _values(Z)
    P = values.shape[0]
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("no examples to average over")
    rows = values.reshape(P * P, P)[ids].copy()
    rows_idx = np.arange(ids.size)
    labels = np.asarray(labels, dtype=np.int64)
    true = rows[rows_idx, labels]
    rows[rows_idx, labels] = -np.inf
    return float(np.mean(true - rows.max(axis=1)))


def gen_only_filter(Z: Union[TensorLike, TrigDecomposition, float, None], threshold: Optional[float] = None) -> bool:
    """True when strictly more than ``threshold`` of the logit norm is trig.

    ``Z`` may be a logit tensor, a finished decomposition or its trig fraction.
    """
    threshold = settings.GEN_ONLY_THRESHOLD if threshold is None else threshold
    validate_fraction(threshold, "threshold")
    if Z is None:
        return False
    if isinstance(Z, (int, float)):
        return float(Z) > threshold
    decomp = Z if isinstance(Z, TrigDecomposition) else project_trig(Z)
    return decomp.trig_norm_fraction > threshold


def key_frequencies(decomp: TrigDecomposition, energy_fraction: Optional[float] = None) -> List[int]:
    """Fewest frequencies, strongest first, holding ``energy_fraction`` of the trig energy"""
    energy_fraction = settings.KEY_FREQ_ENERGY if energy_fraction is None else energy_fraction
    validate_fraction(energy_fraction, "energy_fraction")
    energy = decomp.coefficients ** 2
    total = float(energy.sum())
    # rounding noise only
    if total == 0 or decomp.trig_norm_fraction < 1e-12:
        return []
    order = np.argsort(-energy, kind="stable")
    reached = np.cumsum(energy[order]) / total >= energy_fraction * (1 - 1e-12)
    count = int(np.argmax(reached)) + 1
    return sorted(int(decomp.frequencies[i]) for i in order[:count])


def decomposition_csv(decomp: TrigDecomposition) -> str:
    buffer = io.StringIO()
    buffer.write(f"# trig_norm_fraction={decomp.trig_norm_fraction:.10g}\n")
    frame = pd.DataFrame({"k": decomp.frequencies, "coefficient": decomp.coefficients})
    frame.to_csv(buffer, index=False, float_format="%.10g")
    return buffer.getvalue()


@dataclass
class IsologitSummary:
    points: pd.DataFrame  # bucket, logit_lo, logit_hi, dataset_size, mean_param_norm, n_records
    correlations: pd.DataFrame  # bucket, n_records, n_sizes, spearman
    excluded: int
    edges: np.ndarray

    def positive_share(self) -> float:
        rho = self.correlations["spearman"].dropna()
        return float((rho > 0).mean()) if len(rho) else float("nan")


def bucket_index(logits: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Left-closed geometric buckets; the maximum falls into the last bucket"""
    n_buckets = len(edges) - 1
    lo, hi = edges[0], edges[-1]
    if hi <= lo:
        return np.zeros(len(logits), dtype=np.int64)
    position = np.log(logits / lo) / np.log(hi / lo) * n_buckets
    return np.clip(np.floor(position + 1e-9), 0, n_buckets - 1).astype(np.int64)


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y)[0])


def isologit_buckets(records: Sequence[EfficiencyRecord], n_buckets: Optional[int] = None) -> IsologitSummary:
    """Group records into geometric correct-logit buckets and correlate D with parameter norm"""
    n_buckets = n_buckets or settings.ISOLOGIT_BUCKETS
    frame = pd.DataFrame(
        [(r.correct_logit_train, r.dataset_size, r.param_norm) for r in records],
        columns=["logit", "dataset_size", "param_norm"],
    )
    positive = frame["logit"] > 0
    excluded = int((~positive).sum())
    if excluded:
        logger.warning(f"Isologit bucketing excluded {excluded} record(s) with non-positive correct logit")
    frame = frame[positive].reset_index(drop=True)

    if frame.empty:
        empty_points = pd.DataFrame(
            columns=["bucket", "logit_lo", "logit_hi", "dataset_size", "mean_param_norm", "n_records"]
        )
        empty_corr = pd.DataFrame(columns=["bucket", "n_records", "n_sizes", "spearman"])
        return IsologitSummary(empty_points, empty_corr, excluded, np.array([]))

    edges = np.geomspace(frame["logit"].min(), frame["logit"].max(), n_buckets + 1)
    frame["bucket"] = bucket_index(frame["logit"].to_numpy(), edges)

    points = (
        frame.groupby(["bucket", "dataset_size"], sort=True)["param_norm"]
        .agg(["mean", "count"])
        .rename(columns={"mean": "mean_param_norm", "count": "n_records"})
        .reset_index()
    )
    points.insert(1, "logit_lo", edges[points["bucket"].to_numpy()])
    points.insert(2, "logit_hi", edges[points["bucket"].to_numpy() + 1])

    rows = []
    for bucket, group in points.groupby("bucket", sort=True):
        rows.append({
            "bucket": int(bucket),
            "n_records": int(group["n_records"].sum()),
            "n_sizes": int(len(group)),
            "spearman": _spearman(group["dataset_size"].to_numpy(float), group["mean_param_norm"].to_numpy(float)),
        })
    correlations = pd.DataFrame(rows, columns=["bucket", "n_records", "n_sizes", "spearman"])
    return IsologitSummary(points, correlations, excluded, edges)
