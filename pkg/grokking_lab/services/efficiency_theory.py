"""Numerical checks of the logit-scaling and circuit-allocation theorems.

Scaling: a classifier with perfect accuracy strictly lowers its cross-entropy
when all logits are multiplied by ``c > 1``.

Allocation: ``n`` circuits produce identical logits, circuit ``i`` at weight
``w_i`` costs parameter norm ``w_i**(1/k) * pi_i`` and the loss is

    L(w) = L_train(sum(w)) + (lambda / p) * sum((w_i**(1/k) * pi_i)**p)

For ``k >= p`` the optimum puts all weight on the circuits with the smallest
``pi``; for ``k < p`` every circuit keeps weight ``∝ pi_i**(-p*k/(p-k))``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from grokking_lab.core.exceptions import PreconditionError
from grokking_lab.models.models import LogitTable, Regime
from grokking_lab.schemas.schemas import AllocationProblem

logger = logging.getLogger(__name__)

GRID_COLUMNS = ["p", "k", "n", "pis", "regime", "max_profile_deviation", "converged"]

# Stands in for the +inf slope of w**(p/k) at w = 0 when p/k < 1
_INFINITE_SLOPE = 1e300


def _row_xent(shifted: np.ndarray) -> np.ndarray:
    """Per-row -log softmax of the entry at column 0 of ``shifted``.

    ``shifted`` holds ``logits - true_logit`` with the true label moved to
    column 0. The largest term is factored out and removed exactly so tiny
    losses keep full relative precision (log1p instead of log).
    """
    top = shifted.max(axis=1, keepdims=True)
    scaled = np.exp(shifted - top)
    argmax = shifted.argmax(axis=1)
    scaled[np.arange(shifted.shape[0]), argmax] = 0.0
    return top[:, 0] + np.log1p(scaled.sum(axis=1))


def scaled_xent(table: LogitTable, c: float) -> float:
    """Mean softmax cross-entropy of the true labels under logits ``c * entries``"""
    if not math.isfinite(c):
        raise ValueError(f"scale must be finite, got {c}")
    rows = np.arange(table.n_examples)
    true_logit = table.entries[rows, table.true_labels][:, None]
    shifted = c * (table.entries - true_logit)
    # move the true label to column 0
    others = np.delete(shifted.reshape(-1), rows * table.n_labels + table.true_labels).reshape(
        table.n_examples, table.n_labels - 1
    )
    ordered = np.concatenate([np.zeros((table.n_examples, 1)), others], axis=1)
    return float(_row_xent(ordered).mean())


def check_scaling_theorem(table: LogitTable, c: float) -> bool:
    if not table.has_perfect_accuracy():
        raise PreconditionError("logit table does not have perfect accuracy")
    if not c > 1:
        raise PreconditionError(f"scale factor must exceed 1, got {c}")
    return scaled_xent(table, c) < scaled_xent(table, 1.0)


def random_perfect_table(
    rng: np.random.Generator, n_examples: int, n_labels: int, min_margin: float = 1e-3, max_margin: float = 3.0
) -> LogitTable:
    """Random logits whose true label wins every row by at least ``min_margin``"""
    entries = rng.normal(size=(n_examples, n_labels))
    labels = rng.integers(0, n_labels, size=n_examples)
    rows = np.arange(n_examples)
    masked = entries.copy()
    masked[rows, labels] = -np.inf
    entries[rows, labels] = masked.max(axis=1) + rng.uniform(min_margin, max_margin, size=n_examples)
    return LogitTable(entries=entries, true_labels=labels)


# Allocation theorem

def train_loss_of_total(total: float, q: int) -> float:
    """Cross-entropy of one correct label among ``q`` with logit ``total``"""
    return float(np.logaddexp(math.log(q - 1), total) - total)


def _train_slope(total: float, q: int) -> float:
    log_rest = math.log(q - 1)
    return -math.exp(log_rest - np.logaddexp(log_rest, total))


def allocation_loss(prob: AllocationProblem, w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    pis = np.asarray(prob.pis, dtype=float)
    norms = pis ** prob.p_norm * np.maximum(w, 0.0) ** (prob.p_norm / prob.k)
    decay = (prob.weight_decay / prob.p_norm) * np.sum(norms)
    return train_loss_of_total(float(w.sum()), prob.q) + float(decay)


def allocation_gradient(prob: AllocationProblem, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    pis = np.asarray(prob.pis, dtype=float)
    exponent = prob.p_norm / prob.k - 1.0
    positive = w > 0
    base = np.where(positive, w, 1.0)
    decay_slope = (prob.weight_decay / prob.k) * pis ** prob.p_norm * base ** exponent
    if exponent < 0:
        decay_slope = np.where(positive, decay_slope, _INFINITE_SLOPE)
    elif exponent > 0:
        decay_slope = np.where(positive, decay_slope, 0.0)
    return _train_slope(float(w.sum()), prob.q) + decay_slope


def regime_of(prob: AllocationProblem) -> Regime:
    return Regime.WINNER_TAKE_ALL if prob.k >= prob.p_norm else Regime.MIXTURE


def optimal_weights_closed_form(prob: AllocationProblem) -> Tuple[np.ndarray, Regime]:
    """Optimal weight proportions (summing to 1) and the regime they fall in"""
    pis = np.asarray(prob.pis, dtype=float)
    regime = regime_of(prob)
    if regime == Regime.WINNER_TAKE_ALL:
        winners = pis == pis.min()
        profile = winners / winners.sum()
    else:
        exponent = -prob.p_norm * prob.k / (prob.p_norm - prob.k)
        # scale by the smallest pi first so large exponents do not overflow
        raw = (pis / pis.min()) ** exponent
        profile = raw / raw.sum()
    return profile.astype(float), regime


def closed_form_loss(prob: AllocationProblem) -> Tuple[float, np.ndarray]:
    """Complete the closed-form proportions with a 1-D search over overall scale"""
    profile, _ = optimal_weights_closed_form(prob)

    def along(scale: float) -> float:
        return allocation_loss(prob, scale * profile)

    grid = np.concatenate([[0.0], np.geomspace(1e-6, 1e3, 2000)])
    values = np.array([along(s) for s in grid])
    best = int(values.argmin())
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    result = minimize_scalar(along, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    scale = float(result.x) if result.fun <= values[best] else float(grid[best])
    return along(scale), scale * profile


@dataclass
class AllocationResult:
    weights: np.ndarray
    loss: float
    converged: bool
    iterations: int

    @property
    def profile(self) -> np.ndarray:
        total = self.weights.sum()
        return self.weights / total if total > 0 else self.weights


def _spectral_projected_gradient(
    prob: AllocationProblem,
    start: np.ndarray,
    max_iter: int,
    tol: float,
    memory: int = 10,
    sufficient_decrease: float = 1e-4,
) -> AllocationResult:
    """Barzilai-Borwein projected gradient with non-monotone Armijo backtracking.

    The feasible set is the non-negative orthant, so projection is a clamp at 0.
    """
    w = np.maximum(np.asarray(start, dtype=float), 0.0)
    f = allocation_loss(prob, w)
    g = allocation_gradient(prob, w)
    recent = [f]
    step = 1e-2
    for iteration in range(1, max_iter + 1):
        projected = np.maximum(w - g, 0.0) - w
        if np.max(np.abs(projected)) <= tol * max(1.0, np.max(np.abs(w))):
            return AllocationResult(w, f, True, iteration - 1)

        direction = np.maximum(w - step * g, 0.0) - w
        slope = float(np.dot(g, direction))
        reference = max(recent)
        t = 1.0
        while True:
            candidate = w + t * direction
            f_new = allocation_loss(prob, candidate)
            if f_new <= reference + sufficient_decrease * t * slope or t < 1e-20:
                break
            t *= 0.5

        g_new = allocation_gradient(prob, candidate)
        s = candidate - w
        y = g_new - g
        sy = float(np.dot(s, y))
        step = float(np.clip(np.dot(s, s) / sy, 1e-10, 1e10)) if sy > 0 else 1e10
        w, f, g = candidate, f_new, g_new
        recent.append(f)
        if len(recent) > memory:
            recent.pop(0)

    return AllocationResult(w, f, False, max_iter)


def allocation_starts(
    prob: AllocationProblem, seed: int = 0, n_random: int = 8, scale: float = 5.0
) -> List[np.ndarray]:
    """Random non-negative starts plus the all-equal and every one-hot start"""
    rng = np.random.Generator(np.random.Philox(seed))
    n = prob.n
    starts = [rng.uniform(0.0, scale, size=n) for _ in range(n_random)]
    starts.append(np.full(n, scale / n))
    for i in range(n):
        one_hot = np.zeros(n)
        one_hot[i] = scale
        starts.append(one_hot)
    return starts


def minimize_allocation_numeric(
    prob: AllocationProblem,
    seed: int = 0,
    n_random: int = 8,
    max_iter: int = 100_000,
    tol: float = 1e-12,
) -> AllocationResult:
    """Best local minimum of the allocation loss over several starts"""
    best: Optional[AllocationResult] = None
    for start in allocation_starts(prob, seed=seed, n_random=n_random):
        result = _spectral_projected_gradient(prob, start, max_iter=max_iter, tol=tol)
        if not result.converged:
            logger.warning(f"Allocation search hit {max_iter} iterations (pis={prob.pis}, p={prob.p_norm}, k={prob.k})")
        if best is None or result.loss < best.loss:
            best = result
    return best


def profile_deviation(prob: AllocationProblem, result: AllocationResult) -> float:
    profile, _ = optimal_weights_closed_form(prob)
    return float(np.max(np.abs(result.profile - profile)))


def off_winner_relative_weight(prob: AllocationProblem, weights: np.ndarray) -> float:
    """Largest weight on a non-minimal-pi circuit relative to the largest weight"""
    pis = np.asarray(prob.pis, dtype=float)
    losers = pis > pis.min()
    top = float(np.max(weights))
    if not losers.any() or top <= 0:
        return 0.0
    return float(np.max(weights[losers]) / top)


def allocation_grid(
    p_values: Sequence[float] = (1, 2, 3),
    k_values: Sequence[float] = (0.5, 1, 1.2, 2, 3),
    n_values: Sequence[int] = (2, 3, 5),
    weight_decay: float = 0.005,
    q: int = 113,
    pi_range: Tuple[float, float] = (0.5, 5.0),
    seed: int = 0,
) -> pd.DataFrame:
    """Compare the closed form with the numeric minimizer over a (p, k, n) grid"""
    rng = np.random.Generator(np.random.Philox(seed))
    rows = []
    for p in p_values:
        for k in k_values:
            for n in n_values:
                pis = [float(x) for x in rng.uniform(*pi_range, size=n)]
                prob = AllocationProblem(pis=pis, p_norm=p, k=k, weight_decay=weight_decay, q=q)
                result = minimize_allocation_numeric(prob, seed=seed)
                rows.append({
                    "p": p,
                    "k": k,
                    "n": n,
                    "pis": " ".join(f"{x:.6g}" for x in pis),
                    "regime": regime_of(prob).value,
                    "max_profile_deviation": profile_deviation(prob, result),
                    "converged": result.converged,
                })
    logger.info(f"Allocation grid finished: {len(rows)} cells")
    return pd.DataFrame(rows, columns=GRID_COLUMNS)


def scaling_property_trials(
    n_trials: int = 1000, max_examples: int = 50, max_labels: int = 10, seed: int = 0
) -> Iterable[Tuple[LogitTable, float, bool]]:
    """Random perfect-accuracy tables and scales in (1, 10] with the check outcome"""
    rng = np.random.Generator(np.random.Philox(seed))
    for _ in range(n_trials):
        n_examples = int(rng.integers(1, max_examples + 1))
        n_labels = int(rng.integers(2, max_labels + 1))
        table = random_perfect_table(rng, n_examples, n_labels)
        c = float(1.0 + 9.0 * (1.0 - rng.random()))  # (1, 10]
        yield table, c, check_scaling_theorem(table, c)


def grid_violations(
    grid: pd.DataFrame, mixture_tol: float = 1e-2, wta_tol: float = 1e-4, boundary_tol: float = 1e-3
) -> pd.DataFrame:
    """Grid cells where the numeric profile strays from the closed form"""
    tol = np.where(
        grid["regime"] == Regime.MIXTURE.value,
        mixture_tol,
        np.where(np.isclose(grid["k"], grid["p"]), boundary_tol, wta_tol),
    )
    return grid[grid["max_profile_deviation"] >= tol]
