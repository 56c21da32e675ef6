import math
from typing import Iterable, Tuple

import numpy as np

from grokking_lab.core.exceptions import NonFiniteError


def ensure_finite_array(name: str, array: np.ndarray) -> np.ndarray:
    """Raise NonFiniteError naming ``name`` when ``array`` holds NaN or Inf"""
    if not np.all(np.isfinite(array)):
        n_bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"non-finite values in {name} ({n_bad} entries)")
    return array


def ensure_finite_scalars(items: Iterable[Tuple[str, float]]) -> None:
    """Check named scalars; the error message carries every offender"""
    bad = [f"{name}={value!r}" for name, value in items if not math.isfinite(value)]
    if bad:
        raise NonFiniteError(f"non-finite partials: {', '.join(bad)}")


def validate_fraction(value: float, name: str, *, lower_open: bool = True) -> float:
    """Check a value lies in (0, 1] (or [0, 1] when lower_open is False)"""
    low_ok = value > 0 if lower_open else value >= 0
    if not (low_ok and value <= 1):
        raise ValueError(f"{name} must be in {'(' if lower_open else '['}0, 1], got {value}")
    return value


def validate_seed(seed: int) -> int:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return int(seed)
