"""Two-circuit competition model.

A generalizing circuit (Gen) and a memorizing circuit (Mem) are lookup
tables whose strengths are scalar weights ``w_c = w_c1 * w_c2``. Gen is right
on every input, Mem is right on training inputs and confidently wrong (one
wrong label per input) on test inputs. The parameter norm of a circuit at
weight ``w`` is ``w**(1/k) * pi_c``, and the subweights follow plain gradient
descent on ``L_train = xent + lambda * (||g||^2 + ||m||^2)``.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from grokking_lab.core.config import settings
from grokking_lab.core.exceptions import ConfigConflictError, DomainError
from grokking_lab.models.models import SimState
from grokking_lab.schemas.schemas import SimConfig, SimTraceRow
from grokking_lab.utils.validators import ensure_finite_scalars

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
CSV_COLUMNS = ["step", "l_train", "l_test", "l_wd", "w_g", "w_m", "param_norm"]

PRESETS: Dict[str, SimConfig] = {
    # Gen learned slower but more efficient than Mem
    "a": SimConfig(pi_g=1.0, pi_m=2.0, k=1.2, weight_decay=0.005, q=113, lr=0.01,
                   w_g1_0=0.0, w_g2_0=0.005, w_m1_0=0.0, w_m2_0=1.0),
    # Gen less efficient than Mem
    "b": SimConfig(pi_g=4.0, pi_m=2.0, k=1.2, weight_decay=0.005, q=113, lr=0.01,
                   w_g1_0=0.0, w_g2_0=0.005, w_m1_0=0.0, w_m2_0=1.0),
    # Gen and Mem learned at equal speeds
    "c": SimConfig(pi_g=1.0, pi_m=2.0, k=1.2, weight_decay=0.005, q=113, lr=0.01,
                   w_g1_0=0.0, w_g2_0=1.0, w_m1_0=0.0, w_m2_0=1.0),
}


def _logaddexp(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _log_or_neg_inf(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def initial_state(cfg: SimConfig) -> SimState:
    return SimState(w_g1=cfg.w_g1_0, w_g2=cfg.w_g2_0, w_m1=cfg.w_m1_0, w_m2=cfg.w_m2_0, step=0)


def xent_on_train(w_g: float, w_m: float, q: int) -> float:
    """-log softmax of the correct label when Gen and Mem both vote for it"""
    total = w_g + w_m
    return _logaddexp(math.log(q - 1), total) - total


def xent_on_test(w_g: float, w_m: float, q: int) -> float:
    """-log softmax of the correct label when Mem votes for one wrong label"""
    log_rest = _logaddexp(_log_or_neg_inf(q - 2), w_m)
    return _logaddexp(log_rest, w_g) - w_g


def _powered(w: float, k: float, clamp: bool, name: str) -> float:
    if w < 0:
        if not clamp:
            raise DomainError(f"weight product {name}={w!r} is negative; (w)^(2/k) is undefined")
        w = 0.0
    return w ** (2.0 / k)


def sim_wd_loss(state: SimState, cfg: SimConfig, clamp: bool = False) -> float:
    """Unscaled weight-decay loss ``||g||^2 + ||m||^2`` (lambda applied by callers)"""
    g = _powered(state.w_g, cfg.k, clamp, "w_g") * cfg.pi_g ** 2
    m = _powered(state.w_m, cfg.k, clamp, "w_m") * cfg.pi_m ** 2
    return g + m


def sim_train_loss(state: SimState, cfg: SimConfig, clamp: bool = False) -> float:
    return xent_on_train(state.w_g, state.w_m, cfg.q) + cfg.weight_decay * sim_wd_loss(state, cfg, clamp)


def sim_test_loss(state: SimState, cfg: SimConfig, clamp: bool = False) -> float:
    return xent_on_test(state.w_g, state.w_m, cfg.q) + cfg.weight_decay * sim_wd_loss(state, cfg, clamp)


def _wd_slope(w: float, pi: float, k: float) -> float:
    # d/dw of pi^2 * max(w, 0)^(2/k)
    if w <= 0:
        return 0.0
    return pi ** 2 * (2.0 / k) * w ** (2.0 / k - 1.0)


def train_loss_gradient(state: SimState, cfg: SimConfig) -> Tuple[float, float, float, float]:
    """Analytic partials of sim_train_loss w.r.t. (w_g1, w_g2, w_m1, w_m2)"""
    w_g, w_m = state.w_g, state.w_m
    log_rest = math.log(cfg.q - 1)
    # 1 - softmax probability of the correct label
    residual = math.exp(log_rest - _logaddexp(log_rest, w_g + w_m))

    d_wg = -residual + cfg.weight_decay * _wd_slope(w_g, cfg.pi_g, cfg.k)
    d_wm = -residual + cfg.weight_decay * _wd_slope(w_m, cfg.pi_m, cfg.k)

    partials = (d_wg * state.w_g2, d_wg * state.w_g1, d_wm * state.w_m2, d_wm * state.w_m1)
    ensure_finite_scalars(zip(("dL/dw_g1", "dL/dw_g2", "dL/dw_m1", "dL/dw_m2"), partials))
    return partials


def sim_grad_step(state: SimState, cfg: SimConfig) -> SimState:
    g1, g2, m1, m2 = train_loss_gradient(state, cfg)
    return SimState(
        w_g1=state.w_g1 - cfg.lr * g1,
        w_g2=state.w_g2 - cfg.lr * g2,
        w_m1=state.w_m1 - cfg.lr * m1,
        w_m2=state.w_m2 - cfg.lr * m2,
        step=state.step + 1,
    )


@dataclass
class SimTrace:
    rows: List[SimTraceRow] = field(default_factory=list)
    weight_decay: float = 0.0
    diverged: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=CSV_COLUMNS)

    def to_csv(self, path: Optional[Union[str, Path]] = None) -> str:
        buffer = io.StringIO()
        self.to_frame().to_csv(buffer, index=False, float_format="%.10g")
        text = buffer.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.rows], dtype=float)

    @property
    def steps(self) -> np.ndarray:
        return self.column("step").astype(int)

    @property
    def train_xent(self) -> np.ndarray:
        return self.column("l_train") - self.weight_decay * self.column("l_wd")

    @property
    def test_xent(self) -> np.ndarray:
        return self.column("l_test") - self.weight_decay * self.column("l_wd")


def _record(state: SimState, cfg: SimConfig) -> SimTraceRow:
    l_wd = sim_wd_loss(state, cfg, clamp=True)
    return SimTraceRow(
        step=state.step,
        l_train=xent_on_train(state.w_g, state.w_m, cfg.q) + cfg.weight_decay * l_wd,
        l_test=xent_on_test(state.w_g, state.w_m, cfg.q) + cfg.weight_decay * l_wd,
        l_wd=l_wd,
        w_g=state.w_g,
        w_m=state.w_m,
        param_norm=math.sqrt(l_wd),
    )


def simulate(cfg: SimConfig, record_every: Optional[int] = None) -> SimTrace:
    """Run ``cfg.steps`` gradient steps from the configured initial subweights.

    A row is recorded at step 0, every ``record_every`` steps and at the last
    step. The run stops early and sets ``diverged`` once a subweight leaves
    ``[-1e12, 1e12]``.
    """
    if record_every is None:
        record_every = settings.SIM_RECORD_EVERY
    if record_every < 1:
        raise ValueError("record_every must be >= 1")

    trace = SimTrace(weight_decay=cfg.weight_decay)
    state = initial_state(cfg)
    trace.rows.append(_record(state, cfg))
    warned_negative = False

    for _ in range(cfg.steps):
        state = sim_grad_step(state, cfg)
        if any(abs(w) > DIVERGENCE_LIMIT for w in state.as_tuple()):
            logger.warning(f"Simulation diverged at step {state.step}; trace truncated")
            trace.diverged = True
            trace.rows.append(_record(state, cfg))
            return trace
        if not warned_negative and (state.w_g < 0 or state.w_m < 0):
            logger.warning(f"Weight product went negative at step {state.step}; clamping at 0 in the norm term")
            warned_negative = True
        if state.step % record_every == 0 or state.step == cfg.steps:
            trace.rows.append(_record(state, cfg))

    return trace


def resolve_sim_config(preset: Optional[str], overrides: Dict[str, float]) -> SimConfig:
    """Build a SimConfig from a named preset or from explicit overrides.

    Overriding a field that the preset fixes is a conflict; ``steps`` is not
    part of any preset and may always be given.
    """
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if preset is None:
        return SimConfig(**overrides)
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    conflicting = sorted(set(overrides) - {"steps"})
    if conflicting:
        raise ConfigConflictError(f"preset {preset!r} fixes {', '.join(conflicting)}; drop the preset or the override")
    return PRESETS[preset].model_copy(update=overrides)
