import logging
from typing import Dict, Tuple, Union

import numpy as np

from grokking_lab.models.models import ModelParams, OptimizerState
from grokking_lab.schemas.schemas import OptimizerConfig
from grokking_lab.utils.validators import ensure_finite_array

logger = logging.getLogger(__name__)

Tensors = Union[ModelParams, Dict[str, np.ndarray]]


def _as_dict(tensors: Tensors) -> Dict[str, np.ndarray]:
    return tensors.tensors() if isinstance(tensors, ModelParams) else dict(tensors)


def init_state(params: Tensors) -> OptimizerState:
    zeros = {name: np.zeros_like(t) for name, t in _as_dict(params).items()}
    return OptimizerState(m=zeros, v={name: np.zeros_like(t) for name, t in zeros.items()}, t=0)


def adamw_step(
    params: Tensors, grads: Tensors, state: OptimizerState, cfg: OptimizerConfig
) -> Tuple[Tensors, OptimizerState]:
    """One AdamW update with bias correction and decoupled weight decay.

    m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, t <- t+1,
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Inputs are not modified; new parameters and state are returned.
    """
    theta = _as_dict(params)
    g = _as_dict(grads)
    if set(g) != set(theta):
        raise ValueError(f"gradient tensors {sorted(g)} do not match parameters {sorted(theta)}")
    for name, grad in g.items():
        ensure_finite_array(f"gradient of {name}", grad)

    t = state.t + 1
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t
    new_theta, new_m, new_v = {}, {}, {}
    for name, value in theta.items():
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g[name]
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * np.square(g[name])
        step = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps) + cfg.weight_decay * value
        new_theta[name] = (value - cfg.lr * step).astype(value.dtype, copy=False)
        new_m[name] = m.astype(value.dtype, copy=False)
        new_v[name] = v.astype(value.dtype, copy=False)

    new_state = OptimizerState(m=new_m, v=new_v, t=t)
    if isinstance(params, ModelParams):
        return ModelParams(**new_theta), new_state
    return new_theta, new_state


class AdamW:
    """Owns the optimizer state of one training run."""

    def __init__(self, params: Tensors, cfg: OptimizerConfig, state: OptimizerState = None):
        self.cfg = cfg
        self.state = state if state is not None else init_state(params)

    def step(self, params: Tensors, grads: Tensors) -> Tensors:
        params, self.state = adamw_step(params, grads, self.state, self.cfg)
        return params

    @property
    def t(self) -> int:
        return self.state.t
