import numpy as np
import pytest

from grokking_lab.core.exceptions import NonFiniteError
from grokking_lab.schemas.schemas import OptimizerConfig
from grokking_lab.services.optimizer import AdamW, adamw_step, init_state
from grokking_lab.services.transformer import init_params


def reference_adamw(theta, grads, cfg):
    """Plain-loop AdamW over a list of gradients"""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        theta = theta - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)
    return theta


class TestAdamW:
    def test_matches_reference_recurrence(self, rng):
        cfg = OptimizerConfig(lr=1e-2, weight_decay=0.3)
        theta = {"w": rng.normal(size=(5, 3))}
        target = rng.normal(size=(5, 3))
        state = init_state(theta)
        current = theta
        grads = []
        # quadratic 0.5 * ||w - target||^2
        for _ in range(100):
            g = current["w"] - target
            grads.append(g)
            current, state = adamw_step(current, {"w": g}, state, cfg)
        assert state.t == 100
        assert np.allclose(current["w"], reference_adamw(theta["w"], grads, cfg), rtol=0, atol=1e-10)

    def test_zero_gradient_is_pure_decay(self):
        cfg = OptimizerConfig(lr=1e-3, weight_decay=1.0)
        theta = {"w": np.array([2.0, -4.0])}
        new, _ = adamw_step(theta, {"w": np.zeros(2)}, init_state(theta), cfg)
        assert np.allclose(new["w"], theta["w"] * (1 - 1e-3))

    def test_decay_is_decoupled_from_gradient_scale(self):
        theta = {"w": np.array([1.0, 3.0])}
        g = {"w": np.array([0.5, -0.2])}
        without, _ = adamw_step(theta, g, init_state(theta), OptimizerConfig(lr=1e-2, weight_decay=0.0))
        with_decay, _ = adamw_step(theta, g, init_state(theta), OptimizerConfig(lr=1e-2, weight_decay=0.5))
        assert np.allclose(without["w"] - with_decay["w"], 1e-2 * 0.5 * theta["w"], rtol=0, atol=1e-12)

    def test_first_step_moves_by_lr(self):
        theta = {"w": np.zeros(3)}
        g = {"w": np.array([1e-3, -5.0, 2.0])}
        new, _ = adamw_step(theta, g, init_state(theta), OptimizerConfig(lr=0.1, weight_decay=0.0, eps=1e-12))
        assert np.allclose(new["w"], [-0.1, 0.1, -0.1])

    def test_inputs_untouched(self):
        theta = {"w": np.ones(2)}
        state = init_state(theta)
        adamw_step(theta, {"w": np.ones(2)}, state, OptimizerConfig())
        assert np.all(theta["w"] == 1) and state.t == 0 and np.all(state.m["w"] == 0)

    def test_non_finite_gradient(self):
        theta = {"w": np.ones(2)}
        with pytest.raises(NonFiniteError):
            adamw_step(theta, {"w": np.array([1.0, np.inf])}, init_state(theta), OptimizerConfig())

    def test_mismatched_tensors(self):
        theta = {"w": np.ones(2)}
        with pytest.raises(ValueError):
            adamw_step(theta, {"u": np.ones(2)}, init_state(theta), OptimizerConfig())

    def test_model_params_round_trip_types(self, small_model):
        params = init_params(small_model)
        optimizer = AdamW(params, OptimizerConfig())
        updated = optimizer.step(params, params.zeros_like())
        assert type(updated) is type(params)
        assert optimizer.t == 1
        assert all(t.dtype == np.float32 for _, t in updated.items())
