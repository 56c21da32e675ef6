import math

import numpy as np
import pytest

from grokking_lab.core.exceptions import NonFiniteError
from grokking_lab.models.models import Batch
from grokking_lab.services.modular_dataset import grid_arrays
from grokking_lab.services.transformer import (
    accuracy_from_logits,
    evaluate,
    forward,
    init_params,
    loss_and_grads,
    param_norm,
    param_shapes,
    predict_accuracy,
    zero_params,
)


def grid_batch(task, rows=None) -> Batch:
    tokens, labels = grid_arrays(task)
    if rows is not None:
        tokens, labels = tokens[rows], labels[rows]
    return Batch(tokens=tokens, labels=labels)


class TestInit:
    def test_shapes_and_dtype(self, tiny_model):
        params = init_params(tiny_model)
        for name, tensor in params.items():
            assert tensor.shape == param_shapes(tiny_model)[name]
            assert tensor.dtype == np.float64

    def test_seeded(self, tiny_model):
        a = init_params(tiny_model)
        b = init_params(tiny_model)
        c = init_params(tiny_model.model_copy(update={"seed": 4}))
        assert all(np.array_equal(a.tensors()[n], b.tensors()[n]) for n in a.tensor_names())
        assert not np.array_equal(a.W_E, c.W_E)

    def test_scale(self, small_model):
        params = init_params(small_model.model_copy(update={"d_model": 32, "init_scale": 2.0}))
        assert params.W_in.std() == pytest.approx(2.0 / math.sqrt(32), rel=0.1)

    def test_default_dtype_is_float32(self, small_model):
        assert init_params(small_model).W_U.dtype == np.float32


class TestForward:
    def test_zero_params_give_uniform_logits(self, tiny_task, tiny_model):
        batch = grid_batch(tiny_task)
        params = zero_params(tiny_model)
        logits = forward(params, batch)
        assert logits.shape == (49, 7)
        assert np.all(logits == 0)
        loss, _ = loss_and_grads(params, batch)
        assert loss == pytest.approx(math.log(7))

    def test_attention_is_causal(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        batch = grid_batch(tiny_task, rows=np.arange(5))
        _, cache = forward(params, batch, return_cache=True)
        upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
        assert np.all(cache.pattern[..., upper] == 0)
        assert np.allclose(cache.pattern.sum(axis=-1), 1.0)

    def test_later_tokens_do_not_reach_earlier_positions(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        tokens = grid_batch(tiny_task, rows=np.arange(3)).tokens
        changed = tokens.copy()
        changed[:, 2] = (changed[:, 2] + 1) % 7
        _, before = forward(params, tokens, return_cache=True)
        _, after = forward(params, changed, return_cache=True)
        assert np.allclose(before.attn_out[:, :2], after.attn_out[:, :2])
        assert not np.allclose(before.attn_out[:, 2:], after.attn_out[:, 2:])

    def test_batch_permutation(self, tiny_task, tiny_model, rng):
        params = init_params(tiny_model)
        batch = grid_batch(tiny_task)
        order = rng.permutation(len(batch))
        logits = forward(params, batch)
        assert np.allclose(forward(params, batch.take(order)), logits[order])
        assert loss_and_grads(params, batch.take(order))[0] == pytest.approx(loss_and_grads(params, batch)[0])

    def test_non_finite_weights_raise(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        params.W_E[0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            forward(params, grid_batch(tiny_task))


class TestGradients:
    def test_every_entry_matches_central_differences(self, tiny_task, tiny_model, rng):
        params = init_params(tiny_model)
        batch = grid_batch(tiny_task, rows=rng.choice(49, size=12, replace=False))
        _, grads = loss_and_grads(params, batch)
        h = 1e-4
        for name, tensor in params.items():
            for index in np.ndindex(tensor.shape):
                original = tensor[index]
                tensor[index] = original + h
                up, _ = loss_and_grads(params, batch)
                tensor[index] = original - h
                down, _ = loss_and_grads(params, batch)
                tensor[index] = original
                numeric = (up - down) / (2 * h)
                analytic = grads.tensors()[name][index]
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7, (name, index)

    def test_unused_vocab_rows_get_zero_gradient(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        # only x, y in {0, 1}
        rows = np.array([0, 1, 7, 8])
        _, grads = loss_and_grads(params, grid_batch(tiny_task, rows=rows))
        assert np.all(grads.W_E[2:7] == 0)
        assert np.any(grads.W_E[7] != 0) and np.any(grads.W_E[8] != 0)

    def test_gradient_dtype_follows_params(self, small_model, small_task):
        params = init_params(small_model)
        _, grads = loss_and_grads(params, grid_batch(small_task, rows=np.arange(10)))
        assert all(g.dtype == np.float32 for _, g in grads.items())


class TestMetrics:
    def test_param_norm(self, tiny_model):
        params = zero_params(tiny_model)
        assert param_norm(params) == 0.0
        params.W_E[0, 0] = 3.0
        params.W_U[1, 2] = 4.0
        assert param_norm(params) == pytest.approx(5.0)

    def test_param_norm_of_ones(self, tiny_model):
        params = zero_params(tiny_model).map(np.ones_like)
        assert param_norm(params) == pytest.approx(math.sqrt(params.n_scalars), rel=1e-12)

    def test_squared_norms_add_across_tensors(self, tiny_model):
        params = init_params(tiny_model)
        per_tensor = sum(float(np.sum(t ** 2)) for _, t in params.items())
        assert param_norm(params) ** 2 == pytest.approx(per_tensor, rel=1e-12)

    def test_zero_params_score_one_in_p(self, tiny_task, tiny_model):
        # all logits tie, so every prediction is class 0
        assert predict_accuracy(zero_params(tiny_model), grid_batch(tiny_task)) == pytest.approx(1 / 7)

    def test_negated_perfect_logits_match_brute_force(self, tiny_task):
        _, labels = grid_arrays(tiny_task)
        logits = -5.0 * np.eye(7)[labels]
        expected = 0
        for row, label in zip(logits, labels):
            best = 0
            for c in range(1, 7):
                if row[c] > row[best]:
                    best = c
            expected += int(best == label)
        assert accuracy_from_logits(logits, labels) == expected / len(labels)

    def test_ties_go_to_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
        assert accuracy_from_logits(logits, np.array([0, 2])) == 0.5

    def test_evaluate_is_chunk_independent(self, tiny_task, tiny_model):
        params = init_params(tiny_model)
        batch = grid_batch(tiny_task)
        whole = evaluate(params, batch)
        chunked = evaluate(params, batch, chunk=5)
        assert chunked[0] == pytest.approx(whole[0])
        assert chunked[1] == whole[1]

    def test_evaluate_rejects_empty_batch(self, tiny_model):
        empty = Batch(tokens=np.zeros((0, 4), dtype=np.int64), labels=np.zeros(0, dtype=np.int64))
        with pytest.raises(ValueError):
            evaluate(zero_params(tiny_model), empty)
