"""One-layer decoder-only transformer with a hand-written backward pass.

Pipeline: token + positional embedding, causal multi-head attention with a
residual add, then at the final ("=") position only a ReLU MLP with a
residual add and an unembedding to the P answer classes. There is no layer
norm and there are no biases.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from grokking_lab.models.models import Batch, ModelParams
from grokking_lab.schemas.schemas import ModelConfig
from grokking_lab.utils.validators import ensure_finite_array

logger = logging.getLogger(__name__)

TokensLike = Union[Batch, np.ndarray]


def init_params(cfg: ModelConfig) -> ModelParams:
    """Every entry i.i.d. normal with std ``init_scale / sqrt(d_model)``, drawn in tensor order"""
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    std = cfg.init_scale / math.sqrt(cfg.d_model)
    shapes = param_shapes(cfg)
    return ModelParams(**{
        name: (rng.standard_normal(shapes[name]) * std).astype(cfg.dtype)
        for name in ModelParams.tensor_names()
    })


def param_shapes(cfg: ModelConfig) -> dict:
    heads = (cfg.n_heads, cfg.d_model, cfg.d_head)
    return {
        "W_E": (cfg.vocab_size, cfg.d_model),
        "W_pos": (cfg.seq_len, cfg.d_model),
        "W_Q": heads,
        "W_K": heads,
        "W_V": heads,
        "W_O": (cfg.n_heads * cfg.d_head, cfg.d_model),
        "W_in": (cfg.d_model, cfg.d_mlp),
        "W_out": (cfg.d_mlp, cfg.d_model),
        "W_U": (cfg.d_model, cfg.n_answer_classes),
    }


def zero_params(cfg: ModelConfig) -> ModelParams:
    shapes = param_shapes(cfg)
    return ModelParams(**{name: np.zeros(shapes[name], dtype=cfg.dtype) for name in ModelParams.tensor_names()})


def _stacked(w: np.ndarray) -> np.ndarray:
    # (n_heads, d_model, d_head) -> (d_model, n_heads * d_head)
    n_heads, d_model, d_head = w.shape
    return w.transpose(1, 0, 2).reshape(d_model, n_heads * d_head)


def _unstacked(w: np.ndarray, n_heads: int) -> np.ndarray:
    d_model, width = w.shape
    return w.reshape(d_model, n_heads, width // n_heads).transpose(1, 0, 2)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (batch, seq, n_heads * d_head) -> (batch, n_heads, seq, d_head)
    batch, seq, width = x.shape
    return x.reshape(batch, seq, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    batch, n_heads, seq, d_head = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, seq, n_heads * d_head)


@dataclass
class ForwardCache:
    tokens: np.ndarray
    resid_pre: np.ndarray  # embeddings, (batch, seq, d_model)
    q: np.ndarray  # (batch, n_heads, seq, d_head)
    k: np.ndarray
    v: np.ndarray
    pattern: np.ndarray  # (batch, n_heads, seq, seq)
    z: np.ndarray  # merged head outputs, (batch, seq, n_heads * d_head)
    attn_out: np.ndarray  # (batch, seq, d_model)
    resid_mid: np.ndarray  # final position only, (batch, d_model)
    mlp_pre: np.ndarray
    mlp_post: np.ndarray
    resid_post: np.ndarray
    logits: np.ndarray


def _tokens_of(batch: TokensLike) -> np.ndarray:
    return batch.tokens if isinstance(batch, Batch) else np.asarray(batch)


def forward(params: ModelParams, batch: TokensLike, return_cache: bool = False):
    """Answer logits ``(batch, n_answer_classes)`` read at the final position"""
    tokens = _tokens_of(batch)
    n_heads, _, d_head = params.W_Q.shape

    resid_pre = params.W_E[tokens] + params.W_pos[None, : tokens.shape[1]]
    ensure_finite_array("embeddings", resid_pre)

    q = _split_heads(resid_pre @ _stacked(params.W_Q), n_heads)
    k = _split_heads(resid_pre @ _stacked(params.W_K), n_heads)
    v = _split_heads(resid_pre @ _stacked(params.W_V), n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_head)
    seq = tokens.shape[1]
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    pattern = softmax(scores, axis=-1)
    z = _merge_heads(pattern @ v)
    attn_out = z @ params.W_O
    ensure_finite_array("attention", attn_out)

    resid_mid = resid_pre[:, -1] + attn_out[:, -1]
    mlp_pre = resid_mid @ params.W_in
    mlp_post = np.maximum(mlp_pre, 0)
    resid_post = resid_mid + mlp_post @ params.W_out
    ensure_finite_array("mlp", resid_post)

    logits = resid_post @ params.W_U
    ensure_finite_array("unembed", logits)

    if not return_cache:
        return logits
    cache = ForwardCache(
        tokens=tokens, resid_pre=resid_pre, q=q, k=k, v=v, pattern=pattern, z=z, attn_out=attn_out,
        resid_mid=resid_mid, mlp_pre=mlp_pre, mlp_post=mlp_post, resid_post=resid_post, logits=logits,
    )
    return logits, cache


def xent_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example softmax cross-entropy of ``labels``"""
    return -log_softmax(logits.astype(np.float64), axis=-1)[np.arange(labels.shape[0]), labels]


def loss_and_grads(params: ModelParams, batch: Batch) -> Tuple[float, ModelParams]:
    """Mean cross-entropy over ``batch`` and its exact gradient.

    Weight decay is not part of this loss; AdamW applies it decoupled.
    """
    logits, cache = forward(params, batch, return_cache=True)
    labels = batch.labels
    n = labels.shape[0]
    n_heads, _, d_head = params.W_Q.shape
    loss = float(xent_from_logits(logits, labels).mean())

    d_logits = softmax(logits, axis=-1)
    d_logits[np.arange(n), labels] -= 1
    d_logits /= n

    # unembed and MLP (final position only)
    d_W_U = cache.resid_post.T @ d_logits
    d_resid_post = d_logits @ params.W_U.T
    d_W_out = cache.mlp_post.T @ d_resid_post
    d_mlp_pre = (d_resid_post @ params.W_out.T) * (cache.mlp_pre > 0)
    d_W_in = cache.resid_mid.T @ d_mlp_pre
    d_resid_mid = d_resid_post + d_mlp_pre @ params.W_in.T

    # attention: only the final query position receives gradient
    d_attn_out = np.zeros_like(cache.attn_out)
    d_attn_out[:, -1] = d_resid_mid
    d_W_O = cache.z[:, -1].T @ d_resid_mid
    d_z = _split_heads(d_attn_out @ params.W_O.T, n_heads)
    d_pattern = d_z @ cache.v.transpose(0, 1, 3, 2)
    d_v = cache.pattern.transpose(0, 1, 3, 2) @ d_z
    d_scores = cache.pattern * (d_pattern - np.sum(d_pattern * cache.pattern, axis=-1, keepdims=True))
    d_scores /= math.sqrt(d_head)
    d_q = d_scores @ cache.k
    d_k = d_scores.transpose(0, 1, 3, 2) @ cache.q

    flat_in = cache.resid_pre.reshape(-1, cache.resid_pre.shape[-1])
    d_resid_pre = d_attn_out.copy()
    head_grads = {}
    for name, d_heads in (("W_Q", d_q), ("W_K", d_k), ("W_V", d_v)):
        d_flat = _merge_heads(d_heads)
        head_grads[name] = _unstacked(flat_in.T @ d_flat.reshape(-1, d_flat.shape[-1]), n_heads)
        d_resid_pre += d_flat @ _stacked(getattr(params, name)).T

    d_W_pos = np.zeros_like(params.W_pos)
    d_W_pos[: cache.tokens.shape[1]] = d_resid_pre.sum(axis=0)
    d_W_E = np.zeros_like(params.W_E)
    np.add.at(d_W_E, cache.tokens, d_resid_pre)

    grads = ModelParams(
        W_E=d_W_E, W_pos=d_W_pos, W_Q=head_grads["W_Q"], W_K=head_grads["W_K"], W_V=head_grads["W_V"],
        W_O=d_W_O, W_in=d_W_in, W_out=d_W_out, W_U=d_W_U,
    )
    grads = grads.map(lambda g: g.astype(params.W_E.dtype, copy=False))
    for name, g in grads.items():
        ensure_finite_array(f"gradient of {name}", g)
    return loss, grads


def param_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(np.square(t, dtype=np.float64))) for _, t in params.items()))


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class index"""
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(params: ModelParams, batch: Batch, chunk: Optional[int] = None) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy, forwarding ``chunk`` rows at a time"""
    if len(batch) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    chunk = chunk or len(batch)
    total_xent = 0.0
    correct = 0
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        logits = forward(params, part)
        total_xent += float(xent_from_logits(logits, part.labels).sum())
        correct += int(np.sum(np.argmax(logits, axis=-1) == part.labels))
    return total_xent / len(batch), correct / len(batch)


def predict_accuracy(params: ModelParams, batch: Batch, chunk: Optional[int] = None) -> float:
    return evaluate(params, batch, chunk)[1]
